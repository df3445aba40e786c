//! The original cell search space: eight candidate operations on every edge
//! of a cell DAG, mixed by a per-edge softmax, stacked into an L-cell
//! backbone with reduction cells at one and two thirds of the depth.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, PoolKind, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{normal_vec, uniform_vec};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperationKind {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    AvgPool3x3,
    MaxPool3x3,
    Identity,
    Zero,
}

pub const NUM_OPS: usize = 8;

impl OperationKind {
    pub const ALL: [OperationKind; NUM_OPS] = [
        OperationKind::SepConv3x3,
        OperationKind::SepConv5x5,
        OperationKind::DilConv3x3,
        OperationKind::DilConv5x5,
        OperationKind::AvgPool3x3,
        OperationKind::MaxPool3x3,
        OperationKind::Identity,
        OperationKind::Zero,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::SepConv3x3 => "sep_conv_3x3",
            OperationKind::SepConv5x5 => "sep_conv_5x5",
            OperationKind::DilConv3x3 => "dil_conv_3x3",
            OperationKind::DilConv5x5 => "dil_conv_5x5",
            OperationKind::AvgPool3x3 => "avg_pool_3x3",
            OperationKind::MaxPool3x3 => "max_pool_3x3",
            OperationKind::Identity => "identity",
            OperationKind::Zero => "zero",
        }
    }

    /// Whether the op carries convolution kernels.
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            OperationKind::SepConv3x3 | OperationKind::SepConv5x5 | OperationKind::DilConv3x3 | OperationKind::DilConv5x5
        )
    }

    fn conv_geometry(self) -> Option<(usize, usize)> {
        // (kernel, dilation)
        match self {
            OperationKind::SepConv3x3 => Some((3, 1)),
            OperationKind::SepConv5x5 => Some((5, 1)),
            OperationKind::DilConv3x3 => Some((3, 2)),
            OperationKind::DilConv5x5 => Some((5, 2)),
            _ => None,
        }
    }

    /// Kernel shapes of the depthwise and pointwise stages at `channels`.
    pub fn kernel_shapes(self, channels: usize) -> Vec<[usize; 4]> {
        match self.conv_geometry() {
            Some((k, _)) => vec![[channels, 1, k, k], [channels, channels, 1, 1]],
            None => Vec::new(),
        }
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperationKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::format("operation name", format!("unknown operation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellType {
    Normal,
    Reduce,
}

impl CellType {
    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduce => "reduce",
        }
    }
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(CellType::Normal),
            "reduce" => Ok(CellType::Reduce),
            _ => Err(Error::format("cell type", format!("unknown cell type `{s}`"))),
        }
    }
}

/// Cell DAG: inputs 0 and 1, intermediates `2..M-1`, output `M-1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub nodes: usize,
    pub cell_type: CellType,
}

impl CellSpec {
    pub fn new(nodes: usize, cell_type: CellType) -> Result<Self> {
        if nodes < 4 {
            return Err(Error::invalid(format!("a cell needs at least 4 nodes, got {nodes}")));
        }
        Ok(Self { nodes, cell_type })
    }

    pub fn intermediate_nodes(&self) -> std::ops::Range<usize> {
        2..self.nodes - 1
    }

    pub fn num_intermediate(&self) -> usize {
        self.nodes - 3
    }

    /// `(source, target)` for every α-carrying edge, grouped by target.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.intermediate_nodes().flat_map(|j| (0..j).map(move |i| (i, j))).collect()
    }

    pub fn num_edges(&self) -> usize {
        self.intermediate_nodes().sum()
    }

    pub fn edge_index(&self, source: usize, target: usize) -> Option<usize> {
        if !self.intermediate_nodes().contains(&target) || source >= target {
            return None;
        }
        Some((2..target).sum::<usize>() + source)
    }
}

/// Per-edge mixing logits, shared by all cells of a type.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaOriginal {
    nodes: usize,
    /// `[normal, reduce]`, each `[edges, 8]`.
    tensors: Vec<Tensor<f32>>,
}

impl AlphaOriginal {
    pub fn new(nodes: usize, normal: Tensor<f32>, reduce: Tensor<f32>) -> Result<Self> {
        let edges = CellSpec::new(nodes, CellType::Normal)?.num_edges();
        for t in [&normal, &reduce] {
            if t.shape() != [edges, NUM_OPS] {
                return Err(Error::shape("alpha", format!("expected [{edges}, {NUM_OPS}], got {:?}", t.shape())));
            }
        }
        Ok(Self { nodes, tensors: vec![normal, reduce] })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn get(&self, cell_type: CellType) -> &Tensor<f32> {
        &self.tensors[cell_type as usize]
    }

    pub fn get_mut(&mut self, cell_type: CellType) -> &mut Tensor<f32> {
        &mut self.tensors[cell_type as usize]
    }

    /// Logits of one edge.
    pub fn edge(&self, cell_type: CellType, edge: usize) -> &[f32] {
        &self.get(cell_type).data()[edge * NUM_OPS..][..NUM_OPS]
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }
}

/// Small random logits so the initial mixture is nearly uniform.
pub fn alpha_init(nodes: usize, rng: &mut impl Rng) -> Result<AlphaOriginal> {
    let edges = CellSpec::new(nodes, CellType::Normal)?.num_edges();
    let normal = Tensor::new([edges, NUM_OPS], normal_vec(rng, edges * NUM_OPS, 1e-3))?;
    let reduce = Tensor::new([edges, NUM_OPS], normal_vec(rng, edges * NUM_OPS, 1e-3))?;
    AlphaOriginal::new(nodes, normal, reduce)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub cells: usize,
    pub nodes: usize,
    pub channels: usize,
    pub stem_multiplier: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellLayout {
    pub index: usize,
    pub cell_type: CellType,
    pub reduction_prev: bool,
    pub c_prev_prev: usize,
    pub c_prev: usize,
    pub c_cell: usize,
}

impl CellLayout {
    /// Stride of ops on edges leaving `source`.
    pub fn stride_from(&self, source: usize) -> usize {
        if self.cell_type == CellType::Reduce && source < 2 {
            2
        } else {
            1
        }
    }
}

impl BackboneSpec {
    pub fn desk() -> Self {
        Self { cells: 4, nodes: 7, channels: 8, stem_multiplier: 3, in_channels: 3, num_classes: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.channels == 0 || self.stem_multiplier == 0 || self.in_channels == 0 {
            return Err(Error::invalid("backbone counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        CellSpec::new(self.nodes, CellType::Normal)?;
        for cell in self.layout() {
            if cell.reduction_prev && cell.c_cell % 2 != 0 {
                return Err(Error::invalid(format!(
                    "cell {} needs an even channel count for factorized reduction, got {}",
                    cell.index, cell.c_cell
                )));
            }
        }
        Ok(())
    }

    pub fn reduction_positions(&self) -> Vec<usize> {
        let mut p = vec![self.cells / 3, 2 * self.cells / 3];
        p.dedup();
        p
    }

    pub fn cell_type(&self, l: usize) -> CellType {
        if self.reduction_positions().contains(&l) {
            CellType::Reduce
        } else {
            CellType::Normal
        }
    }

    pub fn cell_spec(&self, l: usize) -> CellSpec {
        CellSpec { nodes: self.nodes, cell_type: self.cell_type(l) }
    }

    pub fn multiplier(&self) -> usize {
        self.nodes - 3
    }

    pub fn layout(&self) -> Vec<CellLayout> {
        let stem = self.stem_multiplier * self.channels;
        let (mut c_pp, mut c_p, mut c_cur) = (stem, stem, self.channels);
        let mut reduction_prev = false;
        let mut out = Vec::with_capacity(self.cells);
        for l in 0..self.cells {
            let cell_type = self.cell_type(l);
            if cell_type == CellType::Reduce {
                c_cur *= 2;
            }
            out.push(CellLayout { index: l, cell_type, reduction_prev, c_prev_prev: c_pp, c_prev: c_p, c_cell: c_cur });
            reduction_prev = cell_type == CellType::Reduce;
            c_pp = c_p;
            c_p = c_cur * self.multiplier();
        }
        out
    }

    pub fn final_channels(&self) -> usize {
        self.layout().last().map_or(self.stem_multiplier * self.channels, |c| c.c_cell * self.multiplier())
    }

    /// Rejects inputs whose spatial extent cannot survive the reductions.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = *shape else {
            return Err(Error::shape("network input", format!("expected [N, C, H, W], got {shape:?}")));
        };
        if c != self.in_channels {
            return Err(Error::shape("network input", format!("expected {} channels, got {c}", self.in_channels)));
        }
        let (mut h, mut w) = (h, w);
        for l in self.reduction_positions() {
            if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(
                    "network input",
                    format!("spatial extent {h}x{w} cannot be halved at reduction cell {l}"),
                ));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }
}

/// Resolved kernels for the ops of one edge, indexed by [`OperationKind::index`].
#[derive(Clone, Debug)]
pub struct EdgeOps {
    pub stride: usize,
    pub kernels: [Option<[Var; 2]>; NUM_OPS],
}

/// Applies one candidate op. `None` for the zero op.
pub fn apply_op<T: Scalar>(
    g: &mut Graph<T>,
    kind: OperationKind,
    x: Var,
    stride: usize,
    kernels: Option<[Var; 2]>,
) -> Result<Option<Var>> {
    let out = match kind {
        OperationKind::Zero => return Ok(None),
        OperationKind::Identity if stride == 1 => x,
        OperationKind::Identity => g.subsample(x, 0, stride)?,
        OperationKind::AvgPool3x3 | OperationKind::MaxPool3x3 => {
            let pk = if kind == OperationKind::AvgPool3x3 { PoolKind::Avg } else { PoolKind::Max };
            let p = g.pool2d(x, pk, stride)?;
            g.batch_standardize(p)?
        }
        _ => {
            let (k, dilation) = kind.conv_geometry().expect("conv op");
            let [dw, pw] = kernels.ok_or_else(|| Error::invalid(format!("{kind} requires kernels")))?;
            let channels = g.value(x).shape()[1];
            let r = g.relu(x);
            let spec = ConvSpec::new(stride, dilation * (k - 1) / 2, dilation, channels);
            let d = g.conv2d(r, dw, spec)?;
            let p = g.conv2d(d, pw, ConvSpec::pointwise())?;
            g.batch_standardize(p)?
        }
    };
    Ok(Some(out))
}

/// `Σ_o softmax(α_edge)_o · o(x)` where `weights` holds the softmaxed
/// logits of all edges, `[edges, 8]`, and `row` selects this edge.
pub fn mixed_edge_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    weights: Var,
    row: usize,
    ops: &EdgeOps,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(NUM_OPS);
    for kind in OperationKind::ALL {
        // the zero op contributes exactly nothing to the sum
        if let Some(out) = apply_op(g, kind, x, ops.stride, ops.kernels[kind.index()])? {
            terms.push(g.scale_by(out, weights, row * NUM_OPS + kind.index())?);
        }
    }
    g.add_n(&terms)
}

/// Node recurrence of a cell given its two preprocessed inputs. Returns the
/// channel concatenation of the intermediate nodes.
pub fn cell_dag_forward<T: Scalar>(
    g: &mut Graph<T>,
    s0: Var,
    s1: Var,
    spec: &CellSpec,
    weights: Var,
    edges: &[EdgeOps],
) -> Result<Var> {
    if g.value(s0).shape() != g.value(s1).shape() {
        return Err(Error::shape(
            "cell",
            format!("preprocessed inputs {:?} and {:?} differ", g.value(s0).shape(), g.value(s1).shape()),
        ));
    }
    let mut states = vec![s0, s1];
    for j in spec.intermediate_nodes() {
        let mut terms = Vec::with_capacity(j);
        for (i, &state) in states.iter().enumerate().take(j) {
            let e = spec.edge_index(i, j).expect("edge in range");
            terms.push(mixed_edge_forward(g, state, weights, e, &edges[e])?);
        }
        let node = g.add_n(&terms)?;
        states.push(node);
    }
    g.concat_channels(&states[2..])
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Preprocess {
    Conv(ParamId),
    Factorized(ParamId, ParamId),
}

/// Stem, per-cell input preprocessing and classifier: the ordinary trainable
/// weights around the cells.
#[derive(Clone, Debug)]
pub(crate) struct Scaffold {
    stem: ParamId,
    preprocess: Vec<(Preprocess, ParamId)>,
    classifier: (ParamId, ParamId),
}

fn conv_init(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor<f32> {
    let fan_in = shape[1] * shape[2] * shape[3];
    let n = shape.iter().product();
    Tensor::new(shape, uniform_vec(rng, n, 1.0 / (fan_in as f64).sqrt())).expect("init shape")
}

impl Scaffold {
    pub(crate) fn build(spec: &BackboneSpec, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let stem_c = spec.stem_multiplier * spec.channels;
        let stem = store.add("stem.conv", conv_init(rng, [stem_c, spec.in_channels, 3, 3]));
        let preprocess = spec
            .layout()
            .iter()
            .map(|c| {
                let l = c.index;
                let pre0 = if c.reduction_prev {
                    let half = c.c_cell / 2;
                    Preprocess::Factorized(
                        store.add(format!("cell{l}.pre0.a"), conv_init(rng, [half, c.c_prev_prev, 1, 1])),
                        store.add(format!("cell{l}.pre0.b"), conv_init(rng, [half, c.c_prev_prev, 1, 1])),
                    )
                } else {
                    Preprocess::Conv(store.add(format!("cell{l}.pre0"), conv_init(rng, [c.c_cell, c.c_prev_prev, 1, 1])))
                };
                let pre1 = store.add(format!("cell{l}.pre1"), conv_init(rng, [c.c_cell, c.c_prev, 1, 1]));
                (pre0, pre1)
            })
            .collect();
        let fin = spec.final_channels();
        let bound = 1.0 / (fin as f64).sqrt();
        let w = Tensor::new([spec.num_classes, fin], uniform_vec(rng, spec.num_classes * fin, bound)).expect("shape");
        let b = Tensor::new([spec.num_classes], uniform_vec(rng, spec.num_classes, bound)).expect("shape");
        let classifier = (store.add("classifier.weight", w), store.add("classifier.bias", b));
        Self { stem, preprocess, classifier }
    }

    fn relu_conv_norm<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
        let r = g.relu(x);
        let c = g.conv2d(r, w, ConvSpec::pointwise())?;
        g.batch_standardize(c)
    }

    /// Runs stem → cells → global pool → classifier. `cell` maps
    /// `(cell index, preprocessed s0, preprocessed s1)` to the cell output.
    pub(crate) fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        spec: &BackboneSpec,
        x: Var,
        mut cell: impl FnMut(&mut Graph<T>, usize, Var, Var) -> Result<Var>,
    ) -> Result<Var> {
        spec.check_input(g.value(x).shape())?;
        let stem = g.conv2d(x, bound.get(self.stem), ConvSpec::new(1, 1, 1, 1))?;
        let stem = g.batch_standardize(stem)?;
        let (mut s0, mut s1) = (stem, stem);
        for (l, (pre0, pre1)) in self.preprocess.iter().enumerate() {
            let p0 = match *pre0 {
                Preprocess::Conv(w) => Self::relu_conv_norm(g, s0, bound.get(w))?,
                Preprocess::Factorized(a, b) => {
                    let r = g.relu(s0);
                    let even = g.subsample(r, 0, 2)?;
                    let odd = g.subsample(r, 1, 2)?;
                    let ca = g.conv2d(even, bound.get(a), ConvSpec::pointwise())?;
                    let cb = g.conv2d(odd, bound.get(b), ConvSpec::pointwise())?;
                    let cat = g.concat_channels(&[ca, cb])?;
                    g.batch_standardize(cat)?
                }
            };
            let p1 = Self::relu_conv_norm(g, s1, bound.get(*pre1))?;
            let out = cell(g, l, p0, p1)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = g.global_avg_pool(s1)?;
        g.fully_connected(pooled, bound.get(self.classifier.0), bound.get(self.classifier.1))
    }
}

/// The continuously relaxed original-space network with ordinary weights.
#[derive(Clone, Debug)]
pub struct SuperNet {
    spec: BackboneSpec,
    params: ParamStore,
    scaffold: Scaffold,
    /// Per cell, per edge, per op: depthwise and pointwise kernel ids.
    kernels: Vec<Vec<[Option<[ParamId; 2]>; NUM_OPS]>>,
}

impl SuperNet {
    pub fn new(spec: BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let scaffold = Scaffold::build(&spec, &mut params, rng);
        let mut kernels = Vec::with_capacity(spec.cells);
        for layout in spec.layout() {
            let cs = spec.cell_spec(layout.index);
            let mut edges = Vec::with_capacity(cs.num_edges());
            for (i, j) in cs.edges() {
                let mut ops = [None; NUM_OPS];
                for kind in OperationKind::ALL.into_iter().filter(|k| k.is_conv()) {
                    let shapes = kind.kernel_shapes(layout.c_cell);
                    let base = format!("cell{}.edge{i}_{j}.{kind}", layout.index);
                    let dw = params.add(format!("{base}.dw"), conv_init(rng, shapes[0]));
                    let pw = params.add(format!("{base}.pw"), conv_init(rng, shapes[1]));
                    ops[kind.index()] = Some([dw, pw]);
                }
                edges.push(ops);
            }
            kernels.push(edges);
        }
        Ok(Self { spec, params, scaffold, kernels })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Full forward pass. `alpha_normal` / `alpha_reduce` are `[edges, 8]`
    /// logits; `bound` binds a parameter store with this network's layout.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        alpha_normal: Var,
        alpha_reduce: Var,
    ) -> Result<Var> {
        let w_normal = g.softmax(alpha_normal, 1)?;
        let w_reduce = g.softmax(alpha_reduce, 1)?;
        let layouts = self.spec.layout();
        self.scaffold.run(g, bound, &self.spec, x, |g, l, s0, s1| {
            let layout = &layouts[l];
            let cs = self.spec.cell_spec(l);
            let edges: Vec<EdgeOps> = cs
                .edges()
                .iter()
                .zip(&self.kernels[l])
                .map(|(&(i, _), ops)| EdgeOps {
                    stride: layout.stride_from(i),
                    kernels: ops.map(|k| k.map(|[a, b]| [bound.get(a), bound.get(b)])),
                })
                .collect();
            let weights = if cs.cell_type == CellType::Normal { w_normal } else { w_reduce };
            cell_dag_forward(g, s0, s1, &cs, weights, &edges)
        })
    }

    /// Convenience forward on plain tensors with this network's parameters.
    pub fn logits(&self, x: &Tensor<f32>, alpha: &AlphaOriginal) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let an = g.constant(alpha.get(CellType::Normal).clone());
        let ar = g.constant(alpha.get(CellType::Reduce).clone());
        let out = self.forward(&mut g, &bound, xv, an, ar)?;
        Ok(g.value(out).clone())
    }
}
