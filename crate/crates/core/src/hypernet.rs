//! HyperNetwork over the intensive spaces. Every convolution kernel inside a
//! cell is produced in the forward pass by a GeneratingBlock fed with that
//! slot's probability under the cell's own architecture encoding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{softmax_lane, Graph, Var};
use crate::intensive::{mix_node, IntensiveSpace};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::{normal_vec, uniform_vec};
use crate::search_space::{apply_op, BackboneSpec, CellType, OperationKind, Scaffold};
use crate::tensor::{Scalar, Tensor};

/// Width of the hidden layer of every GeneratingBlock.
pub const HIDDEN: usize = 64;

/// Per-cell architecture encodings, one logit per slot of the cell's space.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    alphas: Vec<Tensor<f32>>,
}

impl ArchParams {
    pub fn new(alphas: Vec<Tensor<f32>>) -> Self {
        Self { alphas }
    }

    pub fn cells(&self) -> usize {
        self.alphas.len()
    }

    pub fn get(&self, l: usize) -> &Tensor<f32> {
        &self.alphas[l]
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.alphas
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.alphas
    }

    /// Softmax probabilities of every cell.
    pub fn probabilities(&self) -> Vec<Vec<f32>> {
        self.alphas.iter().map(|a| encode_cell_probabilities(a.data())).collect()
    }
}

/// Softmax over all slots of one cell.
pub fn encode_cell_probabilities(alpha_l: &[f32]) -> Vec<f32> {
    softmax_lane(alpha_l)
}

/// FC pair generating one kernel stage.
#[derive(Clone, Copy, Debug)]
pub struct StageParams {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub shape: [usize; 4],
}

/// One GeneratingBlock: an FC pair per kernel stage of its ConvBlock.
#[derive(Clone, Debug)]
pub struct GeneratingBlock {
    pub stages: Vec<StageParams>,
}

impl GeneratingBlock {
    fn build(store: &mut ParamStore, name: &str, kind: OperationKind, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let stages = kind
            .kernel_shapes(channels)
            .into_iter()
            .zip(["dw", "pw"])
            .map(|(shape, stage)| {
                let numel: usize = shape.iter().product();
                let conv_fan_in = shape[1] * shape[2] * shape[3];
                let he = 6.0f64.sqrt();
                let fc1_w = store.add(format!("{name}.{stage}.fc1.w"), Tensor::new([HIDDEN, 1], uniform_vec(rng, HIDDEN, he))?);
                let fc1_b = store.add(format!("{name}.{stage}.fc1.b"), Tensor::new([HIDDEN], uniform_vec(rng, HIDDEN, 1.0))?);
                let bound = 1.0 / ((HIDDEN * conv_fan_in) as f64).sqrt();
                let fc2_w = store.add(
                    format!("{name}.{stage}.fc2.w"),
                    Tensor::new([numel, HIDDEN], uniform_vec(rng, numel * HIDDEN, bound))?,
                );
                let fc2_b = store.add(format!("{name}.{stage}.fc2.b"), Tensor::zeros([numel]));
                Ok(StageParams { fc1_w, fc1_b, fc2_w, fc2_b, shape })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stages })
    }
}

/// `FC1(p) → ReLU → FC2 → reshape`. `p` is a `[1, 1]` probability.
pub fn generating_block_forward<T: Scalar>(g: &mut Graph<T>, p: Var, bound: &Bound, stage: &StageParams) -> Result<Var> {
    let numel: usize = stage.shape.iter().product();
    let fc2_rows = g.value(bound.get(stage.fc2_w)).shape()[0];
    if fc2_rows != numel {
        return Err(Error::shape("generating_block", format!("FC2 emits {fc2_rows} values for kernel {:?}", stage.shape)));
    }
    let h = g.fully_connected(p, bound.get(stage.fc1_w), bound.get(stage.fc1_b))?;
    let h = g.relu(h);
    let o = g.fully_connected(h, bound.get(stage.fc2_w), bound.get(stage.fc2_b))?;
    g.reshape(o, &stage.shape)
}

/// Runs a ConvBlock with freshly generated kernels.
pub fn convblock_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    kernels: [Var; 2],
    kind: OperationKind,
    stride: usize,
) -> Result<Var> {
    if !kind.is_conv() {
        return Err(Error::invalid(format!("{kind} is not a ConvBlock")));
    }
    Ok(apply_op(g, kind, x, stride, Some(kernels))?.expect("conv ops produce output"))
}

/// How one cell's slots are weighted in a forward pass.
#[derive(Clone, Debug)]
pub enum CellEncoding {
    /// Architecture logits `[slots]`; probabilities are their softmax.
    Logits(Var),
    /// Fixed probabilities `[1, slots]` with a mask of the slots that take part.
    Frozen { probs: Var, retained: Vec<bool> },
}

#[derive(Clone, Debug)]
pub struct HyperNetwork {
    spec: BackboneSpec,
    spaces: [IntensiveSpace; 2],
    params: ParamStore,
    scaffold: Scaffold,
    /// Per cell, per slot: the slot's GeneratingBlock, `None` for
    /// parameter-free ops.
    blocks: Vec<Vec<Option<GeneratingBlock>>>,
}

impl HyperNetwork {
    pub fn new(spec: BackboneSpec, normal: IntensiveSpace, reduce: IntensiveSpace, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        for (sp, ct) in [(&normal, CellType::Normal), (&reduce, CellType::Reduce)] {
            if sp.cell_type() != ct || sp.nodes() != spec.nodes {
                return Err(Error::invalid(format!(
                    "{ct} cells need a {ct} space over {} nodes, got a {} space over {}",
                    spec.nodes,
                    sp.cell_type(),
                    sp.nodes()
                )));
            }
        }
        let mut params = ParamStore::new();
        let scaffold = Scaffold::build(&spec, &mut params, rng);
        let spaces = [normal, reduce];
        let mut blocks = Vec::with_capacity(spec.cells);
        for layout in spec.layout() {
            let space = &spaces[(layout.cell_type == CellType::Reduce) as usize];
            let mut cell = Vec::with_capacity(space.num_slots());
            for (s, slot) in space.slots().iter().enumerate() {
                cell.push(if slot.op.is_conv() {
                    let name = format!("cell{}.slot{s}.{}_{}.{}", layout.index, slot.source, slot.node, slot.op);
                    Some(GeneratingBlock::build(&mut params, &name, slot.op, layout.c_cell, rng)?)
                } else {
                    None
                });
            }
            blocks.push(cell);
        }
        Ok(Self { spec, spaces, params, scaffold, blocks })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// All of `w_G`: GeneratingBlocks plus stem, preprocessing and classifier.
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn space(&self, cell_type: CellType) -> &IntensiveSpace {
        &self.spaces[(cell_type == CellType::Reduce) as usize]
    }

    pub fn cell_space(&self, l: usize) -> &IntensiveSpace {
        self.space(self.spec.cell_type(l))
    }

    pub fn blocks(&self, l: usize) -> &[Option<GeneratingBlock>] {
        &self.blocks[l]
    }

    pub fn num_generating_blocks(&self) -> usize {
        self.blocks.iter().flatten().flatten().count()
    }

    /// Kernel stages of all ConvBlocks, counted from the spaces.
    pub fn num_conv_stages(&self) -> usize {
        (0..self.spec.cells)
            .flat_map(|l| self.cell_space(l).slots().iter().map(move |s| (l, s)))
            .map(|(l, s)| s.op.kernel_shapes(self.spec.layout()[l].c_cell).len())
            .sum()
    }

    /// Slot count of every cell.
    pub fn slot_counts(&self) -> Vec<usize> {
        (0..self.spec.cells).map(|l| self.cell_space(l).num_slots()).collect()
    }

    pub fn check_arch(&self, arch: &ArchParams) -> Result<()> {
        let want = self.slot_counts();
        let got: Vec<usize> = arch.tensors().iter().map(Tensor::numel).collect();
        if want != got {
            return Err(Error::shape("arch params", format!("slot counts {got:?}, network expects {want:?}")));
        }
        Ok(())
    }

    /// Stem → cells over generated weights → pooled classifier logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: Var, cells: &[CellEncoding]) -> Result<Var> {
        if cells.len() != self.spec.cells {
            return Err(Error::shape("hypernet", format!("{} cell encodings for {} cells", cells.len(), self.spec.cells)));
        }
        let layouts = self.spec.layout();
        let mut probs = Vec::with_capacity(cells.len());
        for (l, enc) in cells.iter().enumerate() {
            let n = self.cell_space(l).num_slots();
            probs.push(match enc {
                CellEncoding::Logits(a) => {
                    if g.value(*a).numel() != n {
                        return Err(Error::shape("hypernet", format!("cell {l}: {} logits for {n} slots", g.value(*a).numel())));
                    }
                    let flat = g.reshape(*a, &[1, n])?;
                    (g.softmax(flat, 1)?, None)
                }
                CellEncoding::Frozen { probs, retained } => {
                    if g.value(*probs).numel() != n || retained.len() != n {
                        return Err(Error::shape("hypernet", format!("cell {l}: frozen encoding does not cover {n} slots")));
                    }
                    (*probs, Some(retained.as_slice()))
                }
            });
        }
        self.scaffold.run(g, bound, &self.spec, x, |g, l, s0, s1| {
            let layout = &layouts[l];
            let space = self.cell_space(l);
            let (p, retained) = probs[l];
            let mut states = vec![s0, s1];
            for j in 2..self.spec.nodes - 1 {
                let node = mix_node(g, &states, space, j, p, retained, |g, s, slot, x| {
                    let stride = layout.stride_from(slot.source);
                    let kernels = match &self.blocks[l][s] {
                        Some(block) => {
                            let ps = g.select(p, s)?;
                            let dw = generating_block_forward(g, ps, bound, &block.stages[0])?;
                            let pw = generating_block_forward(g, ps, bound, &block.stages[1])?;
                            Some([dw, pw])
                        }
                        None => None,
                    };
                    apply_op(g, slot.op, x, stride, kernels)
                })?;
                states.push(node);
            }
            g.concat_channels(&states[2..])
        })
    }

    /// Relaxed logits for plain tensors; no gradients are tracked.
    pub fn logits(&self, x: &Tensor<f32>, arch: &ArchParams) -> Result<Tensor<f32>> {
        self.check_arch(arch)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let cells: Vec<CellEncoding> = arch.tensors().iter().map(|a| CellEncoding::Logits(g.constant(a.clone()))).collect();
        let out = self.forward(&mut g, &bound, xv, &cells)?;
        Ok(g.value(out).clone())
    }

    /// Logits with fixed per-cell probabilities and slot masks.
    pub fn logits_frozen(&self, x: &Tensor<f32>, probs: &[Vec<f32>], retained: &[Vec<bool>]) -> Result<Tensor<f32>> {
        if probs.len() != self.spec.cells || retained.len() != self.spec.cells {
            return Err(Error::shape("hypernet", "frozen encodings must cover every cell"));
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut cells = Vec::with_capacity(probs.len());
        for (p, r) in probs.iter().zip(retained) {
            let t = Tensor::new([1, p.len()], p.clone())?;
            cells.push(CellEncoding::Frozen { probs: g.constant(t), retained: r.clone() });
        }
        let out = self.forward(&mut g, &bound, xv, &cells)?;
        Ok(g.value(out).clone())
    }
}

/// Standard-normal encodings for every cell.
pub fn sample_random_alpha(net: &HyperNetwork, rng: &mut impl Rng) -> ArchParams {
    ArchParams::new(
        net.slot_counts()
            .into_iter()
            .map(|n| Tensor::new([n], normal_vec(rng, n, 1.0)).expect("1-D"))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intensive::select_topk_ops;
    use crate::rng::substream;
    use crate::search_space::alpha_init;

    pub(crate) fn desk_net(seed: u64) -> HyperNetwork {
        let alpha = alpha_init(7, &mut substream(seed, "a")).unwrap();
        let n = select_topk_ops(&alpha, CellType::Normal, 6).unwrap();
        let r = select_topk_ops(&alpha, CellType::Reduce, 6).unwrap();
        HyperNetwork::new(BackboneSpec::desk(), n, r, &mut substream(seed, "w")).unwrap()
    }

    #[test]
    fn encoding_examples() {
        let p = encode_cell_probabilities(&[0.0; 24]);
        assert!(p.iter().all(|v| (v - 1.0 / 24.0).abs() < 1e-7));
        let mut a = vec![0.0f32; 24];
        a[5] = 50.0;
        assert!(encode_cell_probabilities(&a)[5] > 0.999_999);
        let shifted: Vec<f32> = a.iter().map(|v| v + 3.0).collect();
        let (x, y) = (encode_cell_probabilities(&a), encode_cell_probabilities(&shifted));
        assert!(x.iter().zip(&y).all(|(u, v)| (u - v).abs() < 1e-7));
    }

    #[test]
    fn one_block_per_conv_block() {
        let net = desk_net(1);
        let conv_slots: usize = (0..4).map(|l| net.cell_space(l).slots().iter().filter(|s| s.op.is_conv()).count()).sum();
        assert_eq!(net.num_generating_blocks(), conv_slots);
        assert_eq!(net.num_conv_stages(), 2 * conv_slots);
        for l in 0..4 {
            for (block, slot) in net.blocks(l).iter().zip(net.cell_space(l).slots()) {
                assert_eq!(block.is_some(), slot.op.is_conv());
                if let Some(b) = block {
                    for st in &b.stages {
                        let numel: usize = st.shape.iter().product();
                        assert_eq!(net.params().get(st.fc2_w).shape(), &[numel, HIDDEN]);
                        assert_eq!(net.params().get(st.fc1_w).shape(), &[HIDDEN, 1]);
                    }
                }
            }
        }
    }

    #[test]
    fn sep_conv_generated_parameter_counts() {
        let shapes = OperationKind::SepConv3x3.kernel_shapes(8);
        let counts: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
        assert_eq!(counts, vec![72, 64]);
    }

    #[test]
    fn zero_fc2_generates_zero_kernel() {
        let mut store = ParamStore::new();
        let block = GeneratingBlock::build(&mut store, "b", OperationKind::DilConv3x3, 4, &mut substream(0, "z")).unwrap();
        for st in &block.stages {
            store.get_mut(st.fc2_w).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let p = g.constant(Tensor::new([1, 1], vec![0.5]).unwrap());
        let k = generating_block_forward(&mut g, p, &bound, &block.stages[0]).unwrap();
        assert_eq!(g.value(k).shape(), &[4, 1, 3, 3]);
        assert!(g.value(k).data().iter().all(|&v| v == 0.0));
        let again = generating_block_forward(&mut g, p, &bound, &block.stages[1]).unwrap();
        assert!(g.value(again).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_is_pure() {
        let mut store = ParamStore::new();
        let block = GeneratingBlock::build(&mut store, "b", OperationKind::SepConv5x5, 4, &mut substream(0, "p")).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let p = g.constant(Tensor::new([1, 1], vec![0.5]).unwrap());
        let a = generating_block_forward(&mut g, p, &bound, &block.stages[0]).unwrap();
        let b = generating_block_forward(&mut g, p, &bound, &block.stages[0]).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn forward_shape_purity_and_alpha_dependence() {
        let net = desk_net(2);
        let x = Tensor::new([2, 3, 8, 8], normal_vec(&mut substream(2, "x"), 384, 1.0)).unwrap();
        let arch = sample_random_alpha(&net, &mut substream(2, "alpha"));
        let a = net.logits(&x, &arch).unwrap();
        assert_eq!(a.shape(), &[2, 4]);
        assert_eq!(a, net.logits(&x, &arch).unwrap());
        let mut other = arch.clone();
        for t in other.tensors_mut() {
            t.data_mut()[0] += 50.0;
        }
        assert_ne!(a, net.logits(&x, &other).unwrap());
        let short = ArchParams::new(arch.tensors()[..3].to_vec());
        assert!(net.logits(&x, &short).is_err());
    }

    #[test]
    fn full_mask_frozen_equals_relaxed_bitwise() {
        let net = desk_net(3);
        let x = Tensor::new([2, 3, 8, 8], normal_vec(&mut substream(3, "x"), 384, 1.0)).unwrap();
        let arch = sample_random_alpha(&net, &mut substream(3, "alpha"));
        let masks: Vec<Vec<bool>> = net.slot_counts().iter().map(|&n| vec![true; n]).collect();
        let relaxed = net.logits(&x, &arch).unwrap();
        let frozen = net.logits_frozen(&x, &arch.probabilities(), &masks).unwrap();
        assert_eq!(relaxed, frozen);
    }

    #[test]
    fn random_alpha_lengths_and_seeding() {
        let net = desk_net(4);
        let a = sample_random_alpha(&net, &mut substream(4, "s"));
        let b = sample_random_alpha(&net, &mut substream(4, "s"));
        assert_eq!(a, b);
        assert!(net.check_arch(&a).is_ok());
        assert_eq!(a.tensors().iter().map(Tensor::numel).collect::<Vec<_>>(), vec![24; 4]);
    }

    #[test]
    fn gates_decide_which_leaves_receive_gradients() {
        let net = desk_net(5);
        let x = Tensor::new([2, 3, 8, 8], normal_vec(&mut substream(5, "x"), 384, 1.0)).unwrap();
        let arch = sample_random_alpha(&net, &mut substream(5, "alpha"));
        for (gate_alpha, gate_g) in [(true, false), (true, true), (false, true)] {
            let mut g = Graph::new();
            let bound = net.params().bind(&mut g, gate_g);
            let xv = g.constant(x.clone());
            let leaves: Vec<Var> = arch.tensors().iter().map(|a| g.leaf(a.clone().with_requires_grad(gate_alpha))).collect();
            let cells: Vec<_> = leaves.iter().map(|&a| CellEncoding::Logits(a)).collect();
            let logits = net.forward(&mut g, &bound, xv, &cells).unwrap();
            let loss = g.cross_entropy(logits, &[0, 1]).unwrap();
            let grads = g.backward(loss).unwrap();
            assert_eq!(leaves.iter().all(|&a| grads.get(a).is_some()), gate_alpha);
            assert_eq!(bound.vars().iter().any(|&v| grads.get(v).is_some()), gate_g);
        }
    }
}
