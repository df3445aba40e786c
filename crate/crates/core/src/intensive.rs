//! The intensive space: per intermediate node, the `K` most likely non-zero
//! (source, operation) slots of the original space, chosen at the epoch of a
//! supernet run whose space is both stable and accurate.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{softmax_lane, Graph, Var};
use crate::metrics::MetricRow;
use crate::optim::{cosine_lr, Adam, AdamConfig, SgdConfig, SgdMomentum};
use crate::params::clip_grad_norm;
use crate::rng::{streams, substream};
use crate::search_space::{alpha_init, AlphaOriginal, BackboneSpec, CellSpec, CellType, OperationKind, SuperNet};
use crate::tensor::{Scalar, Tensor};

/// One retained (target node, source node, operation) triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub node: usize,
    pub source: usize,
    pub op: OperationKind,
}

/// Slots sorted by `(node, source, op)`, so the slots of one node are contiguous.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntensiveSpace {
    cell_type: CellType,
    nodes: usize,
    k: usize,
    slots: Vec<Slot>,
}

impl IntensiveSpace {
    pub fn new(cell_type: CellType, nodes: usize, k: usize, mut slots: Vec<Slot>) -> Result<Self> {
        let spec = CellSpec::new(nodes, cell_type)?;
        if k == 0 {
            return Err(Error::invalid("K must be positive"));
        }
        slots.sort_unstable();
        if slots.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate slot in intensive space"));
        }
        for s in &slots {
            if !spec.intermediate_nodes().contains(&s.node) || s.source >= s.node {
                return Err(Error::invalid(format!(
                    "slot ({}, {}, {}) is not an edge into an intermediate node",
                    s.node, s.source, s.op
                )));
            }
            if s.op == OperationKind::Zero {
                return Err(Error::invalid(format!("zero op retained at node {}", s.node)));
            }
        }
        for j in spec.intermediate_nodes() {
            let count = slots.iter().filter(|s| s.node == j).count();
            if count != k {
                return Err(Error::invalid(format!("node {j} holds {count} slots, expected K = {k}")));
            }
        }
        Ok(Self { cell_type, nodes, k, slots })
    }

    pub fn cell_type(&self) -> CellType {
        self.cell_type
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_intermediate(&self) -> usize {
        self.nodes - 3
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Index range of node `j`'s slots within [`Self::slots`].
    pub fn node_slots(&self, node: usize) -> std::ops::Range<usize> {
        let start = self.slots.partition_point(|s| s.node < node);
        let end = self.slots.partition_point(|s| s.node <= node);
        start..end
    }

    pub fn slot_index(&self, slot: &Slot) -> Option<usize> {
        self.slots.binary_search(slot).ok()
    }

    fn triples(&self) -> BTreeSet<Slot> {
        self.slots.iter().copied().collect()
    }
}

/// `cell_type node_j source_i op_name` lines, lexicographically sorted.
pub fn spaces_to_text<'a>(spaces: impl IntoIterator<Item = &'a IntensiveSpace>) -> String {
    let mut lines: Vec<String> = spaces
        .into_iter()
        .flat_map(|sp| sp.slots.iter().map(move |s| format!("{} {} {} {}", sp.cell_type, s.node, s.source, s.op)))
        .collect();
    lines.sort();
    let mut out = String::new();
    for l in lines {
        let _ = writeln!(out, "{l}");
    }
    out
}

/// Parses [`spaces_to_text`] output back into one space per cell type present,
/// normal first. `K` is inferred from the slot count of each node.
pub fn spaces_from_text(text: &str, nodes: usize) -> Result<Vec<IntensiveSpace>> {
    let mut by_type: [Vec<Slot>; 2] = [Vec::new(), Vec::new()];
    for (no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |d: &str| Error::format("intensive space", format!("line {}: {d}: `{line}`", no + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        let [ct, node, source, op] = f[..] else { return Err(bad("expected 4 fields")) };
        let ct: CellType = ct.parse().map_err(|_| bad("cell type"))?;
        let slot = Slot {
            node: node.parse().map_err(|_| bad("node index"))?,
            source: source.parse().map_err(|_| bad("source index"))?,
            op: op.parse().map_err(|_| bad("operation"))?,
        };
        by_type[(ct == CellType::Reduce) as usize].push(slot);
    }
    let mut out = Vec::new();
    for (ct, slots) in [CellType::Normal, CellType::Reduce].into_iter().zip(by_type) {
        if slots.is_empty() {
            continue;
        }
        let k = slots.iter().filter(|s| s.node == 2).count();
        out.push(IntensiveSpace::new(ct, nodes, k, slots)?);
    }
    Ok(out)
}

/// Keeps, per intermediate node, the `k` non-zero candidates with the highest
/// edge-softmax probability. Ties go to the lower source, then the earlier op.
pub fn select_topk_ops(alpha: &AlphaOriginal, cell_type: CellType, k: usize) -> Result<IntensiveSpace> {
    let spec = CellSpec::new(alpha.nodes(), cell_type)?;
    let non_zero = OperationKind::ALL.len() - 1;
    // node 2 has the fewest incoming edges
    if k == 0 || k > 2 * non_zero {
        return Err(Error::invalid(format!("K = {k} outside 1..={} candidates of node 2", 2 * non_zero)));
    }
    let mut slots = Vec::with_capacity(spec.num_intermediate() * k);
    for j in spec.intermediate_nodes() {
        let mut cands: Vec<(f32, Slot)> = Vec::with_capacity(j * non_zero);
        for i in 0..j {
            let e = spec.edge_index(i, j).expect("edge in range");
            let probs = softmax_lane(alpha.edge(cell_type, e));
            for op in OperationKind::ALL.into_iter().filter(|&o| o != OperationKind::Zero) {
                cands.push((probs[op.index()], Slot { node: j, source: i, op }));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        slots.extend(cands.into_iter().take(k).map(|(_, s)| s));
    }
    IntensiveSpace::new(cell_type, alpha.nodes(), k, slots)
}

/// `1 − C/(M_int·K)` with `C` half the symmetric difference of the slot sets.
pub fn stability(prev: &IntensiveSpace, cur: &IntensiveSpace) -> Result<f64> {
    if prev.cell_type != cur.cell_type || prev.nodes != cur.nodes || prev.k != cur.k {
        return Err(Error::invalid(format!(
            "stability between incompatible spaces ({}, M={}, K={}) and ({}, M={}, K={})",
            prev.cell_type, prev.nodes, prev.k, cur.cell_type, cur.nodes, cur.k
        )));
    }
    let (a, b) = (prev.triples(), cur.triples());
    let changed = a.symmetric_difference(&b).count() as f64 / 2.0;
    Ok(1.0 - changed / (prev.num_intermediate() * prev.k) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub normal: IntensiveSpace,
    pub reduce: IntensiveSpace,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpaceTrajectory {
    entries: Vec<TrajectoryEntry>,
}

impl SpaceTrajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, normal: IntensiveSpace, reduce: IntensiveSpace, accuracy: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::invalid(format!("accuracy {accuracy} outside [0, 1]")));
        }
        if normal.cell_type != CellType::Normal || reduce.cell_type != CellType::Reduce {
            return Err(Error::invalid("trajectory entry needs a normal and a reduce space"));
        }
        self.entries.push(TrajectoryEntry { normal, reduce, accuracy });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn space(&self, t: usize, cell_type: CellType) -> &IntensiveSpace {
        let e = &self.entries[t];
        match cell_type {
            CellType::Normal => &e.normal,
            CellType::Reduce => &e.reduce,
        }
    }
}

/// `Π_{i=0..=n} s(O_{t−i}, O_t) · ε(t−i)`.
pub fn superiority(traj: &SpaceTrajectory, cell_type: CellType, t: usize, n: usize) -> Result<f64> {
    if t < n {
        return Err(Error::invalid(format!("epoch {t} has fewer than n = {n} predecessors")));
    }
    if t >= traj.len() {
        return Err(Error::invalid(format!("epoch {t} beyond trajectory of {} epochs", traj.len())));
    }
    let cur = traj.space(t, cell_type);
    (0..=n).try_fold(1.0, |acc, i| {
        Ok(acc * stability(traj.space(t - i, cell_type), cur)? * traj.entries[t - i].accuracy)
    })
}

/// Mean superiority of both cell types at every epoch in `[n, len)`, and the
/// argmax over it. Ties go to the later epoch.
pub fn choose_epoch(traj: &SpaceTrajectory, n: usize) -> Result<(usize, Vec<f64>)> {
    if traj.len() <= n {
        return Err(Error::invalid(format!("{} epochs recorded, need more than n = {n}", traj.len())));
    }
    let mut scores = Vec::with_capacity(traj.len() - n);
    for t in n..traj.len() {
        let s = (superiority(traj, CellType::Normal, t, n)? + superiority(traj, CellType::Reduce, t, n)?) / 2.0;
        scores.push(s);
    }
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s >= scores[best] { i } else { best });
    Ok((best + n, scores))
}

/// Node value `Σ_{slot ∈ node} w_slot · op_slot(N_source)` where the weights
/// are `probs` renormalized over the node's slots. `retained` masks slots out
/// of the sum and the normalization. `apply` runs one slot's op and returns
/// `None` for an op that contributes nothing.
pub(crate) fn mix_node<T: Scalar>(
    g: &mut Graph<T>,
    states: &[Var],
    space: &IntensiveSpace,
    node: usize,
    probs: Var,
    retained: Option<&[bool]>,
    mut apply: impl FnMut(&mut Graph<T>, usize, &Slot, Var) -> Result<Option<Var>>,
) -> Result<Var> {
    let active: Vec<usize> = space
        .node_slots(node)
        .filter(|&s| retained.is_none_or(|m| m[s]))
        .collect();
    if active.is_empty() {
        return Err(Error::invalid(format!("node {node} has no active slots")));
    }
    let weights = g.normalize_subset(probs, &active)?;
    let mut terms = Vec::with_capacity(active.len());
    for (w_idx, &s) in active.iter().enumerate() {
        let slot = space.slots[s];
        if let Some(out) = apply(g, s, &slot, states[slot.source])? {
            terms.push(g.scale_by(out, weights, w_idx)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid(format!("node {node} produced no terms")));
    }
    g.add_n(&terms)
}

/// Relaxed node value over an intensive space: the softmax of `alpha_cell`
/// (one logit per slot of the cell) renormalized over node `node`'s slots.
pub fn relaxed_intensive_forward<T: Scalar>(
    g: &mut Graph<T>,
    states: &[Var],
    space: &IntensiveSpace,
    node: usize,
    alpha_cell: Var,
    apply: impl FnMut(&mut Graph<T>, usize, &Slot, Var) -> Result<Option<Var>>,
) -> Result<Var> {
    let n = g.value(alpha_cell).numel();
    if n != space.num_slots() {
        return Err(Error::shape("relaxed_intensive_forward", format!("{n} logits for {} slots", space.num_slots())));
    }
    if !(2..space.nodes - 1).contains(&node) || states.len() < node {
        return Err(Error::invalid(format!("node {node} is not computable from {} states", states.len())));
    }
    let flat = g.reshape(alpha_cell, &[1, n])?;
    let probs = g.softmax(flat, 1)?;
    mix_node(g, states, space, node, probs, None, apply)
}

/// Hyperparameters of the supernet run that picks the intensive space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeriveConfig {
    pub epochs: usize,
    pub k: usize,
    pub backtrack: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub sgd: SgdConfig,
    pub alpha_lr: f64,
    pub adam: AdamConfig,
    pub grad_clip: f64,
}

#[derive(Clone, Debug)]
pub struct Derivation {
    pub normal: IntensiveSpace,
    pub reduce: IntensiveSpace,
    pub trajectory: SpaceTrajectory,
    pub chosen_epoch: usize,
    /// Mean superiority for epochs `backtrack..epochs`.
    pub scores: Vec<f64>,
    pub metrics: Vec<MetricRow>,
}

pub(crate) fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == l
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}

struct SupernetStep {
    loss: f64,
}

fn supernet_step(
    net: &mut SuperNet,
    alpha: &mut AlphaOriginal,
    x: &Tensor<f32>,
    labels: &[usize],
    train_weights: bool,
    train_alpha: bool,
) -> Result<SupernetStep> {
    let mut g = Graph::new();
    let bound = net.params().bind(&mut g, train_weights);
    let xv = g.constant(x.clone());
    let an = g.leaf(alpha.get(CellType::Normal).clone().with_requires_grad(train_alpha));
    let ar = g.leaf(alpha.get(CellType::Reduce).clone().with_requires_grad(train_alpha));
    let logits = net.forward(&mut g, &bound, xv, an, ar)?;
    let loss = g.cross_entropy(logits, labels)?;
    let value = g.value(loss).item()? as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("supernet loss {value}")));
    }
    let mut grads = g.backward(loss)?;
    if train_weights {
        net.params_mut().absorb_grads(&bound, &mut grads)?;
    }
    if train_alpha {
        alpha.get_mut(CellType::Normal).set_grad(grads.take(an))?;
        alpha.get_mut(CellType::Reduce).set_grad(grads.take(ar))?;
    }
    Ok(SupernetStep { loss: value })
}

fn split_accuracy(net: &SuperNet, alpha: &AlphaOriginal, split: &crate::data::Split, batch: usize) -> Result<f64> {
    let mut correct = 0.0;
    for idx in split.batches(batch, None) {
        let (x, y) = split.gather(&idx);
        correct += accuracy(&net.logits(&x, alpha)?, &y) * y.len() as f64;
    }
    Ok(correct / split.len() as f64)
}

/// Trains the relaxed supernet with first-order alternation (α on a
/// validation batch by Adam, then weights on a train batch by SGD), records
/// both cells' top-`K` spaces and the validation accuracy after each epoch,
/// and returns the spaces at the epoch of highest mean superiority.
pub fn derive_intensive_space(backbone: &BackboneSpec, data: &Dataset, cfg: &DeriveConfig, seed: u64) -> Result<Derivation> {
    if cfg.epochs <= cfg.backtrack {
        return Err(Error::invalid(format!("epochs {} must exceed n = {}", cfg.epochs, cfg.backtrack)));
    }
    if cfg.alpha_lr < 0.0 || cfg.weight_lr < 0.0 {
        return Err(Error::invalid("learning rates must be non-negative"));
    }
    let mut net = SuperNet::new(*backbone, &mut substream(seed, streams::SUPERNET_INIT))?;
    let mut alpha = alpha_init(backbone.nodes, &mut substream(seed, streams::ALPHA_INIT))?;
    let mut shuffle = substream(seed, streams::DERIVE_SHUFFLE);
    let mut w_opt = SgdMomentum::new(cfg.sgd, net.params().tensors());
    let mut a_opt = Adam::new(cfg.adam, alpha.tensors());
    let steps_per_epoch = data.train.batches(cfg.batch_size, None).len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut traj = SpaceTrajectory::new();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let gates = (cfg.alpha_lr > 0.0, cfg.weight_lr > 0.0);

    for epoch in 0..cfg.epochs {
        let train_batches = data.train.batches(cfg.batch_size, Some(&mut shuffle));
        let val_batches = data.val.batches(cfg.batch_size, Some(&mut shuffle));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, idx) in train_batches.iter().enumerate() {
            if cfg.alpha_lr > 0.0 {
                let (vx, vy) = data.val.gather(&val_batches[b % val_batches.len()]);
                supernet_step(&mut net, &mut alpha, &vx, &vy, false, true)?;
                a_opt.step(alpha.tensors_mut(), cfg.alpha_lr)?;
            }
            let (x, y) = data.train.gather(idx);
            let out = supernet_step(&mut net, &mut alpha, &x, &y, cfg.weight_lr > 0.0, false)?;
            loss_sum += out.loss;
            lr = cosine_lr(step, total_steps, cfg.weight_lr)?;
            if lr > 0.0 {
                clip_grad_norm(net.params_mut().tensors_mut(), cfg.grad_clip);
                w_opt.step(net.params_mut().tensors_mut(), lr)?;
            }
            step += 1;
        }
        let acc = split_accuracy(&net, &alpha, &data.val, cfg.batch_size)?;
        traj.push(
            select_topk_ops(&alpha, CellType::Normal, cfg.k)?,
            select_topk_ops(&alpha, CellType::Reduce, cfg.k)?,
            acc,
        )?;
        metrics.push(MetricRow::new("derive", epoch, loss_sum / train_batches.len() as f64, acc, gates, lr));
    }

    let (chosen, scores) = choose_epoch(&traj, cfg.backtrack)?;
    Ok(Derivation {
        normal: traj.space(chosen, CellType::Normal).clone(),
        reduce: traj.space(chosen, CellType::Reduce).clone(),
        trajectory: traj,
        chosen_epoch: chosen,
        scores,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    fn space_from(ct: CellType, k: usize, pick: impl Fn(usize) -> Vec<(usize, OperationKind)>) -> IntensiveSpace {
        let slots = (2..6)
            .flat_map(|j| pick(j).into_iter().map(move |(i, op)| Slot { node: j, source: i, op }))
            .collect();
        IntensiveSpace::new(ct, 7, k, slots).unwrap()
    }

    fn first_k(j: usize, k: usize, skip: usize) -> Vec<(usize, OperationKind)> {
        (0..j)
            .flat_map(|i| OperationKind::ALL[..7].iter().map(move |&o| (i, o)))
            .skip(skip)
            .take(k)
            .collect()
    }

    fn random_alpha(seed: u64) -> AlphaOriginal {
        let mut rng = substream(seed, "alpha");
        let n = Tensor::new([14, 8], crate::rng::normal_vec(&mut rng, 112, 1.0)).unwrap();
        let r = Tensor::new([14, 8], crate::rng::normal_vec(&mut rng, 112, 1.0)).unwrap();
        AlphaOriginal::new(7, n, r).unwrap()
    }

    #[test]
    fn cardinality_and_zero_exclusion_are_enforced() {
        let ok = space_from(CellType::Normal, 6, |j| first_k(j, 6, 0));
        assert_eq!(ok.num_slots(), 24);
        let short: Vec<Slot> = ok.slots()[1..].to_vec();
        assert!(IntensiveSpace::new(CellType::Normal, 7, 6, short).is_err());
        let mut zero = ok.slots().to_vec();
        zero[0].op = OperationKind::Zero;
        assert!(IntensiveSpace::new(CellType::Normal, 7, 6, zero).is_err());
        let mut back = ok.slots().to_vec();
        back[0].source = 2;
        assert!(IntensiveSpace::new(CellType::Normal, 7, 6, back).is_err());
    }

    #[test]
    fn saturated_k_keeps_every_non_zero_candidate() {
        let alpha = random_alpha(1);
        let sp = select_topk_ops(&alpha, CellType::Normal, 14).unwrap();
        let node2: Vec<_> = sp.slots()[sp.node_slots(2)].to_vec();
        assert_eq!(node2.len(), 14);
        assert!(node2.iter().all(|s| s.op != OperationKind::Zero));
        assert!(select_topk_ops(&alpha, CellType::Normal, 15).is_err());
        assert!(select_topk_ops(&alpha, CellType::Normal, 0).is_err());
    }

    #[test]
    fn dominant_logit_ranks_first() {
        let mut alpha = random_alpha(2);
        alpha.get_mut(CellType::Normal).data_mut()[OperationKind::Identity.index()] += 50.0;
        let sp = select_topk_ops(&alpha, CellType::Normal, 1).unwrap();
        assert_eq!(sp.slots()[sp.node_slots(2)][0], Slot { node: 2, source: 0, op: OperationKind::Identity });
    }

    #[test]
    fn uniform_alpha_ties_break_by_source_then_op() {
        let z = Tensor::zeros([14, 8]);
        let alpha = AlphaOriginal::new(7, z.clone(), z).unwrap();
        let sp = select_topk_ops(&alpha, CellType::Reduce, 3).unwrap();
        let got: Vec<_> = sp.slots()[sp.node_slots(4)].iter().map(|s| (s.source, s.op)).collect();
        assert_eq!(
            got,
            vec![(0, OperationKind::SepConv3x3), (0, OperationKind::SepConv5x5), (0, OperationKind::DilConv3x3)]
        );
    }

    #[test]
    fn stability_examples() {
        let a = space_from(CellType::Normal, 6, |j| first_k(j, 6, 0));
        assert_eq!(stability(&a, &a).unwrap(), 1.0);
        let disjoint = space_from(CellType::Normal, 6, |j| first_k(j, 6, 6));
        assert_eq!(stability(&a, &disjoint).unwrap(), 0.0);
        let mut six = a.slots().to_vec();
        // one changed slot per node in nodes 2 and 3, four in node 5
        let swaps = [(0, 13), (6, 20), (18, 34), (19, 33), (20, 32), (21, 31)];
        for &(pos, skip) in &swaps {
            let j = six[pos].node;
            let (i, op) = first_k(j, 1, skip)[0];
            six[pos] = Slot { node: j, source: i, op };
        }
        let b = IntensiveSpace::new(CellType::Normal, 7, 6, six).unwrap();
        assert_eq!(stability(&a, &b).unwrap(), 0.75);
        let r = space_from(CellType::Reduce, 6, |j| first_k(j, 6, 0));
        assert!(stability(&a, &r).is_err());
    }

    fn traj_of(spaces: &[(IntensiveSpace, f64)]) -> SpaceTrajectory {
        let mut t = SpaceTrajectory::new();
        for (sp, acc) in spaces {
            let r = IntensiveSpace::new(CellType::Reduce, 7, sp.k(), sp.slots().to_vec()).unwrap();
            t.push(sp.clone(), r, *acc).unwrap();
        }
        t
    }

    #[test]
    fn superiority_examples() {
        let a = space_from(CellType::Normal, 6, |j| first_k(j, 6, 0));
        let t = traj_of(&[(a.clone(), 1.0), (a.clone(), 1.0), (a.clone(), 1.0)]);
        assert_eq!(superiority(&t, CellType::Normal, 2, 2).unwrap(), 1.0);
        let t = traj_of(&[(a.clone(), 0.3), (a.clone(), 0.7)]);
        assert_eq!(superiority(&t, CellType::Normal, 1, 0).unwrap(), 0.7);
        assert!(superiority(&t, CellType::Normal, 0, 1).is_err());

        // s-values (1.0, 0.75), ε-values (0.9, 0.8)
        let mut slots = a.slots().to_vec();
        for pos in 0..6 {
            let j = slots[pos].node;
            let (i, op) = first_k(j, 1, 7 + pos)[0];
            slots[pos] = Slot { node: j, source: i, op };
        }
        let b = IntensiveSpace::new(CellType::Normal, 7, 6, slots).unwrap();
        assert_eq!(stability(&b, &a).unwrap(), 0.75);
        let t = traj_of(&[(b, 0.8), (a, 0.9)]);
        assert!((superiority(&t, CellType::Normal, 1, 1).unwrap() - 0.54).abs() < 1e-12);
    }

    #[test]
    fn chosen_epoch_prefers_the_later_of_ties() {
        let a = space_from(CellType::Normal, 6, |j| first_k(j, 6, 0));
        let t = traj_of(&[(a.clone(), 0.5), (a.clone(), 0.9), (a.clone(), 0.2), (a.clone(), 0.9)]);
        let (best, scores) = choose_epoch(&t, 0).unwrap();
        assert_eq!(best, 3);
        assert_eq!(scores.len(), 4);
        let (best, _) = choose_epoch(&t, 1).unwrap();
        // windows: 0.45, 0.18, 0.18
        assert_eq!(best, 1);
        assert!(choose_epoch(&t, 4).is_err());
    }

    #[test]
    fn text_round_trip_is_sorted_and_lossless() {
        let n = select_topk_ops(&random_alpha(4), CellType::Normal, 6).unwrap();
        let r = select_topk_ops(&random_alpha(5), CellType::Reduce, 6).unwrap();
        let text = spaces_to_text([&n, &r]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 48);
        assert!(lines.windows(2).all(|w| w[0] < w[1]));
        let back = spaces_from_text(&text, 7).unwrap();
        assert_eq!(back, vec![n, r]);
        assert!(spaces_from_text("normal 2 0 sep_conv_3x3\n", 7).is_err());
        assert!(spaces_from_text("normal 2 0 conv_7x7\n", 7).is_err());
    }

    #[test]
    fn relaxed_node_weights_follow_per_node_softmax() {
        let space = space_from(CellType::Normal, 6, |j| first_k(j, 6, 0));
        let mut g = Graph::<f64>::new();
        let states: Vec<Var> = (0..6).map(|i| g.constant(Tensor::full([1, 1, 1, 1], (i + 1) as f64))).collect();
        let logits: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = g.constant(Tensor::new([24], logits.clone()).unwrap());
        // every op is identity-like so the node value is Σ w·N_source
        let out = relaxed_intensive_forward(&mut g, &states, &space, 3, a, |_, _, _, x| Ok(Some(x))).unwrap();
        let range = space.node_slots(3);
        let z: f64 = logits[range.clone()].iter().map(|v| v.exp()).sum();
        let want: f64 = range
            .map(|s| logits[s].exp() / z * (space.slots()[s].source + 1) as f64)
            .sum();
        assert!((g.value(out).data()[0] - want).abs() < 1e-12);
        let wrong = g.constant(Tensor::zeros([23]));
        assert!(relaxed_intensive_forward(&mut g, &states, &space, 3, wrong, |_, _, _, x| Ok(Some(x))).is_err());
    }

    proptest! {
        #[test]
        fn stability_is_symmetric_and_bounded(sa in 0u64..1000, sb in 0u64..1000, k in 1usize..=14) {
            let a = select_topk_ops(&random_alpha(sa), CellType::Normal, k).unwrap();
            let b = select_topk_ops(&random_alpha(sb), CellType::Normal, k).unwrap();
            let ab = stability(&a, &b).unwrap();
            prop_assert_eq!(ab, stability(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(stability(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn superiority_is_monotone_in_accuracy(
            accs in proptest::collection::vec(0.0f64..=1.0, 3),
            which in 0usize..3,
            bump in 0.0f64..=1.0,
            seeds in proptest::collection::vec(0u64..50, 3),
        ) {
            let spaces: Vec<_> = seeds.iter().map(|&s| select_topk_ops(&random_alpha(s), CellType::Normal, 6).unwrap()).collect();
            let base = traj_of(&spaces.iter().cloned().zip(accs.iter().copied()).collect::<Vec<_>>());
            let mut raised = accs.clone();
            raised[which] = (raised[which] + bump).min(1.0);
            let up = traj_of(&spaces.into_iter().zip(raised).collect::<Vec<_>>());
            let s0 = superiority(&base, CellType::Normal, 2, 2).unwrap();
            let s1 = superiority(&up, CellType::Normal, 2, 2).unwrap();
            prop_assert!(s1 >= s0);
            prop_assert!((0.0..=1.0).contains(&s0));
        }
    }
}
