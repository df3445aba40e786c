//! The two-stage search: generator training under random encodings, then
//! gated architecture search, followed by top-`T` discretization and
//! evaluation with generated weights.

use std::fmt;
use std::fmt::Write as _;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hypernet::{encode_cell_probabilities, sample_random_alpha, ArchParams, CellEncoding, HyperNetwork};
use crate::intensive::{accuracy, Slot};
use crate::metrics::MetricRow;
use crate::optim::{cosine_lr, Adam, AdamConfig, SgdConfig, SgdMomentum};
use crate::params::{clip_grad_norm, ParamStore};
use crate::rng::{normal_vec, streams, substream};
use crate::tensor::Tensor;

/// Update gates: `g_alpha` for the architecture encodings, `g_g` for `w_G`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateState {
    pub g_alpha: bool,
    pub g_g: bool,
}

impl GateState {
    pub const TRAIN: Self = Self { g_alpha: false, g_g: true };
    pub const BASIC: Self = Self { g_alpha: true, g_g: false };
    pub const CROSS: Self = Self { g_alpha: true, g_g: true };

    /// Gates of Stage 2 epoch `epoch` (counted from the start of Stage 1).
    pub fn for_search_epoch(schedule: &SearchSchedule, epoch: usize) -> Self {
        if (schedule.i_cross_start..schedule.i_cross_end).contains(&epoch) {
            Self::CROSS
        } else {
            Self::BASIC
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSchedule {
    pub i_train: usize,
    pub i_cross_start: usize,
    pub i_cross_end: usize,
    pub i_total: usize,
    pub batch_size: usize,
    pub w_lr: f64,
    pub sgd: SgdConfig,
    pub alpha_lr: f64,
    pub adam: AdamConfig,
    pub grad_clip: f64,
}

impl SearchSchedule {
    pub fn validate(&self) -> Result<()> {
        let ordered = self.i_train <= self.i_cross_start
            && self.i_cross_start <= self.i_cross_end
            && self.i_cross_end <= self.i_total;
        if !ordered {
            return Err(Error::invalid(format!(
                "schedule must satisfy I_train ≤ I_cross_start ≤ I_cross_end ≤ I_total, got {} / {} / {} / {}",
                self.i_train, self.i_cross_start, self.i_cross_end, self.i_total
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if !(self.w_lr >= 0.0 && self.alpha_lr >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::invalid("learning rates must be non-negative and the clip norm positive"));
        }
        Ok(())
    }
}

fn split_accuracy(split: &Split, batch: usize, mut logits: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>) -> Result<f64> {
    let mut correct = 0.0;
    for idx in split.batches(batch, None) {
        let (x, y) = split.gather(&idx);
        correct += accuracy(&logits(&x)?, &y) * y.len() as f64;
    }
    Ok(correct / split.len() as f64)
}

/// Cross-entropy of one batch with the given gates. Leaves the gradients of
/// gated quantities in `net.params()` and `arch`.
fn hyper_step(net: &mut HyperNetwork, arch: &mut ArchParams, x: &Tensor<f32>, labels: &[usize], gates: GateState) -> Result<f64> {
    let mut g = Graph::new();
    let bound = net.params().bind(&mut g, gates.g_g);
    let xv = g.constant(x.clone());
    let leaves: Vec<_> = arch.tensors().iter().map(|a| g.leaf(a.clone().with_requires_grad(gates.g_alpha))).collect();
    let cells: Vec<_> = leaves.iter().map(|&a| CellEncoding::Logits(a)).collect();
    let logits = net.forward(&mut g, &bound, xv, &cells)?;
    let loss = g.cross_entropy(logits, labels)?;
    let value = g.value(loss).item()? as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("hypernetwork loss {value}")));
    }
    if gates.g_alpha || gates.g_g {
        let mut grads = g.backward(loss)?;
        if gates.g_g {
            net.params_mut().absorb_grads(&bound, &mut grads)?;
        }
        if gates.g_alpha {
            for (t, v) in arch.tensors_mut().iter_mut().zip(&leaves) {
                t.set_grad(grads.take(*v))?;
            }
        }
    }
    Ok(value)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epoch_losses: Vec<f64>,
    pub optimizer: SgdMomentum,
    pub metrics: Vec<MetricRow>,
}

/// Stage 1: trains `w_G` by SGD-momentum under a cosine schedule, drawing a
/// fresh standard-normal encoding for every minibatch. Validation accuracy
/// is reported under uniform encodings.
pub fn train_hypernetwork(net: &mut HyperNetwork, data: &Dataset, schedule: &SearchSchedule, seed: u64) -> Result<TrainOutcome> {
    schedule.validate()?;
    let mut alpha_rng = substream(seed, streams::TRAIN_ALPHA);
    let mut shuffle = substream(seed, streams::TRAIN_SHUFFLE);
    let opt = SgdMomentum::new(schedule.sgd, net.params().tensors());
    let total = data.train.batches(schedule.batch_size, None).len() * schedule.i_train;
    let uniform = ArchParams::new(net.slot_counts().into_iter().map(|n| Tensor::zeros([n])).collect());
    let mut step = 0;
    let mut out = TrainOutcome { epoch_losses: Vec::new(), optimizer: opt, metrics: Vec::new() };
    for epoch in 0..schedule.i_train {
        let batches = data.train.batches(schedule.batch_size, Some(&mut shuffle));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in &batches {
            let mut arch = sample_random_alpha(net, &mut alpha_rng);
            let (x, y) = data.train.gather(idx);
            loss_sum += hyper_step(net, &mut arch, &x, &y, GateState::TRAIN)?;
            lr = cosine_lr(step, total, schedule.w_lr)?;
            if lr > 0.0 {
                clip_grad_norm(net.params_mut().tensors_mut(), schedule.grad_clip);
                out.optimizer.step(net.params_mut().tensors_mut(), lr)?;
            }
            net.params_mut().zero_grads();
            step += 1;
        }
        let mean = loss_sum / batches.len() as f64;
        let acc = split_accuracy(&data.val, schedule.batch_size, |x| net.logits(x, &uniform))?;
        out.epoch_losses.push(mean);
        out.metrics.push(MetricRow::new("train", epoch, mean, acc, (false, true), lr));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SearchOptions {
    /// Diagnostic: keep `g_alpha` off for the whole stage.
    pub freeze_alpha: bool,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Encodings of the best-validation epoch (last among ties).
    pub best: ArchParams,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// `w_G` as it was at the best epoch.
    pub best_w_g: ParamStore,
    pub final_arch: ArchParams,
    /// `w_G` checksum after every Stage 2 epoch.
    pub w_g_checksums: Vec<(usize, u64)>,
    pub alpha_optimizer: Adam,
    pub metrics: Vec<MetricRow>,
}

/// Stage 2: random initial encodings updated by Adam on the training loss;
/// `w_G` is updated as well inside `[I_cross_start, I_cross_end)`, under a
/// cosine schedule restarted over that window.
pub fn search_architecture(
    net: &mut HyperNetwork,
    data: &Dataset,
    schedule: &SearchSchedule,
    seed: u64,
    options: SearchOptions,
) -> Result<SearchOutcome> {
    schedule.validate()?;
    let mut init = substream(seed, streams::SEARCH_ALPHA_INIT);
    let mut arch = ArchParams::new(
        net.slot_counts()
            .into_iter()
            .map(|n| Tensor::new([n], normal_vec(&mut init, n, 1.0)))
            .collect::<Result<_>>()?,
    );
    let mut shuffle = substream(seed, streams::SEARCH_SHUFFLE);
    let mut a_opt = Adam::new(schedule.adam, arch.tensors());
    let mut w_opt = SgdMomentum::new(schedule.sgd, net.params().tensors());
    let per_epoch = data.train.batches(schedule.batch_size, None).len();
    let window = per_epoch * (schedule.i_cross_end - schedule.i_cross_start);
    let mut window_step = 0;

    let mut best: Option<(ArchParams, usize, f64, ParamStore)> = None;
    let mut checksums = Vec::new();
    let mut metrics = Vec::new();
    for epoch in schedule.i_train..schedule.i_total {
        let mut gates = GateState::for_search_epoch(schedule, epoch);
        gates.g_alpha &= !options.freeze_alpha && schedule.alpha_lr > 0.0;
        gates.g_g &= schedule.w_lr > 0.0;
        let batches = data.train.batches(schedule.batch_size, Some(&mut shuffle));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in &batches {
            let (x, y) = data.train.gather(idx);
            loss_sum += hyper_step(net, &mut arch, &x, &y, gates)?;
            if gates.g_alpha {
                a_opt.step(arch.tensors_mut(), schedule.alpha_lr)?;
            }
            if gates.g_g {
                lr = cosine_lr(window_step, window, schedule.w_lr)?;
                if lr > 0.0 {
                    clip_grad_norm(net.params_mut().tensors_mut(), schedule.grad_clip);
                    w_opt.step(net.params_mut().tensors_mut(), lr)?;
                }
                net.params_mut().zero_grads();
                window_step += 1;
            }
        }
        let acc = split_accuracy(&data.val, schedule.batch_size, |x| net.logits(x, &arch))?;
        checksums.push((epoch, net.params().checksum()));
        metrics.push(MetricRow::new(
            "search",
            epoch,
            loss_sum / batches.len() as f64,
            acc,
            (gates.g_alpha, gates.g_g),
            lr,
        ));
        if best.as_ref().is_none_or(|b| acc >= b.2) {
            best = Some((arch.clone(), epoch, acc, net.params().clone()));
        }
    }
    let (best_arch, best_epoch, best_val_acc, best_w_g) = match best {
        Some(b) => b,
        None => (arch.clone(), schedule.i_train, 0.0, net.params().clone()),
    };
    Ok(SearchOutcome {
        best: best_arch,
        best_epoch,
        best_val_acc,
        best_w_g,
        final_arch: arch,
        w_g_checksums: checksums,
        alpha_optimizer: a_opt,
        metrics,
    })
}

/// Per cell, the retained slots with their frozen generation probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteArchitecture {
    pub t: usize,
    pub cells: Vec<Vec<(Slot, f32)>>,
}

impl DiscreteArchitecture {
    /// `cell_l node_j source_i op_name prob` lines sorted by
    /// `(cell, node, source, op_name)`.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<(usize, usize, usize, &str, f32)> = self
            .cells
            .iter()
            .enumerate()
            .flat_map(|(l, c)| c.iter().map(move |(s, p)| (l, s.node, s.source, s.op.name(), *p)))
            .collect();
        rows.sort_by(|a, b| (a.0, a.1, a.2, a.3).cmp(&(b.0, b.1, b.2, b.3)));
        let mut out = String::new();
        for (l, j, i, op, p) in rows {
            let _ = writeln!(out, "{l} {j} {i} {op} {p}");
        }
        out
    }

    /// Parses [`Self::to_text`]; `cells` fixes the number of cells.
    pub fn from_text(text: &str, cells: usize) -> Result<Self> {
        let mut out: Vec<Vec<(Slot, f32)>> = vec![Vec::new(); cells];
        for (no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |d: &str| Error::format("architecture", format!("line {}: {d}: `{line}`", no + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            let [l, j, i, op, p] = f[..] else { return Err(bad("expected 5 fields")) };
            let l: usize = l.parse().map_err(|_| bad("cell index"))?;
            let slot = Slot {
                node: j.parse().map_err(|_| bad("node index"))?,
                source: i.parse().map_err(|_| bad("source index"))?,
                op: op.parse().map_err(|_| bad("operation"))?,
            };
            let p: f32 = p.parse().map_err(|_| bad("probability"))?;
            out.get_mut(l).ok_or_else(|| bad("cell out of range"))?.push((slot, p));
        }
        for c in &mut out {
            c.sort_by(|a, b| a.0.cmp(&b.0));
        }
        let t = out.first().map_or(0, |c| c.iter().filter(|(s, _)| s.node == 2).count());
        Ok(Self { t, cells: out })
    }

    /// Checks `T` slots per intermediate node, all drawn from `net`'s spaces.
    pub fn check_against(&self, net: &HyperNetwork) -> Result<()> {
        if self.cells.len() != net.spec().cells {
            return Err(Error::invalid(format!("{} cells for a {}-cell network", self.cells.len(), net.spec().cells)));
        }
        for (l, cell) in self.cells.iter().enumerate() {
            let space = net.cell_space(l);
            for j in 2..net.spec().nodes - 1 {
                let n = cell.iter().filter(|(s, _)| s.node == j).count();
                if n != self.t {
                    return Err(Error::invalid(format!("cell {l} node {j} retains {n} slots, expected T = {}", self.t)));
                }
            }
            if let Some((s, _)) = cell.iter().find(|(s, _)| space.slot_index(s).is_none()) {
                return Err(Error::invalid(format!(
                    "cell {l} retains ({}, {}, {}) outside its intensive space",
                    s.node, s.source, s.op
                )));
            }
            if cell.len() != cell.iter().map(|(s, _)| s).collect::<std::collections::BTreeSet<_>>().len() {
                return Err(Error::invalid(format!("cell {l} retains a slot twice")));
            }
        }
        Ok(())
    }

    /// Per cell, the probability vector over all slots and the retained mask.
    pub fn frozen_encoding(&self, net: &HyperNetwork) -> Result<(Vec<Vec<f32>>, Vec<Vec<bool>>)> {
        self.check_against(net)?;
        let mut probs = Vec::with_capacity(self.cells.len());
        let mut masks = Vec::with_capacity(self.cells.len());
        for (l, cell) in self.cells.iter().enumerate() {
            let space = net.cell_space(l);
            let mut p = vec![0.0f32; space.num_slots()];
            let mut m = vec![false; space.num_slots()];
            for (slot, prob) in cell {
                let s = space.slot_index(slot).expect("checked");
                p[s] = *prob;
                m[s] = true;
            }
            probs.push(p);
            masks.push(m);
        }
        Ok((probs, masks))
    }
}

/// Keeps the `T` most probable slots of every node under each cell's
/// softmax. Ties go to the lower source, then the earlier op.
pub fn discretize(arch: &ArchParams, net: &HyperNetwork, t: usize) -> Result<DiscreteArchitecture> {
    net.check_arch(arch)?;
    let mut cells = Vec::with_capacity(arch.cells());
    for l in 0..arch.cells() {
        let space = net.cell_space(l);
        if t == 0 || t > space.k() {
            return Err(Error::invalid(format!("T = {t} outside 1..=K = {}", space.k())));
        }
        let probs = encode_cell_probabilities(arch.get(l).data());
        let mut kept = Vec::with_capacity(space.num_intermediate() * t);
        for j in 2..space.nodes() - 1 {
            let mut ranked: Vec<usize> = space.node_slots(j).collect();
            ranked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(space.slots()[a].cmp(&space.slots()[b])));
            kept.extend(ranked.into_iter().take(t).map(|s| (space.slots()[s], probs[s])));
        }
        kept.sort_by(|a, b| a.0.cmp(&b.0));
        cells.push(kept);
    }
    Ok(DiscreteArchitecture { t, cells })
}

/// Accuracy of the discrete network on `split` with generated weights and
/// no parameter update.
pub fn evaluate_architecture(discrete: &DiscreteArchitecture, net: &HyperNetwork, split: &Split, batch: usize) -> Result<f64> {
    let (probs, masks) = discrete.frozen_encoding(net)?;
    split_accuracy(split, batch, |x| net.logits_frozen(x, &probs, &masks))
}

/// `C(K, T)^((M−3)·L)` sub-graphs of a discretized network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Complexity {
    pub exact: BigUint,
    pub base: u64,
    pub exponent: u32,
}

impl Complexity {
    /// `⌊log10⌋` of the exact count.
    pub fn order(&self) -> usize {
        self.exact.to_str_radix(10).len() - 1
    }
}

impl fmt::Display for Complexity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}^{} = {} ≈10^{}", self.base, self.exponent, self.exact, self.order())
    }
}

pub fn complexity_count(m: usize, k: usize, t: usize, l: usize) -> Result<Complexity> {
    if m < 4 || l < 1 || t > k {
        return Err(Error::invalid(format!("complexity needs M ≥ 4, L ≥ 1 and T ≤ K, got M={m} K={k} T={t} L={l}")));
    }
    // C(K, T) by the multiplicative formula; each prefix product is itself a binomial
    let mut base = BigUint::from(1u32);
    for i in 0..t {
        base = base * BigUint::from(k - i) / BigUint::from(i + 1);
    }
    let exponent = u32::try_from((m - 3) * l).map_err(|_| Error::invalid("exponent too large"))?;
    let small = u64::try_from(&base).map_err(|_| Error::invalid("binomial exceeds 64 bits"))?;
    Ok(Complexity { exact: base.pow(exponent), base: small, exponent })
}
