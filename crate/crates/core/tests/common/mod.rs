//! Reference implementations shared by the integration tests and the
//! acceptance harness. Every oracle here is written independently of the
//! library code it checks: plain loops, exhaustive enumeration, finite
//! differences.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use hypernas::data::{synth_dataset, Dataset, DatasetSpec};
use hypernas::hypernet::{ArchParams, CellEncoding, HyperNetwork};
use hypernas::intensive::{select_topk_ops, IntensiveSpace, Slot};
use hypernas::rng::substream;
use hypernas::search_space::{AlphaOriginal, BackboneSpec, CellType, OperationKind, NUM_OPS};
use hypernas::{ConvSpec, Graph, PoolKind, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

// ---------------------------------------------------------------- tensors

pub fn randn(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Direct-definition convolution: every output element sums over its
/// receptive field, skipping taps that land in the zero padding.
pub fn naive_conv2d(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], spec: ConvSpec) -> (Vec<f64>, [usize; 4]) {
    let [n, c_in, h, wd] = xs;
    let [c_out, cpg, kh, kw] = ws;
    let (s, p, d, groups) = (spec.stride as isize, spec.padding as isize, spec.dilation as isize, spec.groups);
    let ho = ((h as isize + 2 * p - d * (kh as isize - 1) - 1) / s + 1) as usize;
    let wo = ((wd as isize + 2 * p - d * (kw as isize - 1) - 1) / s + 1) as usize;
    let opg = c_out / groups;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for b in 0..n {
        for oc in 0..c_out {
            let g = oc / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for icg in 0..cpg {
                        let ic = g * cpg + icg;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy as isize * s - p + ky as isize * d;
                                let ix = ox as isize * s - p + kx as isize * d;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * c_in + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((oc * cpg + icg) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * c_out + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [n, c_out, ho, wo])
}

/// 3×3 pooling with padding 1; averages count only in-bounds cells.
pub fn naive_pool(x: &[f64], xs: [usize; 4], kind: PoolKind, stride: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let ho = (h + 2 - 3) / stride + 1;
    let wo = (w + 2 - 3) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut vals = Vec::new();
                for dy in 0..3isize {
                    for dx in 0..3isize {
                        let iy = (oy * stride) as isize - 1 + dy;
                        let ix = (ox * stride) as isize - 1 + dx;
                        if (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix) {
                            vals.push(x[plane * h * w + iy as usize * w + ix as usize]);
                        }
                    }
                }
                out.push(match kind {
                    PoolKind::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    PoolKind::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                });
            }
        }
    }
    (out, [n, c, ho, wo])
}

pub fn run_conv(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], spec: ConvSpec) -> (Vec<f64>, Vec<usize>) {
    let mut g = Graph::<f32>::new();
    let xv = g.constant(Tensor::from_f64_slice(xs, x).unwrap());
    let wv = g.constant(Tensor::from_f64_slice(ws, w).unwrap());
    let o = g.conv2d(xv, wv, spec).unwrap();
    (g.value(o).to_f64_vec(), g.value(o).shape().to_vec())
}

pub fn run_pool(x: &[f64], xs: [usize; 4], kind: PoolKind, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let mut g = Graph::<f32>::new();
    let xv = g.constant(Tensor::from_f64_slice(xs, x).unwrap());
    let o = g.pool2d(xv, kind, stride).unwrap();
    (g.value(o).to_f64_vec(), g.value(o).shape().to_vec())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Conv and pool forwards against the loop oracles over `cases` random
/// geometries, including every op geometry the cells use. Returns the worst
/// absolute error seen.
pub fn conv_pool_oracle_sweep(seed: u64, cases: usize) -> f64 {
    let mut rng = substream(seed, "conv-oracle");
    let mut worst = 0.0f64;
    // Fixed cell geometries: depthwise k/dilation pairs, pointwise, stem.
    let mut geoms: Vec<([usize; 4], [usize; 4], ConvSpec)> = Vec::new();
    for &(k, d) in &[(3, 1), (5, 1), (3, 2), (5, 2)] {
        for &s in &[1, 2] {
            for &hw in &[2, 4, 8] {
                let pad = d * (k - 1) / 2;
                geoms.push(([2, 4, hw, hw], [4, 1, k, k], ConvSpec::new(s, pad, d, 4)));
            }
        }
    }
    geoms.push(([2, 6, 4, 4], [5, 6, 1, 1], ConvSpec::pointwise()));
    geoms.push(([2, 3, 8, 8], [9, 3, 3, 3], ConvSpec::new(1, 1, 1, 1)));
    for _ in 0..cases {
        let groups = [1, 2][rng.random_range(0..2)];
        let c_in = groups * rng.random_range(1..4);
        let c_out = groups * rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let d = rng.random_range(1..3);
        let s = rng.random_range(1..3);
        let p = rng.random_range(0..3);
        let span: usize = d * (k - 1) + 1;
        let h = rng.random_range(span.saturating_sub(2 * p).max(1)..span + 5);
        let w = rng.random_range(span.saturating_sub(2 * p).max(1)..span + 5);
        geoms.push(([2, c_in, h, w], [c_out, c_in / groups, k, k], ConvSpec::new(s, p, d, groups)));
    }
    for (xs, ws, spec) in geoms {
        // f32-representable inputs, so both sides see identical operands
        let x: Vec<f64> = randn(&mut rng, xs.iter().product()).iter().map(|&v| v as f32 as f64).collect();
        let w: Vec<f64> = randn(&mut rng, ws.iter().product()).iter().map(|&v| v as f32 as f64).collect();
        let (want, want_shape) = naive_conv2d(&x, xs, &w, ws, spec);
        let (got, got_shape) = run_conv(&x, xs, &w, ws, spec);
        assert_eq!(got_shape, want_shape, "conv shape for {xs:?} {ws:?} {spec:?}");
        worst = worst.max(max_abs_diff(&got, &want));
    }
    for &hw in &[1, 2, 3, 5, 8] {
        for &s in &[1, 2] {
            for kind in [PoolKind::Max, PoolKind::Avg] {
                let xs = [2, 3, hw, hw];
                let x: Vec<f64> = randn(&mut rng, xs.iter().product()).iter().map(|&v| v as f32 as f64).collect();
                let (want, want_shape) = naive_pool(&x, xs, kind, s);
                let (got, got_shape) = run_pool(&x, xs, kind, s);
                assert_eq!(got_shape, want_shape, "pool shape for {xs:?} stride {s}");
                worst = worst.max(max_abs_diff(&got, &want));
            }
        }
    }
    worst
}

// ---------------------------------------------------------------- spaces

pub fn softmax64(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Random α for both cell types. With `coarse`, logits take one of three
/// values so exact ties are common.
pub fn random_alpha(rng: &mut impl Rng, nodes: usize, coarse: bool) -> AlphaOriginal {
    let edges: usize = (2..nodes - 1).sum();
    let mut draw = || -> Tensor<f32> {
        let data = (0..edges * NUM_OPS)
            .map(|_| if coarse { rng.random_range(-1..=1) as f32 } else { rng.sample::<f64, _>(StandardNormal) as f32 })
            .collect();
        Tensor::new([edges, NUM_OPS], data).unwrap()
    };
    let normal = draw();
    let reduce = draw();
    AlphaOriginal::new(nodes, normal, reduce).unwrap()
}

/// Picks the `n` best candidates by repeated linear scan. A candidate beats
/// another when its probability is higher, or equal with a smaller key.
/// Probabilities within 1e-12 count as equal: mathematically tied entries can
/// differ in the last ulp depending on summation order.
fn select_best<K: Ord + Copy>(mut cands: Vec<(f64, K)>, n: usize) -> Vec<K> {
    let mut out = Vec::new();
    for _ in 0..n {
        let mut best = 0;
        for i in 1..cands.len() {
            let (p, key) = cands[i];
            let (bp, bkey) = cands[best];
            let tied = (p - bp).abs() <= 1e-12;
            if (!tied && p > bp) || (tied && key < bkey) {
                best = i;
            }
        }
        out.push(cands.remove(best).1);
    }
    out
}

fn edge_offset(source: usize, target: usize) -> usize {
    // edges are stored grouped by target: node 2 has 2, node 3 has 3, ...
    let mut e = 0;
    for j in 2..target {
        e += j;
    }
    e + source
}

pub fn topk_oracle(alpha: &AlphaOriginal, ct: CellType, k: usize) -> Vec<Slot> {
    let nodes = alpha.nodes();
    let data = alpha.get(ct).data();
    let mut out = Vec::new();
    for j in 2..nodes - 1 {
        let mut cands = Vec::new();
        for i in 0..j {
            let e = edge_offset(i, j);
            let probs = softmax64(&data[e * NUM_OPS..(e + 1) * NUM_OPS]);
            for (o, op) in OperationKind::ALL.into_iter().enumerate() {
                if op != OperationKind::Zero {
                    cands.push((probs[o], (i, o, op)));
                }
            }
        }
        for (i, _, op) in select_best(cands, k) {
            out.push(Slot { node: j, source: i, op });
        }
    }
    out.sort();
    out
}

/// For one cell: softmax over every slot, then the `t` best of each node.
pub fn discretize_oracle(space: &IntensiveSpace, alpha_l: &[f32], t: usize) -> Vec<Slot> {
    let probs = softmax64(alpha_l);
    let slots = space.slots();
    let mut out = Vec::new();
    for j in 2..space.nodes() - 1 {
        let cands: Vec<(f64, Slot)> = slots.iter().zip(&probs).filter(|(s, _)| s.node == j).map(|(s, &p)| (p, *s)).collect();
        out.extend(select_best(cands, t));
    }
    out.sort();
    out
}

/// Enumerates every discretized network explicitly: each of the
/// `(M−3)·L` node positions picks a `T`-subset of its `K` candidates, and
/// the resulting whole-network choices are collected in a set.
pub fn enumerate_subgraphs(m: usize, k: usize, t: usize, l: usize) -> usize {
    let positions = (m - 3) * l;
    let subsets: Vec<Vec<usize>> = (0u32..1 << k)
        .filter(|mask| mask.count_ones() as usize == t)
        .map(|mask| (0..k).filter(|b| mask >> b & 1 == 1).collect())
        .collect();
    let mut seen: HashSet<Vec<Vec<usize>>> = HashSet::new();
    let mut current = Vec::with_capacity(positions);
    fn rec(pos: usize, positions: usize, subsets: &[Vec<usize>], cur: &mut Vec<Vec<usize>>, seen: &mut HashSet<Vec<Vec<usize>>>) {
        if pos == positions {
            seen.insert(cur.clone());
            return;
        }
        for s in subsets {
            cur.push(s.clone());
            rec(pos + 1, positions, subsets, cur, seen);
            cur.pop();
        }
    }
    rec(0, positions, &subsets, &mut current, &mut seen);
    seen.len()
}

// ---------------------------------------------------------------- networks

pub fn desk_spaces(seed: u64, k: usize) -> (IntensiveSpace, IntensiveSpace) {
    let alpha = random_alpha(&mut substream(seed, "spaces"), 7, false);
    (select_topk_ops(&alpha, CellType::Normal, k).unwrap(), select_topk_ops(&alpha, CellType::Reduce, k).unwrap())
}

pub fn desk_net(seed: u64, k: usize) -> HyperNetwork {
    let (n, r) = desk_spaces(seed, k);
    HyperNetwork::new(BackboneSpec::desk(), n, r, &mut substream(seed, "net")).unwrap()
}

pub fn small_data(seed: u64, noise_std: f64) -> Dataset {
    let spec = DatasetSpec { num_classes: 4, channels: 3, image_size: 8, train: 32, val: 16, test: 16, noise_std };
    synth_dataset(&spec, &mut substream(seed, "data")).unwrap()
}

pub struct FdSample {
    pub what: String,
    pub autodiff: f64,
    pub finite_diff: f64,
}

impl FdSample {
    /// `|a − f| / max(|a|, |f|)`; two gradients below 1e-10 count as equal.
    pub fn rel_err(&self) -> f64 {
        let scale = self.autodiff.abs().max(self.finite_diff.abs());
        if scale < 1e-10 {
            0.0
        } else {
            (self.autodiff - self.finite_diff).abs() / scale
        }
    }
}

/// Cross-entropy of `net` in f64 on `(x, labels)`, with `w` replacing the
/// network's parameters and `alphas` as the cell logits.
fn loss64(
    net: &HyperNetwork,
    w: &hypernas::params::ParamStore<f64>,
    alphas: &[Tensor<f64>],
    x: &Tensor<f64>,
    labels: &[usize],
) -> f64 {
    let mut g = Graph::<f64>::new();
    let bound = w.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let cells: Vec<_> = alphas.iter().map(|a| CellEncoding::Logits(g.constant(a.clone()))).collect();
    let logits = net.forward(&mut g, &bound, xv, &cells).unwrap();
    let loss = g.cross_entropy(logits, labels).unwrap();
    g.value(loss).item().unwrap()
}

/// Reverse-mode gradients of the HyperNetwork loss against central
/// differences, on `n_w` random `w_G` coordinates and `n_alpha` random
/// architecture coordinates. Everything runs in f64.
///
/// The loss is only piecewise smooth (ReLU, max-pool). The number of
/// activations that a step of size `h` pushes across a kink grows with the
/// batch, so large steps are only meaningful on small batches.
pub fn hypernet_fd_check(seed: u64, n_w: usize, n_alpha: usize, h: f64, batch: usize) -> Vec<FdSample> {
    fd_check_on(&desk_net(seed, 6), seed, n_w, n_alpha, h, batch)
}

pub fn fd_check_on(net: &HyperNetwork, seed: u64, n_w: usize, n_alpha: usize, h: f64, batch: usize) -> Vec<FdSample> {
    let data = small_data(seed, 1.0);
    let (x, labels) = data.train.gather(&(0..batch).collect::<Vec<_>>());
    let x = x.cast::<f64>();
    let mut rng = substream(seed, "fd");
    let arch: ArchParams = hypernas::hypernet::sample_random_alpha(net, &mut rng);
    let alphas: Vec<Tensor<f64>> = arch.tensors().iter().map(Tensor::cast).collect();
    let w = net.params().cast::<f64>();

    // analytic
    let mut g = Graph::<f64>::new();
    let bound = w.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let leaves: Vec<_> = alphas.iter().map(|a| g.leaf(a.clone().with_requires_grad(true))).collect();
    let cells: Vec<_> = leaves.iter().map(|&a| CellEncoding::Logits(a)).collect();
    let logits = net.forward(&mut g, &bound, xv, &cells).unwrap();
    let loss = g.cross_entropy(logits, &labels).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut out = Vec::new();
    let total: usize = w.tensors().iter().map(Tensor::numel).sum();
    let mut picked = BTreeSet::new();
    while picked.len() < n_w {
        picked.insert(rng.random_range(0..total));
    }
    for flat in picked {
        let (mut ti, mut off) = (0, flat);
        while off >= w.tensors()[ti].numel() {
            off -= w.tensors()[ti].numel();
            ti += 1;
        }
        let autodiff = grads.get(bound.vars()[ti]).map_or(0.0, |gr| gr[off]);
        let mut plus = w.clone();
        plus.tensors_mut()[ti].data_mut()[off] += h;
        let mut minus = w.clone();
        minus.tensors_mut()[ti].data_mut()[off] -= h;
        let fd = (loss64(net, &plus, &alphas, &x, &labels) - loss64(net, &minus, &alphas, &x, &labels)) / (2.0 * h);
        let name = w.iter().nth(ti).unwrap().0.to_string();
        out.push(FdSample { what: format!("w_G {name}[{off}]"), autodiff, finite_diff: fd });
    }

    let sizes: Vec<usize> = alphas.iter().map(Tensor::numel).collect();
    let total_a: usize = sizes.iter().sum();
    let mut picked = BTreeSet::new();
    while picked.len() < n_alpha {
        picked.insert(rng.random_range(0..total_a));
    }
    for flat in picked {
        let (mut l, mut off) = (0, flat);
        while off >= sizes[l] {
            off -= sizes[l];
            l += 1;
        }
        let autodiff = grads.get(leaves[l]).map_or(0.0, |gr| gr[off]);
        let mut plus = alphas.clone();
        plus[l].data_mut()[off] += h;
        let mut minus = alphas.clone();
        minus[l].data_mut()[off] -= h;
        let fd = (loss64(net, &w, &plus, &x, &labels) - loss64(net, &w, &minus, &x, &labels)) / (2.0 * h);
        out.push(FdSample { what: format!("alpha cell{l}[{off}]"), autodiff, finite_diff: fd });
    }
    out
}

// ---------------------------------------------------------------- pipeline

use hypernas::checkpoint::{Checkpoint, Stage};
use hypernas::config::RunConfig;
use hypernas::harness::{checkpoint_path, read_checksums, read_w_g};

/// A config small enough for a full pipeline run in a few seconds.
pub fn tiny_config(out: &std::path::Path) -> RunConfig {
    RunConfig {
        out_dir: out.to_path_buf(),
        train_size: 32,
        val_size: 16,
        test_size: 16,
        channels: 4,
        derive_epochs: 3,
        backtrack: 1,
        i_train: 2,
        i_cross_start: 3,
        i_cross_end: 4,
        i_total: 5,
        batch_size: 16,
        ..RunConfig::default()
    }
}

/// Epochs of the search stage at which `w_G` differs from the epoch before,
/// starting from the Stage 1 checkpoint.
pub fn w_g_change_epochs(out: &std::path::Path) -> Vec<usize> {
    let train = Checkpoint::load(&checkpoint_path(out, Stage::Train)).unwrap();
    let search = Checkpoint::load(&checkpoint_path(out, Stage::Search)).unwrap();
    let mut prev = read_w_g(&train, "w_g").unwrap().checksum();
    let mut changed = Vec::new();
    for (epoch, sum) in read_checksums(&search).unwrap() {
        if sum != prev {
            changed.push(epoch);
        }
        prev = sum;
    }
    changed
}

/// Every file of a run directory except the lock, keyed by name.
pub fn run_files(out: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}
