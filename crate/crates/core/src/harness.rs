//! Stage commands: each reads the previous stage's checkpoint, runs, and
//! writes its own checkpoint, metrics CSV and a plain-text summary into the
//! output directory.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{decode_tensors, encode_tensors, Checkpoint, Stage};
use crate::config::RunConfig;
use crate::data::{synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::hypernet::{ArchParams, HyperNetwork};
use crate::intensive::{derive_intensive_space, spaces_from_text, spaces_to_text};
use crate::metrics::{write_csv, MetricRow};
use crate::params::ParamStore;
use crate::rng::{streams, substream};
use crate::search::{
    complexity_count, discretize, evaluate_architecture, search_architecture, train_hypernetwork, DiscreteArchitecture,
    SearchOptions,
};
use crate::tensor::Tensor;

pub const LOCK_FILE: &str = ".lock";
pub const SPACE_FILE: &str = "intensive_space.txt";
pub const ARCH_FILE: &str = "architecture.txt";

pub fn checkpoint_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("{stage}.ckpt"))
}

pub fn metrics_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("{stage}_metrics.csv"))
}

pub fn summary_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("{stage}_summary.txt"))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        let path = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(format!(
                "{} exists; another run is using {} (remove the file if that run has died)",
                path.display(),
                out.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub summary: String,
}

/// Per-run options that are not part of the configuration.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoint to start from instead of the previous stage's file in the
    /// output directory.
    pub resume: Option<PathBuf>,
    pub search: SearchOptions,
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    synth_dataset(&cfg.dataset(), &mut substream(cfg.seed, streams::DATASET))
}

fn store_tensors(store: &ParamStore) -> Vec<u8> {
    encode_tensors(store.iter())
}

fn arch_tensors(arch: &ArchParams) -> Vec<u8> {
    let names: Vec<String> = (0..arch.cells()).map(|l| format!("cell{l}")).collect();
    encode_tensors(names.iter().map(String::as_str).zip(arch.tensors()))
}

fn load_arch(bytes: &[u8], net: &HyperNetwork) -> Result<ArchParams> {
    let arch = ArchParams::new(decode_tensors(bytes)?.into_iter().map(|(_, t)| t).collect());
    net.check_arch(&arch)?;
    Ok(arch)
}

fn load_store(bytes: &[u8], store: &mut ParamStore) -> Result<()> {
    let items = decode_tensors(bytes)?;
    if items.len() != store.len() {
        return Err(Error::format("w_G section", format!("{} tensors for {} parameters", items.len(), store.len())));
    }
    for (i, (name, t)) in items.into_iter().enumerate() {
        let id = crate::params::ParamId(i);
        if store.name(id) != name || store.get(id).shape() != t.shape() {
            return Err(Error::format(
                "w_G section",
                format!("tensor `{name}` {:?} does not match parameter `{}` {:?}", t.shape(), store.name(id), store.get(id).shape()),
            ));
        }
        store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

fn optimizer_tensors(names: &[String], buffers: &[Vec<f32>]) -> Result<Vec<(String, Tensor<f32>)>> {
    names
        .iter()
        .zip(buffers)
        .map(|(n, b)| Ok((n.clone(), Tensor::new([b.len()], b.clone())?)))
        .collect()
}

/// Rebuilds the HyperNetwork from a checkpoint's spaces and, when present,
/// its `w_g` section.
fn restore_net(cfg: &RunConfig, ck: &Checkpoint) -> Result<HyperNetwork> {
    let spaces = spaces_from_text(ck.text("spaces")?, cfg.nodes)?;
    let [normal, reduce]: [_; 2] = spaces
        .try_into()
        .map_err(|_| Error::format("checkpoint", "spaces section must hold a normal and a reduce space"))?;
    let mut net = HyperNetwork::new(cfg.backbone(), normal, reduce, &mut substream(cfg.seed, streams::HYPERNET_INIT))?;
    if ck.section_names().any(|n| n == "w_g") {
        load_store(ck.section("w_g")?, net.params_mut())?;
    }
    Ok(net)
}

fn previous(cfg: &RunConfig, stage: Stage, resume: Option<&Path>) -> Result<(Checkpoint, PathBuf)> {
    let prev = stage.previous().expect("stage with a predecessor");
    let path = resume.map_or_else(|| checkpoint_path(&cfg.out_dir, prev), Path::to_path_buf);
    if !path.exists() {
        return Err(Error::StageMismatch {
            expected: prev.to_string(),
            found: format!("nothing (no checkpoint at {})", path.display()),
        });
    }
    let ck = Checkpoint::load(&path)?;
    ck.expect(prev, &cfg.stage_hash(prev)?)?;
    Ok((ck, path))
}

fn finish(cfg: &RunConfig, stage: Stage, ck: &Checkpoint, rows: Option<&[MetricRow]>, summary: String) -> Result<StageReport> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    let path = checkpoint_path(out, stage);
    ck.save(&path)?;
    if let Some(rows) = rows {
        write_csv(&metrics_path(out, stage), rows)?;
    }
    std::fs::write(summary_path(out, stage), &summary)?;
    Ok(StageReport { stage, checkpoint: path, summary })
}

fn tag<T>(stage: Stage, last_good: Option<PathBuf>, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage: stage.name(), last_good, source: Box::new(other) },
    })
}

fn run_derive(cfg: &RunConfig) -> Result<StageReport> {
    let data = dataset(cfg)?;
    let d = derive_intensive_space(&cfg.backbone(), &data, &cfg.derive(), cfg.seed)?;
    let space_text = spaces_to_text([&d.normal, &d.reduce]);
    let mut traj = String::from("epoch val_acc mean_superiority\n");
    for (t, e) in d.trajectory.entries().iter().enumerate() {
        let s = t.checked_sub(cfg.backtrack).map(|i| d.scores[i]);
        let _ = writeln!(traj, "{t} {} {}", e.accuracy, s.map_or("-".to_string(), |v| v.to_string()));
    }
    let mut ck = Checkpoint::new(Stage::Derive, cfg.stage_hash(Stage::Derive)?);
    ck.insert_text("spaces", &space_text);
    ck.insert_text("trajectory", &traj);
    ck.insert_text("chosen_epoch", &d.chosen_epoch.to_string());
    ck.insert_text("config", &cfg.to_portable_toml()?);
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join(SPACE_FILE), &space_text)?;
    let summary = format!(
        "intensive space derived at epoch {} of {} (n = {}, K = {})\nmean superiority there: {:.4}\nvalidation accuracy there: {:.4}\n\n{traj}",
        d.chosen_epoch,
        cfg.derive_epochs,
        cfg.backtrack,
        cfg.k,
        d.scores[d.chosen_epoch - cfg.backtrack],
        d.trajectory.entries()[d.chosen_epoch].accuracy,
    );
    finish(cfg, Stage::Derive, &ck, Some(&d.metrics), summary)
}

fn run_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<StageReport> {
    let (prev, _) = previous(cfg, Stage::Train, resume)?;
    let mut net = restore_net(cfg, &prev)?;
    let data = dataset(cfg)?;
    let out = train_hypernetwork(&mut net, &data, &cfg.schedule(), cfg.seed)?;
    let names: Vec<String> = net.params().iter().map(|(n, _)| n.to_owned()).collect();
    let momentum = optimizer_tensors(&names, out.optimizer.buffers())?;
    let mut ck = Checkpoint::new(Stage::Train, cfg.stage_hash(Stage::Train)?);
    ck.insert_text("spaces", prev.text("spaces")?);
    ck.insert("w_g", store_tensors(net.params()));
    ck.insert("optim.w_g.momentum", encode_tensors(momentum.iter().map(|(n, t)| (n.as_str(), t))));
    ck.insert_text("epoch", &cfg.i_train.to_string());
    let first = out.epoch_losses.first().copied().unwrap_or(f64::NAN);
    let last = out.epoch_losses.last().copied().unwrap_or(f64::NAN);
    let summary = format!(
        "hypernetwork trained for {} epochs ({} generator parameters)\nfirst epoch mean loss: {first:.4}\nfinal epoch mean loss: {last:.4}\nw_G checksum: {:016x}\n",
        cfg.i_train,
        net.params().num_elements(),
        net.params().checksum(),
    );
    finish(cfg, Stage::Train, &ck, Some(&out.metrics), summary)
}

fn run_search(cfg: &RunConfig, resume: Option<&Path>, options: SearchOptions) -> Result<StageReport> {
    let (prev, _) = previous(cfg, Stage::Search, resume)?;
    let mut net = restore_net(cfg, &prev)?;
    let stage1 = net.params().checksum();
    let data = dataset(cfg)?;
    let out = search_architecture(&mut net, &data, &cfg.schedule(), cfg.seed, options)?;
    let mut checks = String::from("epoch w_g_checksum\n");
    for (e, c) in &out.w_g_checksums {
        let _ = writeln!(checks, "{e} {c:016x}");
    }
    let (m, v) = out.alpha_optimizer.moments();
    let cell_names: Vec<String> = (0..m.len()).map(|l| format!("cell{l}")).collect();
    let adam: Vec<(String, Tensor<f32>)> = optimizer_tensors(&cell_names, m)?
        .into_iter()
        .map(|(n, t)| (format!("{n}.m"), t))
        .chain(optimizer_tensors(&cell_names, v)?.into_iter().map(|(n, t)| (format!("{n}.v"), t)))
        .collect();
    let mut ck = Checkpoint::new(Stage::Search, cfg.stage_hash(Stage::Search)?);
    ck.insert_text("spaces", prev.text("spaces")?);
    ck.insert("w_g", store_tensors(&out.best_w_g));
    ck.insert("w_g.final", store_tensors(net.params()));
    ck.insert("alpha", arch_tensors(&out.best));
    ck.insert("alpha.final", arch_tensors(&out.final_arch));
    ck.insert("optim.alpha.adam", encode_tensors(adam.iter().map(|(n, t)| (n.as_str(), t))));
    ck.insert_text("w_g_checksums", &checks);
    ck.insert_text("best_epoch", &out.best_epoch.to_string());
    ck.insert_text("epoch", &cfg.i_total.to_string());
    let summary = format!(
        "architecture search over epochs {}..{} (cross-search window {}..{})\nbest validation accuracy: {:.4} at epoch {}\nw_G checksum after Stage 1: {stage1:016x}\n\n{checks}",
        cfg.i_train, cfg.i_total, cfg.i_cross_start, cfg.i_cross_end, out.best_val_acc, out.best_epoch,
    );
    finish(cfg, Stage::Search, &ck, Some(&out.metrics), summary)
}

fn run_discretize(cfg: &RunConfig, resume: Option<&Path>) -> Result<StageReport> {
    let (prev, _) = previous(cfg, Stage::Discretize, resume)?;
    let net = restore_net(cfg, &prev)?;
    let arch = load_arch(prev.section("alpha")?, &net)?;
    let d = discretize(&arch, &net, cfg.t)?;
    let text = d.to_text();
    let mut ck = Checkpoint::new(Stage::Discretize, cfg.stage_hash(Stage::Discretize)?);
    ck.insert_text("spaces", prev.text("spaces")?);
    ck.insert("w_g", prev.section("w_g")?.to_vec());
    ck.insert_text("architecture", &text);
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join(ARCH_FILE), &text)?;
    let c = complexity_count(cfg.nodes, cfg.k, cfg.t, cfg.cells)?;
    let per_cell = (cfg.nodes - 3) * cfg.t;
    let summary = format!(
        "top-{} discretization: {per_cell} operations per cell, {} cells\nsub-graphs in the discretized space: {c}\n\n{text}",
        cfg.t, cfg.cells
    );
    finish(cfg, Stage::Discretize, &ck, None, summary)
}

fn run_evaluate(cfg: &RunConfig, resume: Option<&Path>) -> Result<StageReport> {
    let (prev, _) = previous(cfg, Stage::Evaluate, resume)?;
    let net = restore_net(cfg, &prev)?;
    let text = prev.text("architecture")?;
    let arch = DiscreteArchitecture::from_text(text, cfg.cells)?;
    let data = dataset(cfg)?;
    let val = evaluate_architecture(&arch, &net, &data.val, cfg.batch_size)?;
    let test = evaluate_architecture(&arch, &net, &data.test, cfg.batch_size)?;
    let mut ck = Checkpoint::new(Stage::Evaluate, cfg.stage_hash(Stage::Evaluate)?);
    ck.insert_text("architecture", text);
    ck.insert_text("accuracy", &format!("val {val}\ntest {test}\n"));
    let chance = 1.0 / cfg.num_classes as f64;
    let summary = format!(
        "no-finetune evaluation with generated weights\nvalidation accuracy: {val:.4}\ntest accuracy: {test:.4}\nchance level: {chance:.4}\n"
    );
    let row = MetricRow::new("evaluate", 0, f64::NAN, val, (false, false), 0.0);
    finish(cfg, Stage::Evaluate, &ck, Some(&[row]), summary)
}

fn dispatch(cfg: &RunConfig, stage: Stage, resume: Option<&Path>, options: SearchOptions) -> Result<StageReport> {
    let last_good = stage.previous().map(|p| resume.map_or_else(|| checkpoint_path(&cfg.out_dir, p), Path::to_path_buf));
    let r = match stage {
        Stage::Derive => run_derive(cfg),
        Stage::Train => run_train(cfg, resume),
        Stage::Search => run_search(cfg, resume, options),
        Stage::Discretize => run_discretize(cfg, resume),
        Stage::Evaluate => run_evaluate(cfg, resume),
    };
    tag(stage, last_good.filter(|p| p.exists()), r)
}

/// Runs one stage under the output-directory lock.
pub fn run_stage(cfg: &RunConfig, stage: Stage, options: &RunOptions) -> Result<StageReport> {
    tag(stage, None, cfg.validate())?;
    let _lock = tag(stage, None, DirLock::acquire(&cfg.out_dir))?;
    dispatch(cfg, stage, options.resume.as_deref(), options.search)
}

pub fn cmd_derive_space(cfg: &RunConfig) -> Result<StageReport> {
    run_stage(cfg, Stage::Derive, &RunOptions::default())
}

pub fn cmd_train_hyper(cfg: &RunConfig, options: &RunOptions) -> Result<StageReport> {
    run_stage(cfg, Stage::Train, options)
}

pub fn cmd_search(cfg: &RunConfig, options: &RunOptions) -> Result<StageReport> {
    run_stage(cfg, Stage::Search, options)
}

pub fn cmd_discretize(cfg: &RunConfig, options: &RunOptions) -> Result<StageReport> {
    run_stage(cfg, Stage::Discretize, options)
}

pub fn cmd_evaluate(cfg: &RunConfig, options: &RunOptions) -> Result<StageReport> {
    run_stage(cfg, Stage::Evaluate, options)
}

pub fn cmd_complexity(m: usize, k: usize, t: usize, l: usize) -> Result<String> {
    let c = complexity_count(m, k, t, l)?;
    Ok(format!("C({k},{t})^(({m}-3)*{l}) = {}^{} = {}\n≈10^{}\n", c.base, c.exponent, c.exact, c.order()))
}

/// Chains every stage through its checkpoint file. With `resume`, starts at
/// the stage after the one that checkpoint belongs to.
pub fn cmd_run_all(cfg: &RunConfig, options: &RunOptions) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    let mut resume = options.resume.clone();
    let first = match &resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            match Stage::ALL.iter().position(|&s| s == ck.stage) {
                Some(i) if i + 1 < Stage::ALL.len() => i + 1,
                _ => return Ok(Vec::new()),
            }
        }
        None => 0,
    };
    let mut reports = Vec::new();
    for &stage in &Stage::ALL[first..] {
        reports.push(dispatch(cfg, stage, resume.take().as_deref(), options.search)?);
    }
    Ok(reports)
}

/// Parses the `w_g_checksums` section of a search checkpoint.
pub fn read_checksums(ck: &Checkpoint) -> Result<Vec<(usize, u64)>> {
    ck.text("w_g_checksums")?
        .lines()
        .skip(1)
        .map(|l| {
            let bad = || Error::format("w_g_checksums", l.to_owned());
            let (e, c) = l.split_once(' ').ok_or_else(bad)?;
            Ok((e.parse().map_err(|_| bad())?, u64::from_str_radix(c, 16).map_err(|_| bad())?))
        })
        .collect()
}

/// `w_G` stored in a checkpoint, by section name.
pub fn read_w_g(ck: &Checkpoint, section: &str) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in decode_tensors(ck.section(section)?)? {
        store.add(name, t);
    }
    Ok(store)
}
