use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use super::config::{config_drift, DataSource, ExperimentConfig};
use super::ledger::{write_atomic, write_reports, EvalSample, LevelRecord, RunLedger};
use super::seeds::{seed_streams, SeedStreams, Stream};
use crate::data::{
    augment_hflip, load_manifest, preprocess, synth_generate, BalancedSampler, DatasetManifest, Normalization,
    Split, SynthConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{Hundredths, MetricsReport, Prediction, PredictionLog};
use crate::model::{FreezePolicy, Network};
use crate::optimizer::{adam_step, AdamState};
use crate::pruning::{prune_to, rewind, TicketState};
use crate::tensor::{Mode, Tensor};

const LEDGER: &str = "ledger.json";
const TIMINGS: &str = "timings.json";
const LOCK: &str = ".lock";
const EVAL_BATCH: usize = 256;

/// Hooks into a running experiment. Every method sees the network read-only.
pub trait Observer {
    /// Just before the first training step of `level` (after pruning and rewinding).
    fn level_started(&mut self, _level: usize, _net: &Network) {}
    /// After optimizer step `step` (1-based within the level).
    fn step_finished(&mut self, _level: usize, _step: usize, _net: &Network) {}
    fn level_finished(&mut self, _record: &LevelRecord, _net: &Network) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop after this level has been written, leaving the run resumable.
    pub stop_after: Option<usize>,
}

/// Manifest plus every record already center-cropped and normalized.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub manifest: DatasetManifest,
    pub normalization: Normalization,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    inputs: Vec<Tensor>,
}

impl PreparedData {
    pub fn input(&self, record: usize) -> &Tensor {
        &self.inputs[record]
    }

    fn batch<R: Rng + ?Sized>(&self, ids: &[usize], flip_p: Option<(f64, &mut R)>) -> Result<(Tensor, Vec<usize>)> {
        let shape = self.inputs[ids[0]].shape().to_vec();
        let mut data = Vec::with_capacity(ids.len() * self.inputs[ids[0]].len());
        let mut labels = Vec::with_capacity(ids.len());
        match flip_p {
            Some((p, rng)) => {
                for &i in ids {
                    data.extend_from_slice(augment_hflip(&self.inputs[i], p, rng).data());
                    labels.push(self.manifest.records[i].label);
                }
            }
            None => {
                for &i in ids {
                    data.extend_from_slice(self.inputs[i].data());
                    labels.push(self.manifest.records[i].label);
                }
            }
        }
        let mut dims = vec![ids.len()];
        dims.extend(shape);
        Ok((Tensor::new(dims, data)?, labels))
    }
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("data")
}

/// Load or generate the dataset and preprocess every record. With `regenerate`
/// false an existing synthetic set under `<output.dir>/data` is reused.
pub fn prepare_data(cfg: &ExperimentConfig, regenerate: bool) -> Result<PreparedData> {
    let manifest = match &cfg.data {
        DataSource::Manifest { csv, image_dir } => {
            let dir = image_dir
                .clone()
                .unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
            load_manifest(csv, &dir)?
        }
        DataSource::Synthetic {
            n,
            imbalance,
            subgroups,
            image_size,
            test_fraction,
        } => {
            let dir = data_dir(cfg);
            let csv = dir.join("metadata.csv");
            if !regenerate && csv.exists() {
                load_manifest(&csv, &dir)?
            } else {
                let synth = SynthConfig {
                    seed: seed_streams(cfg.seed).seed_u64(Stream::Synth, 0),
                    n: *n,
                    classes: cfg.arch.classes,
                    imbalance: *imbalance,
                    subgroups: *subgroups,
                    image_size: *image_size,
                    test_fraction: *test_fraction,
                };
                synth_generate(&synth, &dir)?
            }
        }
    };
    if let Some(r) = manifest.records.iter().find(|r| r.label >= cfg.arch.classes) {
        return Err(Error::Ingestion(format!(
            "record {} has label {} but the model has {} classes",
            r.image_path, r.label, cfg.arch.classes
        )));
    }
    if let Some(r) = manifest.records.iter().find(|r| r.image.shape()[0] != cfg.arch.input_channels) {
        return Err(Error::Ingestion(format!(
            "{} has {} channels, model.input_channels is {}",
            r.image_path,
            r.image.shape()[0],
            cfg.arch.input_channels
        )));
    }
    let train = manifest.split_indices(Split::Train);
    let test = manifest.split_indices(Split::Test);
    if test.is_empty() {
        return Err(Error::Ingestion("dataset has no test records".into()));
    }
    let normalization = manifest.normalization(cfg.arch.input_size)?;
    let inputs = manifest
        .records
        .iter()
        .map(|r| preprocess(&r.image, cfg.arch.input_size, &normalization))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData {
        manifest,
        normalization,
        train,
        test,
        inputs,
    })
}

fn predict_records(net: &Network, data: &PreparedData, ids: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_BATCH) {
        let (x, _) = data.batch::<rand::rngs::mock::StepRng>(chunk, None)?;
        out.extend(net.predict(x)?);
    }
    Ok(out)
}

fn accuracy_of(data: &PreparedData, ids: &[usize], preds: &[usize]) -> Hundredths {
    let hits = ids
        .iter()
        .zip(preds)
        .filter(|(&i, &p)| data.manifest.records[i].label == p)
        .count();
    Hundredths::ratio(hits as u64, ids.len() as u64).unwrap_or(Hundredths(0))
}

/// One level of training: a fresh optimizer, `epochs · ceil(train / batch)`
/// steps, and per-epoch mean loss.
fn train_level(
    net: &mut Network,
    data: &PreparedData,
    cfg: &ExperimentConfig,
    streams: &SeedStreams,
    level: usize,
    obs: &mut dyn Observer,
) -> Result<(Vec<f64>, usize, AdamState)> {
    let mut opt = AdamState::new(cfg.optimizer, net.params());
    let items = data.train.iter().map(|&i| (i, data.manifest.records[i].label));
    let mut sampler = BalancedSampler::new(
        items,
        cfg.arch.classes,
        cfg.batch_size,
        cfg.sampling,
        streams.rng(Stream::Sampler, level),
    )?;
    let mut aug = streams.rng(Stream::Augmentation, level);
    let mut drop = streams.rng(Stream::Dropout, level);
    let per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let mut curve = Vec::with_capacity(cfg.schedule.epochs_per_round);
    let mut step = 0;
    obs.level_started(level, net);
    for epoch in 0..cfg.schedule.epochs_per_round {
        let mut sum = 0f64;
        for _ in 0..per_epoch {
            let ids = sampler.next_batch();
            let (x, y) = data.batch(&ids, Some((cfg.hflip_p, &mut aug)))?;
            let mut fwd = net.forward(x, Mode::Train, &mut drop)?;
            let loss = fwd.graph.softmax_cross_entropy(fwd.logits, &y)?;
            let value = fwd.graph.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Invariant(format!(
                    "non-finite loss {value} at epoch {epoch}, step {}",
                    step + 1
                )));
            }
            net.backward(&fwd, loss)?;
            adam_step(net.params_mut(), &mut opt)?;
            net.zero_grads();
            sum += value as f64;
            step += 1;
            obs.step_finished(level, step, net);
        }
        curve.push(sum / per_epoch as f64);
    }
    if let Some(p) = net.params().iter().find(|p| !p.value.all_finite()) {
        return Err(Error::Invariant(format!("{} holds non-finite values", p.name)));
    }
    Ok((curve, step, opt))
}

struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> Result<OutputLock> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutputLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run; delete {} if that run is gone",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn read_timings(dir: &Path) -> BTreeMap<String, f64> {
    fs::read_to_string(dir.join(TIMINGS))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default()
}

fn fresh_network(cfg: &ExperimentConfig) -> Result<Network> {
    let mut rng = seed_streams(cfg.seed).rng(Stream::Init, 0);
    Network::build(&cfg.arch, &mut rng)
}

/// Run every level from `start`, flushing the ledger, checkpoint and reports
/// after each one.
fn continue_run(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    net: &mut Network,
    ledger: &mut RunLedger,
    opts: RunOptions,
    obs: &mut dyn Observer,
) -> Result<()> {
    let streams = seed_streams(cfg.seed);
    let dir = &cfg.output_dir;
    let mut timings = read_timings(dir);
    for level in ledger.levels.len()..cfg.schedule.rounds {
        let started = Instant::now();
        let (record, opt) = run_level(cfg, data, net, &streams, level, obs).map_err(|e| Error::Run {
            level,
            source: Box::new(e),
        })?;
        let mut table = net.to_table();
        opt.append_to(&mut table, net.params());
        write_atomic(&dir.join(&record.checkpoint), &table.encode())?;
        obs.level_finished(&record, net);
        ledger.levels.push(record);
        ledger.complete = ledger.levels.len() == cfg.schedule.rounds;
        ledger.write(&dir.join(LEDGER))?;
        write_reports(ledger, dir)?;
        timings.insert(format!("L{level}"), started.elapsed().as_secs_f64());
        write_atomic(&dir.join(TIMINGS), (serde_json::to_string_pretty(&timings)? + "\n").as_bytes())?;
        if opts.stop_after == Some(level) {
            break;
        }
    }
    Ok(())
}

fn run_level(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    net: &mut Network,
    streams: &SeedStreams,
    level: usize,
    obs: &mut dyn Observer,
) -> Result<(LevelRecord, AdamState)> {
    let target = cfg.schedule.target(level);
    if level == 0 {
        net.set_freeze_policy(FreezePolicy::L0);
    } else {
        net.set_freeze_policy(FreezePolicy::Full);
        prune_to(net, target, level)?;
        rewind(net)?;
    }
    let (train_loss, steps, opt) = train_level(net, data, cfg, streams, level, obs)?;
    if let Some(p) = net.params().iter().find(|p| !p.masked_positions_zero()) {
        return Err(Error::Invariant(format!("{} has non-zero weights under its mask", p.name)));
    }
    let ticket = TicketState::capture(net.params(), level);
    let sparsity = ticket.masked as f64 / ticket.total as f64;
    if (sparsity - target).abs() > 1.0 / ticket.total as f64 {
        return Err(Error::Invariant(format!(
            "sparsity {sparsity} is off target {target} by more than 1/{}",
            ticket.total
        )));
    }

    let train_preds = predict_records(net, data, &data.train)?;
    let test_preds = predict_records(net, data, &data.test)?;
    let mut log = PredictionLog::new();
    log.extend(data.test.iter().zip(&test_preds).enumerate().map(|(i, (&r, &pred))| Prediction {
        sample: i,
        level,
        label: data.manifest.records[r].label,
        pred,
    }));
    let meta: Vec<_> = data.test.iter().map(|&r| data.manifest.demographics(r)).collect();
    let report = MetricsReport::from_log(&log, &meta, cfg.arch.classes)?;
    let subgroups = report
        .subgroups
        .rows
        .iter()
        .map(|(g, cells)| (g.label().to_string(), cells[0]))
        .collect();
    let record = LevelRecord {
        level,
        target,
        sparsity,
        masked: ticket.masked,
        steps,
        train_loss,
        train_accuracy: accuracy_of(data, &data.train, &train_preds),
        test_accuracy: report.levels[0].accuracy,
        subgroups,
        checkpoint: format!("level_{level}.tfck"),
        predictions: test_preds,
    };
    Ok((record, opt))
}

fn new_ledger(cfg: &ExperimentConfig, data: &PreparedData, net: &Network) -> RunLedger {
    RunLedger {
        config: cfg.to_map(),
        config_hash: cfg.hash(),
        rounds: cfg.schedule.rounds,
        classes: cfg.arch.classes,
        prunable: net.prunable_count(),
        normalization: data.normalization.clone(),
        eval_set: data
            .test
            .iter()
            .map(|&r| {
                let rec = &data.manifest.records[r];
                EvalSample {
                    record: r,
                    label: rec.label,
                    age: rec.age,
                    sex: rec.sex,
                }
            })
            .collect(),
        levels: Vec::new(),
        complete: false,
    }
}

pub fn run_lth(cfg: &ExperimentConfig) -> Result<RunLedger> {
    run_lth_with(cfg, RunOptions::default(), &mut NoObserver)
}

/// Full L0..L{rounds-1} loop into a fresh output directory.
pub fn run_lth_with(cfg: &ExperimentConfig, opts: RunOptions, obs: &mut dyn Observer) -> Result<RunLedger> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    let _lock = OutputLock::acquire(dir)?;
    if dir.join(LEDGER).exists() {
        return Err(Error::Config(format!(
            "{} already holds a run; use resume or pick another output directory",
            dir.display()
        )));
    }
    let _ = fs::remove_file(dir.join(TIMINGS));
    let data = prepare_data(cfg, true)?;
    let mut net = fresh_network(cfg)?;
    net.snapshot_init()?;
    let mut ledger = new_ledger(cfg, &data, &net);
    fs::write(dir.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(dir.join("config.txt"), e))?;
    continue_run(cfg, &data, &mut net, &mut ledger, opts, obs)?;
    Ok(ledger)
}

/// Continue an interrupted run in `cfg.output_dir`. The recorded config must
/// match `cfg` apart from the output location; a finished run is returned
/// unchanged.
pub fn resume(cfg: &ExperimentConfig, opts: RunOptions, obs: &mut dyn Observer) -> Result<RunLedger> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    let _lock = OutputLock::acquire(dir)?;
    let mut ledger = RunLedger::read(&dir.join(LEDGER))?;
    let drift = config_drift(&ledger.config, &cfg.to_map());
    if !drift.is_empty() {
        return Err(Error::ConfigDrift(drift));
    }
    if ledger.complete {
        return Ok(ledger);
    }
    let data = prepare_data(cfg, false)?;
    if new_ledger(cfg, &data, &fresh_network(cfg)?).eval_set != ledger.eval_set {
        return Err(Error::Ingestion(format!(
            "test split under {} no longer matches the ledger",
            data.manifest.image_dir.display()
        )));
    }
    let mut net = fresh_network(cfg)?;
    match ledger.levels.last() {
        Some(last) => net.load_weights(&dir.join(&last.checkpoint))?,
        None => net.snapshot_init()?,
    }
    continue_run(cfg, &data, &mut net, &mut ledger, opts, obs)?;
    Ok(ledger)
}

/// Evaluate a checkpoint on the test split, reporting it as `level`.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, level: usize) -> Result<MetricsReport> {
    let data = prepare_data(cfg, false)?;
    let mut net = fresh_network(cfg)?;
    net.load_weights(checkpoint)?;
    let preds = predict_records(&net, &data, &data.test)?;
    let mut log = PredictionLog::new();
    log.extend(data.test.iter().zip(&preds).enumerate().map(|(i, (&r, &pred))| Prediction {
        sample: i,
        level,
        label: data.manifest.records[r].label,
        pred,
    }));
    let meta: Vec<_> = data.test.iter().map(|&r| data.manifest.demographics(r)).collect();
    MetricsReport::from_log(&log, &meta, cfg.arch.classes)
}
