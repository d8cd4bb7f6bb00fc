use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use tcpl::corpus::{
    generate_synthetic_corpus, load_eval_split, one_shot_split, read_tracklets, save_eval_split, save_feature_corpus,
};
use tcpl::evaluation::{rank_split, write_ranking_dump};
use tcpl::{run_tcpl, Checkpoint, Corpus, EvalReport, EvalSplit, LossVariant, Model, StepMetrics};

use crate::config::{CorpusSource, ExperimentConfig};
use crate::error::{CliError, ConfigError};

/// Column order of `metrics.csv`.
pub const METRICS_COLUMNS: [&str; 15] = [
    "step",
    "t",
    "n_t",
    "churn",
    "label_acc_Dp",
    "label_acc_Du",
    "ce_labeled",
    "ce_pseudo",
    "intra",
    "inter",
    "total",
    "rank1",
    "rank5",
    "rank20",
    "map",
];

/// Column order of `sweep.csv`.
pub const SWEEP_COLUMNS: [&str; 18] = [
    "kind",
    "axis",
    "value",
    "seed",
    "status",
    "runs",
    "best_step",
    "rank1",
    "rank1_std",
    "rank5",
    "rank5_std",
    "rank20",
    "rank20_std",
    "map",
    "map_std",
    "label_acc",
    "label_acc_std",
    "error",
];

const NA: &str = "NA";

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Training corpus with its labeled split, plus the evaluation split when one exists.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Corpus, Option<EvalSplit>), CliError> {
    let seed = cfg.training.seed;
    match &cfg.corpus {
        CorpusSource::Synthetic(g) => {
            let syn = generate_synthetic_corpus(g, cfg.corpus_seed)?;
            Ok((one_shot_split(syn.train, cfg.split, seed)?, Some(syn.eval)))
        }
        CorpusSource::Files { corpus, eval_split } => {
            let file = File::open(corpus).map_err(|e| CliError::io(corpus, e))?;
            let train = one_shot_split(read_tracklets(file)?, cfg.split, seed)?;
            let eval = match eval_split {
                Some(path) => Some(load_eval_split(path)?),
                None => None,
            };
            Ok((train, eval))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub identities: usize,
    pub cameras: usize,
    pub tracklets: usize,
    pub feature_dim: usize,
    pub corpus_path: PathBuf,
    pub split_path: PathBuf,
}

/// Writes `corpus.jsonl` and `split.jsonl` for a synthetic config.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<GenerateSummary, CliError> {
    let CorpusSource::Synthetic(g) = &cfg.corpus else {
        return Err(ConfigError::new("corpus", "generate needs a `synthetic` corpus").into());
    };
    let out = cfg.output_dir()?;
    create_dir(out)?;
    let syn = generate_synthetic_corpus(g, cfg.corpus_seed)?;
    let corpus_path = out.join("corpus.jsonl");
    let split_path = out.join("split.jsonl");
    save_feature_corpus(&corpus_path, &syn.train)?;
    save_eval_split(&split_path, &syn.eval)?;
    write_json(&out.join("config.json"), cfg)?;
    let mut ids: Vec<_> = syn.train.iter().filter_map(|t| t.identity).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut cams: Vec<_> = syn.train.iter().map(|t| t.camera).collect();
    cams.sort_unstable();
    cams.dedup();
    Ok(GenerateSummary {
        identities: ids.len(),
        cameras: cams.len(),
        tracklets: syn.train.len(),
        feature_dim: g.feature_dim,
        corpus_path,
        split_path,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    artifact: &'static str,
    version: &'static str,
    corpus_seed: u64,
    training_seed: u64,
    variant: LossVariant,
    config: &'a ExperimentConfig,
}

/// Final numbers of one training run, also written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_step: usize,
    /// Evaluation of the best checkpoint.
    pub best_eval: Option<EvalReport>,
    /// `label_acc_Dp` of the last step.
    pub final_label_acc: Option<f64>,
    pub final_label_acc_all: Option<f64>,
}

fn metrics_row(m: &StepMetrics) -> Vec<String> {
    let l = &m.losses;
    let e = m.eval.as_ref();
    vec![
        m.step.to_string(),
        m.t.to_string(),
        m.n_t.to_string(),
        m.churn.to_string(),
        num(m.label_acc_selected),
        num(m.label_acc_unlabeled),
        l.ce_labeled.to_string(),
        l.ce_pseudo.to_string(),
        l.intra.to_string(),
        l.inter.to_string(),
        l.total.to_string(),
        num(e.map(|r| r.rank1)),
        num(e.map(|r| r.rank5)),
        num(e.map(|r| r.rank20)),
        num(e.map(|r| r.map)),
    ]
}

/// Runs the schedule and writes `config.json`, `manifest.json`, `metrics.csv`,
/// `checkpoints/step_N.json`, `best.json`, `final.json` and `report.json`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary, CliError> {
    let out = cfg.output_dir()?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_json(&out.join("config.json"), cfg)?;
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            artifact: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            corpus_seed: cfg.corpus_seed,
            training_seed: cfg.training.seed,
            variant: cfg.training.variant,
            config: cfg,
        },
    )?;
    let (corpus, eval) = load_data(cfg)?;

    let metrics_path = out.join("metrics.csv");
    let mut csv = csv_writer(&metrics_path)?;
    csv.write_record(METRICS_COLUMNS)?;
    csv.flush().map_err(|e| CliError::io(&metrics_path, e))?;
    let mut failure: Option<CliError> = None;
    let run = run_tcpl::<f64>(&corpus, eval.as_ref(), &cfg.training, |m, model| {
        if failure.is_some() {
            return;
        }
        log::info!("step {} (t = {}, n_t = {}): total {:.4}", m.step, m.t, m.n_t, m.losses.total);
        let written = csv
            .write_record(metrics_row(m))
            .map_err(CliError::from)
            .and_then(|_| csv.flush().map_err(|e| CliError::io(&metrics_path, e)))
            .and_then(|_| save_model(model, &ckpt_dir.join(format!("step_{}.json", m.step))));
        failure = written.err();
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    save_model(&run.best_model, &out.join("best.json"))?;
    save_model(&run.final_model, &out.join("final.json"))?;
    let summary = TrainSummary {
        steps: run.steps.len(),
        best_step: run.best_step,
        best_eval: run.best().eval,
        final_label_acc: run.last().label_acc_selected,
        final_label_acc_all: run.last().label_acc_unlabeled,
    };
    write_json(&out.join("report.json"), &summary)?;
    Ok(summary)
}

fn save_model(model: &Model<f64>, path: &Path) -> Result<(), CliError> {
    Checkpoint { model: model.clone(), rng: None }.save(path)?;
    Ok(())
}

/// Scores a checkpoint on the config's evaluation split; optionally dumps every ranking.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, dump: Option<&Path>) -> Result<EvalReport, CliError> {
    let split = match &cfg.corpus {
        CorpusSource::Synthetic(g) => generate_synthetic_corpus(g, cfg.corpus_seed)?.eval,
        CorpusSource::Files { eval_split: Some(path), .. } => load_eval_split(path)?,
        CorpusSource::Files { eval_split: None, .. } => {
            return Err(ConfigError::new("corpus.files.eval_split", "evaluate needs an evaluation split").into())
        }
    };
    let model = Checkpoint::<f64>::load(checkpoint)?.model;
    let rankings = rank_split(&model, &split, cfg.training.cross_camera_filter)?;
    if let Some(path) = dump {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        write_ranking_dump(BufWriter::new(file), &rankings).map_err(|e| CliError::io(path, e))?;
    }
    Ok(EvalReport::from_rankings(&rankings)?)
}

/// Hyperparameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Enlarging factor.
    P,
    Lambda,
    /// Negative rank range; runs the inter-only variant.
    R,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "p" => Ok(SweepAxis::P),
            "lambda" => Ok(SweepAxis::Lambda),
            "r" => Ok(SweepAxis::R),
            other => Err(format!("unknown axis `{other}` (expected p, lambda or r)")),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::P => "p",
            SweepAxis::Lambda => "lambda",
            SweepAxis::R => "r",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub value: f64,
    pub seed: u64,
    pub dir: PathBuf,
    pub outcome: Result<TrainSummary, String>,
}

/// Mean and sample standard deviation over the successful runs of one axis value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Stat { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAggregate {
    pub value: f64,
    pub succeeded: usize,
    pub failed: usize,
    pub rank1: Option<Stat>,
    pub rank5: Option<Stat>,
    pub rank20: Option<Stat>,
    pub map: Option<Stat>,
    pub label_acc: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub runs: Vec<SweepRun>,
    pub aggregates: Vec<SweepAggregate>,
    pub csv_path: PathBuf,
}

/// Thread budget from `TCPL_THREADS`, defaulting to the available cores.
pub fn thread_budget() -> Result<usize, ConfigError> {
    match std::env::var("TCPL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(ConfigError::new("TCPL_THREADS", format!("`{v}` is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn sweep_config(base: &ExperimentConfig, axis: SweepAxis, value: f64, seed: u64, dir: PathBuf) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = base.clone();
    match axis {
        SweepAxis::P => cfg.training.enlarging_factor = value,
        SweepAxis::Lambda => cfg.training.lambda = value,
        SweepAxis::R => {
            if !(value >= 1.0 && value.fract() == 0.0 && value <= usize::MAX as f64) {
                return Err(ConfigError::new("sweep.values", format!("r = {value} must be a positive integer")));
            }
            cfg.training.rank = value as usize;
            cfg.training.variant = LossVariant::InterOnly;
        }
    }
    cfg.corpus_seed = seed;
    cfg.training.seed = seed;
    cfg.output_dir = Some(dir);
    cfg.validate()?;
    Ok(cfg)
}

/// Trains every `(value, seed)` pair in its own directory under `runs/`, then writes `sweep.csv`.
///
/// Runs are spread over `threads` workers; a failing run is recorded and the rest continue.
pub fn cmd_sweep(base: &ExperimentConfig, spec: &SweepSpec, threads: usize) -> Result<SweepSummary, CliError> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(ConfigError::new("sweep", "needs at least one value and one seed").into());
    }
    let out = base.output_dir()?.to_path_buf();
    let mut jobs = Vec::new();
    for &value in &spec.values {
        for &seed in &spec.seeds {
            let dir = out.join("runs").join(format!("{}_{value}", spec.axis.name())).join(format!("seed_{seed}"));
            jobs.push((value, seed, sweep_config(base, spec.axis, value, seed, dir)?));
        }
    }
    create_dir(&out)?;

    let slots: Vec<Mutex<Option<Result<TrainSummary, String>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((value, seed, cfg)) = jobs.get(i) else { break };
                let outcome = cmd_train(cfg).map_err(|e| e.to_string());
                match &outcome {
                    Ok(_) => log::info!("{} = {value}, seed {seed}: done", spec.axis.name()),
                    Err(e) => log::warn!("{} = {value}, seed {seed}: {e}", spec.axis.name()),
                }
                *slots[i].lock().expect("no poisoned slot") = Some(outcome);
            });
        }
    });

    let runs: Vec<SweepRun> = jobs
        .into_iter()
        .zip(slots)
        .map(|((value, seed, cfg), slot)| SweepRun {
            value,
            seed,
            dir: cfg.output_dir.expect("set by sweep_config"),
            outcome: slot.into_inner().expect("no poisoned slot").expect("every job ran"),
        })
        .collect();
    let aggregates = spec
        .values
        .iter()
        .map(|&value| aggregate(value, runs.iter().filter(|r| r.value.to_bits() == value.to_bits())))
        .collect::<Vec<_>>();

    let csv_path = out.join("sweep.csv");
    let mut w = csv_writer(&csv_path)?;
    w.write_record(SWEEP_COLUMNS)?;
    let axis = spec.axis.name();
    for r in &runs {
        let mut row = vec!["run".to_string(), axis.to_string(), r.value.to_string(), r.seed.to_string()];
        match &r.outcome {
            Ok(s) => {
                let e = s.best_eval;
                row.extend(["ok".to_string(), "1".to_string(), s.best_step.to_string()]);
                for v in [e.map(|e| e.rank1), e.map(|e| e.rank5), e.map(|e| e.rank20), e.map(|e| e.map), s.final_label_acc] {
                    row.extend([num(v), NA.to_string()]);
                }
                row.push(String::new());
            }
            Err(msg) => {
                row.extend(["failed".to_string(), "0".to_string()]);
                row.extend(std::iter::repeat_n(NA.to_string(), 11));
                row.push(msg.clone());
            }
        }
        w.write_record(&row)?;
    }
    for a in &aggregates {
        let status = match (a.succeeded, a.failed) {
            (_, 0) => "ok",
            (0, _) => "failed",
            _ => "partial",
        };
        let mut row = vec![
            "aggregate".to_string(),
            axis.to_string(),
            a.value.to_string(),
            NA.to_string(),
            status.to_string(),
            a.succeeded.to_string(),
            NA.to_string(),
        ];
        for s in [a.rank1, a.rank5, a.rank20, a.map, a.label_acc] {
            row.extend([num(s.map(|s| s.mean)), num(s.and_then(|s| s.std))]);
        }
        row.push(String::new());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    Ok(SweepSummary { runs, aggregates, csv_path })
}

fn aggregate<'a>(value: f64, runs: impl Iterator<Item = &'a SweepRun>) -> SweepAggregate {
    let mut failed = 0;
    let mut ok = Vec::new();
    for r in runs {
        match &r.outcome {
            Ok(s) => ok.push(s),
            Err(_) => failed += 1,
        }
    }
    let stat = |f: &dyn Fn(&TrainSummary) -> Option<f64>| Stat::of(&ok.iter().filter_map(|s| f(s)).collect::<Vec<_>>());
    SweepAggregate {
        value,
        succeeded: ok.len(),
        failed,
        rank1: stat(&|s| s.best_eval.map(|e| e.rank1)),
        rank5: stat(&|s| s.best_eval.map(|e| e.rank5)),
        rank20: stat(&|s| s.best_eval.map(|e| e.rank20)),
        map: stat(&|s| s.best_eval.map(|e| e.map)),
        label_acc: stat(&|s| s.final_label_acc),
    }
}
