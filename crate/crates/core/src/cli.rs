//! The `metatransfer` command line: generate, train, evaluate, ablate and
//! weights-report over one output directory.
//!
//! Layout under `--out`:
//!
//! ```text
//! data/manifest.json          data/city_<id>_{transactions,communities}.csv
//! train/manifest.json         train/theta.mtck  train/wgn.mtck  train/weight_log.csv
//! results.csv                 ablation/results.csv
//! weights/summary.csv         weights/cities.csv
//! ```

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bench::{
    write_results, AblationSpec, Baseline, BenchError, EvalSettings, Experiment, ExperimentConfig, ModelSettings,
    ResultRow,
};
use crate::checkpoint::{self, write_atomic, CheckpointError};
use crate::meta::{mean_sd, read_weight_log, summarize_weight_log, write_weight_log, TrainError, TrainerConfig, Wgn};
use crate::model::{InputMask, ModelError};
use crate::synth::{load_csv, write_csv, Benchmark, BenchmarkSpec, CityDataset, PreparedBenchmark};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match &e {
            BenchError::Train(TrainError::NonFinite { .. })
            | BenchError::Train(TrainError::Model(ModelError::NonFinite(_)))
            | BenchError::Model(ModelError::NonFinite(_)) => CliError::Numerical(e.to_string()),
            BenchError::Train(TrainError::Config(_)) | BenchError::InvalidAblation(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Other(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "metatransfer", version, about = "Cross-city real estate appraisal with meta-transfer learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic benchmark as CSV files plus a manifest.
    Generate(CommonArgs),
    /// Meta-train on the source cities; writes checkpoints and the weight log.
    Train(CommonArgs),
    /// Adapt the trained model to the target city and score it.
    Evaluate(CommonArgs),
    /// Run the ablation list (or the full matrix) end to end.
    Ablate(CommonArgs),
    /// Summarize the instance weights of a training run.
    WeightsReport(CommonArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for both the benchmark and the trainer (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of target training transactions (overrides the config).
    #[arg(long)]
    pub target_train_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Adversarial,
    Aligned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub seed: u64,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_transactions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_transactions: Option<usize>,
}

impl BenchmarkSection {
    pub fn spec(&self) -> BenchmarkSpec {
        let mut spec = match self.preset {
            Preset::Adversarial => BenchmarkSpec::adversarial(self.seed),
            Preset::Aligned => BenchmarkSpec::aligned(self.seed),
        };
        if let Some(e) = self.epsilon_m {
            spec.epsilon_m = e;
        }
        if let Some(n) = self.source_transactions {
            for s in &mut spec.sources {
                s.n_transactions = n;
            }
        }
        if let Some(n) = self.target_transactions {
            spec.target.n_transactions = n;
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub target_train_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub benchmark: BenchmarkSection,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Extra rows for `evaluate`.
    #[serde(default)]
    pub baselines: Vec<Baseline>,
    /// Runs for `ablate`; absent means the full matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablations: Option<Vec<AblationSpec>>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.target_train_size == 0 {
            return Err(CliError::Config("target_train_size must be >= 1".into()));
        }
        let spec = self.benchmark.spec();
        if self.target_train_size >= spec.target.n_transactions {
            return Err(CliError::Config(format!(
                "target_train_size {} leaves no test events out of {}",
                self.target_train_size, spec.target.n_transactions
            )));
        }
        self.trainer.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    /// Apply command-line overrides.
    pub fn with_overrides(mut self, args: &CommonArgs) -> Result<Self, CliError> {
        if let Some(seed) = args.seed {
            self.benchmark.seed = seed;
            self.trainer.seed = seed;
        }
        if let Some(n) = args.target_train_size {
            self.target_train_size = n;
        }
        if let Some(out) = &args.out {
            self.out_dir = Some(out.clone());
        }
        self.validate()?;
        Ok(self)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            trainer: self.trainer.clone(),
            eval: self.eval.clone(),
        }
    }

    /// sha256 over the effective configuration (output directory aside) and
    /// the crate version.
    pub fn fingerprint(&self) -> String {
        let keyed = Self { out_dir: None, ..self.clone() };
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&keyed).expect("config serializes"));
        h.update(b"\n");
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        hex::encode(h.finalize())
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set out_dir".into()))
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

#[derive(Debug, Serialize, Deserialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DataManifest {
    fingerprint: String,
    version: String,
    benchmark_seed: u64,
    mechanism_sha256: String,
    benchmark: BenchmarkSpec,
    files: Vec<FileEntry>,
}

fn city_files(dir: &Path, city_id: u32) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("city_{city_id}_transactions.csv")),
        dir.join(format!("city_{city_id}_communities.csv")),
    )
}

fn mechanism_hash(bench: &Benchmark) -> String {
    let mechs: Vec<_> = bench
        .sources
        .iter()
        .chain(std::iter::once(&bench.target))
        .map(|c| (c.city_id, &c.ground_truth, c.base_price))
        .collect();
    hex::encode(Sha256::digest(serde_json::to_vec(&mechs).expect("mechanism serializes")))
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir()?;
    let dir = out.join("data");
    create_dir(&dir)?;
    let spec = cfg.benchmark.spec();
    let bench = spec.generate().map_err(|e| CliError::Config(e.to_string()))?;
    let mut files = Vec::new();
    for city in bench.sources.iter().chain(std::iter::once(&bench.target)) {
        let (t, c) = city_files(&dir, city.city_id);
        write_csv(city, &t, &c).map_err(|e| CliError::Other(e.to_string()))?;
        for p in [t, c] {
            files.push(FileEntry {
                path: p.file_name().expect("file name").to_string_lossy().into_owned(),
                sha256: sha256_file(&p)?,
            });
        }
    }
    let manifest = DataManifest {
        fingerprint: cfg.fingerprint(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        benchmark_seed: spec.seed,
        mechanism_sha256: mechanism_hash(&bench),
        benchmark: spec,
        files,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    info!("wrote {} cities to {}", bench.sources.len() + 1, dir.display());
    Ok(path)
}

/// Load the generated dataset, refusing files that do not match the config.
pub fn load_benchmark(cfg: &RunConfig) -> Result<Benchmark, CliError> {
    let dir = cfg.out_dir()?.join("data");
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(CliError::Missing(format!("{} (run `generate` first)", mpath.display())));
    }
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: DataManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", mpath.display())))?;
    let spec = cfg.benchmark.spec();
    if manifest.benchmark != spec {
        return Err(CliError::Config(format!(
            "dataset in {} was generated from a different benchmark section; rerun `generate`",
            dir.display()
        )));
    }
    for f in &manifest.files {
        let p = dir.join(&f.path);
        if !p.exists() {
            return Err(CliError::Missing(p.display().to_string()));
        }
        if sha256_file(&p)? != f.sha256 {
            return Err(CliError::Config(format!("{} changed since it was generated", p.display())));
        }
    }
    let load = |city_id: u32| -> Result<CityDataset, CliError> {
        let (t, c) = city_files(&dir, city_id);
        load_csv(&t, &c).map_err(|e| CliError::Other(e.to_string()))
    };
    let sources = spec.sources.iter().map(|c| load(c.city_id)).collect::<Result<Vec<_>, _>>()?;
    let target = load(spec.target.city_id)?;
    Ok(spec.assemble(sources, target))
}

fn prepare(cfg: &RunConfig) -> Result<PreparedBenchmark, CliError> {
    load_benchmark(cfg)?
        .prepare(cfg.target_train_size)
        .map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Debug, Serialize)]
struct TrainManifest<'a> {
    fingerprint: String,
    version: &'static str,
    config: &'a RunConfig,
    iterations: usize,
    skipped_episodes: usize,
    hyper_skipped: usize,
    files: Vec<FileEntry>,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let bench = prepare(cfg)?;
    let exp_cfg = cfg.experiment();
    let fp = cfg.fingerprint();
    let mut ex = Experiment::new(&bench, &exp_cfg);
    ex.fingerprint = fp.clone();
    let outcome = ex.pretrain(&AblationSpec::default())?;

    let dir = cfg.out_dir()?.join("train");
    create_dir(&dir)?;
    let save = |name: &str, p: &crate::tensor::ParamStore| -> Result<PathBuf, CliError> {
        let path = dir.join(name);
        checkpoint::save_with_note(p, &fp, &path).map_err(|e| CliError::Other(e.to_string()))?;
        Ok(path)
    };
    let mut written = vec![save("theta.mtck", &outcome.params)?];
    if let Some(w) = &outcome.wgn_params {
        written.push(save("wgn.mtck", w)?);
    }
    let log_path = dir.join("weight_log.csv");
    let mut buf = Vec::new();
    write_weight_log(&outcome.weight_log, Some(&fp), &mut buf).map_err(|e| CliError::Other(e.to_string()))?;
    write_atomic(&log_path, &buf).map_err(io_err(&log_path))?;
    written.push(log_path);

    let files = written
        .iter()
        .map(|p| {
            Ok(FileEntry {
                path: p.file_name().expect("file name").to_string_lossy().into_owned(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let manifest = TrainManifest {
        fingerprint: fp,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        iterations: cfg.trainer.total_iterations(),
        skipped_episodes: outcome.skipped_episodes,
        hyper_skipped: outcome.hyper_skipped,
        files,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    info!(
        "trained {} iterations ({} episodes skipped); checkpoint in {}",
        manifest.iterations,
        manifest.skipped_episodes,
        dir.display()
    );
    Ok(dir.join("theta.mtck"))
}

fn load_checkpoint(path: &Path, fingerprint: &str) -> Result<crate::tensor::ParamStore, CliError> {
    if !path.exists() {
        return Err(CliError::Missing(format!("{} (run `train` first)", path.display())));
    }
    let (p, note) = checkpoint::load_with_note(path).map_err(|e| match e {
        CheckpointError::Io(io) => CliError::Other(format!("{}: {io}", path.display())),
        other => CliError::Other(format!("{}: {other}", path.display())),
    })?;
    if note != fingerprint {
        warn!("{} was written under a different configuration", path.display());
    }
    Ok(p)
}

fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_results(rows, &mut buf).map_err(|e| CliError::Other(e.to_string()))?;
    write_atomic(path, &buf).map_err(io_err(path))
}

fn check_finite(row: &ResultRow) -> Result<(), CliError> {
    if [row.mae, row.mape, row.rmse].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{} {} produced non-finite metrics", row.model, row.variant)))
    }
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<ResultRow>, CliError> {
    let fp = cfg.fingerprint();
    let theta = load_checkpoint(&cfg.out_dir()?.join("train").join("theta.mtck"), &fp)?;
    let bench = prepare(cfg)?;
    let exp_cfg = cfg.experiment();
    let mut ex = Experiment::new(&bench, &exp_cfg);
    ex.fingerprint = fp;
    let mut rows = vec![ex.finish_transfer(&AblationSpec::default(), theta)?.row];
    for &b in &cfg.baselines {
        rows.push(ex.run_baseline(b)?.row);
    }
    let path = cfg.out_dir()?.join("results.csv");
    write_rows(&path, &rows)?;
    for r in &rows {
        info!("{:<12} mae {:.4} mape {:.2}% rmse {:.4}", r.model, r.mae, r.mape, r.rmse);
        check_finite(r)?;
    }
    Ok(rows)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<ResultRow>, CliError> {
    let bench = prepare(cfg)?;
    let exp_cfg = cfg.experiment();
    let mut ex = Experiment::new(&bench, &exp_cfg);
    ex.fingerprint = cfg.fingerprint();
    let specs = cfg.ablations.clone().unwrap_or_else(|| AblationSpec::matrix(&bench.source_ids()));
    for s in &specs {
        s.validate(&bench.source_ids())?;
    }
    let mut rows = Vec::with_capacity(specs.len());
    for s in &specs {
        let run = ex.run_ablation(s)?;
        info!(
            "{} mask={} replace={} drop={:?}: mae {:.4}",
            s.variant, s.mask, s.replace, s.drop_source, run.row.mae
        );
        rows.push(run.row);
    }
    let dir = cfg.out_dir()?.join("ablation");
    create_dir(&dir)?;
    write_rows(&dir.join("results.csv"), &rows)?;
    for r in &rows {
        check_finite(r)?;
    }
    Ok(rows)
}

/// Per-iteration summary rows and per-city mean weight.
pub struct WeightsReport {
    pub iterations: Vec<(usize, f64, f64)>,
    pub cities: Vec<(u32, f64)>,
}

pub fn cmd_weights_report(cfg: &RunConfig) -> Result<WeightsReport, CliError> {
    let fp = cfg.fingerprint();
    let train = cfg.out_dir()?.join("train");
    let log_path = train.join("weight_log.csv");
    if !log_path.exists() {
        return Err(CliError::Missing(format!("{} (run `train` first)", log_path.display())));
    }
    let wgn_path = train.join("wgn.mtck");
    if !wgn_path.exists() {
        return Err(CliError::Missing(format!(
            "{} (training ran without reweighting, or `train` has not run)",
            wgn_path.display()
        )));
    }
    let f = fs::File::open(&log_path).map_err(io_err(&log_path))?;
    let log = read_weight_log(f).map_err(|e| CliError::Other(format!("{}: {e}", log_path.display())))?;
    let omega = load_checkpoint(&wgn_path, &fp)?;

    let bench = prepare(cfg)?;
    let exp_cfg = cfg.experiment();
    let ex = Experiment::new(&bench, &exp_cfg);
    let sources = ex.sources(None);
    let wgn = Wgn::for_sources(&sources, cfg.trainer.wgn_hidden, InputMask::NONE);
    let mut cities = Vec::with_capacity(sources.len());
    for (pos, s) in sources.iter().enumerate() {
        let inputs = wgn
            .inputs(pos, s.graph, s.events, InputMask::NONE)
            .map_err(|e| CliError::Other(e.to_string()))?;
        let lam = wgn.weights(&omega, &inputs).map_err(|e| CliError::Other(e.to_string()))?;
        cities.push((s.city_id, mean_sd(&lam).0));
    }
    let report = WeightsReport { iterations: summarize_weight_log(&log), cities };

    let dir = cfg.out_dir()?.join("weights");
    create_dir(&dir)?;
    let csv_err = |e: csv::Error| CliError::Other(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "mean_lambda", "sd_lambda", "fingerprint"]).map_err(csv_err)?;
    for (it, m, sd) in &report.iterations {
        w.write_record([it.to_string(), m.to_string(), sd.to_string(), fp.clone()]).map_err(csv_err)?;
    }
    let summary = dir.join("summary.csv");
    write_atomic(&summary, &w.into_inner().map_err(|e| CliError::Other(e.to_string()))?).map_err(io_err(&summary))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["city_id", "mean_lambda", "fingerprint"]).map_err(csv_err)?;
    for (id, m) in &report.cities {
        w.write_record([id.to_string(), m.to_string(), fp.clone()]).map_err(csv_err)?;
    }
    let by_city = dir.join("cities.csv");
    write_atomic(&by_city, &w.into_inner().map_err(|e| CliError::Other(e.to_string()))?).map_err(io_err(&by_city))?;

    for (id, m) in &report.cities {
        println!("city {id}: mean weight {m:.4}");
    }
    if let Some((it, m, sd)) = report.iterations.last() {
        println!("iteration {it}: mean {m:.4} sd {sd:.4} ({} iterations logged)", report.iterations.len());
    }
    Ok(report)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let (args, cmd): (&CommonArgs, fn(&RunConfig) -> Result<(), CliError>) = match &cli.command {
        Command::Generate(a) => (a, |c| cmd_generate(c).map(drop)),
        Command::Train(a) => (a, |c| cmd_train(c).map(drop)),
        Command::Evaluate(a) => (a, |c| cmd_evaluate(c).map(drop)),
        Command::Ablate(a) => (a, |c| cmd_ablate(c).map(drop)),
        Command::WeightsReport(a) => (a, |c| cmd_weights_report(c).map(drop)),
    };
    let cfg = RunConfig::load(&args.config)?.with_overrides(args)?;
    cmd(&cfg)
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_key_is_named() {
        let err = RunConfig::parse("target_train_size = 20\n[benchmark]\npreset = \"aligned\"\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("target_train_size = 20\nbogus = 1\n[benchmark]\nseed = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = RunConfig::parse("target_train_size = 20\n[benchmark]\nseed = 1\n[trainer]\nalpah = 0.1\n")
            .unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
    }

    #[test]
    fn fingerprint_tracks_overrides() {
        let cfg = RunConfig::parse("target_train_size = 20\n[benchmark]\nseed = 1\n").unwrap();
        let args = CommonArgs { config: "x".into(), out: None, seed: Some(9), target_train_size: None };
        let over = cfg.clone().with_overrides(&args).unwrap();
        assert_eq!(over.trainer.seed, 9);
        assert_ne!(cfg.fingerprint(), over.fingerprint());
        assert_eq!(cfg.fingerprint(), cfg.clone().fingerprint());
    }

    #[test]
    fn train_size_must_leave_test_events() {
        let err = RunConfig::parse("target_train_size = 1500\n[benchmark]\nseed = 1\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
