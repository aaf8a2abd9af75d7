//! Metrics, baselines, and the ablation matrix on prepared benchmarks.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dnn::{Dnn, DnnConfig};
use crate::geo::{TemporalEventGraph, TransactionEvent};
use crate::meta::{adapt_to_target, meta_train, AdaptConfig, MetaOutcome, OptimizerKind, SourceCity, TargetData, TrainError, TrainerConfig, WeightLogRow};
use crate::model::{reinit_groups, InputMask, Learner, ModelError, Split};
use crate::mttgn::{Mttgn, MttgnConfig, GROUP_FI, GROUP_HYPER, GROUP_TGN};
use crate::synth::{ridge_fit, PreparedBenchmark, PreparedCity};
use crate::tensor::ParamStore;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{what}: {a} true values but {b} predictions")]
    LengthMismatch { what: &'static str, a: usize, b: usize },
    #[error("metrics need at least one value")]
    Empty,
    #[error("true value {value} at index {index} is not positive")]
    NonPositiveTarget { index: usize, value: f64 },
    #[error("ridge normal equations are singular; use l2 > 0")]
    SingularRidge,
    #[error("baseline needs a nonempty training set")]
    EmptyTraining,
    #[error("invalid ablation: {0}")]
    InvalidAblation(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub mae: f64,
    pub mape_percent: f64,
    pub rmse: f64,
    pub n_test: usize,
    pub fingerprint: String,
}

/// MAE, MAPE (percent) and RMSE. Every true value must be positive.
pub fn metrics(y_true: &[f64], y_pred: &[f64]) -> Result<MetricsReport, BenchError> {
    if y_true.len() != y_pred.len() {
        return Err(BenchError::LengthMismatch { what: "metrics", a: y_true.len(), b: y_pred.len() });
    }
    if y_true.is_empty() {
        return Err(BenchError::Empty);
    }
    if let Some((index, &value)) = y_true.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
        return Err(BenchError::NonPositiveTarget { index, value });
    }
    let n = y_true.len() as f64;
    let (mut abs, mut pct, mut sq) = (0.0, 0.0, 0.0);
    for (y, p) in y_true.iter().zip(y_pred) {
        let e = (p - y).abs();
        abs += e;
        pct += e / y;
        sq += e * e;
    }
    Ok(MetricsReport {
        model: String::new(),
        mae: abs / n,
        mape_percent: 100.0 * pct / n,
        rmse: (sq / n).sqrt(),
        n_test: y_true.len(),
        fingerprint: String::new(),
    })
}

/// Mean price of earlier training sales in the same community, or the
/// global training mean for communities without one.
#[derive(Clone, Debug)]
pub struct HistoricalAverage {
    by_community: HashMap<u32, Vec<(i64, f64)>>,
    global_mean: f64,
}

impl HistoricalAverage {
    pub fn fit(train: &[TransactionEvent]) -> Result<Self, BenchError> {
        if train.is_empty() {
            return Err(BenchError::EmptyTraining);
        }
        let mut by_community: HashMap<u32, Vec<(i64, f64)>> = HashMap::new();
        for e in train {
            by_community.entry(e.community_id).or_default().push((e.time, e.unit_price));
        }
        for v in by_community.values_mut() {
            v.sort_by_key(|&(t, _)| t);
        }
        let global_mean = train.iter().map(|e| e.unit_price).sum::<f64>() / train.len() as f64;
        Ok(Self { by_community, global_mean })
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }

    pub fn predict(&self, community_id: u32, time: i64) -> f64 {
        let Some(hist) = self.by_community.get(&community_id) else {
            return self.global_mean;
        };
        let k = hist.partition_point(|&(t, _)| t < time);
        if k == 0 {
            return self.global_mean;
        }
        hist[..k].iter().map(|&(_, y)| y).sum::<f64>() / k as f64
    }
}

/// Convenience wrapper for one query.
pub fn ha_baseline(train: &[TransactionEvent], query: &TransactionEvent) -> Result<f64, BenchError> {
    Ok(HistoricalAverage::fit(train)?.predict(query.community_id, query.time))
}

/// Ridge regression on `[x ∥ z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ridge {
    pub intercept: f64,
    pub coefs: Vec<f64>,
}

fn ridge_features(graph: &TemporalEventGraph, e: &TransactionEvent) -> Result<Vec<f64>, ModelError> {
    let mut f = e.estate_attrs.clone();
    f.extend(&graph.community(e.community_id)?.attrs);
    Ok(f)
}

impl Ridge {
    pub fn fit(graph: &TemporalEventGraph, train: &[TransactionEvent], l2: f64) -> Result<Self, BenchError> {
        if train.is_empty() {
            return Err(BenchError::EmptyTraining);
        }
        let feats = train
            .iter()
            .map(|e| ridge_features(graph, e))
            .collect::<Result<Vec<_>, _>>()?;
        let y: Vec<f64> = train.iter().map(|e| e.unit_price).collect();
        let (intercept, coefs) = ridge_fit(&feats, &y, l2.max(0.0)).ok_or(BenchError::SingularRidge)?;
        Ok(Self { intercept, coefs })
    }

    pub fn predict(&self, graph: &TemporalEventGraph, e: &TransactionEvent) -> Result<f64, BenchError> {
        let f = ridge_features(graph, e)?;
        Ok(self.intercept + f.iter().zip(&self.coefs).map(|(a, b)| a * b).sum::<f64>())
    }
}

pub fn ridge_baseline(
    graph: &TemporalEventGraph,
    train: &[TransactionEvent],
    query: &[TransactionEvent],
    l2: f64,
) -> Result<Vec<f64>, BenchError> {
    let r = Ridge::fit(graph, train, l2)?;
    query.iter().map(|e| r.predict(graph, e)).collect()
}

// ---- experiment configuration -------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub state_dim: usize,
    pub time_dim: usize,
    pub hyper_hidden: [usize; 2],
    pub fi_hidden: [usize; 2],
    pub detach_depth: usize,
    pub dnn_hidden: [usize; 2],
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            state_dim: 64,
            time_dim: 8,
            hyper_hidden: [16, 8],
            fi_hidden: [64, 16],
            detach_depth: 1,
            dnn_hidden: [64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Adaptation of transferred models on the target training set.
    pub adapt: AdaptConfig,
    /// Training from scratch on the target training set only.
    pub target_only: AdaptConfig,
    pub ridge_l2: f64,
    /// Fill the wall_seconds column of results.csv. Off by default so reruns
    /// produce identical files.
    pub record_wall_time: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            adapt: AdaptConfig::default(),
            target_only: AdaptConfig {
                lr: 0.01,
                max_steps: 300,
                validation_fraction: 0.2,
                optimizer: OptimizerKind::Adam,
            },
            ridge_l2: 1.0,
            record_wall_time: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSettings,
    pub trainer: TrainerConfig,
    pub eval: EvalSettings,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoTgn,
    NoHmtl,
    NoReweight,
    NoTransfer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    #[default]
    None,
    Estate,
    Community,
    Price,
}

impl MaskKind {
    pub fn input_mask(self) -> InputMask {
        InputMask {
            estate: self == MaskKind::Estate,
            community: self == MaskKind::Community,
            price: self == MaskKind::Price,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replace {
    #[default]
    None,
    Tgn,
    Hyper,
    Fi,
}

impl Replace {
    fn prefixes(self) -> &'static [&'static str] {
        match self {
            Replace::None => &[],
            Replace::Tgn => &[GROUP_TGN],
            Replace::Hyper => &[GROUP_HYPER],
            Replace::Fi => &[GROUP_FI],
        }
    }
}

macro_rules! display_names {
    ($t:ty { $($v:ident => $name:literal),* $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $(Self::$v => $name,)*
                })
            }
        }
    };
}

display_names!(Variant { Full => "full", NoTgn => "no_tgn", NoHmtl => "no_hmtl", NoReweight => "no_reweight", NoTransfer => "no_transfer" });
display_names!(MaskKind { None => "none", Estate => "estate", Community => "community", Price => "price" });
display_names!(Replace { None => "none", Tgn => "tgn", Hyper => "hyper", Fi => "fi" });

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub variant: Variant,
    pub mask: MaskKind,
    pub replace: Replace,
    pub drop_source: Option<u32>,
}

impl AblationSpec {
    pub fn variant(variant: Variant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn validate(&self, source_ids: &[u32]) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::InvalidAblation(m));
        if self.variant == Variant::NoTransfer
            && (self.mask != MaskKind::None || self.replace != Replace::None || self.drop_source.is_some())
        {
            return bad("no_transfer uses no sources, so masks, replacements and dropped sources do not apply".into());
        }
        if self.variant == Variant::NoTgn && self.replace == Replace::Tgn {
            return bad("no_tgn has no TGN parameters to replace".into());
        }
        if self.variant == Variant::NoHmtl && self.replace == Replace::Hyper {
            return bad("no_hmtl has no hypernetwork to replace".into());
        }
        if let Some(id) = self.drop_source {
            if !source_ids.contains(&id) {
                return bad(format!("drop_source {id} is not a source city"));
            }
            if source_ids.len() < 2 {
                return bad("dropping the only source city leaves nothing to transfer from".into());
            }
        }
        Ok(())
    }

    /// The matrix exercised by the smoke suite: every variant, every mask,
    /// every replacement and every leave-one-out on the full model.
    pub fn matrix(source_ids: &[u32]) -> Vec<Self> {
        let mut out: Vec<Self> = [Variant::Full, Variant::NoTgn, Variant::NoHmtl, Variant::NoReweight, Variant::NoTransfer]
            .into_iter()
            .map(Self::variant)
            .collect();
        for mask in [MaskKind::Estate, MaskKind::Community, MaskKind::Price] {
            out.push(Self { mask, ..Self::default() });
        }
        for replace in [Replace::Tgn, Replace::Hyper, Replace::Fi] {
            out.push(Self { replace, ..Self::default() });
        }
        for &id in source_ids {
            out.push(Self { drop_source: Some(id), ..Self::default() });
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Ha,
    Ridge,
    Mlp,
    FtMlp,
    FtMttgn,
    MamlMlp,
    MamlMttgn,
}

display_names!(Baseline {
    Ha => "ha",
    Ridge => "ridge",
    Mlp => "mlp",
    FtMlp => "ft_mlp",
    FtMttgn => "ft_mttgn",
    MamlMlp => "maml_mlp",
    MamlMttgn => "maml_mttgn",
});

/// One line of results.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub variant: String,
    pub mask: String,
    pub replace: String,
    pub drop_source: String,
    pub n_train: usize,
    pub seed: u64,
    pub mae: f64,
    pub mape: f64,
    pub rmse: f64,
    pub wall_seconds: String,
    pub fingerprint: String,
}

pub const RESULT_COLUMNS: [&str; 12] = [
    "model", "variant", "mask", "replace", "drop_source", "n_train", "seed", "mae", "mape", "rmse", "wall_seconds",
    "fingerprint",
];

pub fn write_results<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(RESULT_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub row: ResultRow,
    /// Parameters after adaptation to the target.
    pub params: ParamStore,
    /// Parameters before adaptation (meta-trained or pooled), when any.
    pub transferred: Option<ParamStore>,
    pub weight_log: Vec<WeightLogRow>,
    /// Final mean instance weight per source city.
    pub city_weights: Vec<(u32, f64)>,
    pub predictions: Vec<f64>,
}

/// A prepared benchmark plus the settings every run shares.
pub struct Experiment<'a> {
    pub bench: &'a PreparedBenchmark,
    pub config: &'a ExperimentConfig,
    pub fingerprint: String,
}

impl<'a> Experiment<'a> {
    pub fn new(bench: &'a PreparedBenchmark, config: &'a ExperimentConfig) -> Self {
        Self { bench, config, fingerprint: String::new() }
    }

    fn dims(&self) -> (usize, usize) {
        let g = &self.bench.target.graph;
        (g.estate_dim().unwrap_or(0), g.attr_dim())
    }

    pub fn mttgn(&self, variant: Variant) -> Mttgn {
        let (e, a) = self.dims();
        let s = &self.config.model;
        let mut c = MttgnConfig::new(e, a, self.bench.time_horizon_s);
        c.state_dim = s.state_dim;
        c.time_dim = s.time_dim;
        c.hyper_hidden = s.hyper_hidden;
        c.fi_hidden = s.fi_hidden;
        c.detach_depth = s.detach_depth;
        c.use_tgn = variant != Variant::NoTgn;
        c.hyper_head = variant != Variant::NoHmtl;
        Mttgn::new(c)
    }

    pub fn dnn(&self) -> Dnn {
        let (e, a) = self.dims();
        let mut c = DnnConfig::new(e, a, self.bench.time_horizon_s);
        c.hidden = self.config.model.dnn_hidden;
        Dnn::new(c)
    }

    fn seed(&self) -> u64 {
        self.config.trainer.seed
    }

    /// Initial parameters; `stream` separates independent draws.
    fn init<L: Learner + ?Sized>(&self, learner: &L, stream: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        rng.set_stream(stream);
        learner.init_params(&mut rng)
    }

    pub fn sources(&self, drop: Option<u32>) -> Vec<SourceCity<'a>> {
        self.bench
            .sources
            .iter()
            .filter(|c| Some(c.city_id) != drop)
            .map(|c: &'a PreparedCity| SourceCity { city_id: c.city_id, graph: &c.graph, events: c.train() })
            .collect()
    }

    fn target(&self) -> TargetData<'a> {
        TargetData { graph: &self.bench.target.graph, train: self.bench.target.train() }
    }

    fn target_test_split(&self) -> Split<'a> {
        let t = &self.bench.target;
        Split::new(&t.graph, t.test()).with_history(t.train())
    }

    pub fn evaluate<L: Learner + ?Sized>(&self, learner: &L, params: &ParamStore) -> Result<(MetricsReport, Vec<f64>), BenchError> {
        let split = self.target_test_split();
        let preds = learner.predict(params, &split)?;
        let truth: Vec<f64> = split.scored.iter().map(|e| e.unit_price).collect();
        let mut rep = metrics(&truth, &preds)?;
        rep.fingerprint = self.fingerprint.clone();
        Ok((rep, preds))
    }

    fn row(&self, model: &str, spec: Option<&AblationSpec>, rep: &MetricsReport, started: Instant) -> ResultRow {
        let (variant, mask, replace, drop) = match spec {
            Some(s) => (
                s.variant.to_string(),
                s.mask.to_string(),
                s.replace.to_string(),
                s.drop_source.map(|d| d.to_string()).unwrap_or_default(),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        ResultRow {
            model: model.to_string(),
            variant,
            mask,
            replace,
            drop_source: drop,
            n_train: self.bench.target.train_len,
            seed: self.seed(),
            mae: rep.mae,
            mape: rep.mape_percent,
            rmse: rep.rmse,
            wall_seconds: if self.config.eval.record_wall_time {
                format!("{:.3}", started.elapsed().as_secs_f64())
            } else {
                String::new()
            },
            fingerprint: self.fingerprint.clone(),
        }
    }

    /// Meta-train the model of `spec` on the sources it keeps. Fails for
    /// `no_transfer`, which has nothing to pretrain.
    pub fn pretrain(&self, spec: &AblationSpec) -> Result<MetaOutcome, BenchError> {
        spec.validate(&self.bench.source_ids())?;
        if spec.variant == Variant::NoTransfer {
            return Err(BenchError::InvalidAblation("no_transfer has no pretraining stage".into()));
        }
        let mut trainer = self.config.trainer.clone();
        trainer.reweight = spec.variant != Variant::NoReweight;
        let model = self.mttgn(spec.variant);
        let init = self.init(&model, 2);
        Ok(meta_train(&model, init, &self.sources(spec.drop_source), Some(self.target()), &trainer, spec.mask.input_mask())?)
    }

    /// Re-initialize the groups `spec` replaces, adapt to the target and
    /// evaluate. `transferred` comes from [`Experiment::pretrain`].
    pub fn finish_transfer(&self, spec: &AblationSpec, transferred: ParamStore) -> Result<RunOutput, BenchError> {
        let started = Instant::now();
        let model = self.mttgn(spec.variant);
        let mut theta = transferred;
        let replace = spec.replace.prefixes();
        if !replace.is_empty() {
            reinit_groups(&mut theta, &self.init(&model, 3), replace);
        }
        let t = &self.bench.target;
        let params = adapt_to_target(&model, &theta, &t.graph, t.train(), &self.config.eval.adapt)?.params;
        let (mut report, predictions) = self.evaluate(&model, &params)?;
        report.model = "metatransfer".into();
        let row = self.row("metatransfer", Some(spec), &report, started);
        Ok(RunOutput {
            report,
            row,
            params,
            transferred: Some(theta),
            weight_log: Vec::new(),
            city_weights: Vec::new(),
            predictions,
        })
    }

    /// Pretrain a baseline learner on every source and adapt it.
    fn transfer_run<L: Learner + ?Sized>(
        &self,
        learner: &L,
        trainer: &TrainerConfig,
    ) -> Result<(ParamStore, ParamStore, Vec<WeightLogRow>), BenchError> {
        let init = self.init(learner, 2);
        let out = meta_train(learner, init, &self.sources(None), Some(self.target()), trainer, InputMask::NONE)?;
        let t = &self.bench.target;
        let adapted = adapt_to_target(learner, &out.params, &t.graph, t.train(), &self.config.eval.adapt)?;
        Ok((adapted.params, out.params, out.weight_log))
    }

    fn target_only_run<L: Learner + ?Sized>(&self, learner: &L) -> Result<ParamStore, BenchError> {
        let init = self.init(learner, 2);
        let t = &self.bench.target;
        Ok(adapt_to_target(learner, &init, &t.graph, t.train(), &self.config.eval.target_only)?.params)
    }

    pub fn run_ablation(&self, spec: &AblationSpec) -> Result<RunOutput, BenchError> {
        spec.validate(&self.bench.source_ids())?;
        if spec.variant == Variant::NoTransfer {
            let started = Instant::now();
            let model = self.mttgn(spec.variant);
            let params = self.target_only_run(&model)?;
            let (mut report, predictions) = self.evaluate(&model, &params)?;
            report.model = "metatransfer".into();
            let row = self.row("metatransfer", Some(spec), &report, started);
            return Ok(RunOutput {
                report,
                row,
                params,
                transferred: None,
                weight_log: Vec::new(),
                city_weights: Vec::new(),
                predictions,
            });
        }
        let started = Instant::now();
        let out = self.pretrain(spec)?;
        let sources = self.sources(spec.drop_source);
        let city_weights = out.city_mean_weights(&sources, spec.mask.input_mask())?;
        let mut run = self.finish_transfer(spec, out.params)?;
        run.weight_log = out.weight_log;
        run.city_weights = city_weights;
        run.row = self.row("metatransfer", Some(spec), &run.report, started);
        Ok(run)
    }

    pub fn run_baseline(&self, which: Baseline) -> Result<RunOutput, BenchError> {
        let started = Instant::now();
        let t = &self.bench.target;
        let name = which.to_string();
        let plain = |preds: Vec<f64>| -> Result<RunOutput, BenchError> {
            let truth: Vec<f64> = t.test().iter().map(|e| e.unit_price).collect();
            let mut report = metrics(&truth, &preds)?;
            report.model = name.clone();
            report.fingerprint = self.fingerprint.clone();
            let row = self.row(&name, None, &report, started);
            Ok(RunOutput {
                report,
                row,
                params: ParamStore::new(),
                transferred: None,
                weight_log: Vec::new(),
                city_weights: Vec::new(),
                predictions: preds,
            })
        };
        match which {
            Baseline::Ha => {
                let ha = HistoricalAverage::fit(t.train())?;
                plain(t.test().iter().map(|e| ha.predict(e.community_id, e.time)).collect())
            }
            Baseline::Ridge => plain(ridge_baseline(&t.graph, t.train(), t.test(), self.config.eval.ridge_l2)?),
            Baseline::Mlp => {
                let m = self.dnn();
                let p = self.target_only_run(&m)?;
                self.finish(&m, p, None, Vec::new(), &name, started)
            }
            Baseline::FtMlp | Baseline::FtMttgn | Baseline::MamlMlp | Baseline::MamlMttgn => {
                let mut trainer = self.config.trainer.clone();
                trainer.reweight = false;
                if matches!(which, Baseline::FtMlp | Baseline::FtMttgn) {
                    // pooled training: no inner adaptation
                    trainer.alpha = 0.0;
                }
                if matches!(which, Baseline::FtMlp | Baseline::MamlMlp) {
                    let m = self.dnn();
                    let (p, tr, log) = self.transfer_run(&m, &trainer)?;
                    self.finish(&m, p, Some(tr), log, &name, started)
                } else {
                    let m = self.mttgn(Variant::Full);
                    let (p, tr, log) = self.transfer_run(&m, &trainer)?;
                    self.finish(&m, p, Some(tr), log, &name, started)
                }
            }
        }
    }

    fn finish<L: Learner + ?Sized>(
        &self,
        learner: &L,
        params: ParamStore,
        transferred: Option<ParamStore>,
        log: Vec<WeightLogRow>,
        name: &str,
        started: Instant,
    ) -> Result<RunOutput, BenchError> {
        let (mut report, predictions) = self.evaluate(learner, &params)?;
        report.model = name.to_string();
        let row = self.row(name, None, &report, started);
        Ok(RunOutput { report, row, params, transferred, weight_log: log, city_weights: Vec::new(), predictions })
    }
}

/// Wall-clock statistics of repeated single appraisals.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub samples: Vec<f64>,
    pub mean_ms: f64,
    pub sd_ms: f64,
    pub max_ms: f64,
}

/// Time `n_queries` calls of `appraise(i)`.
pub fn latency_probe<F: FnMut(usize)>(n_queries: usize, mut appraise: F) -> LatencyStats {
    let samples: Vec<f64> = (0..n_queries)
        .map(|i| {
            let t = Instant::now();
            appraise(i);
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let (mean_ms, sd_ms) = crate::meta::mean_sd(&samples);
    let max_ms = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    LatencyStats { samples, mean_ms, sd_ms, max_ms }
}

/// Latency of single MTTGN appraisals on states built from `history`.
pub fn mttgn_latency(
    model: &Mttgn,
    params: &ParamStore,
    graph: &TemporalEventGraph,
    history: &[TransactionEvent],
    queries: &[TransactionEvent],
    n_queries: usize,
) -> Result<LatencyStats, ModelError> {
    let store = model.states_after(params, graph, history)?;
    let t_last = history.last().map_or(i64::MIN, |e| e.time);
    let qs: Vec<_> = queries
        .iter()
        .filter(|q| q.time > t_last)
        .map(crate::mttgn::AppraisalQuery::from)
        .collect();
    if qs.is_empty() && n_queries > 0 {
        return Err(ModelError::Dimension { what: "queries after the history", expected: 1, found: 0 });
    }
    let mut err = None;
    let stats = latency_probe(n_queries, |i| {
        if let Err(e) = model.appraise(params, &qs[i % qs.len()], &store, graph) {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(stats),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(cid: u32, t: i64, y: f64) -> TransactionEvent {
        TransactionEvent { estate_attrs: vec![], community_id: cid, time: t, unit_price: y }
    }

    #[test]
    fn metric_examples() {
        let r = metrics(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert_eq!(r.mae, 1.5);
        assert_eq!(r.mape_percent, 100.0);
        assert_eq!(r.rmse, 2.5f64.sqrt());
        let z = metrics(&[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert_eq!((z.mae, z.mape_percent, z.rmse), (0.0, 0.0, 0.0));
        assert!(matches!(metrics(&[1.0], &[1.0, 2.0]), Err(BenchError::LengthMismatch { .. })));
        assert!(matches!(metrics(&[0.0], &[1.0]), Err(BenchError::NonPositiveTarget { .. })));
    }

    #[test]
    fn mae_is_symmetric_mape_is_not() {
        let a = [1.0, 4.0, 2.5];
        let b = [2.0, 3.0, 5.0];
        let (ab, ba) = (metrics(&a, &b).unwrap(), metrics(&b, &a).unwrap());
        assert_eq!(ab.mae, ba.mae);
        assert_ne!(ab.mape_percent, ba.mape_percent);
    }

    #[test]
    fn historical_average_examples() {
        let train = vec![ev(1, 10, 5.0), ev(2, 5, 2.0), ev(2, 6, 4.0), ev(3, 1, 18.0)];
        let ha = HistoricalAverage::fit(&train).unwrap();
        assert_eq!(ha.predict(1, 11), 5.0);
        assert_eq!(ha.predict(2, 7), 3.0);
        assert_eq!(ha.global_mean(), 7.25);
        assert_eq!(ha.predict(9, 7), 7.25);
        // only strictly earlier sales count
        assert_eq!(ha.predict(1, 10), 7.25);
        assert!(matches!(HistoricalAverage::fit(&[]), Err(BenchError::EmptyTraining)));
    }

    #[test]
    fn ablation_validation() {
        let ids = [1, 2, 3];
        assert!(AblationSpec::variant(Variant::NoTransfer).validate(&ids).is_ok());
        let bad = AblationSpec { variant: Variant::NoTransfer, mask: MaskKind::Price, ..Default::default() };
        assert!(bad.validate(&ids).is_err());
        let bad = AblationSpec { variant: Variant::NoTgn, replace: Replace::Tgn, ..Default::default() };
        assert!(bad.validate(&ids).is_err());
        let bad = AblationSpec { drop_source: Some(7), ..Default::default() };
        assert!(bad.validate(&ids).is_err());
        assert_eq!(AblationSpec::matrix(&ids).len(), 14);
        assert_eq!(Variant::NoReweight.to_string(), "no_reweight");
        assert_eq!(Baseline::MamlMttgn.to_string(), "maml_mttgn");
    }

    #[test]
    fn latency_single_sample() {
        let s = latency_probe(1, |_| {});
        assert_eq!(s.samples.len(), 1);
        assert!(s.mean_ms <= s.max_ms);
    }
}
