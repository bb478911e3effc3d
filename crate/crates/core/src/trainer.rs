//! Incremental training schedule.
//!
//! Each increment expands the head, trains for a fixed number of epochs on
//! the increment's samples mixed with the rehearsal memory, stores new
//! exemplars, and evaluates on the union of every test set seen so far.
//!
//! Loss routing: the first increment has no old classes, so batches use
//! plain categorical cross-entropy. Later increments use the combined
//! objective; batches that miss one side of the old/new partition fall back
//! to the terms that remain, and the skip is counted rather than silently
//! zeroed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{IncrementSpec, Sample, TaskStream};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, loss_cl, loss_new, loss_old, BatchPartition, ClassPrior, LossWeights,
};
use crate::matrix::Matrix;
use crate::metrics::{classification_metrics, roc_auc, ConfusionMatrix, EvalReport};
use crate::nn::Model;
use crate::optimizer::AdadeltaState;
use crate::rehearsal::{build_increment_batches, update_memory, RehearsalMemory};
use crate::seed::derive_seed;

pub const HISTORY_SCHEMA_VERSION: u32 = 1;

/// Which objective drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Full combined objective with rehearsal.
    Lcl,
    /// Combined objective with the mutual-distillation term disabled.
    LclNoMd,
    /// Plain cross-entropy on each increment's new data, no rehearsal.
    NaiveFinetune,
}

impl BaselineMode {
    pub fn tag(self) -> &'static str {
        match self {
            BaselineMode::Lcl => "lcl",
            BaselineMode::LclNoMd => "ablation:no_md",
            BaselineMode::NaiveFinetune => "naive_finetune",
        }
    }
}

/// Training hyperparameters for a whole schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub epochs_per_increment: usize,
    pub batch_size: usize,
    /// Fraction of each class's training set stored as exemplars.
    pub quota_fraction: f64,
    pub seed: u64,
    pub baseline_mode: BaselineMode,
    pub hidden_layers: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            epochs_per_increment: 5,
            batch_size: 10,
            quota_fraction: 0.25,
            seed: 7,
            baseline_mode: BaselineMode::Lcl,
            hidden_layers: vec![64, 32],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs_per_increment == 0 {
            return Err(Error::Domain("epochs_per_increment must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Domain("batch_size must be >= 2".into()));
        }
        if !(self.quota_fraction > 0.0 && self.quota_fraction <= 1.0) {
            return Err(Error::Domain("quota_fraction must be in (0, 1]".into()));
        }
        if self.hidden_layers.is_empty() || self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(Error::Domain("hidden_layers must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Weights actually used, with the ablation forcing `beta = 0`.
    pub fn effective_weights(&self) -> LossWeights {
        match self.baseline_mode {
            BaselineMode::LclNoMd => LossWeights { beta: 0.0, ..self.weights },
            _ => self.weights,
        }
    }
}

/// How many times each loss term was evaluated (or skipped) in an increment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounters {
    pub cross_entropy: u64,
    pub l_o: u64,
    pub l_n: u64,
    pub l_md: u64,
    /// Batches where the mutual-distillation term was due but one partition
    /// side was missing.
    pub l_md_skipped: u64,
}

/// Mean loss components over one epoch. A component is `None` when no batch
/// in the epoch evaluated it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub total: f64,
    pub l_o: Option<f64>,
    pub l_n: Option<f64>,
    pub l_md: Option<f64>,
}

/// Everything recorded about one increment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncrementRecord {
    /// 1-based position in the stream.
    pub increment: usize,
    pub new_classes: Vec<usize>,
    pub domain: usize,
    pub head_classes: usize,
    pub report: EvalReport,
    pub epoch_traces: Vec<EpochTrace>,
    pub counters: LossCounters,
}

/// Reproducibility record: resolved configuration, named sub-seeds, and the
/// exemplar indices that were replayed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub mode_tag: String,
    pub config: TrainConfig,
    /// All layers are updated during increments; the feature extractor is
    /// not frozen.
    pub trains_all_layers: bool,
    pub seeds: BTreeMap<String, u64>,
    /// Per class: `(increment, row)` indices of the stored exemplars.
    pub exemplar_ids: BTreeMap<usize, Vec<(usize, usize)>>,
    pub total_classes: usize,
    pub feature_dim: usize,
}

/// Full record of a schedule run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunHistory {
    pub manifest: RunManifest,
    pub increments: Vec<IncrementRecord>,
}

impl RunHistory {
    pub fn final_report(&self) -> &EvalReport {
        &self.increments.last().expect("history has increments").report
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// One CSV row per increment with the cumulative metrics, the plotting
    /// interface for accuracy-over-tasks curves.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from(
            "increment,new_classes,cumulative_classes,accuracy,tpr,tnr,ppv,f1,top1_error\n",
        );
        for rec in &self.increments {
            let r = &rec.report;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                rec.increment,
                rec.new_classes.len(),
                rec.head_classes,
                r.accuracy,
                r.tpr,
                r.tnr,
                r.ppv,
                r.f1,
                1.0 - r.accuracy,
            ));
        }
        out
    }

    pub fn write_curves_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.curves_csv())?;
        Ok(())
    }
}

/// Classifies samples with the full-head softmax (temperature 1).
///
/// Returns the argmax class per sample (ties break to the lowest class id)
/// and the per-class probability matrix for ROC work.
pub fn predict(model: &Model, samples: &[Sample]) -> Result<(Vec<usize>, Matrix)> {
    if model.head_classes() == 0 {
        return Err(Error::Domain("model has an empty head; train it first".into()));
    }
    let features = features_matrix(samples)?;
    let (logits, _) = model.forward(&features)?;
    let classes = model.head_classes();
    let mut scores = Matrix::zeros(samples.len(), classes);
    let mut preds = Vec::with_capacity(samples.len());
    for r in 0..samples.len() {
        let p = crate::nn::softmax_temp(logits.row(r), 1.0, 0..classes)?;
        let mut best = 0usize;
        for (c, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = c;
            }
        }
        preds.push(best);
        scores.row_mut(r).copy_from_slice(&p);
    }
    Ok((preds, scores))
}

/// Evaluates the model on `samples`: confusion matrix, macro metrics, and a
/// one-vs-rest AUC per domain when more than one domain has been learned.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    let (preds, scores) = predict(model, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let cm = ConfusionMatrix::from_predictions(&preds, &labels, model.head_classes())?;
    let mut report = classification_metrics(cm)?;

    let domains: std::collections::BTreeSet<usize> =
        model.class_domains().iter().copied().collect();
    if domains.len() > 1 {
        for &d in &domains {
            // score toward domain d: total probability mass of its classes
            let mass: Vec<f64> = (0..samples.len())
                .map(|r| {
                    model
                        .class_domains()
                        .iter()
                        .enumerate()
                        .filter(|(_, dom)| **dom == d)
                        .map(|(c, _)| scores.get(r, c))
                        .sum()
                })
                .collect();
            let truth: Vec<bool> = samples.iter().map(|s| s.domain == d).collect();
            if truth.iter().any(|t| *t) && truth.iter().any(|t| !*t) {
                let (_, auc) = roc_auc(&mass, &truth)?;
                report.auc.insert(format!("domain{d}_vs_rest"), auc);
            }
        }
    }
    Ok(report)
}

fn features_matrix(samples: &[Sample]) -> Result<Matrix> {
    if samples.is_empty() {
        return Err(Error::Domain("no samples to featurize".into()));
    }
    let dim = samples[0].features.len();
    let mut flat = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        if s.features.len() != dim {
            return Err(Error::Shape("inconsistent feature dimension".into()));
        }
        flat.extend_from_slice(&s.features);
    }
    Matrix::from_vec(samples.len(), dim, flat)
}

/// Holds the evolving state of a schedule run.
pub struct IncrementalTrainer {
    cfg: TrainConfig,
    model: Model,
    optimizer: AdadeltaState,
    memory: RehearsalMemory,
    seen_tests: Vec<Sample>,
    increments_done: usize,
}

impl IncrementalTrainer {
    pub fn new(feature_dim: usize, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(feature_dim, &cfg.hidden_layers, derive_seed(cfg.seed, "init", 0))?;
        let optimizer = AdadeltaState::with_defaults(&model);
        let memory = RehearsalMemory::new(derive_seed(cfg.seed, "exemplar-selection", 0));
        Ok(IncrementalTrainer { cfg, model, optimizer, memory, seen_tests: Vec::new(), increments_done: 0 })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn memory(&self) -> &RehearsalMemory {
        &self.memory
    }

    /// Trains one increment and evaluates on every test set seen so far.
    pub fn run_increment(&mut self, inc: &IncrementSpec) -> Result<IncrementRecord> {
        let c_o = self.model.head_classes();
        let c_n = inc.new_class_ids.len();
        if inc.new_class_ids.first() != Some(&c_o) {
            return Err(Error::Domain(format!(
                "increment classes must continue the head: head has {c_o} classes, got {:?}",
                inc.new_class_ids
            )));
        }
        let idx = self.increments_done;
        self.model =
            self.model.expand_head(c_n, inc.domain, derive_seed(self.cfg.seed, "head-init", idx as u64))?;
        self.optimizer.resize_to(&self.model)?;

        let naive = self.cfg.baseline_mode == BaselineMode::NaiveFinetune;
        let empty_memory = RehearsalMemory::new(0);
        let weights = self.cfg.effective_weights();
        let mut counters = LossCounters::default();
        let mut epoch_traces = Vec::with_capacity(self.cfg.epochs_per_increment);

        for epoch in 0..self.cfg.epochs_per_increment {
            let shuffle_seed =
                derive_seed(self.cfg.seed, "shuffle", (idx * 10_000 + epoch) as u64);
            let replay = if naive { &empty_memory } else { &self.memory };
            let batches = build_increment_batches(
                &inc.train,
                replay,
                c_o,
                c_n,
                self.cfg.batch_size,
                shuffle_seed,
            )?;
            let mut acc = TraceAccumulator::default();
            for (bi, batch) in batches.iter().enumerate() {
                let (logits, cache) = self.model.forward(&batch.features)?;
                let (total, trace, d_logits) = route_loss(
                    &logits,
                    &batch.partition,
                    &batch.labels,
                    &weights,
                    naive || c_o == 0,
                    &mut counters,
                )?;
                if !total.is_finite() {
                    return Err(Error::NonFinite {
                        path: format!("increment {} epoch {epoch} batch {bi} loss", idx + 1),
                    });
                }
                acc.add(total, trace);
                let grads = self.model.backward(&cache, &d_logits)?;
                crate::optimizer::adadelta_step(&mut self.model, &grads, &mut self.optimizer)?;
            }
            epoch_traces.push(acc.into_trace(epoch));
        }

        if !naive {
            for &class in &inc.new_class_ids {
                let class_size = inc.train.iter().filter(|s| s.label == class).count();
                let quota =
                    ((class_size as f64 * self.cfg.quota_fraction).ceil() as usize).max(1);
                update_memory(&mut self.memory, idx, &[class], &inc.train, quota)?;
            }
        }

        self.seen_tests.extend(inc.test.iter().cloned());
        let report = evaluate(&self.model, &self.seen_tests)?;
        self.increments_done += 1;
        Ok(IncrementRecord {
            increment: self.increments_done,
            new_classes: inc.new_class_ids.clone(),
            domain: inc.domain,
            head_classes: self.model.head_classes(),
            report,
            epoch_traces,
            counters,
        })
    }

    fn into_history(self, increments: Vec<IncrementRecord>) -> RunHistory {
        let seeds: BTreeMap<String, u64> = [
            ("master".to_string(), self.cfg.seed),
            ("init".to_string(), derive_seed(self.cfg.seed, "init", 0)),
            ("exemplar-selection".to_string(), derive_seed(self.cfg.seed, "exemplar-selection", 0)),
        ]
        .into_iter()
        .collect();
        RunHistory {
            manifest: RunManifest {
                schema_version: HISTORY_SCHEMA_VERSION,
                mode_tag: self.cfg.baseline_mode.tag().to_string(),
                trains_all_layers: true,
                seeds,
                exemplar_ids: self.memory.exemplar_sources(),
                total_classes: self.model.head_classes(),
                feature_dim: self.model.input_dim(),
                config: self.cfg,
            },
            increments,
        }
    }
}

/// Runs the whole stream and returns the history plus the final model.
pub fn run_schedule(stream: &TaskStream, cfg: &TrainConfig) -> Result<(RunHistory, Model)> {
    let mut trainer = IncrementalTrainer::new(stream.feature_dim(), cfg.clone())?;
    let mut records = Vec::with_capacity(stream.increments().len());
    for inc in stream.increments() {
        records.push(trainer.run_increment(inc)?);
    }
    let model = trainer.model().clone();
    Ok((trainer.into_history(records), model))
}

#[derive(Default)]
struct TraceAccumulator {
    total: (f64, usize),
    l_o: (f64, usize),
    l_n: (f64, usize),
    l_md: (f64, usize),
}

impl TraceAccumulator {
    fn add(&mut self, total: f64, parts: BatchTrace) {
        self.total.0 += total;
        self.total.1 += 1;
        if let Some(v) = parts.l_o {
            self.l_o.0 += v;
            self.l_o.1 += 1;
        }
        if let Some(v) = parts.l_n {
            self.l_n.0 += v;
            self.l_n.1 += 1;
        }
        if let Some(v) = parts.l_md {
            self.l_md.0 += v;
            self.l_md.1 += 1;
        }
    }

    fn into_trace(self, epoch: usize) -> EpochTrace {
        let mean = |(sum, n): (f64, usize)| if n == 0 { None } else { Some(sum / n as f64) };
        EpochTrace {
            epoch,
            total: mean(self.total).unwrap_or(0.0),
            l_o: mean(self.l_o),
            l_n: mean(self.l_n),
            l_md: mean(self.l_md),
        }
    }
}

#[derive(Default, Clone, Copy)]
struct BatchTrace {
    l_o: Option<f64>,
    l_n: Option<f64>,
    l_md: Option<f64>,
}

/// Picks the objective for one batch.
///
/// `plain_ce` is set at the first increment (no old classes exist yet) and
/// for the naive fine-tuning baseline; it routes to categorical
/// cross-entropy over the full head. Otherwise the combined objective is
/// used, dropping the terms whose partition side is missing.
fn route_loss(
    logits: &Matrix,
    part: &BatchPartition,
    labels: &[usize],
    weights: &LossWeights,
    plain_ce: bool,
    counters: &mut LossCounters,
) -> Result<(f64, BatchTrace, Matrix)> {
    if plain_ce {
        let (l, g) = cross_entropy(logits, labels)?;
        counters.cross_entropy += 1;
        return Ok((l, BatchTrace::default(), g));
    }
    match (part.has_old(), part.has_new()) {
        (true, true) => {
            let prior = ClassPrior::empirical(labels, &part.old_rows, part.c_o)?;
            let (total, comps, grad) = loss_cl(logits, part, labels, weights, &prior)?;
            counters.l_o += 1;
            counters.l_n += 1;
            if comps.l_md.is_some() {
                counters.l_md += 1;
            }
            Ok((
                total,
                BatchTrace { l_o: Some(comps.l_o), l_n: Some(comps.l_n), l_md: comps.l_md },
                grad,
            ))
        }
        (false, true) => {
            // no old rows in this batch: retention terms have nothing to work on
            if weights.beta > 0.0 {
                counters.l_md_skipped += 1;
                log::debug!("batch without old rows: mutual-distillation term skipped");
            }
            let (l_n, g) = loss_new(logits, part, labels)?;
            let mut grad = g;
            for v in grad.data_mut() {
                *v *= weights.alpha;
            }
            Ok((weights.alpha * l_n, BatchTrace { l_n: Some(l_n), ..Default::default() }, grad))
        }
        (true, false) => {
            if weights.beta > 0.0 {
                counters.l_md_skipped += 1;
                log::debug!("batch without new rows: mutual-distillation term skipped");
            }
            let (l_o, g) = loss_old(logits, part, labels, weights.tau)?;
            let mut grad = g;
            for v in grad.data_mut() {
                *v *= weights.gamma;
            }
            Ok((weights.gamma * l_o, BatchTrace { l_o: Some(l_o), ..Default::default() }, grad))
        }
        (false, false) => Err(Error::Domain("empty batch".into())),
    }
}

/// Writes the final confusion matrix as CSV.
pub fn write_confusion_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    report.confusion.write_csv(&mut file)?;
    file.flush()?;
    Ok(())
}
