//! The SGD-with-momentum training loop for the matching objective and its
//! baselines, plus evaluation and the same-class compactness metric.
//!
//! Determinism contract: a run is a pure function of its `RunConfig`. All
//! randomness comes from three fixed generator streams derived from the
//! config seed (parameter init, batch sampling, metric pair sampling), and
//! every logged quantity excludes wall-clock time, which goes to a separate
//! timing sidecar.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gen_gaussian_mixture, load_csv, load_idx, sample_batch, sample_pair, Dataset, LabeledBatch, MixtureSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels::KernelSpec;
use crate::losses::{total_objective, CenterState, Method, ObjectiveInputs, ObjectiveParams};
use crate::models::{forward, init_params, register_params, ForwardMode, ModelSpec, ParamSet};
use crate::tensor::Tensor;

/// Samples evaluated per forward pass when scoring a dataset.
const EVAL_CHUNK: usize = 256;

// Generator streams: parameter init uses the default stream inside
// init_params; these two must stay distinct from it and each other.
const SAMPLER_STREAM: u64 = 1;
const METRIC_STREAM: u64 = 2;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Where the train/test splits come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// IDX pair files named `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte` under `dir`.
    Idx {
        dir: PathBuf,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    /// Label-first CSV files.
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        has_header: bool,
        #[serde(default)]
        normalize: bool,
    },
    /// Seeded synthetic Gaussian mixtures.
    Mixture {
        train: MixtureSpec,
        test: MixtureSpec,
    },
}

fn default_true() -> bool {
    true
}

/// Full description of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub model: ModelSpec,
    pub data: DataConfig,
    /// Weight of the distribution-matching term.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Classification mini-batch size.
    #[serde(default = "default_batch")]
    pub batch1: usize,
    /// Matching mini-batch size.
    #[serde(default = "default_batch")]
    pub batch2: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// The learning rate is multiplied by `lr_decay_factor` after each of
    /// these epochs.
    #[serde(default = "default_decay_epochs")]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Per-class balanced batches. Defaults to on for the class-conditional
    /// method and off otherwise.
    #[serde(default)]
    pub stratified: Option<bool>,
    #[serde(default)]
    pub kernel: KernelSpec,
    /// Smoothing mass for the label-smoothing baseline.
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    /// Center update rate for the center-loss baseline.
    #[serde(default = "default_center_beta")]
    pub center_beta: f64,
    /// Forces pair sampling even for methods that ignore the second batch,
    /// so their generator stream matches the matching methods' exactly.
    #[serde(default)]
    pub audit_pair_sampling: bool,
    /// Pair draws behind the per-epoch compactness metric.
    #[serde(default = "default_metric_pairs")]
    pub metric_pairs: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_lambda() -> f64 {
    0.6
}
fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    150
}
fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.5
}
fn default_decay_epochs() -> Vec<usize> {
    vec![20, 40]
}
fn default_decay_factor() -> f64 {
    0.2
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_center_beta() -> f64 {
    0.5
}
fn default_metric_pairs() -> usize {
    256
}

impl RunConfig {
    /// Checks every config invariant. Returns human-readable warnings for
    /// legal-but-suspicious settings (a zero matching weight on a matching
    /// method).
    pub fn validate(&self) -> Result<Vec<String>> {
        self.model.validate()?;
        self.kernel.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch1 == 0 || self.batch2 == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!(
                "lr decay factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            ));
        }
        if !(self.center_beta > 0.0 && self.center_beta <= 1.0) {
            return bad(format!(
                "center update rate must lie in (0, 1], got {}",
                self.center_beta
            ));
        }
        if self.metric_pairs == 0 {
            return bad("metric_pairs must be at least 1".into());
        }
        let mut warnings = Vec::new();
        if matches!(self.method, Method::Itra | Method::ItraC) && self.lambda == 0.0 {
            warnings.push(format!(
                "{} with lambda = 0 degenerates to the plain baseline",
                self.method
            ));
        }
        Ok(warnings)
    }

    pub fn stratified_effective(&self) -> bool {
        self.stratified.unwrap_or(self.method == Method::ItraC)
    }
}

/// Learning rate in force during `epoch` (1-based): the base rate decayed
/// once for every scheduled epoch already completed.
pub fn lr_for_epoch(cfg: &RunConfig, epoch: usize) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&d| epoch > d).count();
    cfg.learning_rate * cfg.lr_decay_factor.powi(decays as i32)
}

/// Loads (or generates) the train and test splits and, when configured,
/// standardizes both with the training split's statistics. The channel
/// count for per-channel statistics comes from the model's input shape.
pub fn load_datasets(data: &DataConfig, model: &ModelSpec) -> Result<(Dataset, Dataset)> {
    let channels = match model.input_shape[..] {
        [c, _, _] => c,
        _ => 1,
    };
    let (mut train, mut test, normalize) = match data {
        DataConfig::Idx { dir, normalize } => {
            let train = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let test = load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            (train, test, *normalize)
        }
        DataConfig::Csv { train, test, has_header, normalize } => (
            load_csv(train, *has_header)?,
            load_csv(test, *has_header)?,
            *normalize,
        ),
        DataConfig::Mixture { train, test } => {
            (gen_gaussian_mixture(train)?, gen_gaussian_mixture(test)?, false)
        }
    };
    if normalize {
        let norm = train.normalize_in_place(channels)?;
        test.apply_normalization(&norm)?;
    }
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// One epoch's logged quantities. Serialization deliberately omits the
/// wall-clock field so metrics files are byte-identical across reruns of
/// the same config; timing goes to its own sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub test_ce: f64,
    pub test_accuracy: f64,
    /// Epoch mean of the objective's regularization term, before weighting
    /// by lambda; 0 for methods without one.
    pub matching_loss: f64,
    /// Normalized same-class pair distance (compactness).
    pub pair_distance: f64,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl MetricsRecord {
    fn all_finite(&self) -> bool {
        [self.train_ce, self.test_ce, self.test_accuracy, self.matching_loss, self.pair_distance]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Appends one record as a JSON line.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(record).map_err(|e| Error::Config(format!("serialize: {e}")))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Wall-clock sidecar record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub wall_clock_seconds: f64,
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// One SGD-with-momentum update over every parameter tensor:
/// `v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v`.
/// A non-finite gradient halts training with the offending tensor named.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::contract(
            "sgd_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for i in 0..params.len() {
        if grads[i].shape() != params.tensors[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: grads[i].shape().to_vec(),
                right: params.tensors[i].shape().to_vec(),
            });
        }
        if !grads[i].all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {}",
                params.names[i]
            )));
        }
        let theta = params.tensors[i].data_mut();
        let vel = params.velocity[i].data_mut();
        for ((v, t), &g) in vel.iter_mut().zip(theta.iter_mut()).zip(grads[i].data()) {
            *v = momentum * *v + g + weight_decay * *t;
            *t -= lr * *v;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Scores a dataset in eval mode: `(top-1 accuracy, mean cross entropy)`.
/// Argmax ties resolve to the lowest class index.
pub fn evaluate(params: &ParamSet, spec: &ModelSpec, ds: &Dataset) -> Result<(f64, f64)> {
    check_compat(spec, ds)?;
    let n = ds.len();
    let d = ds.dim();
    let mut correct = 0usize;
    let mut nll_sum = 0.0;
    let mut start = 0;
    while start < n {
        let m = (n - start).min(EVAL_CHUNK);
        let rows = ds.inputs.data()[start * d..(start + m) * d].to_vec();
        let x = Tensor::new(vec![m, d], rows)?;
        let labels = &ds.labels[start..start + m];
        let mut g = Graph::new();
        let nodes = register_params(&mut g, params, false);
        let out = forward(&mut g, spec, params, &nodes, &x, ForwardMode::Eval)?;
        let lsm = g.log_softmax(out.logits)?;
        let ce = g.nll_pick(lsm, labels)?;
        nll_sum += g.value(ce).item()? * m as f64;
        let logits = g.value(out.logits);
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(j, _)| j)
                .unwrap();
            if pred == y {
                correct += 1;
            }
        }
        start += m;
    }
    Ok((correct as f64 / n as f64, nll_sum / n as f64))
}

/// Eval-mode features for a batch of inputs.
fn eval_features(params: &ParamSet, spec: &ModelSpec, inputs: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = register_params(&mut g, params, false);
    let out = forward(&mut g, spec, params, &nodes, inputs, ForwardMode::Eval)?;
    Ok(g.value(out.features).clone())
}

/// Core of the compactness metric, on precomputed feature batches: draws
/// `pairs` anchor rows from batch A (cycling in order), pairs each with a
/// uniformly chosen same-class row of batch B, and returns the mean pair
/// distance divided by the mean feature norm of the paired rows. Anchors
/// whose class is not `eligible` or absent from B are skipped. Returns
/// `None` when no pair could be formed, and 0 when all paired features are
/// zero.
pub fn normalized_pair_distance<R: Rng>(
    features_a: &Tensor,
    labels_a: &[usize],
    features_b: &Tensor,
    labels_b: &[usize],
    eligible: &[bool],
    rng: &mut R,
    pairs: usize,
) -> Option<f64> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); eligible.len()];
    for (j, &y) in labels_b.iter().enumerate() {
        by_class[y].push(j);
    }
    let norm = |row: &[f64]| row.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut dist_sum = 0.0;
    let mut norm_sum = 0.0;
    let mut count = 0usize;
    for p in 0..pairs {
        let i = p % labels_a.len();
        let y = labels_a[i];
        if !eligible[y] || by_class[y].is_empty() {
            continue;
        }
        let j = by_class[y][rng.random_range(0..by_class[y].len())];
        let (ra, rb) = (features_a.row(i), features_b.row(j));
        dist_sum += ra
            .iter()
            .zip(rb)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        norm_sum += norm(ra) + norm(rb);
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let mean_norm = norm_sum / (2 * count) as f64;
    if mean_norm == 0.0 {
        Some(0.0)
    } else {
        Some((dist_sum / count as f64) / mean_norm)
    }
}

/// The compactness metric: mean eval-mode feature distance between
/// same-class samples of two independently drawn batches, normalized by the
/// mean feature norm so it is invariant to feature scale. Classes with
/// fewer than two dataset samples are skipped. Deterministic given the
/// generator state.
pub fn same_class_pair_distance<R: Rng>(
    params: &ParamSet,
    spec: &ModelSpec,
    ds: &Dataset,
    rng: &mut R,
    pairs: usize,
) -> Result<f64> {
    if pairs == 0 {
        return Err(Error::contract("pair_distance", "need at least one pair"));
    }
    check_compat(spec, ds)?;
    let m = ds.len().min(pairs.max(2));
    let a = sample_batch(ds, m, rng, false)?;
    let b = sample_batch(ds, m, rng, false)?;
    let fa = eval_features(params, spec, &a.inputs)?;
    let fb = eval_features(params, spec, &b.inputs)?;
    let mut counts = vec![0usize; ds.num_classes];
    for &y in &ds.labels {
        counts[y] += 1;
    }
    let eligible: Vec<bool> = counts.iter().map(|&c| c >= 2).collect();
    normalized_pair_distance(&fa, &a.labels, &fb, &b.labels, &eligible, rng, pairs).ok_or_else(
        || Error::degenerate("pair_distance", "no same-class pair could be formed"),
    )
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct TrainOutput {
    pub params: ParamSet,
    pub metrics: Vec<MetricsRecord>,
    /// Final class centers (center-loss method only).
    pub centers: Option<CenterState>,
}

fn check_compat(spec: &ModelSpec, ds: &Dataset) -> Result<()> {
    if ds.dim() != spec.input_len() {
        return Err(Error::Config(format!(
            "dataset width {} does not match model input {:?}",
            ds.dim(),
            spec.input_shape
        )));
    }
    if ds.num_classes != spec.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            ds.num_classes, spec.num_classes
        )));
    }
    Ok(())
}

/// Runs the full training loop. `on_epoch` fires after each epoch's record
/// is assembled (streaming writers hook in here); the same records are also
/// returned. Fully deterministic given the config.
pub fn train(
    cfg: &RunConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_compat(&cfg.model, train_ds)?;
    check_compat(&cfg.model, test_ds)?;
    let n = train_ds.len();
    if cfg.batch1 > n {
        return Err(Error::Config(format!(
            "batch size {} exceeds training set of {n}",
            cfg.batch1
        )));
    }
    let stratified = cfg.stratified_effective();
    let needs_second = cfg.method.needs_second_forward(cfg.lambda);
    let mut params = init_params(&cfg.model, cfg.seed)?;
    let mut centers = match cfg.method {
        Method::Center => Some(CenterState::new(
            cfg.model.num_classes,
            cfg.model.feature_dim,
            cfg.center_beta,
        )?),
        _ => None,
    };
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sampler_rng.set_stream(SAMPLER_STREAM);
    let mut metric_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    metric_rng.set_stream(METRIC_STREAM);

    let iters = n.div_ceil(cfg.batch1);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_for_epoch(cfg, epoch);
        let mut ce_sum = 0.0;
        let mut match_sum = 0.0;
        for _ in 0..iters {
            let (b1, b2): (LabeledBatch, Option<LabeledBatch>) =
                if needs_second || cfg.audit_pair_sampling {
                    let pair =
                        sample_pair(train_ds, cfg.batch1, cfg.batch2, &mut sampler_rng, stratified)?;
                    (pair.batch1, needs_second.then_some(pair.batch2))
                } else {
                    (sample_batch(train_ds, cfg.batch1, &mut sampler_rng, stratified)?, None)
                };

            let mut g = Graph::new();
            let nodes = register_params(&mut g, &params, true);
            let out1 = forward(&mut g, &cfg.model, &params, &nodes, &b1.inputs, ForwardMode::Train)?;
            // Running statistics track the classification stream only.
            params.update_bn_running(&out1.bn_updates)?;
            let out2 = match &b2 {
                Some(batch) => Some(forward(
                    &mut g,
                    &cfg.model,
                    &params,
                    &nodes,
                    &batch.inputs,
                    ForwardMode::Train,
                )?),
                None => None,
            };
            let objective = total_objective(
                &mut g,
                &ObjectiveInputs {
                    logits1: out1.logits,
                    features1: out1.features,
                    labels1: &b1.labels,
                    features2: out2.as_ref().map(|o| o.features),
                    labels2: b2.as_ref().map(|b| b.labels.as_slice()),
                },
                &ObjectiveParams {
                    method: cfg.method,
                    lambda: cfg.lambda,
                    label_smoothing: cfg.label_smoothing,
                    num_classes: cfg.model.num_classes,
                    kernel: &cfg.kernel,
                },
                centers.as_ref(),
            )?;
            let total = g.value(objective.total).item()?;
            if !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective became {total} at epoch {epoch}; training halted"
                )));
            }
            ce_sum += g.value(objective.ce).item()?;
            if let Some(reg) = objective.reg_term {
                match_sum += g.value(reg).item()?;
            }
            let grads = g.backward(objective.total)?;
            let grad_list: Vec<Tensor> = nodes
                .iter()
                .zip(&params.tensors)
                .map(|(id, t)| {
                    grads
                        .get(*id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
                })
                .collect();
            sgd_step(&mut params, &grad_list, lr, cfg.momentum, cfg.weight_decay)?;
            // Centers move from pre-step features, installed post-step.
            if let Some(state) = objective.new_centers {
                centers = Some(state);
            }
        }
        let (test_accuracy, test_ce) = evaluate(&params, &cfg.model, test_ds)?;
        let pair_distance =
            same_class_pair_distance(&params, &cfg.model, train_ds, &mut metric_rng, cfg.metric_pairs)?;
        let record = MetricsRecord {
            epoch,
            train_ce: ce_sum / iters as f64,
            test_ce,
            test_accuracy,
            matching_loss: match_sum / iters as f64,
            pair_distance,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        if !record.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite metric at epoch {epoch}: {record:?}"
            )));
        }
        on_epoch(&record)?;
        metrics.push(record);
    }
    Ok(TrainOutput {
        params,
        metrics,
        centers,
    })
}

// ---------------------------------------------------------------------------
