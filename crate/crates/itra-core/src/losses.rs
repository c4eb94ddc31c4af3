//! Supervision and regularization objectives.
//!
//! Every loss is built on the graph and returns a scalar node, so a single
//! backward sweep delivers gradients for arbitrary combinations. The
//! distribution-matching terms pull gradient into both paired feature sets;
//! class centers, by contrast, enter as constants and are refreshed by an
//! explicit moving-average update outside the graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::{mmd, KernelSpec};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Cross entropy and label smoothing
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of the true classes under the softmax of
/// `logits`, stabilized by max-subtraction inside the log-softmax.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    check_logits(g, logits, labels, "cross_entropy")?;
    let lp = g.log_softmax(logits)?;
    g.nll_pick(lp, labels)
}

/// Cross entropy against the smoothed target
/// `(1 - eps) * one_hot + eps * uniform`, which decomposes into
/// `(1 - eps) * nll + eps * (-(1/(m K)) * sum(log_softmax))`.
pub fn label_smoothing_ce(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    eps_ls: f64,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&eps_ls) {
        return Err(Error::contract(
            "label_smoothing_ce",
            format!("smoothing must lie in [0, 1), got {eps_ls}"),
        ));
    }
    // At zero smoothing, reproduce the plain cross-entropy graph so the two
    // are the same function bit for bit, not merely equal in value.
    if eps_ls == 0.0 {
        return cross_entropy(g, logits, labels);
    }
    check_logits(g, logits, labels, "label_smoothing_ce")?;
    let (m, k) = {
        let t = g.value(logits);
        (t.rows(), t.cols())
    };
    let lp = g.log_softmax(logits)?;
    let nll = g.nll_pick(lp, labels)?;
    let total = g.sum_all(lp);
    let uniform = g.scale(total, -1.0 / (m * k) as f64);
    let a = g.scale(nll, 1.0 - eps_ls);
    let b = g.scale(uniform, eps_ls);
    g.add(a, b)
}

fn check_logits(g: &Graph, logits: NodeId, labels: &[usize], op: &'static str) -> Result<()> {
    let t = g.value(logits);
    if !t.is_2d() || t.cols() < 2 {
        return Err(Error::contract(
            op,
            format!("expected [m, K] logits with K >= 2, got shape {:?}", t.shape()),
        ));
    }
    if t.rows() != labels.len() {
        return Err(Error::contract(
            op,
            format!("{} logit rows vs {} labels", t.rows(), labels.len()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Center loss
// ---------------------------------------------------------------------------

/// Per-class feature centroids with their moving-average update rate.
#[derive(Debug, Clone)]
pub struct CenterState {
    pub centers: Tensor,
    pub beta: f64,
}

impl CenterState {
    /// Zero-initialized centers for `num_classes` classes of `dim`-wide
    /// features. `beta` is the update rate in (0, 1].
    pub fn new(num_classes: usize, dim: usize, beta: f64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::contract(
                "center_state",
                format!("need nonzero class count and feature dim, got {num_classes}x{dim}"),
            ));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::contract(
                "center_state",
                format!("update rate must lie in (0, 1], got {beta}"),
            ));
        }
        Ok(CenterState {
            centers: Tensor::zeros(vec![num_classes, dim]),
            beta,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    /// Moving-average refresh from one batch of features: each class center
    /// moves by `-beta * sum_{y_i = k}(c_k - h_i) / (1 + n_k)`.
    pub fn updated(&self, features: &Tensor, labels: &[usize]) -> Result<CenterState> {
        let (k, d) = (self.centers.rows(), self.centers.cols());
        check_features_against_labels(features, labels, d, k, "center_update")?;
        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0; k * d];
        for (i, &y) in labels.iter().enumerate() {
            counts[y] += 1;
            for (c, v) in features.row(i).iter().enumerate() {
                sums[y * d + c] += v;
            }
        }
        let mut centers = self.centers.clone();
        let data = centers.data_mut();
        for cls in 0..k {
            if counts[cls] == 0 {
                continue;
            }
            let n = counts[cls] as f64;
            for c in 0..d {
                let delta = (n * data[cls * d + c] - sums[cls * d + c]) / (1.0 + n);
                data[cls * d + c] -= self.beta * delta;
            }
        }
        Ok(CenterState {
            centers,
            beta: self.beta,
        })
    }
}

/// Pulls every feature toward its class center: `(1/2m) sum ||h_i - c_y||^2`.
/// The centers enter the graph as constants, so gradient reaches the
/// features only; the returned state carries the refreshed centers, to be
/// installed after the parameter step.
pub fn center_loss(
    g: &mut Graph,
    features: NodeId,
    labels: &[usize],
    state: &CenterState,
) -> Result<(NodeId, CenterState)> {
    let (k, d) = (state.centers.rows(), state.centers.cols());
    check_features_against_labels(g.value(features), labels, d, k, "center_loss")?;
    let new_state = state.updated(g.value(features), labels)?;

    let m = labels.len();
    let mut sel = Vec::with_capacity(m * d);
    for &y in labels {
        sel.extend_from_slice(state.centers.row(y));
    }
    let csel = g.constant(Tensor::new(vec![m, d], sel)?);
    let diff = g.sub(features, csel)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum_all(sq);
    let loss = g.scale(s, 1.0 / (2 * m) as f64);
    Ok((loss, new_state))
}

fn check_features_against_labels(
    features: &Tensor,
    labels: &[usize],
    dim: usize,
    num_classes: usize,
    op: &'static str,
) -> Result<()> {
    if !features.is_2d() || features.cols() != dim {
        return Err(Error::ShapeMismatch {
            op,
            left: features.shape().to_vec(),
            right: vec![labels.len(), dim],
        });
    }
    if features.rows() != labels.len() {
        return Err(Error::contract(
            op,
            format!("{} feature rows vs {} labels", features.rows(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::contract(
            op,
            format!("label {bad} out of range for {num_classes} classes"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Distribution matching
// ---------------------------------------------------------------------------

/// Discrepancy between the feature distributions of a paired batch.
/// Gradient flows into both sets: the two forward passes share parameters,
/// so both pulls land on the same weights.
pub fn match_loss(g: &mut Graph, h1: NodeId, h2: NodeId, spec: &KernelSpec) -> Result<NodeId> {
    mmd(g, h1, h2, spec)
}

/// Result of the class-conditional matching term.
pub struct ClasscondMatch {
    pub loss: NodeId,
    /// Classes present in exactly one of the two batches (contributed 0).
    pub skipped_classes: Vec<usize>,
    /// True when no class was present in both batches; loss is exactly 0.
    pub fully_disjoint: bool,
}

/// Mean over classes of the per-class discrepancy:
/// `(1/K) * sum_k mmd(H1_k, H2_k)` over classes with at least one sample in
/// both batches. The bandwidth heuristic runs per class on the pooled
/// per-class pair. Classes present in only one batch contribute zero and
/// are reported in `skipped_classes`.
pub fn match_loss_classcond(
    g: &mut Graph,
    h1: NodeId,
    labels1: &[usize],
    h2: NodeId,
    labels2: &[usize],
    num_classes: usize,
    spec: &KernelSpec,
) -> Result<ClasscondMatch> {
    if num_classes < 2 {
        return Err(Error::contract(
            "match_loss_classcond",
            format!("need at least 2 classes, got {num_classes}"),
        ));
    }
    {
        let (t1, t2) = (g.value(h1), g.value(h2));
        check_features_against_labels(t1, labels1, t1.cols(), num_classes, "match_loss_classcond")?;
        check_features_against_labels(t2, labels2, t2.cols(), num_classes, "match_loss_classcond")?;
    }
    let mut acc: Option<NodeId> = None;
    let mut skipped = Vec::new();
    let mut any_shared = false;
    for cls in 0..num_classes {
        let idx1: Vec<usize> = rows_of_class(labels1, cls);
        let idx2: Vec<usize> = rows_of_class(labels2, cls);
        match (idx1.is_empty(), idx2.is_empty()) {
            (true, true) => {}
            (false, false) => {
                let sub1 = g.gather_rows(h1, &idx1)?;
                let sub2 = g.gather_rows(h2, &idx2)?;
                let term = mmd(g, sub1, sub2, spec)?;
                acc = Some(match acc {
                    None => term,
                    Some(prev) => g.add(prev, term)?,
                });
                any_shared = true;
            }
            _ => skipped.push(cls),
        }
    }
    let loss = match acc {
        Some(total) => g.scale(total, 1.0 / num_classes as f64),
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(ClasscondMatch {
        loss,
        skipped_classes: skipped,
        fully_disjoint: !any_shared,
    })
}

fn rows_of_class(labels: &[usize], cls: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, &y)| (y == cls).then_some(i))
        .collect()
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

/// Training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Lsr,
    Center,
    Itra,
    ItraC,
}

impl Method {
    /// Whether one training step under this method needs the second batch
    /// forwarded through the model.
    pub fn needs_second_forward(self, lambda: f64) -> bool {
        matches!(self, Method::Itra | Method::ItraC) && lambda != 0.0
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Lsr => "lsr",
            Method::Center => "center",
            Method::Itra => "itra",
            Method::ItraC => "itra_c",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Forwarded quantities the objective consumes. Classification always runs
/// on batch 1; batch 2 contributes features only.
pub struct ObjectiveInputs<'a> {
    pub logits1: NodeId,
    pub features1: NodeId,
    pub labels1: &'a [usize],
    pub features2: Option<NodeId>,
    pub labels2: Option<&'a [usize]>,
}

/// Hyperparameters the objective consumes.
pub struct ObjectiveParams<'a> {
    pub method: Method,
    pub lambda: f64,
    pub label_smoothing: f64,
    pub num_classes: usize,
    pub kernel: &'a KernelSpec,
}

/// Assembled objective with the pieces the trainer logs.
pub struct Objective {
    pub total: NodeId,
    /// The classification part alone (plain or smoothed cross entropy).
    pub ce: NodeId,
    /// The weighted regularizer's unweighted value, when one exists.
    pub reg_term: Option<NodeId>,
    pub skipped_classes: Vec<usize>,
    pub fully_disjoint: bool,
    /// Refreshed centers (center method only), to install after the step.
    pub new_centers: Option<CenterState>,
}

/// Builds the full training objective for one paired step.
pub fn total_objective(
    g: &mut Graph,
    inputs: &ObjectiveInputs,
    params: &ObjectiveParams,
    centers: Option<&CenterState>,
) -> Result<Objective> {
    if !(params.lambda >= 0.0) {
        return Err(Error::contract(
            "total_objective",
            format!("regularizer weight must be nonnegative, got {}", params.lambda),
        ));
    }
    let ce = match params.method {
        Method::Lsr => label_smoothing_ce(g, inputs.logits1, inputs.labels1, params.label_smoothing)?,
        _ => cross_entropy(g, inputs.logits1, inputs.labels1)?,
    };
    let mut objective = Objective {
        total: ce,
        ce,
        reg_term: None,
        skipped_classes: Vec::new(),
        fully_disjoint: false,
        new_centers: None,
    };
    match params.method {
        Method::Baseline | Method::Lsr => {}
        Method::Center => {
            let state = centers.ok_or_else(|| {
                Error::contract("total_objective", "center method needs a center state")
            })?;
            let (cl, new_state) = center_loss(g, inputs.features1, inputs.labels1, state)?;
            let weighted = g.scale(cl, params.lambda);
            objective.total = g.add(ce, weighted)?;
            objective.reg_term = Some(cl);
            objective.new_centers = Some(new_state);
        }
        // A zero weight skips the matching graph outright: the objective is
        // then the baseline graph itself, equal bit for bit, rather than
        // baseline plus a zero-scaled term.
        Method::Itra | Method::ItraC if params.lambda == 0.0 => {}
        Method::Itra => {
            let f2 = require_second(inputs.features2, "itra")?;
            let m = match_loss(g, inputs.features1, f2, params.kernel)?;
            let weighted = g.scale(m, params.lambda);
            objective.total = g.add(ce, weighted)?;
            objective.reg_term = Some(m);
        }
        Method::ItraC => {
            let f2 = require_second(inputs.features2, "itra_c")?;
            let l2 = inputs.labels2.ok_or_else(|| {
                Error::contract("total_objective", "itra_c needs labels for the second batch")
            })?;
            let cc = match_loss_classcond(
                g,
                inputs.features1,
                inputs.labels1,
                f2,
                l2,
                params.num_classes,
                params.kernel,
            )?;
            let weighted = g.scale(cc.loss, params.lambda);
            objective.total = g.add(ce, weighted)?;
            objective.reg_term = Some(cc.loss);
            objective.skipped_classes = cc.skipped_classes;
            objective.fully_disjoint = cc.fully_disjoint;
        }
    }
    Ok(objective)
}

fn require_second(features2: Option<NodeId>, method: &str) -> Result<NodeId> {
    features2.ok_or_else(|| {
        Error::contract(
            "total_objective",
            format!("{method} with nonzero weight needs a second forwarded batch"),
        )
    })
}

// ---------------------------------------------------------------------------
