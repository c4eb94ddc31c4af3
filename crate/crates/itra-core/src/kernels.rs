//! Gaussian kernels and the maximum mean discrepancy estimator.
//!
//! The estimator here is the V-statistic form (diagonal terms included):
//!
//! ```text
//! MMD(H1, H2) = sqrt( (1/m1^2) sum K(h1_i, h1_j)
//!             + (1/m2^2) sum K(h2_i, h2_j)
//!             - (2/(m1 m2)) sum K(h1_i, h2_j) + eps )
//! ```
//!
//! with the bracket clamped at zero before the square root. The epsilon
//! keeps the gradient finite when the two batches nearly coincide, at the
//! cost of `mmd(A, A)` evaluating to `sqrt(eps)` instead of zero.
//!
//! All three block sums are accumulated in value-sorted order, which makes
//! the estimator bit-exactly symmetric in its arguments and makes the
//! bracket cancel exactly for identical inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Lower bound applied to the median-heuristic bandwidth so the kernel
/// stays finite on degenerate (near-duplicate) batches.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Offset added inside the square root of the estimator.
pub const EPS_SQRT: f64 = 1e-12;

const DEFAULT_MULTIPLIERS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

// ---------------------------------------------------------------------------
// Kernel specification
// ---------------------------------------------------------------------------

/// Bandwidth-selection policy for the Gaussian kernel.
///
/// `Single` uses one fixed bandwidth. `MedianMixture` averages `count`
/// kernels whose bandwidths are the listed multipliers times the median
/// squared pairwise distance of the pooled pair of feature sets, recomputed
/// at every call and never differentiated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Single { sigma: f64 },
    MedianMixture { count: usize, multipliers: Vec<f64> },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::MedianMixture {
            count: DEFAULT_MULTIPLIERS.len(),
            multipliers: DEFAULT_MULTIPLIERS.to_vec(),
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Single { sigma } => {
                if !(*sigma > 0.0) {
                    return Err(Error::contract(
                        "kernel_spec",
                        format!("bandwidth must be strictly positive, got {sigma}"),
                    ));
                }
            }
            KernelSpec::MedianMixture { count, multipliers } => {
                if *count != multipliers.len() {
                    return Err(Error::contract(
                        "kernel_spec",
                        format!(
                            "count {} does not match {} multipliers",
                            count,
                            multipliers.len()
                        ),
                    ));
                }
                if multipliers.is_empty() {
                    return Err(Error::contract("kernel_spec", "mixture needs at least one multiplier"));
                }
                for w in multipliers.windows(2) {
                    if !(w[1] > w[0]) {
                        return Err(Error::contract(
                            "kernel_spec",
                            format!("multipliers must be strictly increasing, got {w:?}"),
                        ));
                    }
                }
                if !(multipliers[0] > 0.0) {
                    return Err(Error::contract(
                        "kernel_spec",
                        format!("multipliers must be strictly positive, got {}", multipliers[0]),
                    ));
                }
            }
        }
        Ok(())
    }

    /// True when the spec derives its bandwidths from the data at call time.
    pub fn needs_median(&self) -> bool {
        matches!(self, KernelSpec::MedianMixture { .. })
    }

    /// Resolves the concrete bandwidth list for one matching call.
    fn bandwidths(&self, sigma_med: f64) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            KernelSpec::Single { sigma } => Ok(vec![*sigma]),
            KernelSpec::MedianMixture { multipliers, .. } => {
                if !(sigma_med > 0.0) {
                    return Err(Error::contract(
                        "kernel_spec",
                        format!("median bandwidth must be positive, got {sigma_med}"),
                    ));
                }
                Ok(multipliers.iter().map(|m| m * sigma_med).collect())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Bandwidth selection
// ---------------------------------------------------------------------------

/// Median of the squared pairwise distances over all unordered pairs of the
/// pooled set (self-pairs excluded). An even pair count takes the mean of
/// the two middle values. The result is floored at [`SIGMA_FLOOR`] and is a
/// plain constant: it carries no gradient.
pub fn median_bandwidth(x: &Tensor, y: &Tensor) -> Result<f64> {
    // Zero-row sets are tolerated here (unlike in the estimator itself) so
    // the pooled-count check below is the one that reports the problem.
    if !x.is_2d() || !y.is_2d() || x.cols() != y.cols() {
        return Err(Error::ShapeMismatch {
            op: "median_bandwidth",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let pooled: Vec<&[f64]> = (0..x.rows())
        .map(|i| x.row(i))
        .chain((0..y.rows()).map(|i| y.row(i)))
        .collect();
    let n = pooled.len();
    if n < 2 {
        return Err(Error::degenerate(
            "median_bandwidth",
            "pooled set needs at least 2 points",
        ));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = pooled[i]
                .iter()
                .zip(pooled[j])
                .map(|(a, b)| {
                    let d = a - b;
                    d * d
                })
                .sum();
            dists.push(d2);
        }
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    Ok(median.max(SIGMA_FLOOR))
}

fn check_feature_set(t: &Tensor, op: &'static str) -> Result<()> {
    if !t.is_2d() || t.rows() == 0 {
        return Err(Error::contract(
            op,
            format!("expected nonempty 2-D feature set, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Graph-level kernel construction
// ---------------------------------------------------------------------------

/// Pairwise squared Euclidean distances between two feature sets, on the
/// graph (differentiable with respect to both).
pub fn pairwise_sq_dists(g: &mut Graph, x: NodeId, y: NodeId) -> Result<NodeId> {
    g.pdist2(x, y)
}

/// Applies the kernel spec to a squared-distance matrix node. Single mode
/// gives `exp(-D/sigma)`; mixture mode averages one exponential per
/// resolved bandwidth.
pub fn kernel_matrix(g: &mut Graph, d: NodeId, spec: &KernelSpec, sigma_med: f64) -> Result<NodeId> {
    let bandwidths = spec.bandwidths(sigma_med)?;
    kernel_matrix_fixed(g, d, &bandwidths)
}

fn kernel_matrix_fixed(g: &mut Graph, d: NodeId, bandwidths: &[f64]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &b in bandwidths {
        let scaled = g.scale(d, -1.0 / b);
        let k = g.exp(scaled);
        acc = Some(match acc {
            None => k,
            Some(prev) => g.add(prev, k)?,
        });
    }
    let total = acc.expect("caller validated at least one bandwidth");
    Ok(if bandwidths.len() == 1 {
        total
    } else {
        g.scale(total, 1.0 / bandwidths.len() as f64)
    })
}

/// Builds the discrepancy estimator with the default epsilon offset. See
/// the module docs for the exact expression.
pub fn mmd(g: &mut Graph, h1: NodeId, h2: NodeId, spec: &KernelSpec) -> Result<NodeId> {
    mmd_with_eps(g, h1, h2, spec, EPS_SQRT)
}

/// Estimator with a caller-chosen epsilon inside the square root. The
/// closed-form gradient diagnostics use `eps = 0` so the analytic expression
/// and the autodiff path compute the same function.
pub fn mmd_with_eps(
    g: &mut Graph,
    h1: NodeId,
    h2: NodeId,
    spec: &KernelSpec,
    eps: f64,
) -> Result<NodeId> {
    let sigma_med = if spec.needs_median() {
        median_bandwidth(g.value(h1), g.value(h2))?
    } else {
        0.0
    };
    let bandwidths = spec.bandwidths(sigma_med)?;
    mmd_fixed_bandwidths(g, h1, h2, &bandwidths, eps)
}

/// Estimator over an explicit bandwidth list. This is the form finite
/// difference checks must perturb: the median bandwidth is a constant of
/// the call, so the reference function has to hold it fixed too.
pub fn mmd_fixed_bandwidths(
    g: &mut Graph,
    h1: NodeId,
    h2: NodeId,
    bandwidths: &[f64],
    eps: f64,
) -> Result<NodeId> {
    let (m1, m2) = {
        let (t1, t2) = (g.value(h1), g.value(h2));
        check_feature_set(t1, "mmd")?;
        check_feature_set(t2, "mmd")?;
        if t1.cols() != t2.cols() {
            return Err(Error::ShapeMismatch {
                op: "mmd",
                left: t1.shape().to_vec(),
                right: t2.shape().to_vec(),
            });
        }
        (t1.rows(), t2.rows())
    };
    if bandwidths.is_empty() || bandwidths.iter().any(|b| !(*b > 0.0)) {
        return Err(Error::contract(
            "mmd",
            format!("bandwidths must be nonempty and positive, got {bandwidths:?}"),
        ));
    }

    let d11 = g.pdist2(h1, h1)?;
    let d22 = g.pdist2(h2, h2)?;
    let d12 = g.pdist2(h1, h2)?;
    let k11 = kernel_matrix_fixed(g, d11, bandwidths)?;
    let k22 = kernel_matrix_fixed(g, d22, bandwidths)?;
    let k12 = kernel_matrix_fixed(g, d12, bandwidths)?;

    // Sorted sums keep each block sum invariant under row/column permutation,
    // so swapping the arguments swaps t11 and t22 (addition is commutative)
    // and leaves t12 untouched: the estimator is bit-exactly symmetric.
    let s11 = g.sum_all_sym(k11);
    let s22 = g.sum_all_sym(k22);
    let s12 = g.sum_all_sym(k12);
    let t11 = g.scale(s11, 1.0 / (m1 * m1) as f64);
    let t22 = g.scale(s22, 1.0 / (m2 * m2) as f64);
    let t12 = g.scale(s12, 2.0 / (m1 * m2) as f64);
    let within = g.add(t11, t22)?;
    let bracket = g.sub(within, t12)?;
    // Rounding can push the bracket a hair below zero; clamp before the
    // root. The clamp's zero derivative at zero matches the true gradient
    // of coincident batches.
    let clamped = g.relu(bracket);
    Ok(g.sqrt_shift(clamped, eps))
}

/// Evaluates the estimator on plain tensors (no gradient), for callers that
/// only need the number.
pub fn mmd_value(h1: &Tensor, h2: &Tensor, spec: &KernelSpec) -> Result<f64> {
    let mut g = Graph::new();
    let n1 = g.constant(h1.clone());
    let n2 = g.constant(h2.clone());
    let root = mmd(&mut g, n1, n2, spec)?;
    g.value(root).item()
}

// ---------------------------------------------------------------------------
// Closed-form gradient and adaptive weights
// ---------------------------------------------------------------------------

/// Analytic gradient of the square-root estimator with a single Gaussian
/// kernel, with respect to row `i` of the first feature set:
///
/// ```text
/// grad = -(2 / (sigma sqrt(M))) * [ (1/m1^2)     sum_j e1_j (h_i - h1_j)
///                                 - (1/(m1 m2))  sum_j e2_j (h_i - h2_j) ]
/// ```
///
/// where `e_j = exp(-||h_i - .||^2 / sigma)` and `M` is the squared
/// estimator value (the clamped bracket). This is a diagnostic oracle for
/// the autodiff path, not a training code path.
pub fn mmd_grad_closed_form(
    i: usize,
    h1: &Tensor,
    h2: &Tensor,
    sigma: f64,
    m_sq: f64,
) -> Result<Tensor> {
    check_feature_set(h1, "mmd_grad_closed_form")?;
    check_feature_set(h2, "mmd_grad_closed_form")?;
    if h1.cols() != h2.cols() {
        return Err(Error::ShapeMismatch {
            op: "mmd_grad_closed_form",
            left: h1.shape().to_vec(),
            right: h2.shape().to_vec(),
        });
    }
    if i >= h1.rows() {
        return Err(Error::contract(
            "mmd_grad_closed_form",
            format!("row {i} out of range for {} rows", h1.rows()),
        ));
    }
    if !(sigma > 0.0) {
        return Err(Error::contract(
            "mmd_grad_closed_form",
            format!("bandwidth must be positive, got {sigma}"),
        ));
    }
    if !(m_sq > 0.0) {
        return Err(Error::contract(
            "mmd_grad_closed_form",
            format!("squared estimator value must be positive, got {m_sq}"),
        ));
    }
    let d = h1.cols();
    let (m1, m2) = (h1.rows(), h2.rows());
    let hi = h1.row(i);
    let mut within = vec![0.0; d];
    for j in 0..m1 {
        accumulate_weighted_diff(&mut within, hi, h1.row(j), sigma);
    }
    let mut cross = vec![0.0; d];
    for j in 0..m2 {
        accumulate_weighted_diff(&mut cross, hi, h2.row(j), sigma);
    }
    let prefactor = -2.0 / (sigma * m_sq.sqrt());
    let c_within = 1.0 / (m1 * m1) as f64;
    let c_cross = 1.0 / (m1 * m2) as f64;
    let data = within
        .iter()
        .zip(&cross)
        .map(|(w, c)| prefactor * (c_within * w - c_cross * c))
        .collect();
    Tensor::new(vec![d], data)
}

/// Adds `exp(-||a-b||^2 / sigma) * (a - b)` into `acc`.
fn accumulate_weighted_diff(acc: &mut [f64], a: &[f64], b: &[f64], sigma: f64) {
    let d2: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum();
    let e = (-d2 / sigma).exp();
    for ((s, x), y) in acc.iter_mut().zip(a).zip(b) {
        *s += e * (x - y);
    }
}

/// Softmax-style weights a probe point places on each row of a feature set:
/// `w_j = exp(-||h - h_j||^2 / sigma) / sum_k exp(-||h - h_k||^2 / sigma)`,
/// computed with max-subtraction so far-away sets cannot underflow to 0/0.
pub fn adaptive_weights(h: &[f64], h2: &Tensor, sigma: f64) -> Result<Vec<f64>> {
    check_feature_set(h2, "adaptive_weights")?;
    if h.len() != h2.cols() {
        return Err(Error::ShapeMismatch {
            op: "adaptive_weights",
            left: vec![h.len()],
            right: h2.shape().to_vec(),
        });
    }
    if !(sigma > 0.0) {
        return Err(Error::contract(
            "adaptive_weights",
            format!("bandwidth must be positive, got {sigma}"),
        ));
    }
    let scores: Vec<f64> = (0..h2.rows())
        .map(|j| {
            let d2: f64 = h
                .iter()
                .zip(h2.row(j))
                .map(|(a, b)| {
                    let d = a - b;
                    d * d
                })
                .sum();
            -d2 / sigma
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

// ---------------------------------------------------------------------------
