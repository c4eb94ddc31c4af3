//! The executable acceptance gate. Each test pins one release criterion at
//! its stated tolerance and prints a single summary line; the test name in
//! the runner output is the pass/fail record. Reference values are computed
//! inside this file by independent means (plain double loops, central
//! finite differences, direct kernel-mass evaluation) rather than through
//! the library paths under test wherever the criterion calls for an oracle.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use itra_core::data::{ClassSpec, MixtureSpec, ModeSpec};
use itra_core::diagnostics::{
    check_closed_form_gradient, check_gradient_norm_bound, check_modality_alignment,
    check_weight_identity, Corruption,
};
use itra_core::graph::{Graph, NodeId};
use itra_core::kernels::{mmd, KernelSpec};
use itra_core::losses::{
    center_loss, cross_entropy, label_smoothing_ce, match_loss, match_loss_classcond, CenterState,
    Method,
};
use itra_core::models::{
    forward, init_params, register_params, ForwardMode, ModelKind, ModelSpec, ParamSet,
};
use itra_core::tensor::Tensor;
use itra_core::trainer::{load_datasets, train, DataConfig, MetricsRecord, RunConfig};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rows from an isotropic Gaussian, optionally shifted in coordinate 0.
fn gaussian_rows<R: Rng>(r: &mut R, rows: usize, cols: usize, std: f64, shift: f64) -> Tensor {
    let normal = Normal::new(0.0, std).unwrap();
    let data: Vec<f64> = (0..rows * cols)
        .map(|k| normal.sample(r) + if k % cols == 0 { shift } else { 0.0 })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Criterion 1: the estimator against a plain quadratic oracle
// ---------------------------------------------------------------------------

/// Mean Gaussian-kernel value over one ordered block, diagonal included,
/// written as the obvious double loop.
fn oracle_block_mean(x: &Tensor, y: &Tensor, sigma: f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            sum += (-sq_dist(x.row(i), y.row(j)) / sigma).exp();
        }
    }
    sum / (x.rows() * y.rows()) as f64
}

/// Discrepancy estimate from first principles: per-bandwidth biased
/// statistic averaged over the bandwidth list, clamped and offset under the
/// square root exactly as the estimator defines it.
fn oracle_mmd(h1: &Tensor, h2: &Tensor, bandwidths: &[f64]) -> f64 {
    let b: f64 = bandwidths
        .iter()
        .map(|&s| {
            oracle_block_mean(h1, h1, s) + oracle_block_mean(h2, h2, s)
                - 2.0 * oracle_block_mean(h1, h2, s)
        })
        .sum::<f64>()
        / bandwidths.len() as f64;
    (b.max(0.0) + 1e-12).sqrt()
}

/// Median of the squared pairwise distances over the pooled rows,
/// self-pairs excluded, even counts averaging the middle two, floored the
/// same way the bandwidth heuristic documents.
fn oracle_median_sq(h1: &Tensor, h2: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..h1.rows())
        .map(|i| h1.row(i))
        .chain((0..h2.rows()).map(|i| h2.row(i)))
        .collect();
    let mut dists = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(sq_dist(rows[i], rows[j]));
        }
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let median = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    median.max(1e-8)
}

fn estimator_value(h1: &Tensor, h2: &Tensor, spec: &KernelSpec) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(h1.clone());
    let b = g.constant(h2.clone());
    let node = mmd(&mut g, a, b, spec).unwrap();
    g.value(node).item().unwrap()
}

#[test]
fn criterion_1_estimator_matches_double_loop_oracle() {
    let started = Instant::now();
    let mut r = rng(0x01);
    let mut max_err = 0.0f64;
    for trial in 0..500 {
        let m1 = r.random_range(1..=64);
        let m2 = r.random_range(1..=64);
        let d = r.random_range(1..=32);
        let scale = [0.3, 1.0, 3.0][r.random_range(0..3)];
        let shift = [0.0, 0.5, 3.0][r.random_range(0..3)];
        let h1 = gaussian_rows(&mut r, m1, d, scale, 0.0);
        let h2 = if trial % 10 == 9 {
            // Identical sets: the statistic collapses to the offset floor
            // and only the diagonal terms keep the blocks from cancelling
            // to exactly zero in a different order.
            h1.clone()
        } else {
            gaussian_rows(&mut r, m2, d, scale, shift)
        };
        let (spec, bandwidths) = if trial % 2 == 0 {
            let sigma = (r.random_range(0.1f64..10.0)).max(0.1);
            (KernelSpec::Single { sigma }, vec![sigma])
        } else {
            let med = oracle_median_sq(&h1, &h2);
            let multipliers = [1.0, 2.0, 4.0, 8.0, 16.0];
            (
                KernelSpec::default(),
                multipliers.iter().map(|m| m * med).collect(),
            )
        };
        let got = estimator_value(&h1, &h2, &spec);
        let want = oracle_mmd(&h1, &h2, &bandwidths);
        let err = (got - want).abs();
        assert!(
            err <= 1e-10,
            "trial {trial}: estimator {got} vs oracle {want} (m1={m1} m2={m2} d={d})"
        );
        max_err = max_err.max(err);
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 10.0, "500 oracle comparisons took {secs:.1}s");
    println!("criterion 1 PASS: max |estimator - oracle| = {max_err:.3e} over 500 pairs ({secs:.2}s)");
}

// ---------------------------------------------------------------------------
// Criterion 2: autodiff against central differences and the closed form
// ---------------------------------------------------------------------------

fn fd_model_spec() -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Mlp { hidden: vec![5] },
        input_shape: vec![3],
        num_classes: 3,
        batch_norm: false,
        feature_dim: 5,
    }
}

/// Full parameter gradient of a loss built on top of a forwarded model,
/// flattened in parameter order; parameters the loss never touches
/// contribute zeros.
fn autodiff_gradient(
    params: &ParamSet,
    build: &dyn Fn(&mut Graph, &ParamSet, &[NodeId]) -> NodeId,
) -> Vec<f64> {
    let mut g = Graph::new();
    let nodes = register_params(&mut g, params, true);
    let loss = build(&mut g, params, &nodes);
    let grads = g.backward(loss).unwrap();
    let mut flat = Vec::new();
    for (node, tensor) in nodes.iter().zip(&params.tensors) {
        match grads.get(*node) {
            Some(t) => flat.extend_from_slice(t.data()),
            None => flat.extend(std::iter::repeat(0.0).take(tensor.data().len())),
        }
    }
    flat
}

fn loss_value(
    params: &ParamSet,
    build: &dyn Fn(&mut Graph, &ParamSet, &[NodeId]) -> NodeId,
) -> f64 {
    let mut g = Graph::new();
    let nodes = register_params(&mut g, params, false);
    let loss = build(&mut g, params, &nodes);
    g.value(loss).item().unwrap()
}

/// Central differences over every parameter coordinate.
fn central_diff_gradient(
    params: &ParamSet,
    build: &dyn Fn(&mut Graph, &ParamSet, &[NodeId]) -> NodeId,
    h: f64,
) -> Vec<f64> {
    let mut flat = Vec::new();
    for t in 0..params.tensors.len() {
        for k in 0..params.tensors[t].data().len() {
            let mut plus = params.clone();
            plus.tensors[t].data_mut()[k] += h;
            let mut minus = params.clone();
            minus.tensors[t].data_mut()[k] -= h;
            flat.push((loss_value(&plus, build) - loss_value(&minus, build)) / (2.0 * h));
        }
    }
    flat
}

fn fd_rel_err(
    params: &ParamSet,
    build: &dyn Fn(&mut Graph, &ParamSet, &[NodeId]) -> NodeId,
) -> f64 {
    let ad = autodiff_gradient(params, build);
    let fd = central_diff_gradient(params, build, 1e-6);
    let diff: Vec<f64> = ad.iter().zip(&fd).map(|(a, b)| a - b).collect();
    l2(&diff) / l2(&fd).max(1e-12)
}

#[test]
fn criterion_2_autodiff_matches_finite_differences_and_closed_form() {
    let started = Instant::now();
    let spec = fd_model_spec();
    let mut r = rng(0x02);
    let mut worst: Vec<(String, f64)> = Vec::new();

    for loss_name in ["ce", "lsr", "center", "match", "match_classcond"] {
        let mut max_rel = 0.0f64;
        for inst in 0..50 {
            let params = init_params(&spec, 100 + inst).unwrap();
            let m = r.random_range(3..=6);
            let x1 = gaussian_rows(&mut r, m, 3, 1.0, 0.0);
            let x2 = gaussian_rows(&mut r, m, 3, 1.0, 0.0);
            let labels: Vec<usize> = (0..m).map(|i| i % 3).collect();
            let sigma = r.random_range(0.5f64..2.0);
            let kernel = KernelSpec::Single { sigma };
            let eps_ls = r.random_range(0.05f64..0.3);
            let warm = gaussian_rows(&mut r, m, 5, 1.0, 0.0);
            let state = CenterState::new(3, 5, 0.5)
                .unwrap()
                .updated(&warm, &labels)
                .unwrap();

            let build: Box<dyn Fn(&mut Graph, &ParamSet, &[NodeId]) -> NodeId> = match loss_name {
                "ce" => Box::new(|g, p, nodes| {
                    let out = forward(g, &spec, p, nodes, &x1, ForwardMode::Train).unwrap();
                    cross_entropy(g, out.logits, &labels).unwrap()
                }),
                "lsr" => Box::new(|g, p, nodes| {
                    let out = forward(g, &spec, p, nodes, &x1, ForwardMode::Train).unwrap();
                    label_smoothing_ce(g, out.logits, &labels, eps_ls).unwrap()
                }),
                "center" => Box::new(|g, p, nodes| {
                    let out = forward(g, &spec, p, nodes, &x1, ForwardMode::Train).unwrap();
                    center_loss(g, out.features, &labels, &state).unwrap().0
                }),
                // The bandwidth is held fixed across the perturbations: it
                // is a data-dependent hyperparameter that carries no
                // gradient, so differencing through its re-estimation would
                // measure terms the training step deliberately drops.
                "match" => Box::new(|g, p, nodes| {
                    let o1 = forward(g, &spec, p, nodes, &x1, ForwardMode::Train).unwrap();
                    let o2 = forward(g, &spec, p, nodes, &x2, ForwardMode::Train).unwrap();
                    match_loss(g, o1.features, o2.features, &kernel).unwrap()
                }),
                _ => Box::new(|g, p, nodes| {
                    let o1 = forward(g, &spec, p, nodes, &x1, ForwardMode::Train).unwrap();
                    let o2 = forward(g, &spec, p, nodes, &x2, ForwardMode::Train).unwrap();
                    match_loss_classcond(g, o1.features, &labels, o2.features, &labels, 3, &kernel)
                        .unwrap()
                        .loss
                }),
            };
            let rel = fd_rel_err(&params, build.as_ref());
            assert!(rel <= 1e-4, "{loss_name} instance {inst}: rel err {rel:.3e}");
            max_rel = max_rel.max(rel);
        }
        worst.push((loss_name.to_string(), max_rel));
    }

    let report = check_closed_form_gradient(1000, 16, 8, 0x02B, Corruption::None).unwrap();
    assert!(report.pass, "closed form vs autodiff: {:?}", report.failures);
    let closed = report.measured["max_rel_err"];
    assert!(closed <= 1e-8, "closed-form max rel err {closed:.3e}");

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient checks took {secs:.1}s");
    let fd_summary: Vec<String> =
        worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    println!(
        "criterion 2 PASS: finite differences [{}], closed form {closed:.1e} over 1000 trials ({secs:.1}s)",
        fd_summary.join(", ")
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: the gradient norm envelope and outlier suppression
// ---------------------------------------------------------------------------

/// The per-row norm envelope, restated locally: with `g(x) = exp(-x^2/s)x/s`,
/// `(2/sqrt(M)) [ (1/ma^2) sum_j g(|hi - ha_j|) + (2/(ma mb)) sum_j g(|hi - hb_j|) ]`.
fn envelope(hi: &[f64], ha: &Tensor, hb: &Tensor, sigma: f64, m_sq: f64) -> f64 {
    let g = |x: f64| (-x * x / sigma).exp() * x / sigma;
    let within: f64 = (0..ha.rows()).map(|j| g(sq_dist(hi, ha.row(j)).sqrt())).sum();
    let cross: f64 = (0..hb.rows()).map(|j| g(sq_dist(hi, hb.row(j)).sqrt())).sum();
    (2.0 / m_sq.sqrt())
        * (within / (ha.rows() * ha.rows()) as f64
            + 2.0 * cross / (ha.rows() * hb.rows()) as f64)
}

#[test]
fn criterion_3_gradient_norm_bound_and_outlier_suppression() {
    // Spot check straight from autodiff: every row's gradient norm sits
    // under the envelope, on both sides of the pair.
    let mut r = rng(0x03);
    let sigma = 1.3;
    for trial in 0..25 {
        let ma = r.random_range(2..=12);
        let mb = r.random_range(2..=12);
        let d = r.random_range(1..=6);
        let h1 = gaussian_rows(&mut r, ma, d, 1.0, 0.0);
        let h2 = gaussian_rows(&mut r, mb, d, 1.0, 2.0);
        for swap in [false, true] {
            let (x, y) = if swap { (&h2, &h1) } else { (&h1, &h2) };
            let mut g = Graph::new();
            let px = g.param(x.clone());
            let cy = g.constant(y.clone());
            let node = mmd(&mut g, px, cy, &KernelSpec::Single { sigma }).unwrap();
            let value = g.value(node).item().unwrap();
            let m_sq = value * value;
            let grads = g.backward(node).unwrap();
            let grad = grads.get(px).unwrap();
            for i in 0..x.rows() {
                let lhs = l2(grad.row(i));
                let rhs = envelope(x.row(i), x, y, sigma, m_sq);
                assert!(
                    lhs <= rhs * (1.0 + 1e-9),
                    "trial {trial} swap {swap} row {i}: |grad| {lhs} above envelope {rhs}"
                );
            }
        }
    }

    let report =
        check_gradient_norm_bound(1000, &[2.0, 4.0, 6.0, 8.0, 10.0], 1.5, 0x03B, Corruption::None)
            .unwrap();
    assert!(report.pass, "norm bound: {:?}", report.failures);
    assert_eq!(report.measured["bound_violations"], 0.0);
    let ratio = report.measured["outlier_ratio_final"];
    assert!(ratio <= 1e-3, "outlier ratio {ratio:.3e}");
    println!(
        "criterion 3 PASS: 0 violations in 1000 trials, outlier/median norm ratio {ratio:.2e} at the last rung"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: weight simplex and the weighted-centroid identity
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_adaptive_weights_simplex_and_centroid_identity() {
    use itra_core::kernels::adaptive_weights;

    let mut r = rng(0x04);
    let mut max_defect = 0.0f64;
    for _ in 0..200 {
        let m = r.random_range(1..=24);
        let d = r.random_range(1..=8);
        let spread = r.random_range(0.3f64..3.0);
        let offset = r.random_range(0.0f64..4.0);
        let batch = gaussian_rows(&mut r, m, d, spread, 0.0);
        let probe = gaussian_rows(&mut r, 1, d, 1.0, offset);
        let sigma = r.random_range(0.2f64..5.0);
        let w = adaptive_weights(probe.row(0), &batch, sigma).unwrap();
        assert!(w.iter().all(|&v| v >= 0.0), "negative weight in {w:?}");
        let defect = (w.iter().sum::<f64>() - 1.0).abs();
        assert!(defect <= 1e-12, "weight sum off by {defect:.3e}");
        max_defect = max_defect.max(defect);
    }

    let report = check_weight_identity(1000, 0x04B, Corruption::None).unwrap();
    assert!(report.pass, "centroid identity: {:?}", report.failures);
    let rel = report.measured["max_rel_err"];
    let defect = report.measured["max_simplex_defect"];
    assert!(rel <= 1e-10, "identity rel err {rel:.3e}");
    assert!(defect <= 1e-12, "simplex defect {defect:.3e}");
    println!(
        "criterion 4 PASS: simplex defect {:.1e} direct / {defect:.1e} in-check, centroid identity {rel:.1e} over 1000 trials",
        max_defect
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: cross-mode weight mass at ten standard deviations
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_modality_alignment_cross_mode_mass() {
    // Direct computation first, touching no library code: two modes ten
    // standard deviations apart, twenty probes near the first mode, kernel
    // weights over the pooled-median bandwidth. The threshold is asserted
    // on this independent protocol before the packaged check is trusted.
    let (std, sep, per_mode, probes) = (0.5f64, 5.0f64, 32usize, 20usize);
    let mut masses = Vec::new();
    for seed in 1..=5u64 {
        let mut r = rng(seed);
        let probe_rows = gaussian_rows(&mut r, probes, 2, std, 0.0);
        let mode_a = gaussian_rows(&mut r, per_mode, 2, std, 0.0);
        let mode_b = gaussian_rows(&mut r, per_mode, 2, std, sep);
        let batch = Tensor::new(
            vec![2 * per_mode, 2],
            [mode_a.data(), mode_b.data()].concat(),
        )
        .unwrap();
        let sigma = oracle_median_sq(&probe_rows, &batch);
        for p in 0..probes {
            let weights: Vec<f64> = (0..batch.rows())
                .map(|j| (-sq_dist(probe_rows.row(p), batch.row(j)) / sigma).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let cross: f64 = weights[per_mode..].iter().sum();
            masses.push(cross / total);
        }
    }
    let direct_mean = masses.iter().sum::<f64>() / masses.len() as f64;
    assert!(
        direct_mean <= 0.05,
        "direct cross-mode mass {direct_mean:.4} over {} probes",
        masses.len()
    );

    // The packaged check must agree on the same geometry.
    let spec = MixtureSpec {
        dim: 2,
        seed: 0,
        classes: vec![
            ClassSpec {
                modes: vec![
                    ModeSpec { mean: vec![0.0, 0.0], std, count: per_mode },
                    ModeSpec { mean: vec![sep, 0.0], std, count: per_mode },
                ],
            },
            ClassSpec {
                modes: vec![ModeSpec { mean: vec![100.0, 100.0], std, count: 4 }],
            },
        ],
    };
    let mut check_means = Vec::new();
    for seed in 1..=5u64 {
        let report = check_modality_alignment(&spec, probes, None, seed).unwrap();
        assert!(report.pass, "seed {seed}: {:?}", report.failures);
        let mean = report.measured["mean_cross_mass"];
        assert!(mean <= 0.05, "seed {seed}: mean mass {mean:.4}");
        check_means.push(mean);
    }
    let check_worst = check_means.iter().cloned().fold(0.0f64, f64::max);
    println!(
        "criterion 5 PASS: cross-mode mass {direct_mean:.2e} direct mean, {check_worst:.2e} worst in-check mean over 5 seeds x 20 probes"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: matching contracts same-class pair distance
// ---------------------------------------------------------------------------

/// Two classes, two well-separated modes each, eight pure-noise input
/// coordinates, unit spread: hard enough that plain training keeps
/// over-adapting to batches instead of compacting features.
fn contraction_mixture(seed: u64, per_mode: usize) -> MixtureSpec {
    let mode = |x: f64, y: f64| ModeSpec {
        mean: [vec![x, y], vec![0.0; 8]].concat(),
        std: 1.0,
        count: per_mode,
    };
    MixtureSpec {
        dim: 10,
        seed,
        classes: vec![
            ClassSpec { modes: vec![mode(0.0, 0.0), mode(3.0, 0.0)] },
            ClassSpec { modes: vec![mode(0.0, 3.0), mode(3.0, 3.0)] },
        ],
    }
}

fn contraction_config(method: Method, seed: u64) -> RunConfig {
    RunConfig {
        method,
        model: ModelSpec {
            kind: ModelKind::Mlp { hidden: vec![64, 32] },
            input_shape: vec![10],
            num_classes: 2,
            batch_norm: false,
            feature_dim: 32,
        },
        data: DataConfig::Mixture {
            train: contraction_mixture(seed * 1000 + 1, 500),
            test: contraction_mixture(seed * 1000 + 2, 125),
        },
        lambda: 0.6,
        epochs: 30,
        batch1: 50,
        batch2: 50,
        learning_rate: 0.05,
        momentum: 0.5,
        lr_decay_epochs: vec![],
        lr_decay_factor: 0.2,
        weight_decay: 0.0,
        seed,
        stratified: None,
        kernel: KernelSpec::default(),
        label_smoothing: 0.1,
        center_beta: 0.5,
        audit_pair_sampling: false,
        metric_pairs: 256,
        out_dir: None,
    }
}

#[test]
fn criterion_6_matching_contracts_same_class_pair_distance() {
    let mut final_wins = 0usize;
    let mut ratios = [Vec::new(), Vec::new()];
    for seed in 1..=5u64 {
        let mut finals = [0.0f64; 2];
        for (slot, method) in [Method::Baseline, Method::ItraC].into_iter().enumerate() {
            let cfg = contraction_config(method, seed);
            let (train_ds, test_ds) = load_datasets(&cfg.data, &cfg.model).unwrap();
            let started = Instant::now();
            let out = train(&cfg, &train_ds, &test_ds, |_| Ok(())).unwrap();
            let secs = started.elapsed().as_secs_f64();
            assert!(secs < 120.0, "seed {seed} {method:?} took {secs:.0}s");
            let first = out.metrics.first().unwrap().pair_distance;
            let last = out.metrics.last().unwrap().pair_distance;
            finals[slot] = last;
            ratios[slot].push(last / first);
        }
        if finals[1] < finals[0] {
            final_wins += 1;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (base_ratio, itra_ratio) = (mean(&ratios[0]), mean(&ratios[1]));
    assert!(
        final_wins >= 4,
        "matching ended with the lower pair distance in only {final_wins}/5 seeds"
    );
    assert!(
        itra_ratio < base_ratio,
        "final/initial distance ratio {itra_ratio:.4} not below the plain-training {base_ratio:.4}"
    );
    println!(
        "criterion 6 PASS: lower final pair distance in {final_wins}/5 seeds, distance ratio {itra_ratio:.3} vs {base_ratio:.3}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: image-classification direction at desk scale
// ---------------------------------------------------------------------------

/// The 10k/10k Fashion-MNIST subset shipped with the repository, or a
/// directory named by ITRA_FMNIST_DIR.
fn fmnist_dir() -> std::path::PathBuf {
    match std::env::var_os("ITRA_FMNIST_DIR") {
        Some(dir) => dir.into(),
        None => std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fmnist"),
    }
}

fn fmnist_config(method: Method, seed: u64) -> RunConfig {
    RunConfig {
        method,
        model: ModelSpec {
            kind: ModelKind::Cnn2,
            input_shape: vec![1, 28, 28],
            num_classes: 10,
            batch_norm: false,
            feature_dim: 100,
        },
        data: DataConfig::Idx { dir: fmnist_dir(), normalize: true },
        lambda: 0.6,
        epochs: 15,
        batch1: 150,
        batch2: 150,
        // At 0.01 the network is still underfitting when the epoch budget ends
        // and both methods look alike; 0.05 reaches the over-adaption phase
        // (train/test cross-entropy diverge) where the matching term matters.
        learning_rate: 0.05,
        momentum: 0.5,
        lr_decay_epochs: vec![20, 40],
        lr_decay_factor: 0.2,
        weight_decay: 0.0,
        seed,
        stratified: None,
        kernel: KernelSpec::default(),
        label_smoothing: 0.1,
        center_beta: 0.5,
        audit_pair_sampling: false,
        metric_pairs: 256,
        out_dir: None,
    }
}

#[test]
fn criterion_7_fmnist_matching_lowers_test_cross_entropy() {
    let probe = fmnist_config(Method::Baseline, 1);
    let (train_ds, test_ds) = load_datasets(&probe.data, &probe.model).unwrap();
    let mut means = [[0.0f64; 2]; 2]; // [method][ce, acc]
    for (slot, method) in [Method::Baseline, Method::ItraC].into_iter().enumerate() {
        for seed in 1..=5u64 {
            let cfg = fmnist_config(method, seed);
            let started = Instant::now();
            let out = train(&cfg, &train_ds, &test_ds, |_| Ok(())).unwrap();
            let last = out.metrics.last().unwrap();
            println!(
                "  {} seed {seed}: test ce {:.4}, accuracy {:.4} ({:.0}s)",
                method.as_str(),
                last.test_ce,
                last.test_accuracy,
                started.elapsed().as_secs_f64()
            );
            means[slot][0] += last.test_ce / 5.0;
            means[slot][1] += last.test_accuracy / 5.0;
        }
    }
    let (base, itra) = (means[0], means[1]);
    assert!(
        itra[0] <= base[0] - 0.02,
        "mean test cross-entropy {:.4} not at least 0.02 below the plain-training {:.4}",
        itra[0],
        base[0]
    );
    assert!(
        itra[1] >= base[1] - 0.002,
        "mean accuracy {:.4} trails the plain-training {:.4} by more than 0.2 points",
        itra[1],
        base[1]
    );
    println!(
        "criterion 7 PASS: mean test ce {:.4} vs {:.4}, mean accuracy {:.4} vs {:.4} over 5 seeds",
        itra[0], base[0], itra[1], base[1]
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: reductions to plain training are exact
// ---------------------------------------------------------------------------

fn parity_mixture(seed: u64, per_mode: usize) -> MixtureSpec {
    let mode = |x: f64, y: f64| ModeSpec { mean: vec![x, y], std: 0.4, count: per_mode };
    MixtureSpec {
        dim: 2,
        seed,
        classes: vec![
            ClassSpec { modes: vec![mode(0.0, 0.0), mode(3.0, 3.0)] },
            ClassSpec { modes: vec![mode(0.0, 3.0), mode(3.0, 0.0)] },
        ],
    }
}

fn parity_config(method: Method) -> RunConfig {
    RunConfig {
        method,
        model: ModelSpec {
            kind: ModelKind::Mlp { hidden: vec![16] },
            input_shape: vec![2],
            num_classes: 2,
            batch_norm: false,
            feature_dim: 16,
        },
        data: DataConfig::Mixture {
            train: parity_mixture(71, 50),
            test: parity_mixture(72, 15),
        },
        lambda: 0.6,
        epochs: 6,
        batch1: 40,
        batch2: 40,
        learning_rate: 0.05,
        momentum: 0.5,
        lr_decay_epochs: vec![],
        lr_decay_factor: 0.2,
        weight_decay: 0.0,
        seed: 33,
        stratified: None,
        kernel: KernelSpec::default(),
        label_smoothing: 0.1,
        center_beta: 0.5,
        audit_pair_sampling: false,
        metric_pairs: 256,
        out_dir: None,
    }
}

fn assert_params_bit_equal(a: &ParamSet, b: &ParamSet, what: &str) {
    assert_eq!(a.tensors.len(), b.tensors.len());
    for (name, (x, y)) in a.names.iter().zip(a.tensors.iter().zip(&b.tensors)) {
        let same = x
            .data()
            .iter()
            .zip(y.data())
            .all(|(p, q)| p.to_bits() == q.to_bits());
        assert!(same, "{what}: parameter {name} differs");
    }
}

#[test]
fn criterion_8_reduction_identities_bit_exact() {
    // A zero matching weight must reproduce plain training parameter for
    // parameter, once both runs draw the audit batch to keep their random
    // streams aligned.
    let mut base = parity_config(Method::Baseline);
    base.audit_pair_sampling = true;
    let mut zero = parity_config(Method::Itra);
    zero.audit_pair_sampling = true;
    zero.lambda = 0.0;
    let (train_ds, test_ds) = load_datasets(&base.data, &base.model).unwrap();
    let a = train(&base, &train_ds, &test_ds, |_| Ok(())).unwrap();
    let b = train(&zero, &train_ds, &test_ds, |_| Ok(())).unwrap();
    assert_params_bit_equal(&a.params, &b.params, "zero-weight matching vs plain");

    // Zero label smoothing must walk the exact plain-training trajectory.
    let plain = parity_config(Method::Baseline);
    let mut smooth_free = parity_config(Method::Lsr);
    smooth_free.label_smoothing = 0.0;
    let c = train(&plain, &train_ds, &test_ds, |_| Ok(())).unwrap();
    let d = train(&smooth_free, &train_ds, &test_ds, |_| Ok(())).unwrap();
    for (x, y) in c.metrics.iter().zip(&d.metrics) {
        assert_eq!(x.train_ce.to_bits(), y.train_ce.to_bits(), "epoch {}", x.epoch);
        assert_eq!(x.test_ce.to_bits(), y.test_ce.to_bits(), "epoch {}", x.epoch);
    }
    assert_params_bit_equal(&c.params, &d.params, "zero smoothing vs plain");
    println!(
        "criterion 8 PASS: zero-weight matching and zero smoothing reproduce plain training bit for bit over {} epochs",
        c.metrics.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: runs are byte-reproducible
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_metrics_are_byte_identical_across_executions() {
    let mut cfg = parity_config(Method::ItraC);
    cfg.epochs = 5;
    let (train_ds, test_ds) = load_datasets(&cfg.data, &cfg.model).unwrap();
    let serialize = |records: &[MetricsRecord]| -> Vec<u8> {
        let mut bytes = Vec::new();
        for record in records {
            bytes.extend_from_slice(serde_json::to_string(record).unwrap().as_bytes());
            bytes.push(b'\n');
        }
        bytes
    };
    let first = train(&cfg, &train_ds, &test_ds, |_| Ok(())).unwrap();
    let second = train(&cfg, &train_ds, &test_ds, |_| Ok(())).unwrap();
    let (a, b) = (serialize(&first.metrics), serialize(&second.metrics));
    assert_eq!(a, b, "metric lines differ between two executions");
    println!(
        "criterion 9 PASS: {} metric bytes identical across two executions",
        a.len()
    );
}
