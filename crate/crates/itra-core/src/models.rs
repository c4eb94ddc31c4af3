//! Model definitions: a configurable MLP and two fixed convolutional nets,
//! each split into a feature extractor and a single affine classifier.
//!
//! One layer plan, derived from the spec, drives both parameter
//! initialization and the forward pass, so the two can never drift apart.
//! The "feature" a model exposes is the activation after the last hidden
//! ReLU, immediately before the classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnBatchStats, Graph, NodeId};
use crate::tensor::Tensor;

/// Momentum of the batch-norm running statistics:
/// `running = (1 - rho) * running + rho * batch`.
pub const BN_RUNNING_RHO: f64 = 0.1;

/// Epsilon inside the batch-norm denominator.
pub const BN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Specification
// ---------------------------------------------------------------------------

/// Architecture family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    /// Fully connected net; `hidden` lists the hidden widths and the last
    /// entry is the feature width.
    Mlp { hidden: Vec<usize> },
    /// Two 5x5 valid convolutions (20 then 50 channels), each followed by
    /// 2x2 max-pooling, then a 100-wide feature layer.
    Cnn2,
    /// Five 3x3 same-padded convolutions (32/64/128/256/512 channels) with
    /// normalization after the first, second and fourth, 2x2 pooling after
    /// the third, an 8x1 pooling after the fifth, then a 512-wide feature
    /// layer.
    Cnn5,
}

/// Full model description. `input_shape` is `[d]` for the MLP and
/// `[channels, height, width]` for the convolutional kinds; inputs arrive
/// row-flattened either way.
// No deny_unknown_fields here: serde cannot combine it with a flattened
// field, since the leftover keys are what feed the inner enum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub batch_norm: bool,
    pub feature_dim: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Expands the spec into the concrete layer sequence of the extractor.
    /// The classifier affine map is appended by callers.
    fn plan(&self) -> Result<Vec<Layer>> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "model needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        match &self.kind {
            ModelKind::Mlp { hidden } => {
                let [d_in] = self.input_shape[..] else {
                    return Err(Error::Config(format!(
                        "mlp input shape must be [d], got {:?}",
                        self.input_shape
                    )));
                };
                if d_in == 0 || hidden.is_empty() || hidden.contains(&0) {
                    return Err(Error::Config(format!(
                        "mlp needs a nonzero input and hidden widths, got {d_in} and {hidden:?}"
                    )));
                }
                if *hidden.last().unwrap() != self.feature_dim {
                    return Err(Error::Config(format!(
                        "last hidden width {} must equal feature dim {}",
                        hidden.last().unwrap(),
                        self.feature_dim
                    )));
                }
                let mut layers = Vec::new();
                let mut width = d_in;
                for (i, &w) in hidden.iter().enumerate() {
                    layers.push(Layer::Dense {
                        name: format!("fc{}", i + 1),
                        inp: width,
                        out: w,
                    });
                    layers.push(Layer::Relu);
                    width = w;
                }
                Ok(layers)
            }
            ModelKind::Cnn2 => self.conv_plan(
                100,
                &[
                    ConvStep::Conv { channels: 20, k: 5, pad: 0, bn: false },
                    ConvStep::Relu,
                    ConvStep::Pool { k: 2, stride: 2 },
                    ConvStep::Conv { channels: 50, k: 5, pad: 0, bn: false },
                    ConvStep::Relu,
                    ConvStep::Pool { k: 2, stride: 2 },
                ],
            ),
            ModelKind::Cnn5 => self.conv_plan(
                512,
                &[
                    ConvStep::Conv { channels: 32, k: 3, pad: 1, bn: true },
                    ConvStep::Relu,
                    ConvStep::Conv { channels: 64, k: 3, pad: 1, bn: true },
                    ConvStep::Relu,
                    ConvStep::Conv { channels: 128, k: 3, pad: 1, bn: false },
                    ConvStep::Relu,
                    ConvStep::Pool { k: 2, stride: 2 },
                    ConvStep::Conv { channels: 256, k: 3, pad: 1, bn: true },
                    ConvStep::Relu,
                    ConvStep::Conv { channels: 512, k: 3, pad: 1, bn: false },
                    ConvStep::Relu,
                    ConvStep::Pool { k: 8, stride: 1 },
                ],
            ),
        }
    }

    fn conv_plan(&self, feature_width: usize, steps: &[ConvStep]) -> Result<Vec<Layer>> {
        let [c0, h0, w0] = self.input_shape[..] else {
            return Err(Error::Config(format!(
                "conv input shape must be [c, h, w], got {:?}",
                self.input_shape
            )));
        };
        if self.feature_dim != feature_width {
            return Err(Error::Config(format!(
                "this architecture has a {feature_width}-wide feature layer, spec says {}",
                self.feature_dim
            )));
        }
        let (mut c, mut h, mut w) = (c0, h0, w0);
        let mut layers = Vec::new();
        let mut conv_idx = 0;
        for step in steps {
            match *step {
                ConvStep::Conv { channels, k, pad, bn } => {
                    conv_idx += 1;
                    let oh = (h + 2 * pad).checked_sub(k - 1);
                    let ow = (w + 2 * pad).checked_sub(k - 1);
                    let (Some(oh), Some(ow)) = (oh, ow) else {
                        return Err(Error::Config(format!(
                            "input {h}x{w} too small for a {k}x{k} convolution"
                        )));
                    };
                    layers.push(Layer::Conv {
                        name: format!("conv{conv_idx}"),
                        c_in: c,
                        c_out: channels,
                        k,
                        pad,
                    });
                    if bn && self.batch_norm {
                        layers.push(Layer::Bn {
                            name: format!("bn{conv_idx}"),
                            channels,
                        });
                    }
                    (c, h, w) = (channels, oh, ow);
                }
                ConvStep::Relu => layers.push(Layer::Relu),
                ConvStep::Pool { k, stride } => {
                    if h < k || w < k {
                        return Err(Error::Config(format!(
                            "input {h}x{w} too small for a {k}x{k} pooling window"
                        )));
                    }
                    layers.push(Layer::Pool { k, stride });
                    h = (h - k) / stride + 1;
                    w = (w - k) / stride + 1;
                }
            }
        }
        let flat = c * h * w;
        layers.push(Layer::Flatten { size: flat });
        layers.push(Layer::Dense {
            name: "fc1".to_string(),
            inp: flat,
            out: feature_width,
        });
        layers.push(Layer::Relu);
        Ok(layers)
    }
}

enum ConvStep {
    Conv { channels: usize, k: usize, pad: usize, bn: bool },
    Relu,
    Pool { k: usize, stride: usize },
}

enum Layer {
    Dense { name: String, inp: usize, out: usize },
    Conv { name: String, c_in: usize, c_out: usize, k: usize, pad: usize },
    Bn { name: String, channels: usize },
    Pool { k: usize, stride: usize },
    Flatten { size: usize },
    Relu,
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// All mutable model state: named parameter tensors, their momentum
/// buffers, and normalization running statistics. Parameter order is fixed
/// at init and shared with the forward pass.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub velocity: Vec<Tensor>,
    pub bn: Vec<BnRunning>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Everything not under `classifier.` belongs to the feature extractor.
    pub fn is_classifier(&self, idx: usize) -> bool {
        self.names[idx].starts_with("classifier.")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
            && self.bn.iter().all(|b| {
                b.mean.iter().all(|v| v.is_finite()) && b.var.iter().all(|v| v.is_finite())
            })
    }

    /// Folds one batch's statistics into the running estimates. The batch
    /// variance arrives biased (as used for normalization); the running
    /// estimate stores the unbiased version, the usual convention.
    pub fn update_bn_running(&mut self, updates: &[BnUpdate]) -> Result<()> {
        if updates.len() != self.bn.len() {
            return Err(Error::contract(
                "update_bn_running",
                format!("{} updates for {} layers", updates.len(), self.bn.len()),
            ));
        }
        for (layer, up) in self.bn.iter_mut().zip(updates) {
            let n = up.count as f64;
            let correction = if up.count > 1 { n / (n - 1.0) } else { 1.0 };
            for (r, &b) in layer.mean.iter_mut().zip(&up.stats.mean) {
                *r = (1.0 - BN_RUNNING_RHO) * *r + BN_RUNNING_RHO * b;
            }
            for (r, &b) in layer.var.iter_mut().zip(&up.stats.var) {
                *r = (1.0 - BN_RUNNING_RHO) * *r + BN_RUNNING_RHO * (b * correction);
            }
        }
        Ok(())
    }
}

/// One normalization layer's batch statistics plus the per-channel sample
/// count behind them.
pub struct BnUpdate {
    pub stats: BnBatchStats,
    pub count: usize,
}

/// Seed-deterministic initialization: weights uniform in
/// `(-sqrt(6/fan_in), +sqrt(6/fan_in))`, biases zero, normalization scale
/// one and shift zero, running stats at (0, 1), momentum buffers zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    let mut plan = spec.plan()?;
    plan.push(Layer::Dense {
        name: "classifier".to_string(),
        inp: spec.feature_dim,
        out: spec.num_classes,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet {
        names: Vec::new(),
        tensors: Vec::new(),
        velocity: Vec::new(),
        bn: Vec::new(),
    };
    let push = |set: &mut ParamSet, name: String, t: Tensor| {
        set.velocity.push(Tensor::zeros(t.shape().to_vec()));
        set.names.push(name);
        set.tensors.push(t);
    };
    for layer in &plan {
        match layer {
            Layer::Dense { name, inp, out } => {
                let w = uniform_fan_in(&mut rng, vec![*inp, *out], *inp);
                push(&mut set, format!("{name}.weight"), w);
                push(&mut set, format!("{name}.bias"), Tensor::zeros(vec![*out]));
            }
            Layer::Conv { name, c_in, c_out, k, .. } => {
                let fan_in = c_in * k * k;
                let w = uniform_fan_in(&mut rng, vec![*c_out, *c_in, *k, *k], fan_in);
                push(&mut set, format!("{name}.weight"), w);
                push(&mut set, format!("{name}.bias"), Tensor::zeros(vec![*c_out]));
            }
            Layer::Bn { name, channels } => {
                push(&mut set, format!("{name}.gamma"), Tensor::full(vec![*channels], 1.0));
                push(&mut set, format!("{name}.beta"), Tensor::zeros(vec![*channels]));
                set.bn.push(BnRunning {
                    name: name.clone(),
                    mean: vec![0.0; *channels],
                    var: vec![1.0; *channels],
                });
            }
            Layer::Pool { .. } | Layer::Flatten { .. } | Layer::Relu => {}
        }
    }
    Ok(set)
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches generated count")
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Registers every parameter tensor on a graph, in `ParamSet` order.
/// Trainable registration yields gradient slots; constant registration is
/// for evaluation-only graphs.
pub fn register_params(g: &mut Graph, params: &ParamSet, trainable: bool) -> Vec<NodeId> {
    params
        .tensors
        .iter()
        .map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Normalization uses the current batch's statistics; the statistics
    /// are returned so the caller can decide whether to fold them into the
    /// running estimates (first batch: yes; matching batch: no).
    Train,
    /// Normalization uses the stored running statistics; fully
    /// deterministic and per-sample independent.
    Eval,
}

/// Outcome of one forward pass.
pub struct ForwardOut {
    /// Post-ReLU last-hidden activation, `[m, feature_dim]`.
    pub features: NodeId,
    /// Classifier output, `[m, num_classes]`.
    pub logits: NodeId,
    /// Batch statistics per normalization layer (train mode only).
    pub bn_updates: Vec<BnUpdate>,
}

/// Runs the model on a row-flattened input batch `[m, input_len]`.
/// `nodes` must come from [`register_params`] on the same `ParamSet`.
pub fn forward(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &ParamSet,
    nodes: &[NodeId],
    x: &Tensor,
    mode: ForwardMode,
) -> Result<ForwardOut> {
    let mut plan = spec.plan()?;
    plan.push(Layer::Dense {
        name: "classifier".to_string(),
        inp: spec.feature_dim,
        out: spec.num_classes,
    });
    if nodes.len() != params.len() {
        return Err(Error::contract(
            "forward",
            format!("{} registered nodes for {} parameters", nodes.len(), params.len()),
        ));
    }
    if !x.is_2d() || x.cols() != spec.input_len() || x.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: x.shape().to_vec(),
            right: vec![1, spec.input_len()],
        });
    }
    let m = x.rows();
    let mut cur = g.constant(x.clone());
    if let [c, h, w] = spec.input_shape[..] {
        cur = g.reshape(cur, vec![m, c, h, w])?;
    }

    let mut next_param = 0;
    let mut take2 = || {
        let pair = (nodes[next_param], nodes[next_param + 1]);
        next_param += 2;
        pair
    };
    let mut bn_idx = 0;
    let mut bn_updates = Vec::new();
    let mut features = None;

    for layer in &plan {
        match layer {
            Layer::Dense { name, .. } => {
                // The activation entering the classifier is the feature.
                if name == "classifier" {
                    features = Some(cur);
                }
                let (w, b) = take2();
                let prod = g.matmul(cur, w)?;
                cur = g.add(prod, b)?;
            }
            Layer::Conv { pad, .. } => {
                let (w, b) = take2();
                let conv = g.conv2d(cur, w, 1, *pad)?;
                cur = g.channel_bias(conv, b)?;
            }
            Layer::Bn { .. } => {
                let (gamma, beta) = take2();
                match mode {
                    ForwardMode::Train => {
                        let count = bn_count(g.value(cur).shape());
                        let (y, stats) = g.batch_norm_train(cur, gamma, beta, BN_EPS)?;
                        cur = y;
                        bn_updates.push(BnUpdate { stats, count });
                    }
                    ForwardMode::Eval => {
                        let running = &params.bn[bn_idx];
                        cur = g.batch_norm_eval(
                            cur,
                            gamma,
                            beta,
                            &running.mean,
                            &running.var,
                            BN_EPS,
                        )?;
                    }
                }
                bn_idx += 1;
            }
            Layer::Pool { k, stride } => {
                cur = g.maxpool2d(cur, *k, *stride)?;
            }
            Layer::Flatten { size } => {
                cur = g.reshape(cur, vec![m, *size])?;
            }
            Layer::Relu => {
                cur = g.relu(cur);
            }
        }
    }
    Ok(ForwardOut {
        features: features.expect("plan always ends with the classifier"),
        logits: cur,
        bn_updates,
    })
}

fn bn_count(shape: &[usize]) -> usize {
    match shape {
        [n, _c] => *n,
        [n, _c, h, w] => n * h * w,
        _ => 1,
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp_spec() -> ModelSpec {
        ModelSpec {
            kind: ModelKind::Mlp { hidden: vec![6, 4] },
            input_shape: vec![5],
            num_classes: 3,
            batch_norm: false,
            feature_dim: 4,
        }
    }

    fn cnn2_spec() -> ModelSpec {
        ModelSpec {
            kind: ModelKind::Cnn2,
            input_shape: vec![1, 28, 28],
            num_classes: 10,
            batch_norm: false,
            feature_dim: 100,
        }
    }

    #[test]
    fn init_is_seed_deterministic_with_zero_biases() {
        let spec = mlp_spec();
        let a = init_params(&spec, 7).unwrap();
        let b = init_params(&spec, 7).unwrap();
        let c = init_params(&spec, 8).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.names[i], b.names[i]);
            let (ta, tb) = (a.tensors[i].data(), b.tensors[i].data());
            assert!(ta.iter().zip(tb).all(|(x, y)| x.to_bits() == y.to_bits()));
            if a.names[i].ends_with(".bias") {
                assert!(ta.iter().all(|v| *v == 0.0), "{} not zero", a.names[i]);
            }
            assert!(a.velocity[i].data().iter().all(|v| *v == 0.0));
        }
        let differs = (0..a.len()).any(|i| a.tensors[i].data() != c.tensors[i].data());
        assert!(differs, "different seeds should differ");
    }

    #[test]
    fn init_weight_sample_mean_is_centered() {
        // fc1 of cnn2 has 800*100 = 80000 entries drawn uniformly from
        // (-b, b); the sample mean should sit within 3 standard errors of 0.
        let params = init_params(&cnn2_spec(), 12345).unwrap();
        let idx = params.names.iter().position(|n| n == "fc1.weight").unwrap();
        let data = params.tensors[idx].data();
        assert!(data.len() >= 10_000);
        let bound = (6.0 / 800.0f64).sqrt();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let se = bound / (3.0 * data.len() as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se, "mean {mean} exceeds 3 SE {}", 3.0 * se);
        assert!(data.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn mlp_zero_weights_give_zero_feature_and_logits() {
        let spec = mlp_spec();
        let mut params = init_params(&spec, 0).unwrap();
        for t in &mut params.tensors {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params, false);
        let x = Tensor::full(vec![2, 5], 0.3);
        let out = forward(&mut g, &spec, &params, &nodes, &x, ForwardMode::Eval).unwrap();
        assert!(g.value(out.features).data().iter().all(|v| *v == 0.0));
        assert!(g.value(out.logits).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cnn2_output_widths_match_architecture() {
        let spec = cnn2_spec();
        let params = init_params(&spec, 3).unwrap();
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params, false);
        let x = Tensor::full(vec![2, 28 * 28], 0.1);
        let out = forward(&mut g, &spec, &params, &nodes, &x, ForwardMode::Eval).unwrap();
        assert_eq!(g.value(out.features).shape(), &[2, 100]);
        assert_eq!(g.value(out.logits).shape(), &[2, 10]);
        // Parameter bookkeeping: two convs + fc1 + classifier, each with
        // weight and bias.
        assert_eq!(params.len(), 8);
        assert!(params.is_classifier(6) && params.is_classifier(7));
        assert!(!params.is_classifier(0));
    }

    #[test]
    fn cnn5_shapes_and_bn_layout() {
        let spec = ModelSpec {
            kind: ModelKind::Cnn5,
            input_shape: vec![1, 28, 28],
            num_classes: 10,
            batch_norm: true,
            feature_dim: 512,
        };
        let params = init_params(&spec, 5).unwrap();
        assert_eq!(params.bn.len(), 3);
        assert_eq!(params.bn[0].name, "bn1");
        assert_eq!(params.bn[2].name, "bn4");
        assert_eq!(params.bn[0].mean.len(), 32);
        assert_eq!(params.bn[1].mean.len(), 64);
        assert_eq!(params.bn[2].mean.len(), 256);
        assert!(params.bn.iter().all(|b| b.var.iter().all(|v| *v == 1.0)));
        // fc1 sees 512 channels at 7x7 after the two poolings.
        let idx = params.names.iter().position(|n| n == "fc1.weight").unwrap();
        assert_eq!(params.tensors[idx].shape(), &[512 * 7 * 7, 512]);

        // Without normalization enabled the bn parameters disappear.
        let plain = ModelSpec { batch_norm: false, ..spec };
        let p2 = init_params(&plain, 5).unwrap();
        assert!(p2.bn.is_empty());
        assert!(p2.names.iter().all(|n| !n.contains("bn")));
    }

    #[test]
    fn eval_forward_is_batch_size_invariant() {
        let spec = mlp_spec();
        let params = init_params(&spec, 11).unwrap();
        let x = {
            let data: Vec<f64> = (0..15).map(|i| (i as f64) * 0.17 - 1.0).collect();
            Tensor::new(vec![3, 5], data).unwrap()
        };
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params, false);
        let batched = forward(&mut g, &spec, &params, &nodes, &x, ForwardMode::Eval).unwrap();
        let full = g.value(batched.logits).clone();
        for i in 0..3 {
            let row = Tensor::new(vec![1, 5], x.row(i).to_vec()).unwrap();
            let mut g2 = Graph::new();
            let nodes2 = register_params(&mut g2, &params, false);
            let single =
                forward(&mut g2, &spec, &params, &nodes2, &row, ForwardMode::Eval).unwrap();
            assert_eq!(g2.value(single.logits).data(), full.row(i));
        }
    }

    #[test]
    fn train_mode_returns_bn_updates_and_eval_uses_running() {
        let spec = ModelSpec {
            kind: ModelKind::Cnn5,
            input_shape: vec![1, 16, 16],
            num_classes: 3,
            batch_norm: true,
            feature_dim: 512,
        };
        let mut params = init_params(&spec, 2).unwrap();
        let x = {
            let data: Vec<f64> = (0..2 * 256).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
            Tensor::new(vec![2, 256], data).unwrap()
        };
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params, false);
        let out = forward(&mut g, &spec, &params, &nodes, &x, ForwardMode::Train).unwrap();
        assert_eq!(out.bn_updates.len(), 3);
        assert_eq!(out.bn_updates[0].count, 2 * 16 * 16);
        let before = params.bn[0].mean.clone();
        params.update_bn_running(&out.bn_updates).unwrap();
        assert_ne!(params.bn[0].mean, before);
        // Eval mode touches nothing and returns no updates.
        let mut g2 = Graph::new();
        let nodes2 = register_params(&mut g2, &params, false);
        let out2 = forward(&mut g2, &spec, &params, &nodes2, &x, ForwardMode::Eval).unwrap();
        assert!(out2.bn_updates.is_empty());
    }

    #[test]
    fn spec_validation_rejects_inconsistent_dims() {
        let mut bad = mlp_spec();
        bad.feature_dim = 7;
        assert!(bad.validate().is_err());
        let mut bad2 = cnn2_spec();
        bad2.input_shape = vec![1, 8, 8]; // second conv cannot fit
        assert!(bad2.validate().is_err());
        let mut bad3 = cnn2_spec();
        bad3.feature_dim = 64;
        assert!(bad3.validate().is_err());
        let mut bad4 = mlp_spec();
        bad4.num_classes = 1;
        assert!(bad4.validate().is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let spec = mlp_spec();
        let params = init_params(&spec, 1).unwrap();
        let mut g = Graph::new();
        let nodes = register_params(&mut g, &params, false);
        let x = Tensor::zeros(vec![2, 4]);
        assert!(forward(&mut g, &spec, &params, &nodes, &x, ForwardMode::Eval).is_err());
    }

    #[test]
    fn model_spec_round_trips_through_json() {
        let spec = cnn2_spec();
        let s = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let mlp_json = r#"{
            "arch": "mlp", "hidden": [64, 32],
            "input_shape": [8], "num_classes": 2, "feature_dim": 32
        }"#;
        let m: ModelSpec = serde_json::from_str(mlp_json).unwrap();
        assert_eq!(m.kind, ModelKind::Mlp { hidden: vec![64, 32] });
        assert!(!m.batch_norm);
    }
}
