//! GHN layers (output = generalized hamming distance with the bias fixed
//! analytically), the double-thresholding activation, and baseline layers
//! with learned bias and batch normalization for the comparison experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GhnError, Result};
use crate::real::{lit, Real};
use crate::tensor::{Padding, ReduceOp, Tape, TensorData, Var};

/// Standard deviation of the seeded Gaussian weight initialization for
/// baseline layers and the GHN output layer.
pub const WEIGHT_INIT_STD: f64 = 0.1;

/// Hidden GHN layers are initialized with standard deviation
/// `HIDDEN_INIT_GAIN * sqrt(fan_in)`, which makes the `(2/L) w.x` term of
/// the generalized hamming distance roughly variance-preserving per layer.
pub const HIDDEN_INIT_GAIN: f64 = 0.5;

/// Default soft-threshold steepness.
pub const DEFAULT_STEEPNESS: f64 = 10.0;

/// Default threshold ratio at initialization.
pub const DEFAULT_R: f64 = 0.05;

/// A named tensor that may receive gradients.
#[derive(Debug, Clone)]
pub struct Parameter<F: Real> {
    pub name: String,
    pub value: TensorData<F>,
    pub trainable: bool,
    /// Clamped to [0, 1] after every optimizer step (threshold ratios).
    pub clamp01: bool,
}

impl<F: Real> Parameter<F> {
    pub fn new(name: impl Into<String>, value: TensorData<F>) -> Self {
        Parameter {
            name: name.into(),
            value,
            trainable: true,
            clamp01: false,
        }
    }

    pub fn frozen(name: impl Into<String>, value: TensorData<F>) -> Self {
        Parameter {
            name: name.into(),
            value,
            trainable: false,
            clamp01: false,
        }
    }
}

// ---- thresholding ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    Off,
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerLayer,
    PerFilter,
}

/// Declarative double-threshold configuration.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdConfig {
    pub mode: ThresholdMode,
    pub granularity: Granularity,
    pub r: f64,
    pub trainable: bool,
    pub steepness: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            mode: ThresholdMode::Soft,
            granularity: Granularity::PerFilter,
            r: DEFAULT_R,
            trainable: true,
            steepness: DEFAULT_STEEPNESS,
        }
    }
}

impl ThresholdConfig {
    pub fn off() -> Self {
        ThresholdConfig {
            mode: ThresholdMode::Off,
            r: 0.0,
            trainable: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == ThresholdMode::Soft && !(self.steepness > 0.0) {
            return Err(GhnError::InvalidArgument(format!(
                "soft threshold steepness must be positive, got {}",
                self.steepness
            )));
        }
        Ok(())
    }
}

/// Runtime threshold state attached to a layer. Holds the ratio parameter
/// (scalar for per-layer granularity, one entry per output filter otherwise).
#[derive(Debug, Clone)]
pub struct Threshold<F: Real> {
    pub cfg: ThresholdConfig,
    pub r: Parameter<F>,
}

impl<F: Real> Threshold<F> {
    pub fn new(cfg: ThresholdConfig, filters: usize, name: String) -> Result<Self> {
        cfg.validate()?;
        let r0 = if cfg.mode == ThresholdMode::Off {
            0.0
        } else {
            cfg.r.clamp(0.0, 1.0)
        };
        let value = match cfg.granularity {
            Granularity::PerLayer => TensorData::scalar(lit(r0)),
            Granularity::PerFilter => TensorData::full(&[filters], lit(r0)),
        };
        let mut r = Parameter::new(name, value);
        r.trainable = cfg.trainable && cfg.mode == ThresholdMode::Soft;
        r.clamp01 = true;
        Ok(Threshold { cfg, r })
    }
}

/// Maximal magnitude of `|h - 0.5|` over the batch, per filter or per layer.
/// Treated as a constant with respect to differentiation.
fn output_spread<F: Real>(h: &TensorData<F>, granularity: Granularity) -> TensorData<F> {
    let half = lit::<F>(0.5);
    match granularity {
        Granularity::PerLayer => {
            let mut o = F::zero();
            for &v in h.values() {
                o = o.max((v - half).abs());
            }
            TensorData::scalar(o)
        }
        Granularity::PerFilter => {
            let c = *h.shape().last().unwrap_or(&1);
            let mut o = vec![F::zero(); c];
            for (i, &v) in h.values().iter().enumerate() {
                let d = (v - half).abs();
                if d > o[i % c] {
                    o[i % c] = d;
                }
            }
            TensorData::new(vec![c], o).unwrap()
        }
    }
}

/// Apply double-thresholding around the fixed point 0.5.
///
/// Hard mode snaps outputs within `[0.5 - rO, 0.5 + rO]` to 0.5 and passes no
/// gradient to `r`. Soft mode gates the deviation `d = h - 0.5` with a
/// logistic factor `σ(k(|d| - rO))`, differentiable in both `h` and `r`.
pub fn double_threshold<F: Real>(
    tape: &Tape<F>,
    h: Var,
    thr: &Threshold<F>,
    r_var: Option<Var>,
) -> Result<Var> {
    thr.cfg.validate()?;
    match thr.cfg.mode {
        ThresholdMode::Off => Ok(h),
        ThresholdMode::Hard => {
            let spread = output_spread(&tape.value(h), thr.cfg.granularity);
            let r = &thr.r.value;
            let half_width = TensorData::from_fn(spread.shape(), |i| {
                let rv = r.values()[i.min(r.len() - 1)].to_f64().clamp(0.0, 1.0);
                lit(rv * spread.values()[i].to_f64())
            });
            tape.hard_band(h, half_width)
        }
        ThresholdMode::Soft => {
            let spread = output_spread(&tape.value(h), thr.cfg.granularity);
            let r_var = match r_var {
                Some(v) => v,
                None => tape.leaf(thr.r.value.clone()),
            };
            let d = tape.add_scalar(h, lit(-0.5))?;
            let abs_d = tape.abs(d)?;
            let o_const = tape.leaf(spread);
            let r_o = tape.mul(r_var, o_const)?;
            let neg_r_o = tape.neg(r_o)?;
            let gap = match thr.cfg.granularity {
                Granularity::PerLayer => tape.add(abs_d, neg_r_o)?,
                Granularity::PerFilter => tape.add_channel(abs_d, neg_r_o)?,
            };
            let gate = tape.sigmoid(tape.scale(gap, lit(thr.cfg.steepness))?)?;
            let gated = tape.mul(d, gate)?;
            tape.add_scalar(gated, lit(0.5))
        }
    }
}

/// GHD-flavoured ReLU: `max(0, 0.5 - h)`, a minimal hamming distance
/// threshold of 0.5.
pub fn relu_ghd<F: Real>(tape: &Tape<F>, h: Var) -> Result<Var> {
    let flipped = tape.neg(h)?;
    let shifted = tape.add_scalar(flipped, lit(0.5))?;
    tape.relu(shifted)
}

// ---- GHN layers ------------------------------------------------------------

/// Dense GHN layer: `h[n,f] = x̄_n + w̄_f - (2/L)(x_n · W_{·f})`, the vector
/// GHD between each input row and each weight column. No bias parameter
/// exists; all three terms are on the tape.
pub fn ghn_dense_forward<F: Real>(
    tape: &Tape<F>,
    x: Var,
    weights: Var,
) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(weights);
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(GhnError::ShapeMismatch {
            context: "ghn_dense_forward",
            message: format!("input {xs:?} vs weights {ws:?}"),
        });
    }
    let l = xs[1];
    let x_bar = tape.reduce(ReduceOp::Mean, x, &[1])?; // [n]
    let w_bar = tape.reduce(ReduceOp::Mean, weights, &[0])?; // [F]
    let dot = tape.matmul(x, weights)?;
    let scaled = tape.scale(dot, lit(-2.0 / l as f64))?;
    let with_rows = tape.add_col_vector(scaled, x_bar)?;
    tape.add_channel(with_rows, w_bar)
}

/// Convolutional GHN layer: per-patch vector GHD against each filter.
/// The patch mean is computed with an all-ones kernel over the same padded
/// geometry, so padded zeros participate in the mean.
pub fn ghn_conv2d_forward<F: Real>(
    tape: &Tape<F>,
    x: Var,
    kernel: Var,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    let ks = tape.shape(kernel);
    if ks.len() != 4 {
        return Err(GhnError::ShapeMismatch {
            context: "ghn_conv2d_forward",
            message: format!("kernel shape {ks:?}"),
        });
    }
    let (kh, kw, cin, cout) = (ks[0], ks[1], ks[2], ks[3]);
    let l = kh * kw * cin;
    let dot = tape.conv2d(x, kernel, stride, padding)?;
    let scaled = tape.scale(dot, lit(-2.0 / l as f64))?;
    let w_bar = tape.reduce(ReduceOp::Mean, kernel, &[0, 1, 2])?; // [cout]
    let with_w = tape.add_channel(scaled, w_bar)?;
    let ones = tape.leaf(TensorData::full(&[kh, kw, cin, 1], F::one()));
    let patch_sum = tape.conv2d(x, ones, stride, padding)?; // [n,oh,ow,1]
    let patch_mean = tape.scale(patch_sum, lit(1.0 / l as f64))?;
    let patch_mean = tape.broadcast_channels(patch_mean, cout)?;
    tape.add(with_w, patch_mean)
}

// ---- batch normalization ---------------------------------------------------

/// Batch normalization state for one baseline layer (per trailing channel).
#[derive(Debug, Clone)]
pub struct BatchNorm<F: Real> {
    pub gamma: Parameter<F>,
    pub beta: Parameter<F>,
    pub running_mean: TensorData<F>,
    pub running_var: TensorData<F>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(channels: usize, name_prefix: &str) -> Self {
        BatchNorm {
            gamma: Parameter::new(format!("{name_prefix}.gamma"), TensorData::full(&[channels], F::one())),
            beta: Parameter::new(format!("{name_prefix}.beta"), TensorData::zeros(&[channels])),
            running_mean: TensorData::zeros(&[channels]),
            running_var: TensorData::full(&[channels], F::one()),
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }
}

/// Batch-norm forward. Training mode normalizes with batch statistics
/// (biased variance) and updates the running estimates with momentum 0.9;
/// evaluation mode uses the running estimates as constants.
pub fn batchnorm_forward<F: Real>(
    tape: &Tape<F>,
    x: Var,
    bn: &mut BatchNorm<F>,
    gamma_var: Var,
    beta_var: Var,
    training: bool,
) -> Result<Var> {
    let xs = tape.shape(x);
    let rank = xs.len();
    if rank < 2 {
        return Err(GhnError::ShapeMismatch {
            context: "batchnorm_forward",
            message: format!("expected rank >= 2, got {xs:?}"),
        });
    }
    let lead_axes: Vec<usize> = (0..rank - 1).collect();
    let rows: usize = xs[..rank - 1].iter().product();
    let eps = lit::<F>(bn.epsilon);
    if training {
        if rows < 2 {
            return Err(GhnError::InvalidArgument(format!(
                "batch normalization needs at least 2 samples per feature in training mode, got {rows}"
            )));
        }
        let mu = tape.reduce(ReduceOp::Mean, x, &lead_axes)?; // [c]
        let neg_mu = tape.neg(mu)?;
        let centered = tape.add_channel(x, neg_mu)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.reduce(ReduceOp::Mean, sq, &lead_axes)?; // biased
        let inv_std = tape.rsqrt(tape.add_scalar(var, eps)?)?;
        let normalized = tape.mul_channel(centered, inv_std)?;
        let scaled = tape.mul_channel(normalized, gamma_var)?;
        let out = tape.add_channel(scaled, beta_var)?;
        // running statistics update (outside the tape)
        let m = lit::<F>(bn.momentum);
        let one_m = F::one() - m;
        let mu_v = tape.value(mu);
        let var_v = tape.value(var);
        bn.running_mean = TensorData::from_fn(mu_v.shape(), |i| {
            bn.running_mean.values()[i] * m + mu_v.values()[i] * one_m
        });
        bn.running_var = TensorData::from_fn(var_v.shape(), |i| {
            bn.running_var.values()[i] * m + var_v.values()[i] * one_m
        });
        Ok(out)
    } else {
        let neg_mu = TensorData::from_fn(bn.running_mean.shape(), |i| {
            -bn.running_mean.values()[i]
        });
        let inv_std = TensorData::from_fn(bn.running_var.shape(), |i| {
            F::one() / (bn.running_var.values()[i] + eps).sqrt()
        });
        let centered = tape.add_channel(x, tape.leaf(neg_mu))?;
        let normalized = tape.mul_channel(centered, tape.leaf(inv_std))?;
        let scaled = tape.mul_channel(normalized, gamma_var)?;
        tape.add_channel(scaled, beta_var)
    }
}

// ---- network specification -------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetworkKind {
    /// Rectified GHN: analytic bias, outputs are GHD values.
    Ghn,
    /// Conventional layers with a learned bias.
    Baseline { batch_norm: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Logits are the negation of the final layer's h values (degree of
    /// equivalence). GHN networks.
    NegGhd,
    /// Logits are the logistic membership of the negated h values.
    LogisticMembership,
    /// Logits are the raw final-layer outputs. Baseline networks.
    Identity,
}

/// Centered output rescaling applied after each GHN layer:
/// `out = 0.5 + s (h - 0.5)`. The fixed point 0.5 is preserved exactly for
/// every choice of `s`, and the threshold band adapts through `O`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalScale {
    /// No rescaling; layers emit h itself.
    One,
    /// `s = L/2` on the output layer, no rescaling on hidden layers.
    ///
    /// Hidden layers stay in the h domain, whose 1/L normalization keeps
    /// activations bounded layer over layer; a uniform `L/2` gain instead
    /// amplifies the per-patch mean component of h with gain above one per
    /// layer and diverges on deep networks. The output layer restores the
    /// `w·x + b` magnitude of a conventional classifier so that softmax
    /// sees usable logit spreads and the last layer trains at conventional
    /// gradient scale.
    Auto,
    /// The given gain on every layer.
    Fixed(f64),
}

impl SignalScale {
    fn factor(&self, patch_len: usize, is_head: bool) -> f64 {
        match self {
            SignalScale::One => 1.0,
            SignalScale::Auto => {
                if is_head {
                    patch_len as f64 / 2.0
                } else {
                    1.0
                }
            }
            SignalScale::Fixed(s) => *s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    ReluGhd,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    Conv {
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
    },
    Pool {
        window: usize,
        stride: usize,
    },
    Dense {
        out: usize,
        declared_in: Option<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub op: LayerOp,
    pub threshold: ThresholdConfig,
    pub activation: Activation,
}

/// Declarative description of a whole network.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub input: (usize, usize, usize), // h, w, c
    pub layers: Vec<LayerSpec>,
    pub head: Head,
    pub scale: SignalScale,
}

/// Parse the architecture-string vocabulary: `cv[cin,kh,kw,cout]`, `pool`,
/// `fc[out]`, `fc[in,out]`. Tokens are `-`-separated.
pub fn parse_arch(s: &str) -> Result<Vec<LayerOp>> {
    let mut ops = Vec::new();
    for token in s.split('-') {
        let token = token.trim();
        if token == "pool" {
            ops.push(LayerOp::Pool {
                window: 2,
                stride: 2,
            });
        } else if let Some(args) = token.strip_prefix("cv[").and_then(|t| t.strip_suffix(']')) {
            let nums = parse_int_list(args, token)?;
            if nums.len() != 4 {
                return Err(GhnError::InvalidArgument(format!(
                    "cv token `{token}` needs 4 arguments [cin,kh,kw,cout]"
                )));
            }
            ops.push(LayerOp::Conv {
                cin: nums[0],
                kh: nums[1],
                kw: nums[2],
                cout: nums[3],
                stride: 1,
                padding: Padding::Same,
            });
        } else if let Some(args) = token.strip_prefix("fc[").and_then(|t| t.strip_suffix(']')) {
            let nums = parse_int_list(args, token)?;
            match nums.len() {
                1 => ops.push(LayerOp::Dense {
                    out: nums[0],
                    declared_in: None,
                }),
                2 => ops.push(LayerOp::Dense {
                    out: nums[1],
                    declared_in: Some(nums[0]),
                }),
                _ => {
                    return Err(GhnError::InvalidArgument(format!(
                        "fc token `{token}` needs 1 or 2 arguments"
                    )))
                }
            }
        } else {
            return Err(GhnError::InvalidArgument(format!(
                "unknown architecture token `{token}`"
            )));
        }
    }
    if ops.is_empty() {
        return Err(GhnError::InvalidArgument(
            "architecture string is empty".into(),
        ));
    }
    Ok(ops)
}

fn parse_int_list(args: &str, token: &str) -> Result<Vec<usize>> {
    args.split(',')
        .map(|a| {
            a.trim().parse::<usize>().map_err(|_| {
                GhnError::InvalidArgument(format!("bad integer in token `{token}`"))
            })
        })
        .collect()
}

// ---- network instance ------------------------------------------------------

#[derive(Debug, Clone)]
enum LayerInstance<F: Real> {
    GhnConv {
        kernel: Parameter<F>,
        stride: usize,
        padding: Padding,
        threshold: Threshold<F>,
        activation: Activation,
        scale: f64,
    },
    GhnDense {
        weights: Parameter<F>,
        threshold: Threshold<F>,
        activation: Activation,
        scale: f64,
    },
    BaselineConv {
        kernel: Parameter<F>,
        bias: Parameter<F>,
        bn: Option<BatchNorm<F>>,
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    BaselineDense {
        weights: Parameter<F>,
        bias: Parameter<F>,
        bn: Option<BatchNorm<F>>,
        activation: Activation,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
}

/// One recorded layer output (pre-activation h or post-BN values).
pub struct LayerOutput {
    pub layer: usize,
    pub name: String,
    pub output: Var,
}

/// Everything one forward pass leaves behind.
pub struct ForwardTrace {
    pub logits: Var,
    /// Leaf vars bound to `Network::params()` in the same order.
    pub param_vars: Vec<Var>,
    pub layer_outputs: Vec<LayerOutput>,
}

/// A materialized network: parameters plus the composition recipe.
#[derive(Debug)]
pub struct Network<F: Real> {
    spec: NetworkSpec,
    layers: Vec<LayerInstance<F>>,
}

impl<F: Real> Network<F> {
    /// Build a network from its spec with seeded Gaussian initialization.
    ///
    /// Baseline layers and the output layer draw weights from a mean-zero
    /// Gaussian with standard deviation 0.1. Hidden GHN layers instead use
    /// standard deviation `0.5 sqrt(L)` where L is the fan-in: the h-domain
    /// signal term `(2/L) w.x` has standard deviation `2 sigma rms(x) /
    /// sqrt(L)`, so a sigma proportional to `sqrt(L)` makes each hidden
    /// layer roughly variance-preserving. A flat small sigma instead damps
    /// the batch-dependent part of h by `1/sqrt(L)` per layer and leaves a
    /// deep network unable to learn at practical rates.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ghn = matches!(spec.kind, NetworkKind::Ghn);
        let mut gauss = |shape: &[usize], fan_in: usize, is_head: bool| {
            let std = if ghn && !is_head {
                HIDDEN_INIT_GAIN * (fan_in as f64).sqrt()
            } else {
                WEIGHT_INIT_STD
            };
            let normal = Normal::new(0.0, std).unwrap();
            TensorData::from_fn(shape, |_| lit::<F>(normal.sample(&mut rng)))
        };
        let mut layers = Vec::new();
        let (mut h, mut w, mut c) = spec.input;
        let mut flat: Option<usize> = None;
        for (i, layer) in spec.layers.iter().enumerate() {
            let name = |suffix: &str| format!("layer{i}.{suffix}");
            match layer.op {
                LayerOp::Conv {
                    kh,
                    kw,
                    cin,
                    cout,
                    stride,
                    padding,
                } => {
                    if flat.is_some() {
                        return Err(GhnError::Composition {
                            layer: i,
                            message: "conv layer after a dense layer".into(),
                        });
                    }
                    if cin != c {
                        return Err(GhnError::Composition {
                            layer: i,
                            message: format!("conv expects {cin} input channels, previous layer provides {c}"),
                        });
                    }
                    let kernel = Parameter::new(
                        name("kernel"),
                        gauss(&[kh, kw, cin, cout], kh * kw * cin, i + 1 == spec.layers.len()),
                    );
                    match spec.kind {
                        NetworkKind::Ghn => {
                            let threshold =
                                Threshold::new(layer.threshold, cout, name("r"))?;
                            layers.push(LayerInstance::GhnConv {
                                kernel,
                                stride,
                                padding,
                                threshold,
                                activation: layer.activation,
                                scale: spec
                                    .scale
                                    .factor(kh * kw * cin, i + 1 == spec.layers.len()),
                            });
                        }
                        NetworkKind::Baseline { batch_norm } => {
                            layers.push(LayerInstance::BaselineConv {
                                kernel,
                                bias: Parameter::new(name("bias"), TensorData::zeros(&[cout])),
                                bn: batch_norm
                                    .then(|| BatchNorm::new(cout, &name("bn"))),
                                stride,
                                padding,
                                activation: layer.activation,
                            });
                        }
                    }
                    match padding {
                        Padding::Same => {
                            h = h.div_ceil(stride);
                            w = w.div_ceil(stride);
                        }
                        Padding::Valid => {
                            if kh > h || kw > w {
                                return Err(GhnError::Composition {
                                    layer: i,
                                    message: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                                });
                            }
                            h = (h - kh) / stride + 1;
                            w = (w - kw) / stride + 1;
                        }
                    }
                    c = cout;
                }
                LayerOp::Pool { window, stride } => {
                    if flat.is_some() {
                        return Err(GhnError::Composition {
                            layer: i,
                            message: "pool layer after a dense layer".into(),
                        });
                    }
                    if window > h || window > w {
                        return Err(GhnError::Composition {
                            layer: i,
                            message: format!("pool window {window} larger than input {h}x{w}"),
                        });
                    }
                    layers.push(LayerInstance::MaxPool { window, stride });
                    h = (h - window) / stride + 1;
                    w = (w - window) / stride + 1;
                }
                LayerOp::Dense { out, declared_in: _ } => {
                    let in_dim = flat.unwrap_or(h * w * c);
                    let weights = Parameter::new(
                        name("weights"),
                        gauss(&[in_dim, out], in_dim, i + 1 == spec.layers.len()),
                    );
                    match spec.kind {
                        NetworkKind::Ghn => {
                            let threshold = Threshold::new(layer.threshold, out, name("r"))?;
                            layers.push(LayerInstance::GhnDense {
                                weights,
                                threshold,
                                activation: layer.activation,
                                scale: spec.scale.factor(in_dim, i + 1 == spec.layers.len()),
                            });
                        }
                        NetworkKind::Baseline { batch_norm } => {
                            layers.push(LayerInstance::BaselineDense {
                                weights,
                                bias: Parameter::new(name("bias"), TensorData::zeros(&[out])),
                                bn: batch_norm.then(|| BatchNorm::new(out, &name("bn"))),
                                activation: layer.activation,
                            });
                        }
                    }
                    flat = Some(out);
                }
            }
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// All parameters in binding order (matches `ForwardTrace::param_vars`).
    pub fn params(&self) -> Vec<&Parameter<F>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerInstance::GhnConv {
                    kernel, threshold, ..
                } => {
                    out.push(kernel);
                    out.push(&threshold.r);
                }
                LayerInstance::GhnDense {
                    weights, threshold, ..
                } => {
                    out.push(weights);
                    out.push(&threshold.r);
                }
                LayerInstance::BaselineConv {
                    kernel, bias, bn, ..
                } => {
                    out.push(kernel);
                    out.push(bias);
                    if let Some(bn) = bn {
                        out.push(&bn.gamma);
                        out.push(&bn.beta);
                    }
                }
                LayerInstance::BaselineDense {
                    weights, bias, bn, ..
                } => {
                    out.push(weights);
                    out.push(bias);
                    if let Some(bn) = bn {
                        out.push(&bn.gamma);
                        out.push(&bn.beta);
                    }
                }
                LayerInstance::MaxPool { .. } => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                LayerInstance::GhnConv {
                    kernel, threshold, ..
                } => {
                    out.push(kernel);
                    out.push(&mut threshold.r);
                }
                LayerInstance::GhnDense {
                    weights, threshold, ..
                } => {
                    out.push(weights);
                    out.push(&mut threshold.r);
                }
                LayerInstance::BaselineConv {
                    kernel, bias, bn, ..
                } => {
                    out.push(kernel);
                    out.push(bias);
                    if let Some(bn) = bn {
                        out.push(&mut bn.gamma);
                        out.push(&mut bn.beta);
                    }
                }
                LayerInstance::BaselineDense {
                    weights, bias, bn, ..
                } => {
                    out.push(weights);
                    out.push(bias);
                    if let Some(bn) = bn {
                        out.push(&mut bn.gamma);
                        out.push(&mut bn.beta);
                    }
                }
                LayerInstance::MaxPool { .. } => {}
            }
        }
        out
    }

    /// Non-parameter state that must persist in checkpoints (batch-norm
    /// running statistics), as (name, value) pairs.
    pub fn aux_state(&self) -> Vec<(String, TensorData<F>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            let bn = match layer {
                LayerInstance::BaselineConv { bn: Some(bn), .. } => Some(bn),
                LayerInstance::BaselineDense { bn: Some(bn), .. } => Some(bn),
                _ => None,
            };
            if let Some(bn) = bn {
                let prefix = bn.gamma.name.trim_end_matches(".gamma").to_string();
                out.push((format!("{prefix}.running_mean"), bn.running_mean.clone()));
                out.push((format!("{prefix}.running_var"), bn.running_var.clone()));
            }
        }
        out
    }

    pub fn set_aux_state(&mut self, name: &str, value: TensorData<F>) -> Result<()> {
        for layer in &mut self.layers {
            let bn = match layer {
                LayerInstance::BaselineConv { bn: Some(bn), .. } => Some(bn),
                LayerInstance::BaselineDense { bn: Some(bn), .. } => Some(bn),
                _ => None,
            };
            if let Some(bn) = bn {
                let prefix = bn.gamma.name.trim_end_matches(".gamma").to_string();
                if name == format!("{prefix}.running_mean") {
                    bn.running_mean = value;
                    return Ok(());
                }
                if name == format!("{prefix}.running_var") {
                    bn.running_var = value;
                    return Ok(());
                }
            }
        }
        Err(GhnError::Checkpoint(format!("unknown state entry {name}")))
    }

    /// Compose the network over a batch of images, returning logits and the
    /// parameter bindings for this pass.
    pub fn forward(
        &mut self,
        tape: &Tape<F>,
        images: &TensorData<F>,
        training: bool,
    ) -> Result<ForwardTrace> {
        let mut param_vars = Vec::new();
        let mut layer_outputs = Vec::new();
        let mut x = tape.leaf(images.clone());
        let n = images.shape().first().copied().unwrap_or(0);
        let compose =
            |i: usize, e: GhnError| -> GhnError {
                match e {
                    GhnError::ShapeMismatch { message, .. } => GhnError::Composition {
                        layer: i,
                        message,
                    },
                    other => other,
                }
            };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerInstance::GhnConv {
                    kernel,
                    stride,
                    padding,
                    threshold,
                    activation,
                    scale,
                } => {
                    let k_var = tape.leaf(kernel.value.clone());
                    param_vars.push(k_var);
                    let h = ghn_conv2d_forward(tape, x, k_var, *stride, *padding)
                        .map_err(|e| compose(i, e))?;
                    let h = rescale(tape, h, *scale)?;
                    layer_outputs.push(LayerOutput {
                        layer: i,
                        name: format!("conv{i}"),
                        output: h,
                    });
                    let r_var = tape.leaf(threshold.r.value.clone());
                    param_vars.push(r_var);
                    let t = double_threshold(tape, h, threshold, Some(r_var))?;
                    x = activate(tape, t, *activation)?;
                }
                LayerInstance::GhnDense {
                    weights,
                    threshold,
                    activation,
                    scale,
                } => {
                    x = flatten(tape, x)?;
                    let w_var = tape.leaf(weights.value.clone());
                    param_vars.push(w_var);
                    let h = ghn_dense_forward(tape, x, w_var).map_err(|e| compose(i, e))?;
                    let h = rescale(tape, h, *scale)?;
                    layer_outputs.push(LayerOutput {
                        layer: i,
                        name: format!("fc{i}"),
                        output: h,
                    });
                    let r_var = tape.leaf(threshold.r.value.clone());
                    param_vars.push(r_var);
                    let t = double_threshold(tape, h, threshold, Some(r_var))?;
                    x = activate(tape, t, *activation)?;
                }
                LayerInstance::BaselineConv {
                    kernel,
                    bias,
                    bn,
                    stride,
                    padding,
                    activation,
                } => {
                    let k_var = tape.leaf(kernel.value.clone());
                    let b_var = tape.leaf(bias.value.clone());
                    param_vars.push(k_var);
                    param_vars.push(b_var);
                    let conv = tape
                        .conv2d(x, k_var, *stride, *padding)
                        .map_err(|e| compose(i, e))?;
                    let mut out = tape.add_channel(conv, b_var)?;
                    if let Some(bn) = bn {
                        let g_var = tape.leaf(bn.gamma.value.clone());
                        let be_var = tape.leaf(bn.beta.value.clone());
                        param_vars.push(g_var);
                        param_vars.push(be_var);
                        out = batchnorm_forward(tape, out, bn, g_var, be_var, training)?;
                    }
                    layer_outputs.push(LayerOutput {
                        layer: i,
                        name: format!("conv{i}"),
                        output: out,
                    });
                    x = activate(tape, out, *activation)?;
                }
                LayerInstance::BaselineDense {
                    weights,
                    bias,
                    bn,
                    activation,
                } => {
                    x = flatten(tape, x)?;
                    let w_var = tape.leaf(weights.value.clone());
                    let b_var = tape.leaf(bias.value.clone());
                    param_vars.push(w_var);
                    param_vars.push(b_var);
                    let mm = tape.matmul(x, w_var).map_err(|e| compose(i, e))?;
                    let mut out = tape.add_channel(mm, b_var)?;
                    if let Some(bn) = bn {
                        let g_var = tape.leaf(bn.gamma.value.clone());
                        let be_var = tape.leaf(bn.beta.value.clone());
                        param_vars.push(g_var);
                        param_vars.push(be_var);
                        out = batchnorm_forward(tape, out, bn, g_var, be_var, training)?;
                    }
                    layer_outputs.push(LayerOutput {
                        layer: i,
                        name: format!("fc{i}"),
                        output: out,
                    });
                    x = activate(tape, out, *activation)?;
                }
                LayerInstance::MaxPool { window, stride } => {
                    x = tape.maxpool2d(x, *window, *stride).map_err(|e| compose(i, e))?;
                }
            }
        }
        let flat_logits = flatten(tape, x)?;
        let logits = match self.spec.head {
            Head::NegGhd => tape.neg(flat_logits)?,
            Head::LogisticMembership => tape.logistic(tape.neg(flat_logits)?)?,
            Head::Identity => flat_logits,
        };
        let _ = n;
        Ok(ForwardTrace {
            logits,
            param_vars,
            layer_outputs,
        })
    }
}

fn rescale<F: Real>(tape: &Tape<F>, h: Var, scale: f64) -> Result<Var> {
    if scale == 1.0 {
        return Ok(h);
    }
    let centered = tape.add_scalar(h, lit(-0.5))?;
    let scaled = tape.scale(centered, lit(scale))?;
    tape.add_scalar(scaled, lit(0.5))
}

fn activate<F: Real>(tape: &Tape<F>, x: Var, activation: Activation) -> Result<Var> {
    match activation {
        Activation::None => Ok(x),
        Activation::ReluGhd => relu_ghd(tape, x),
        Activation::Relu => tape.relu(x),
    }
}

fn flatten<F: Real>(tape: &Tape<F>, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() == 2 {
        return Ok(x);
    }
    let n = shape[0];
    let rest: usize = shape[1..].iter().product();
    tape.reshape(x, vec![n, rest])
}
