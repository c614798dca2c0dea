//! Run configuration: a line-based `[section]` / `key = value` format with
//! `#` comments. Unknown sections and keys are rejected with line numbers.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ghn_core::layers::{
    Activation, Granularity, Head, LayerOp, LayerSpec, NetworkKind, NetworkSpec, SignalScale,
    ThresholdConfig, ThresholdMode, parse_arch,
};
use ghn_core::real::Dtype;
use ghn_core::train::TrainConfig;
use ghn_core::{GhnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn input_shape(self) -> (usize, usize, usize) {
        match self {
            DatasetKind::Mnist => (28, 28, 1),
            DatasetKind::Cifar10 => (32, 32, 3),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

/// Per-layer threshold overrides; unset fields fall back to the network-wide
/// defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThresholdOverride {
    pub mode: Option<ThresholdMode>,
    pub granularity: Option<Granularity>,
    pub r: Option<f64>,
    pub trainable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    pub kind: NetworkKind,
    pub scale: SignalScale,
    pub threshold: ThresholdOverride,
    pub layer_thresholds: BTreeMap<usize, ThresholdOverride>,
    pub train: TrainConfig,
    pub precision: Dtype,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: String::new(),
            kind: NetworkKind::Ghn,
            scale: SignalScale::Auto,
            threshold: ThresholdOverride::default(),
            layer_thresholds: BTreeMap::new(),
            train: TrainConfig::default(),
            precision: Dtype::R32,
            dataset: DatasetKind::Mnist,
            data_dir: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn err(line: usize, message: impl Into<String>) -> GhnError {
    GhnError::Config {
        line,
        message: message.into(),
    }
}

fn parse_bool(v: &str, line: usize) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(line, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_f64(v: &str, line: usize) -> Result<f64> {
    v.parse().map_err(|_| err(line, format!("bad number `{v}`")))
}

fn parse_usize(v: &str, line: usize) -> Result<usize> {
    v.parse().map_err(|_| err(line, format!("bad integer `{v}`")))
}

fn parse_mode(v: &str, line: usize) -> Result<ThresholdMode> {
    match v {
        "off" => Ok(ThresholdMode::Off),
        "hard" => Ok(ThresholdMode::Hard),
        "soft" => Ok(ThresholdMode::Soft),
        _ => Err(err(line, format!("unknown threshold mode `{v}`"))),
    }
}

fn parse_granularity(v: &str, line: usize) -> Result<Granularity> {
    match v {
        "per_layer" => Ok(Granularity::PerLayer),
        "per_filter" => Ok(Granularity::PerFilter),
        _ => Err(err(line, format!("unknown granularity `{v}`"))),
    }
}

fn apply_threshold_key(
    t: &mut ThresholdOverride,
    field: &str,
    value: &str,
    line: usize,
) -> Result<()> {
    match field {
        "mode" => t.mode = Some(parse_mode(value, line)?),
        "granularity" => t.granularity = Some(parse_granularity(value, line)?),
        "r" => t.r = Some(parse_f64(value, line)?),
        "trainable" => t.trainable = Some(parse_bool(value, line)?),
        _ => return Err(err(line, format!("unknown threshold key `{field}`"))),
    }
    Ok(())
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section: Option<String> = None;
    let mut saw_arch = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            match name {
                "network" | "train" | "data" | "output" => section = Some(name.to_string()),
                _ => return Err(err(line_no, format!("unknown section `[{name}]`"))),
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(line_no, format!("expected `key = value`, got `{line}`")));
        };
        let key = key.trim();
        let value = value.trim();
        let section = section
            .as_deref()
            .ok_or_else(|| err(line_no, "key before any [section] header"))?;
        match section {
            "network" => match key {
                "arch" => {
                    parse_arch(value).map_err(|e| err(line_no, e.to_string()))?;
                    cfg.arch = value.to_string();
                    saw_arch = true;
                }
                "kind" => {
                    cfg.kind = match value {
                        "ghn" => NetworkKind::Ghn,
                        "baseline" => NetworkKind::Baseline { batch_norm: false },
                        "baseline-bn" => NetworkKind::Baseline { batch_norm: true },
                        _ => return Err(err(line_no, format!("unknown network kind `{value}`"))),
                    }
                }
                "scale" => {
                    cfg.scale = match value {
                        "auto" => SignalScale::Auto,
                        "1" => SignalScale::One,
                        _ => SignalScale::Fixed(parse_f64(value, line_no)?),
                    }
                }
                _ => {
                    // threshold.X or layerN.threshold.X
                    if let Some(field) = key.strip_prefix("threshold.") {
                        apply_threshold_key(&mut cfg.threshold, field, value, line_no)?;
                    } else if let Some(rest) = key.strip_prefix("layer") {
                        let Some((layer, field)) = rest.split_once(".threshold.") else {
                            return Err(err(line_no, format!("unknown network key `{key}`")));
                        };
                        let layer = parse_usize(layer, line_no)?;
                        let t = cfg.layer_thresholds.entry(layer).or_default();
                        apply_threshold_key(t, field, value, line_no)?;
                    } else {
                        return Err(err(line_no, format!("unknown network key `{key}`")));
                    }
                }
            },
            "train" => match key {
                "lr" => cfg.train.learning_rate = parse_f64(value, line_no)?,
                "batch_size" => cfg.train.batch_size = parse_usize(value, line_no)?,
                "steps" => cfg.train.steps = parse_usize(value, line_no)?,
                "seed" => cfg.train.seed = parse_usize(value, line_no)? as u64,
                "eval_every" => cfg.train.eval_every = parse_usize(value, line_no)?,
                "stats_every" => cfg.train.stats_every = parse_usize(value, line_no)?,
                "precision" => {
                    cfg.precision = match value {
                        "r32" => Dtype::R32,
                        "r64" => Dtype::R64,
                        _ => return Err(err(line_no, format!("unknown precision `{value}`"))),
                    }
                }
                _ => return Err(err(line_no, format!("unknown train key `{key}`"))),
            },
            "data" => match key {
                "dataset" => {
                    cfg.dataset = match value {
                        "mnist" => DatasetKind::Mnist,
                        "cifar10" => DatasetKind::Cifar10,
                        _ => return Err(err(line_no, format!("unknown dataset `{value}`"))),
                    }
                }
                "dir" => cfg.data_dir = Some(PathBuf::from(value)),
                _ => return Err(err(line_no, format!("unknown data key `{key}`"))),
            },
            "output" => match key {
                "dir" => cfg.out_dir = PathBuf::from(value),
                _ => return Err(err(line_no, format!("unknown output key `{key}`"))),
            },
            _ => unreachable!(),
        }
    }
    if !saw_arch {
        return Err(err(0, "missing required key `arch` in [network]"));
    }
    Ok(cfg)
}

/// Serialize a RunConfig back to the file format. `parse_config(render(c))`
/// yields an equivalent config.
pub fn render(cfg: &RunConfig) -> String {
    let mut out = String::new();
    out.push_str("[network]\n");
    out.push_str(&format!("arch = {}\n", cfg.arch));
    out.push_str(&format!(
        "kind = {}\n",
        match cfg.kind {
            NetworkKind::Ghn => "ghn",
            NetworkKind::Baseline { batch_norm: false } => "baseline",
            NetworkKind::Baseline { batch_norm: true } => "baseline-bn",
        }
    ));
    out.push_str(&format!(
        "scale = {}\n",
        match cfg.scale {
            SignalScale::Auto => "auto".to_string(),
            SignalScale::One => "1".to_string(),
            SignalScale::Fixed(s) => format!("{s}"),
        }
    ));
    let push_threshold = |prefix: &str, t: &ThresholdOverride, out: &mut String| {
        if let Some(m) = t.mode {
            out.push_str(&format!(
                "{prefix}threshold.mode = {}\n",
                match m {
                    ThresholdMode::Off => "off",
                    ThresholdMode::Hard => "hard",
                    ThresholdMode::Soft => "soft",
                }
            ));
        }
        if let Some(g) = t.granularity {
            out.push_str(&format!(
                "{prefix}threshold.granularity = {}\n",
                match g {
                    Granularity::PerLayer => "per_layer",
                    Granularity::PerFilter => "per_filter",
                }
            ));
        }
        if let Some(r) = t.r {
            out.push_str(&format!("{prefix}threshold.r = {r}\n"));
        }
        if let Some(tr) = t.trainable {
            out.push_str(&format!("{prefix}threshold.trainable = {tr}\n"));
        }
    };
    push_threshold("", &cfg.threshold, &mut out);
    for (layer, t) in &cfg.layer_thresholds {
        push_threshold(&format!("layer{layer}."), t, &mut out);
    }
    out.push_str("\n[train]\n");
    out.push_str(&format!("lr = {}\n", cfg.train.learning_rate));
    out.push_str(&format!("batch_size = {}\n", cfg.train.batch_size));
    out.push_str(&format!("steps = {}\n", cfg.train.steps));
    out.push_str(&format!("seed = {}\n", cfg.train.seed));
    out.push_str(&format!("eval_every = {}\n", cfg.train.eval_every));
    out.push_str(&format!("stats_every = {}\n", cfg.train.stats_every));
    out.push_str(&format!(
        "precision = {}\n",
        match cfg.precision {
            Dtype::R32 => "r32",
            Dtype::R64 => "r64",
        }
    ));
    out.push_str("\n[data]\n");
    out.push_str(&format!("dataset = {}\n", cfg.dataset.as_str()));
    if let Some(dir) = &cfg.data_dir {
        out.push_str(&format!("dir = {}\n", dir.display()));
    }
    out.push_str("\n[output]\n");
    out.push_str(&format!("dir = {}\n", cfg.out_dir.display()));
    out
}

/// Materialize the NetworkSpec the config describes.
pub fn network_spec(cfg: &RunConfig) -> Result<NetworkSpec> {
    let ops = parse_arch(&cfg.arch)?;
    let default_for = |op: &LayerOp| {
        let base = ThresholdConfig::default();
        let granularity = match op {
            LayerOp::Conv { .. } => Granularity::PerFilter,
            _ => Granularity::PerLayer,
        };
        ThresholdConfig {
            granularity,
            ..base
        }
    };
    let resolve = |layer: usize, op: &LayerOp| -> ThresholdConfig {
        let mut t = default_for(op);
        for ov in [Some(&cfg.threshold), cfg.layer_thresholds.get(&layer)]
            .into_iter()
            .flatten()
        {
            if let Some(m) = ov.mode {
                t.mode = m;
            }
            if let Some(g) = ov.granularity {
                t.granularity = g;
            }
            if let Some(r) = ov.r {
                t.r = r;
            }
            if let Some(tr) = ov.trainable {
                t.trainable = tr;
            }
        }
        // r = 0 with soft mode still gates; treat it as requested
        t
    };
    let ghn = matches!(cfg.kind, NetworkKind::Ghn);
    let layers = ops
        .iter()
        .enumerate()
        .map(|(i, op)| LayerSpec {
            op: *op,
            threshold: if ghn {
                resolve(i, op)
            } else {
                ThresholdConfig::off()
            },
            activation: match op {
                LayerOp::Pool { .. } => Activation::None,
                _ if ghn => Activation::ReluGhd,
                _ => Activation::Relu,
            },
        })
        .collect::<Vec<_>>();
    // the classifier head layer keeps its raw outputs
    let mut layers = layers;
    if let Some(last) = layers.last_mut() {
        last.activation = Activation::None;
    }
    Ok(NetworkSpec {
        kind: cfg.kind,
        input: cfg.dataset.input_shape(),
        layers,
        head: if ghn { Head::NegGhd } else { Head::Identity },
        scale: if ghn { cfg.scale } else { SignalScale::One },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MNIST_CFG: &str = "\
# paper MNIST network
[network]
arch = cv[1,5,5,16]-pool-cv[16,5,5,64]-pool-fc[1024]-fc[1024,10]
kind = ghn
scale = auto
threshold.mode = soft
threshold.r = 0.05
layer4.threshold.granularity = per_layer

[train]
lr = 0.1
batch_size = 64
steps = 1000
seed = 0
eval_every = 100
stats_every = 50
precision = r32

[data]
dataset = mnist

[output]
dir = out/mnist
";

    #[test]
    fn parses_the_reference_config() {
        let cfg = parse_config(MNIST_CFG).unwrap();
        assert_eq!(cfg.kind, NetworkKind::Ghn);
        assert_eq!(cfg.train.learning_rate, 0.1);
        assert_eq!(cfg.train.steps, 1000);
        assert_eq!(cfg.dataset, DatasetKind::Mnist);
        assert_eq!(cfg.threshold.mode, Some(ThresholdMode::Soft));
        assert_eq!(
            cfg.layer_thresholds[&4].granularity,
            Some(Granularity::PerLayer)
        );
        let spec = network_spec(&cfg).unwrap();
        assert_eq!(spec.layers.len(), 6);
        assert_eq!(spec.input, (28, 28, 1));
        // shape walk 28 -> 14 -> 7 -> fc1024 -> fc10 is validated by init
        let net = ghn_core::layers::Network::<f32>::init(&spec, 0).unwrap();
        let names: Vec<_> = net.params().iter().map(|p| p.name.clone()).collect();
        assert!(names.contains(&"layer5.weights".to_string()));
    }

    #[test]
    fn rejects_unknown_keys_with_line_numbers() {
        let bad = "[network]\narch = fc[10]\nwidth = 3\n";
        match parse_config(bad) {
            Err(GhnError::Config { line: 3, .. }) => {}
            other => panic!("expected config error on line 3, got {other:?}"),
        }
        let bad = "[nonsense]\n";
        assert!(matches!(
            parse_config(bad),
            Err(GhnError::Config { line: 1, .. })
        ));
        let bad = "[network]\narch = cv[1,5,5]\n";
        match parse_config(bad) {
            Err(GhnError::Config { line: 2, message }) => {
                assert!(message.contains("cv"), "{message}")
            }
            other => panic!("expected arch error, got {other:?}"),
        }
        let bad = "arch = fc[10]\n";
        assert!(parse_config(bad).is_err()); // key before section
        assert!(parse_config("[network]\n").is_err()); // missing arch
    }

    #[test]
    fn defaults_apply_when_threshold_keys_are_absent() {
        let cfg = parse_config("[network]\narch = cv[1,3,3,4]-fc[10]\n").unwrap();
        let spec = network_spec(&cfg).unwrap();
        assert_eq!(spec.layers[0].threshold.mode, ThresholdMode::Soft);
        assert_eq!(spec.layers[0].threshold.r, 0.05);
        assert_eq!(spec.layers[0].threshold.granularity, Granularity::PerFilter);
        assert_eq!(spec.layers[1].threshold.granularity, Granularity::PerLayer);
    }

    #[test]
    fn render_round_trips() {
        let cfg = parse_config(MNIST_CFG).unwrap();
        let again = parse_config(&render(&cfg)).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn baseline_kind_disables_thresholds() {
        let cfg =
            parse_config("[network]\narch = fc[10]\nkind = baseline-bn\n").unwrap();
        let spec = network_spec(&cfg).unwrap();
        assert_eq!(spec.layers[0].threshold.mode, ThresholdMode::Off);
        assert_eq!(spec.head, Head::Identity);
    }
}
