//! Training harness: plain SGD, evaluation, metrics emission, layer-output
//! statistics, the GHN-vs-batch-norm correlation experiment, and binary
//! checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::data::{BatchIter, Dataset};
use crate::error::{GhnError, Result};
use crate::layers::{ForwardTrace, Network, Parameter};
use crate::real::{lit, Dtype, Real};
use crate::tensor::{Gradients, Tape, TensorData, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GHNCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_BYTES: u8 = 2; // raw byte entries (config echo)
const STEP_ENTRY: &str = "__step";
const CONFIG_ENTRY: &str = "__config";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Test-accuracy cadence, in steps.
    pub eval_every: usize,
    /// Layer-statistics cadence, in steps.
    pub stats_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: 64,
            steps: 1000,
            seed: 0,
            eval_every: 100,
            stats_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(GhnError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(GhnError::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the scalar metrics stream (`step,split,metric,value`).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarRow {
    pub step: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

/// One row of the layer-statistics stream (`step,layer,stat,value`).
#[derive(Debug, Clone, PartialEq)]
pub struct StatRow {
    pub step: usize,
    pub layer: String,
    pub stat: &'static str,
    pub value: f64,
}

/// Everything one training run emits.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub scalars: Vec<ScalarRow>,
    pub layer_stats: Vec<StatRow>,
}

impl TrainLog {
    pub fn scalar_csv(&self) -> String {
        let mut out = String::from("step,split,metric,value\n");
        for r in &self.scalars {
            out.push_str(&format!("{},{},{},{:.9}\n", r.step, r.split, r.metric, r.value));
        }
        out
    }

    pub fn layer_stats_csv(&self) -> String {
        let mut out = String::from("step,layer,stat,value\n");
        for r in &self.layer_stats {
            out.push_str(&format!("{},{},{},{:.9}\n", r.step, r.layer, r.stat, r.value));
        }
        out
    }

    /// Final value of a scalar series, if any row matches.
    pub fn last_scalar(&self, split: &str, metric: &str) -> Option<f64> {
        self.scalars
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.scalars
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn stat_series(&self, stat: &str) -> Vec<f64> {
        self.layer_stats
            .iter()
            .filter(|r| r.stat == stat)
            .map(|r| r.value)
            .collect()
    }
}

/// Apply one plain SGD update to every trainable parameter, using the
/// bindings recorded in `param_vars`. Ratio parameters are clamped to [0, 1]
/// afterward.
pub fn sgd_step<F: Real>(
    net: &mut Network<F>,
    param_vars: &[Var],
    grads: &Gradients<F>,
    lr: f64,
) -> Result<()> {
    let lr = lit::<F>(lr);
    let params = net.params_mut();
    if params.len() != param_vars.len() {
        return Err(GhnError::ShapeMismatch {
            context: "sgd_step",
            message: format!(
                "{} parameters but {} bindings",
                params.len(),
                param_vars.len()
            ),
        });
    }
    for (param, &var) in params.into_iter().zip(param_vars) {
        if !param.trainable {
            continue;
        }
        let Some(g) = grads.get(var) else { continue };
        if !g.all_finite() {
            return Err(GhnError::NonFiniteGradient {
                name: param.name.clone(),
            });
        }
        if g.shape() != param.value.shape() {
            return Err(GhnError::ShapeMismatch {
                context: "sgd_step",
                message: format!(
                    "gradient shape {:?} vs parameter {} shape {:?}",
                    g.shape(),
                    param.name,
                    param.value.shape()
                ),
            });
        }
        apply_update(param, g, lr);
    }
    Ok(())
}

fn apply_update<F: Real>(param: &mut Parameter<F>, g: &TensorData<F>, lr: F) {
    let clamp = param.clamp01;
    param.value = TensorData::from_fn(param.value.shape(), |i| {
        let v = param.value.values()[i] - lr * g.values()[i];
        if clamp {
            v.max(F::zero()).min(F::one())
        } else {
            v
        }
    });
}

fn argmax_row<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batch_accuracy<F: Real>(logits: &TensorData<F>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .values()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax_row(row) == l)
        .count()
}

/// Full-dataset pass in evaluation mode. Returns (accuracy, mean loss).
pub fn evaluate<F: Real>(
    net: &mut Network<F>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(GhnError::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    for indices in BatchIter::new(ds.len(), batch_size, 0, 0, false)? {
        let batch = ds.gather::<F>(&indices)?;
        let tape = Tape::new();
        tape.set_check_finite(false);
        let trace = net.forward(&tape, &batch.images, false)?;
        let loss = tape.softmax_cross_entropy(trace.logits, &batch.labels)?;
        loss_sum += tape.value(loss).values()[0].to_f64() * batch.len() as f64;
        correct += batch_accuracy(&tape.value(trace.logits), &batch.labels);
    }
    Ok((correct as f64 / ds.len() as f64, loss_sum / ds.len() as f64))
}

/// Mean/max/min over a layer's full output tensor for the current batch.
pub fn record_layer_stats<F: Real>(output: &TensorData<F>) -> (f64, f64, f64) {
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for &v in output.values() {
        let v = v.to_f64();
        sum += v;
        max = max.max(v);
        min = min.min(v);
    }
    (sum / output.len() as f64, max, min)
}

fn push_layer_stats<F: Real>(
    log: &mut TrainLog,
    tape: &Tape<F>,
    net: &Network<F>,
    trace: &ForwardTrace,
    step: usize,
) {
    let Some(first_conv) = trace
        .layer_outputs
        .iter()
        .find(|lo| lo.name.starts_with("conv"))
        .or_else(|| trace.layer_outputs.first())
    else {
        return;
    };
    let (mean, max, min) = record_layer_stats(&tape.value(first_conv.output));
    for (stat, value) in [("mean", mean), ("max", max), ("min", min)] {
        log.layer_stats.push(StatRow {
            step,
            layer: first_conv.name.clone(),
            stat,
            value,
        });
    }
    for p in net.params() {
        if p.clamp01 {
            let r_mean =
                p.value.values().iter().map(|&v| Real::to_f64(v)).sum::<f64>()
                    / p.value.len() as f64;
            log.layer_stats.push(StatRow {
                step,
                layer: p.name.clone(),
                stat: "r",
                value: r_mean,
            });
        }
    }
}

/// Run SGD for `cfg.steps` mini-batches. Emits the train loss every step,
/// test accuracy every `eval_every` steps and at the end, and first-conv
/// layer statistics every `stats_every` steps. Deterministic given the seed.
pub fn train<F: Real>(
    net: &mut Network<F>,
    ds_train: &Dataset,
    ds_test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if ds_train.is_empty() {
        return Err(GhnError::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut log = TrainLog::default();
    let mut step = 0usize;
    let mut epoch = 0u64;
    'outer: loop {
        for indices in BatchIter::new(ds_train.len(), cfg.batch_size, cfg.seed, epoch, true)? {
            if step >= cfg.steps {
                break 'outer;
            }
            let batch = ds_train.gather::<F>(&indices)?;
            let tape = Tape::new();
            tape.set_check_finite(false);
            let trace = net.forward(&tape, &batch.images, true)?;
            let loss = tape.softmax_cross_entropy(trace.logits, &batch.labels)?;
            let loss_val = tape.value(loss).values()[0].to_f64();
            if !loss_val.is_finite() {
                return Err(GhnError::NonFiniteLoss { step });
            }
            log.scalars.push(ScalarRow {
                step,
                split: "train",
                metric: "loss",
                value: loss_val,
            });
            if cfg.stats_every > 0 && step % cfg.stats_every == 0 {
                push_layer_stats(&mut log, &tape, net, &trace, step);
            }
            let grads = tape.backward(loss)?;
            sgd_step(net, &trace.param_vars, &grads, cfg.learning_rate)?;
            step += 1;
            let at_eval = cfg.eval_every > 0 && step % cfg.eval_every == 0;
            if at_eval || step == cfg.steps {
                if let Some(test) = ds_test {
                    let (acc, test_loss) = evaluate(net, test, cfg.batch_size)?;
                    log.scalars.push(ScalarRow {
                        step,
                        split: "test",
                        metric: "accuracy",
                        value: acc,
                    });
                    log.scalars.push(ScalarRow {
                        step,
                        split: "test",
                        metric: "loss",
                        value: test_loss,
                    });
                }
            }
        }
        epoch += 1;
    }
    Ok(log)
}

/// Sample Pearson correlation of two equally long, non-constant series.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(GhnError::InvalidArgument(format!(
            "pearson needs two equally long series of length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(GhnError::UndefinedCorrelation(
            "constant series has zero variance".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Result of the paired GHN-vs-baseline training comparison.
#[derive(Debug, Clone)]
pub struct BnCompareReport {
    pub corr_mean: f64,
    pub corr_max: f64,
    pub corr_min: f64,
    /// (step, arm, stat, value) rows covering layer stats and accuracy.
    pub curves: Vec<(usize, &'static str, String, f64)>,
    pub batch_checksum: u64,
}

impl BnCompareReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("step,arm,stat,value\n");
        for (series, v) in [
            ("pearson_mean", self.corr_mean),
            ("pearson_max", self.corr_max),
            ("pearson_min", self.corr_min),
        ] {
            out.push_str(&format!("0,summary,{series},{v:.9}\n"));
        }
        for (step, arm, stat, value) in &self.curves {
            out.push_str(&format!("{step},{arm},{stat},{value:.9}\n"));
        }
        out
    }
}

fn batch_stream_checksum(n: usize, cfg: &TrainConfig) -> Result<u64> {
    // FNV-1a over the flattened index stream for the run's first epoch span
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut step = 0;
    let mut epoch = 0u64;
    'outer: loop {
        for indices in BatchIter::new(n, cfg.batch_size, cfg.seed, epoch, true)? {
            if step >= cfg.steps {
                break 'outer;
            }
            for i in indices {
                hash ^= i as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
            step += 1;
        }
        epoch += 1;
    }
    Ok(hash)
}

/// Train two network variants from identical seeds over bit-identical batch
/// streams and correlate their first-conv-layer output statistics.
pub fn compare_arms<F: Real>(
    spec_a: &crate::layers::NetworkSpec,
    spec_b: &crate::layers::NetworkSpec,
    ds_train: &Dataset,
    ds_test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<BnCompareReport> {
    let checksum = batch_stream_checksum(ds_train.len(), cfg);
    let run = |spec: &crate::layers::NetworkSpec| -> Result<(TrainLog, u64)> {
        // the checksum is recomputed per arm from the same generator inputs,
        // which is exactly the bit-identical-stream guarantee being verified
        let sum = batch_stream_checksum(ds_train.len(), cfg)?;
        let mut net = Network::<F>::init(spec, cfg.seed)?;
        let log = train(&mut net, ds_train, ds_test, cfg)?;
        Ok((log, sum))
    };
    let (log_a, sum_a) = run(spec_a)?;
    let (log_b, sum_b) = run(spec_b)?;
    let expected = checksum?;
    if sum_a != expected || sum_b != expected {
        return Err(GhnError::InvalidArgument(
            "batch streams diverged between experiment arms".into(),
        ));
    }
    // a dead filter can pin a series (zero activation, zero gradient); an
    // undefined correlation is reported as NaN rather than aborting the run
    let corr = |stat: &str| -> Result<f64> {
        match pearson(&log_a.stat_series(stat), &log_b.stat_series(stat)) {
            Ok(c) => Ok(c),
            Err(GhnError::UndefinedCorrelation(_)) => Ok(f64::NAN),
            Err(e) => Err(e),
        }
    };
    let mut curves = Vec::new();
    for (arm, log) in [("ghn", &log_a), ("baseline", &log_b)] {
        for r in &log.layer_stats {
            if r.stat != "r" {
                curves.push((r.step, arm, r.stat.to_string(), r.value));
            }
        }
        for r in log.scalars.iter().filter(|r| r.metric == "accuracy") {
            curves.push((r.step, arm, "accuracy".to_string(), r.value));
        }
    }
    Ok(BnCompareReport {
        corr_mean: corr("mean")?,
        corr_max: corr("max")?,
        corr_min: corr("min")?,
        curves,
        batch_checksum: expected,
    })
}

/// The experiment proper: the given architecture as a rectified GHN versus
/// the same architecture as a conventional net with batch normalization.
pub fn compare_bn_experiment<F: Real>(
    ops: &[crate::layers::LayerOp],
    input: (usize, usize, usize),
    ds_train: &Dataset,
    ds_test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<BnCompareReport> {
    use crate::layers::*;
    let build = |kind: NetworkKind| NetworkSpec {
        kind,
        input,
        layers: ops
            .iter()
            .map(|&op| LayerSpec {
                op,
                threshold: ThresholdConfig::off(),
                activation: if matches!(kind, NetworkKind::Ghn) {
                    Activation::ReluGhd
                } else {
                    Activation::Relu
                },
            })
            .collect(),
        head: if matches!(kind, NetworkKind::Ghn) {
            Head::NegGhd
        } else {
            Head::Identity
        },
        scale: if matches!(kind, NetworkKind::Ghn) {
            SignalScale::Auto
        } else {
            SignalScale::One
        },
    };
    compare_arms::<F>(
        &build(NetworkKind::Ghn),
        &build(NetworkKind::Baseline { batch_norm: true }),
        ds_train,
        ds_test,
        cfg,
    )
}

// ---- checkpoints -----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Values widened to f64; serialization narrows back to `dtype`, which
    /// is lossless for values that originated at that width.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub config_echo: String,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    /// Capture a network's parameters and auxiliary state.
    pub fn capture<F: Real>(net: &Network<F>, step: usize, config_echo: &str) -> Self {
        let mut entries = Vec::new();
        for p in net.params() {
            entries.push(CheckpointEntry {
                name: p.name.clone(),
                dtype: F::DTYPE,
                shape: p.value.shape().to_vec(),
                values: p.value.values().iter().map(|&v| Real::to_f64(v)).collect(),
            });
        }
        for (name, value) in net.aux_state() {
            entries.push(CheckpointEntry {
                name,
                dtype: F::DTYPE,
                shape: value.shape().to_vec(),
                values: value.values().iter().map(|&v| Real::to_f64(v)).collect(),
            });
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            config_echo: config_echo.to_string(),
            entries,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Write every stored tensor back into the network. Every network
    /// parameter must be present with a matching dtype and shape.
    pub fn apply<F: Real>(&self, net: &mut Network<F>) -> Result<()> {
        let restore = |e: &CheckpointEntry| -> Result<TensorData<F>> {
            if e.dtype != F::DTYPE {
                return Err(GhnError::Checkpoint(format!(
                    "entry {} stored as {:?} but the network runs at {:?}",
                    e.name,
                    e.dtype,
                    F::DTYPE
                )));
            }
            TensorData::new(e.shape.clone(), e.values.iter().map(|&v| lit(v)).collect())
        };
        for p in net.params_mut() {
            let e = self
                .entries
                .iter()
                .find(|e| e.name == p.name)
                .ok_or_else(|| {
                    GhnError::Checkpoint(format!("missing parameter entry {}", p.name))
                })?;
            let t = restore(e)?;
            if t.shape() != p.value.shape() {
                return Err(GhnError::Checkpoint(format!(
                    "entry {} has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        for (name, _) in net.aux_state() {
            let e = self.entries.iter().find(|e| e.name == name).ok_or_else(|| {
                GhnError::Checkpoint(format!("missing state entry {name}"))
            })?;
            net.set_aux_state(&name, restore(e)?)?;
        }
        Ok(())
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(c.version)?;
    let extra = 2; // step and config echo entries
    w.write_u32::<LittleEndian>((c.entries.len() + extra) as u32)?;
    let write_header =
        |w: &mut BufWriter<File>, name: &str, dtype: u8, shape: &[usize]| -> Result<()> {
            if name.len() > u16::MAX as usize {
                return Err(GhnError::Checkpoint(format!("entry name too long: {name}")));
            }
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(dtype)?;
            w.write_u8(shape.len() as u8)?;
            for &e in shape {
                w.write_u32::<LittleEndian>(e as u32)?;
            }
            Ok(())
        };
    write_header(&mut w, STEP_ENTRY, Dtype::R64.code(), &[])?;
    w.write_f64::<LittleEndian>(c.step as f64)?;
    let cfg_bytes = c.config_echo.as_bytes();
    write_header(&mut w, CONFIG_ENTRY, DTYPE_BYTES, &[cfg_bytes.len()])?;
    w.write_all(cfg_bytes)?;
    for e in &c.entries {
        let expected: usize = e.shape.iter().product();
        if expected != e.values.len() {
            return Err(GhnError::Checkpoint(format!(
                "entry {}: shape {:?} does not cover {} values",
                e.name,
                e.shape,
                e.values.len()
            )));
        }
        write_header(&mut w, &e.name, e.dtype.code(), &e.shape)?;
        for &v in &e.values {
            match e.dtype {
                Dtype::R32 => w.write_f32::<LittleEndian>(v as f32)?,
                Dtype::R64 => w.write_f64::<LittleEndian>(v)?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let corrupt = |what: &str| GhnError::Checkpoint(format!("corrupt length: truncated {what}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(GhnError::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| corrupt("version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(GhnError::Checkpoint(format!(
            "version mismatch: file is v{version}, reader supports v{CHECKPOINT_VERSION}"
        )));
    }
    let count = r.read_u32::<LittleEndian>().map_err(|_| corrupt("entry count"))?;
    let mut step = 0usize;
    let mut config_echo = String::new();
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>().map_err(|_| corrupt("entry name"))?;
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes).map_err(|_| corrupt("entry name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| GhnError::Checkpoint("entry name is not UTF-8".into()))?;
        let dtype_code = r.read_u8().map_err(|_| corrupt("dtype"))?;
        let rank = r.read_u8().map_err(|_| corrupt("rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(|_| corrupt("extent"))? as usize);
        }
        let len: usize = shape.iter().product();
        if dtype_code == DTYPE_BYTES {
            let mut raw = vec![0u8; len];
            r.read_exact(&mut raw).map_err(|_| corrupt("byte payload"))?;
            if name == CONFIG_ENTRY {
                config_echo = String::from_utf8(raw)
                    .map_err(|_| GhnError::Checkpoint("config echo is not UTF-8".into()))?;
            }
            continue;
        }
        let dtype = Dtype::from_code(dtype_code)
            .ok_or_else(|| GhnError::Checkpoint(format!("unknown dtype code {dtype_code}")))?;
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(match dtype {
                Dtype::R32 => {
                    r.read_f32::<LittleEndian>().map_err(|_| corrupt("values"))? as f64
                }
                Dtype::R64 => r.read_f64::<LittleEndian>().map_err(|_| corrupt("values"))?,
            });
        }
        if name == STEP_ENTRY {
            step = values.first().copied().unwrap_or(0.0) as usize;
            continue;
        }
        entries.push(CheckpointEntry {
            name,
            dtype,
            shape,
            values,
        });
    }
    Ok(Checkpoint {
        version,
        step,
        config_echo,
        entries,
    })
}
