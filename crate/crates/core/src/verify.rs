//! Independent verification utilities: brute-force oracles, finite-difference
//! gradient checking, and the property suites behind `ghn selftest`.
//!
//! Nothing here shares code with the im2col/matmul forward paths it checks;
//! every oracle is a direct loop over the defining formula.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GhnError, Result};
use crate::ghd;
use crate::real::{lit, Real};
use crate::tensor::{Padding, Tape, TensorData, Var};

/// Outcome of one named property check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    fn pass(name: &str, detail: String) -> Self {
        CheckReport {
            name: name.into(),
            passed: true,
            detail,
        }
    }

    fn fail(name: &str, detail: String) -> Self {
        CheckReport {
            name: name.into(),
            passed: false,
            detail,
        }
    }

    fn from_worst(name: &str, worst: f64, tol: f64) -> Self {
        if worst <= tol {
            Self::pass(name, format!("worst error {worst:.3e} <= {tol:.0e}"))
        } else {
            Self::fail(name, format!("worst error {worst:.3e} > {tol:.0e}"))
        }
    }
}

// ---- brute-force oracles ---------------------------------------------------

/// Triple-loop matrix product, the reference for `Tape::matmul`.
pub fn naive_matmul<F: Real>(
    a: &TensorData<F>,
    b: &TensorData<F>,
) -> Result<TensorData<F>> {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![F::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = F::zero();
            for p in 0..k {
                acc += a.values()[i * k + p] * b.values()[p * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    TensorData::new(vec![n, m], out)
}

/// Direct sliding-window cross-correlation, the reference for `Tape::conv2d`.
/// Computes its own padding arithmetic so it stays independent of the im2col
/// path.
pub fn naive_conv2d<F: Real>(
    x: &TensorData<F>,
    k: &TensorData<F>,
    stride: usize,
    padding: Padding,
) -> Result<TensorData<F>> {
    let (n, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, _, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (oh, ow, pad_top, pad_left) = match padding {
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
            (oh, ow, pad_h / 2, pad_w / 2)
        }
        Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
    };
    let mut out = vec![F::zero(); n * oh * ow * cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = F::zero();
                    for dy in 0..kh {
                        let iy = (oy * stride + dy) as isize - pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let ix = (ox * stride + dx) as isize - pad_left as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x.values()
                                    [((b * h + iy as usize) * w + ix as usize) * cin + ci];
                                let kv = k.values()[((dy * kw + dx) * cin + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    TensorData::new(vec![n, oh, ow, cout], out)
}

/// Per-sample, per-filter vector GHD through the scalar algebra; the reference
/// for the GHN dense layer.
pub fn ghn_dense_oracle<F: Real>(
    x: &TensorData<F>,
    w: &TensorData<F>,
) -> Result<TensorData<F>> {
    let (n, l) = (x.shape()[0], x.shape()[1]);
    let f = w.shape()[1];
    let mut out = vec![F::zero(); n * f];
    for i in 0..n {
        let row: Vec<f64> = (0..l).map(|j| x.values()[i * l + j].to_f64()).collect();
        for fi in 0..f {
            let col: Vec<f64> = (0..l).map(|j| w.values()[j * f + fi].to_f64()).collect();
            out[i * f + fi] = lit(ghd::ghd_vec(&row, &col)?);
        }
    }
    TensorData::new(vec![n, f], out)
}

/// Per-patch vector GHD against each filter, zero padding included in the
/// patch mean; the reference for the GHN conv layer.
pub fn ghn_conv_oracle<F: Real>(
    x: &TensorData<F>,
    k: &TensorData<F>,
    stride: usize,
    padding: Padding,
) -> Result<TensorData<F>> {
    let (n, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, _, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (oh, ow, pad_top, pad_left) = match padding {
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
            (oh, ow, pad_h / 2, pad_w / 2)
        }
        Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
    };
    let patch_len = kh * kw * cin;
    let mut out = vec![F::zero(); n * oh * ow * cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut patch = vec![0.0f64; patch_len];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let iy = (oy * stride + dy) as isize - pad_top as isize;
                        let ix = (ox * stride + dx) as isize - pad_left as isize;
                        if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            patch[(dy * kw + dx) * cin + ci] = x.values()
                                [((b * h + iy as usize) * w + ix as usize) * cin + ci]
                                .to_f64();
                        }
                    }
                }
                for co in 0..cout {
                    let filter: Vec<f64> = (0..patch_len)
                        .map(|p| k.values()[p * cout + co].to_f64())
                        .collect();
                    out[((b * oh + oy) * ow + ox) * cout + co] =
                        lit(ghd::ghd_vec(&patch, &filter)?);
                }
            }
        }
    }
    TensorData::new(vec![n, oh, ow, cout], out)
}

// ---- gradient checking -----------------------------------------------------

/// Default central-difference step for the given precision.
pub fn default_epsilon<F: Real>() -> f64 {
    match F::DTYPE {
        crate::real::Dtype::R32 => 1e-3,
        crate::real::Dtype::R64 => 1e-6,
    }
}

/// Default gradient-check tolerance for the given precision.
pub fn default_grad_tol<F: Real>() -> f64 {
    match F::DTYPE {
        crate::real::Dtype::R32 => 1e-3,
        crate::real::Dtype::R64 => 1e-6,
    }
}

/// Compare tape gradients of a scalar-valued graph against central
/// differences, coordinate by coordinate. Returns the worst relative error
/// (absolute floor 1e-8 on the denominator).
pub fn grad_check<F, B>(build: B, params: &[TensorData<F>], epsilon: f64) -> Result<f64>
where
    F: Real,
    B: Fn(&Tape<F>, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(GhnError::InvalidArgument(
            "grad_check epsilon must be positive".into(),
        ));
    }
    let eval = |inputs: &[TensorData<F>]| -> Result<f64> {
        let tape = Tape::new();
        tape.set_check_finite(false);
        let vars: Vec<Var> = inputs.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = build(&tape, &vars)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(GhnError::InvalidArgument(format!(
                "grad_check requires a scalar-valued graph, got shape {:?}",
                value.shape()
            )));
        }
        Ok(value.values()[0].to_f64())
    };

    // analytic gradients
    let tape = Tape::new();
    tape.set_check_finite(false);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(GhnError::InvalidArgument(
            "grad_check requires a scalar-valued graph".into(),
        ));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]);
        for ci in 0..param.len() {
            let perturbed = |delta: f64| -> Result<f64> {
                let mut inputs: Vec<TensorData<F>> = params.to_vec();
                let mut data = param.to_vec();
                data[ci] += lit::<F>(delta);
                inputs[pi] = TensorData::new(param.shape().to_vec(), data)?;
                eval(&inputs)
            };
            let numeric = (perturbed(epsilon)? - perturbed(-epsilon)?) / (2.0 * epsilon);
            let a = analytic.map(|g| g.values()[ci].to_f64()).unwrap_or(0.0);
            let diff = (a - numeric).abs();
            // differences below the absolute floor count as agreement
            if diff > 1e-8 {
                worst = worst.max(diff / a.abs().max(numeric.abs()));
            }
        }
    }
    Ok(worst)
}

// ---- property suites -------------------------------------------------------

/// The scalar algebra properties: group axioms, inverse law, fixed point,
/// complement, restricted closure. One report per property over `samples`
/// random draws.
pub fn algebra_suite(samples: usize, seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut commut = 0.0f64;
    let mut assoc = 0.0f64;
    let mut identity = 0.0f64;
    let mut inverse = 0.0f64;
    let mut fixed = 0.0f64;
    let mut complement = 0.0f64;
    let mut closure_ok = true;
    for _ in 0..samples {
        let a = rng.gen_range(-3.0..3.0);
        let b = rng.gen_range(-3.0..3.0);
        let c = rng.gen_range(-3.0..3.0);
        let ab = ghd::ghd(a, b).unwrap();
        commut = commut.max((ab - ghd::ghd(b, a).unwrap()).abs());
        let abc = ghd::ghd(ab, c).unwrap();
        let bca = ghd::ghd(a, ghd::ghd(b, c).unwrap()).unwrap();
        assoc = assoc.max((abc - bca).abs());
        identity = identity.max((ghd::ghd(0.0, a).unwrap() - a).abs());
        if (2.0 * a - 1.0).abs() > 1e-3 {
            let inv = ghd::ghd_inverse(a).unwrap();
            inverse = inverse.max(ghd::ghd(a, inv).unwrap().abs());
        }
        fixed = fixed.max((ghd::ghd(0.5, a).unwrap() - 0.5).abs());
        complement = complement.max((ghd::ghd(1.0, a).unwrap() - (1.0 - a)).abs());
        let u = rng.gen_range(0.0..=1.0);
        let v = rng.gen_range(0.0..=1.0);
        let uv = ghd::ghd(u, v).unwrap();
        if !(0.0..=1.0).contains(&uv) {
            closure_ok = false;
        }
    }
    vec![
        CheckReport::from_worst("commutativity", commut, 1e-12),
        CheckReport::from_worst("associativity", assoc, 1e-9),
        CheckReport::from_worst("identity element", identity, 1e-12),
        CheckReport::from_worst("inverse law", inverse, 1e-9),
        CheckReport::from_worst("fixed point 0.5", fixed, 1e-12),
        CheckReport::from_worst("complement 1 - a", complement, 1e-12),
        if closure_ok {
            CheckReport::pass("restricted closure", "all samples stayed in [0, 1]".into())
        } else {
            CheckReport::fail("restricted closure", "a sample left [0, 1]".into())
        },
    ]
}

/// The distributive identity over random ensembles, plus the binary-pattern
/// bit-count equivalence.
pub fn distributivity_suite(cases: usize, seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_real = 0.0f64;
    let mut worst_binary = 0.0f64;
    for case in 0..cases {
        let m = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=8);
        let l = rng.gen_range(1..=16);
        let binary = case % 2 == 1;
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..l)
                .map(|_| {
                    if binary {
                        if rng.gen_bool(0.5) {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        rng.gen_range(0.0..1.0)
                    }
                })
                .collect()
        };
        let xs: Vec<Vec<f64>> = (0..m).map(|_| draw(&mut rng)).collect();
        let ys: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
        let mean_of = |vs: &[Vec<f64>]| -> Vec<f64> {
            (0..l)
                .map(|i| vs.iter().map(|v| v[i]).sum::<f64>() / vs.len() as f64)
                .collect()
        };
        let lhs = ghd::ghd_vec(&mean_of(&xs), &mean_of(&ys)).unwrap();
        let rhs = ghd::mean_pairwise_ghd(&xs, &ys).unwrap();
        worst_real = worst_real.max((lhs - rhs).abs());
        if binary {
            // mean of plain bit-difference counts divided by L
            let mut acc = 0.0;
            for x in &xs {
                for y in &ys {
                    let bits: usize = x
                        .iter()
                        .zip(y)
                        .filter(|(&a, &b)| (a - b).abs() > 0.5)
                        .count();
                    acc += bits as f64 / l as f64;
                }
            }
            let bit_mean = acc / (m * n) as f64;
            worst_binary = worst_binary.max((rhs - bit_mean).abs());
        }
    }
    vec![
        CheckReport::from_worst("distributivity (ensemble means)", worst_real, 1e-9),
        CheckReport::from_worst("binary ensemble bit-count equivalence", worst_binary, 1e-12),
    ]
}

/// Gradient checks for every differentiable tape operation on random small
/// tensors.
pub fn gradient_suite<F: Real>(seed: u64) -> Vec<CheckReport> {
    // a slightly larger step than the grad_check default keeps f32 rounding
    // noise in the central differences below the 1e-3 tolerance
    let eps = match F::DTYPE {
        crate::real::Dtype::R32 => 1e-2,
        crate::real::Dtype::R64 => 1e-6,
    };
    let tol = default_grad_tol::<F>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_tensor = |shape: &[usize], lo: f64, hi: f64| {
        TensorData::<F>::from_fn(shape, |_| lit(rng.gen_range(lo..hi)))
    };
    let mut reports = Vec::new();
    let mut check = |name: &str,
                     params: Vec<TensorData<F>>,
                     build: Box<dyn Fn(&Tape<F>, &[Var]) -> Result<Var>>| {
        match grad_check(build.as_ref(), &params, eps) {
            Ok(worst) => reports.push(CheckReport::from_worst(name, worst, tol)),
            Err(e) => reports.push(CheckReport::fail(name, e.to_string())),
        }
    };

    let a = rand_tensor(&[2, 3], -1.0, 1.0);
    let b = rand_tensor(&[2, 3], -1.0, 1.0);
    check(
        "grad add",
        vec![a.clone(), b.clone()],
        Box::new(|t, v| {
            let s = t.add(v[0], v[1])?;
            t.sum_all(s)
        }),
    );
    check(
        "grad sub",
        vec![a.clone(), b.clone()],
        Box::new(|t, v| {
            let s = t.sub(v[0], v[1])?;
            t.sum_all(s)
        }),
    );
    check(
        "grad mul",
        vec![a.clone(), b.clone()],
        Box::new(|t, v| {
            let s = t.mul(v[0], v[1])?;
            t.sum_all(s)
        }),
    );
    check(
        "grad scale/add_constant/negate",
        vec![a.clone()],
        Box::new(|t, v| {
            let s = t.scale(v[0], lit(1.7))?;
            let s = t.add_scalar(s, lit(-0.3))?;
            let s = t.neg(s)?;
            t.sum_all(s)
        }),
    );
    check(
        "grad logistic",
        vec![a.clone()],
        Box::new(|t, v| {
            let s = t.logistic(v[0])?;
            t.sum_all(s)
        }),
    );
    check(
        "grad sigmoid",
        vec![a.clone()],
        Box::new(|t, v| {
            let s = t.sigmoid(v[0])?;
            t.sum_all(s)
        }),
    );
    // keep relu/abs inputs away from the kink at 0
    let away = TensorData::<F>::from_fn(&[2, 3], |i| {
        lit(if i % 2 == 0 { 0.4 + i as f64 * 0.1 } else { -0.3 - i as f64 * 0.1 })
    });
    check(
        "grad relu",
        vec![away.clone()],
        Box::new(|t, v| {
            let s = t.relu(v[0])?;
            t.sum_all(s)
        }),
    );
    check(
        "grad abs",
        vec![away],
        Box::new(|t, v| {
            let s = t.abs(v[0])?;
            t.sum_all(s)
        }),
    );
    let pos = rand_tensor(&[2, 2], 0.5, 2.0);
    check(
        "grad rsqrt",
        vec![pos],
        Box::new(|t, v| {
            let s = t.rsqrt(v[0])?;
            t.sum_all(s)
        }),
    );
    let m1 = rand_tensor(&[3, 4], -1.0, 1.0);
    let m2 = rand_tensor(&[4, 2], -1.0, 1.0);
    check(
        "grad matmul",
        vec![m1, m2],
        Box::new(|t, v| {
            let s = t.matmul(v[0], v[1])?;
            t.mean_all(s)
        }),
    );
    // magnitudes bounded away from zero keep the per-coordinate relative
    // error well conditioned at 32-bit
    let x = rand_tensor(&[2, 4, 4, 2], 0.3, 1.0);
    let k = rand_tensor(&[3, 3, 2, 3], 0.25, 0.75);
    check(
        "grad conv2d (same)",
        vec![x.clone(), k.clone()],
        Box::new(|t, v| {
            let s = t.conv2d(v[0], v[1], 1, Padding::Same)?;
            t.mean_all(s)
        }),
    );
    check(
        "grad conv2d (valid, stride 2)",
        vec![x.clone(), k],
        Box::new(|t, v| {
            let s = t.conv2d(v[0], v[1], 2, Padding::Valid)?;
            t.mean_all(s)
        }),
    );
    // window entries separated by more than 2*eps so perturbation cannot
    // flip the arg-max
    let pool_in = TensorData::<F>::from_fn(&[2, 4, 4, 2], |i| lit(((i * 37 + 5) % 64) as f64 / 10.0));
    check(
        "grad maxpool2d",
        vec![pool_in],
        Box::new(|t, v| {
            let s = t.maxpool2d(v[0], 2, 2)?;
            t.mean_all(s)
        }),
    );
    check(
        "grad reduce mean(axis)",
        vec![a.clone()],
        Box::new(|t, v| {
            let s = t.reduce(crate::tensor::ReduceOp::Mean, v[0], &[1])?;
            t.sum_all(s)
        }),
    );
    check(
        "grad reduce sum(axis)",
        vec![a.clone()],
        Box::new(|t, v| {
            let s = t.reduce(crate::tensor::ReduceOp::Sum, v[0], &[0])?;
            t.sum_all(s)
        }),
    );
    // few classes keep every probability (and so every gradient component)
    // well above the f32 finite-difference noise floor
    let logits = rand_tensor(&[2, 4], -1.0, 1.0);
    check(
        "grad softmax_cross_entropy",
        vec![logits],
        Box::new(|t, v| t.softmax_cross_entropy(v[0], &[1, 3])),
    );
    check(
        "grad channel ops",
        vec![a.clone(), rand_tensor(&[3], -1.0, 1.0)],
        Box::new(|t, v| {
            let s = t.add_channel(v[0], v[1])?;
            let s = t.mul_channel(s, v[1])?;
            t.sum_all(s)
        }),
    );
    check(
        "grad structural ops",
        vec![rand_tensor(&[2, 1], -1.0, 1.0), rand_tensor(&[2], -1.0, 1.0)],
        Box::new(|t, v| {
            let wide = t.broadcast_channels(v[0], 4)?;
            let flat = t.reshape(wide, vec![2, 4])?;
            let s = t.add_col_vector(flat, v[1])?;
            t.mean_all(s)
        }),
    );
    reports
}

/// Matmul and conv2d against their naive-loop oracles on random
/// configurations.
pub fn kernel_oracle_suite<F: Real>(configs: usize, seed: u64, tol: f64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_mm = 0.0f64;
    let mut worst_conv = 0.0f64;
    for _ in 0..configs {
        let (n, k, m) = (
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        );
        let a = TensorData::<F>::from_fn(&[n, k], |_| lit(rng.gen_range(-1.0..1.0)));
        let b = TensorData::<F>::from_fn(&[k, m], |_| lit(rng.gen_range(-1.0..1.0)));
        let tape = Tape::new();
        let (av, bv) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        let oracle = naive_matmul(&a, &b).unwrap();
        worst_mm = worst_mm.max(tape.value(c).max_abs_diff(&oracle));

        let (h, w) = (rng.gen_range(3..8), rng.gen_range(3..8));
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let kh = rng.gen_range(1..=3.min(h));
        let stride = rng.gen_range(1..3);
        let padding = if rng.gen_bool(0.5) {
            Padding::Same
        } else {
            Padding::Valid
        };
        let x = TensorData::<F>::from_fn(&[n, h, w, cin], |_| lit(rng.gen_range(0.0..1.0)));
        let kt = TensorData::<F>::from_fn(&[kh, kh, cin, cout], |_| {
            lit(rng.gen_range(-0.5..0.5))
        });
        let tape = Tape::new();
        let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(kt.clone()));
        let y = tape.conv2d(xv, kv, stride, padding).unwrap();
        let oracle = naive_conv2d(&x, &kt, stride, padding).unwrap();
        worst_conv = worst_conv.max(tape.value(y).max_abs_diff(&oracle));
    }
    vec![
        CheckReport::from_worst("matmul vs triple-loop oracle", worst_mm, tol),
        CheckReport::from_worst("conv2d vs sliding-window oracle", worst_conv, tol),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algebra_suite_passes() {
        for report in algebra_suite(10_000, 42) {
            assert!(report.passed, "{}: {}", report.name, report.detail);
        }
    }

    #[test]
    fn distributivity_suite_passes() {
        for report in distributivity_suite(1000, 7) {
            assert!(report.passed, "{}: {}", report.name, report.detail);
        }
    }

    #[test]
    fn gradient_suite_f64_passes() {
        for report in gradient_suite::<f64>(3) {
            assert!(report.passed, "{}: {}", report.name, report.detail);
        }
    }

    #[test]
    fn gradient_suite_f32_passes() {
        for report in gradient_suite::<f32>(4) {
            assert!(report.passed, "{}: {}", report.name, report.detail);
        }
    }

    #[test]
    fn kernel_oracles_agree() {
        for report in kernel_oracle_suite::<f32>(50, 9, 1e-4) {
            assert!(report.passed, "{}: {}", report.name, report.detail);
        }
    }

    #[test]
    fn grad_check_constant_function() {
        let params = [TensorData::<f64>::from_fn(&[3], |i| i as f64)];
        let worst = grad_check(
            |t: &Tape<f64>, _v: &[Var]| {
                let c = t.leaf(TensorData::scalar(2.5));
                t.sum_all(c)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert_eq!(worst, 0.0);
    }

    #[test]
    fn grad_check_ghd_vec_analytic_identity() {
        // f = ghd_vec(x, w) built as a graph; df/dw_l = (1 - 2 x_l) / L
        let l = 6;
        let x = TensorData::<f64>::from_fn(&[1, l], |i| 0.1 + 0.12 * i as f64);
        let w = TensorData::<f64>::from_fn(&[l, 1], |i| 0.9 - 0.1 * i as f64);
        let build = |t: &Tape<f64>, v: &[Var]| -> crate::Result<Var> {
            let xbar = t.mean_all(v[0])?;
            let wbar = t.mean_all(v[1])?;
            let dot = t.matmul(v[0], v[1])?;
            let dot = t.scale(dot, -2.0 / l as f64)?;
            let dot = t.sum_all(dot)?;
            let s = t.add(xbar, wbar)?;
            t.add(s, dot)
        };
        let worst = grad_check(build, &[x.clone(), w.clone()], 1e-6).unwrap();
        assert!(worst < 1e-6, "finite differences disagree: {worst}");

        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w);
        let out = build(&tape, &[xv, wv]).unwrap();
        let grads = tape.backward(out).unwrap();
        let gw = grads.get(wv).unwrap();
        for i in 0..l {
            let expected = (1.0 - 2.0 * x.values()[i]) / l as f64;
            assert!((gw.values()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let params = [TensorData::<f64>::zeros(&[2])];
        let err = grad_check(
            |_t: &Tape<f64>, v: &[Var]| Ok(v[0]),
            &params,
            1e-6,
        );
        assert!(err.is_err());
    }
}
