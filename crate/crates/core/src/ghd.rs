//! Scalar and vector generalized hamming distance algebra.
//!
//! The binary operation `a ⊕ b = a + b - 2ab` turns the reals into an abelian
//! group with identity 0 and fixed point 0.5. Everything else in the crate is
//! checked against the functions in this module.

use crate::error::{GhnError, Result};

/// Tolerance for classifying a value as sitting exactly on the 0/1 boundary.
pub const BOUNDARY_TOL: f64 = 1e-12;

/// Region of the real line relative to the fuzzy interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionLabel {
    Fuzzy,
    Boundary,
    NegativeConfident,
    PositiveConfident,
}

/// Membership function mapping reals to fuzzy truth grades in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MembershipFn {
    /// The 0.5-shifted logistic, 1 / (1 + exp(0.5 - a)).
    Logistic,
}

impl MembershipFn {
    pub fn mu(self, a: f64) -> Result<f64> {
        match self {
            MembershipFn::Logistic => membership_mu(a),
        }
    }

    pub fn mu_inv(self, i: f64) -> Result<f64> {
        match self {
            MembershipFn::Logistic => membership_mu_inv(i),
        }
    }
}

fn check_finite(v: f64, context: &'static str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(GhnError::NonFinite { context })
    }
}

/// Generalized hamming distance of two scalars: `a + b - 2ab`.
pub fn ghd(a: f64, b: f64) -> Result<f64> {
    check_finite(a, "ghd")?;
    check_finite(b, "ghd")?;
    Ok(a + b - 2.0 * a * b)
}

/// Group inverse `a / (2a - 1)`. Undefined at the fixed point 0.5.
pub fn ghd_inverse(a: f64) -> Result<f64> {
    check_finite(a, "ghd_inverse")?;
    let denom = 2.0 * a - 1.0;
    if denom.abs() <= BOUNDARY_TOL {
        return Err(GhnError::SingularInverse);
    }
    Ok(a / denom)
}

/// Fuzziness `F(a) = a ⊕ a = 2a(1 - a)`, maximal 0.5 at a = 0.5.
pub fn fuzziness(a: f64) -> Result<f64> {
    check_finite(a, "fuzziness")?;
    Ok(2.0 * a * (1.0 - a))
}

/// Classify a value into the fuzzy / boundary / confident regions.
pub fn classify_region(a: f64) -> Result<RegionLabel> {
    check_finite(a, "classify_region")?;
    if a.abs() <= BOUNDARY_TOL || (a - 1.0).abs() <= BOUNDARY_TOL {
        Ok(RegionLabel::Boundary)
    } else if a < 0.0 {
        Ok(RegionLabel::NegativeConfident)
    } else if a > 1.0 {
        Ok(RegionLabel::PositiveConfident)
    } else {
        Ok(RegionLabel::Fuzzy)
    }
}

/// Vector GHD: arithmetic mean of element-wise distances, computed via the
/// closed form `x̄ + ȳ - (2/L)(x · y)`.
pub fn ghd_vec(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(GhnError::InvalidArgument(
            "ghd_vec requires vectors of length >= 1".into(),
        ));
    }
    if x.len() != y.len() {
        return Err(GhnError::ShapeMismatch {
            context: "ghd_vec",
            message: format!("lengths {} vs {}", x.len(), y.len()),
        });
    }
    for &v in x.iter().chain(y.iter()) {
        check_finite(v, "ghd_vec")?;
    }
    let len = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / len;
    let mean_y = y.iter().sum::<f64>() / len;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(mean_x + mean_y - 2.0 / len * dot)
}

/// Mean of pairwise vector GHDs across two ensembles; the brute-force side of
/// the distributive identity.
pub fn mean_pairwise_ghd(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(GhnError::InvalidArgument(
            "mean_pairwise_ghd requires non-empty ensembles".into(),
        ));
    }
    let len = xs[0].len();
    for v in xs.iter().chain(ys.iter()) {
        if v.len() != len {
            return Err(GhnError::ShapeMismatch {
                context: "mean_pairwise_ghd",
                message: format!("lengths {} vs {}", v.len(), len),
            });
        }
    }
    let mut acc = 0.0;
    for x in xs {
        for y in ys {
            acc += ghd_vec(x, y)?;
        }
    }
    Ok(acc / (xs.len() * ys.len()) as f64)
}

/// Logistic membership `μ(a) = 1 / (1 + exp(0.5 - a))`.
pub fn membership_mu(a: f64) -> Result<f64> {
    check_finite(a, "membership_mu")?;
    Ok(1.0 / (1.0 + (0.5 - a).exp()))
}

/// Inverse of the logistic membership, `-ln(1/i - 1) + 0.5`.
pub fn membership_mu_inv(i: f64) -> Result<f64> {
    check_finite(i, "membership_mu_inv")?;
    if i <= 0.0 || i >= 1.0 {
        return Err(GhnError::Domain {
            context: "membership_mu_inv",
            message: format!("{i} outside the open interval (0, 1)"),
        });
    }
    // ln(i) - ln(1 - i) + 0.5, with ln_1p for accuracy near i = 1
    Ok(i.ln() - (-i).ln_1p() + 0.5)
}

/// Fuzzy XOR connective induced by GHD under the logistic membership:
/// `μ(μ⁻¹(i) ⊕ μ⁻¹(j))`.
pub fn fuzzy_xor(i: f64, j: f64) -> Result<f64> {
    let a = membership_mu_inv(i)?;
    let b = membership_mu_inv(j)?;
    membership_mu(ghd(a, b)?)
}

/// Which surface to sample over an (a, b) grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceOp {
    Ghd,
    Fuzziness,
    MuOfGhd,
    DmuDa,
}

impl SurfaceOp {
    pub fn parse(s: &str) -> Option<SurfaceOp> {
        match s {
            "ghd" => Some(SurfaceOp::Ghd),
            "fuzziness" => Some(SurfaceOp::Fuzziness),
            "mu_of_ghd" => Some(SurfaceOp::MuOfGhd),
            "dmu_da" => Some(SurfaceOp::DmuDa),
            _ => None,
        }
    }
}

/// One grid sample of a surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub a: f64,
    pub b: f64,
    pub value: f64,
}

/// Sample a surface on a dense grid over `[a_min, a_max] x [b_min, b_max]`.
///
/// `dmu_da` is the analytic partial derivative of `μ(ghd(a, b))` in `a`:
/// `μ'(h) · (1 - 2b)` with `μ'(h) = μ(h)(1 - μ(h))`.
pub fn surface_sample(
    which: SurfaceOp,
    a_range: (f64, f64),
    b_range: (f64, f64),
    step: f64,
) -> Result<Vec<SurfaceSample>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(GhnError::InvalidArgument(format!(
            "surface step must be a positive finite number, got {step}"
        )));
    }
    for v in [a_range.0, a_range.1, b_range.0, b_range.1] {
        check_finite(v, "surface_sample")?;
    }
    if a_range.1 < a_range.0 || b_range.1 < b_range.0 {
        return Err(GhnError::InvalidArgument("empty surface range".into()));
    }
    let steps = |lo: f64, hi: f64| ((hi - lo) / step).floor() as usize + 1;
    let mut out = Vec::new();
    for ia in 0..steps(a_range.0, a_range.1) {
        let a = a_range.0 + ia as f64 * step;
        for ib in 0..steps(b_range.0, b_range.1) {
            let b = b_range.0 + ib as f64 * step;
            let h = ghd(a, b)?;
            let value = match which {
                SurfaceOp::Ghd => h,
                SurfaceOp::Fuzziness => fuzziness(h)?,
                SurfaceOp::MuOfGhd => membership_mu(h)?,
                SurfaceOp::DmuDa => {
                    let m = membership_mu(h)?;
                    m * (1.0 - m) * (1.0 - 2.0 * b)
                }
            };
            out.push(SurfaceSample { a, b, value });
        }
    }
    Ok(out)
}

/// Render surface samples as CSV with header `a,b,value`.
pub fn surface_csv(samples: &[SurfaceSample]) -> String {
    let mut out = String::from("a,b,value\n");
    for s in samples {
        out.push_str(&format!("{:.12},{:.12},{:.12}\n", s.a, s.b, s.value));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerates_to_binary_hamming() {
        assert_eq!(ghd(0.0, 1.0).unwrap(), 1.0);
        assert_eq!(ghd(1.0, 0.0).unwrap(), 1.0);
        assert_eq!(ghd(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(ghd(0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn identity_complement_and_hand_case() {
        assert_eq!(ghd(0.0, 0.37).unwrap(), 0.37);
        assert!((ghd(1.0, 0.3).unwrap() - 0.7).abs() < 1e-12);
        // 0.3 + 0.7 - 2 * 0.21
        assert!((ghd(0.3, 0.7).unwrap() - 0.58).abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(ghd(f64::NAN, 0.0).is_err());
        assert!(ghd(0.0, f64::INFINITY).is_err());
        assert!(fuzziness(f64::NAN).is_err());
    }

    #[test]
    fn inverse_law() {
        assert_eq!(ghd_inverse(1.0).unwrap(), 1.0);
        let inv = ghd_inverse(0.25).unwrap();
        assert!((inv - (-0.5)).abs() < 1e-12);
        assert!(ghd(0.25, inv).unwrap().abs() < 1e-12);
        assert!(matches!(ghd_inverse(0.5), Err(GhnError::SingularInverse)));
    }

    #[test]
    fn fuzziness_values() {
        assert_eq!(fuzziness(0.5).unwrap(), 0.5);
        assert_eq!(fuzziness(0.0).unwrap(), 0.0);
        assert_eq!(fuzziness(1.0).unwrap(), 0.0);
        assert_eq!(fuzziness(2.0).unwrap(), -4.0);
    }

    #[test]
    fn region_classification() {
        assert_eq!(classify_region(0.4).unwrap(), RegionLabel::Fuzzy);
        assert_eq!(
            classify_region(-0.1).unwrap(),
            RegionLabel::NegativeConfident
        );
        assert_eq!(classify_region(1.3).unwrap(), RegionLabel::PositiveConfident);
        assert_eq!(classify_region(1.0).unwrap(), RegionLabel::Boundary);
        assert_eq!(classify_region(0.0).unwrap(), RegionLabel::Boundary);
    }

    #[test]
    fn vector_ghd_matches_elementwise_mean() {
        assert_eq!(ghd_vec(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(ghd_vec(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        let fixed = ghd_vec(&[0.5, 0.5], &[-2.3, 7.0]).unwrap();
        assert!((fixed - 0.5).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let len = rng.gen_range(1..20);
            let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let closed = ghd_vec(&x, &y).unwrap();
            let mean: f64 = x
                .iter()
                .zip(&y)
                .map(|(&a, &b)| ghd(a, b).unwrap())
                .sum::<f64>()
                / len as f64;
            assert!((closed - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn ghd_vec_rejects_bad_shapes() {
        assert!(ghd_vec(&[], &[]).is_err());
        assert!(ghd_vec(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pairwise_degenerate_cases() {
        let x = vec![0.2, 0.8, 0.4];
        let y = vec![0.9, 0.1, 0.5];
        let single = mean_pairwise_ghd(&[x.clone()], &[y.clone()]).unwrap();
        assert!((single - ghd_vec(&x, &y).unwrap()).abs() < 1e-12);
        let dup = mean_pairwise_ghd(&[x.clone(), x.clone()], &[y.clone()]).unwrap();
        assert!((dup - ghd_vec(&x, &y).unwrap()).abs() < 1e-12);
        assert!(mean_pairwise_ghd(&[], &[y]).is_err());
    }

    #[test]
    fn distributive_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 3;
        let n = 4;
        let len = 5;
        let xs: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..len).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let ys: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..len).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let mean_of = |vs: &[Vec<f64>]| -> Vec<f64> {
            (0..len)
                .map(|l| vs.iter().map(|v| v[l]).sum::<f64>() / vs.len() as f64)
                .collect()
        };
        let lhs = ghd_vec(&mean_of(&xs), &mean_of(&ys)).unwrap();
        let rhs = mean_pairwise_ghd(&xs, &ys).unwrap();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn membership_round_trip() {
        assert!((membership_mu(0.5).unwrap() - 0.5).abs() < 1e-12);
        let mu0 = membership_mu(0.0).unwrap();
        assert!((mu0 - 0.37754).abs() < 1e-5);
        assert!(membership_mu_inv(mu0).unwrap().abs() < 1e-9);
        assert!((membership_mu_inv(0.5).unwrap() - 0.5).abs() < 1e-12);
        let rt = membership_mu_inv(membership_mu(0.3).unwrap()).unwrap();
        assert!((rt - 0.3).abs() < 1e-9);
        for a in [-16.0, -7.3, 0.0, 4.2, 16.0] {
            let rt = membership_mu_inv(membership_mu(a).unwrap()).unwrap();
            assert!((rt - a).abs() < 1e-9, "round trip failed at {a}");
        }
        // near the interval ends μ saturates to within a few ulps of 0/1, so
        // the recoverable precision degrades to ~ulp / (i (1 - i))
        for a in [-20.0, 20.0] {
            let rt = membership_mu_inv(membership_mu(a).unwrap()).unwrap();
            assert!((rt - a).abs() < 1e-7, "round trip failed at {a}");
        }
        assert!(membership_mu_inv(0.0).is_err());
        assert!(membership_mu_inv(1.0).is_err());
    }

    #[test]
    fn membership_enum_dispatch() {
        let m = MembershipFn::Logistic;
        assert!((m.mu(0.5).unwrap() - 0.5).abs() < 1e-12);
        assert!((m.mu_inv(0.5).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fuzzy_xor_fixed_point_and_commutativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let j = rng.gen_range(0.01..0.99);
            assert!((fuzzy_xor(0.5, j).unwrap() - 0.5).abs() < 1e-12);
            let i = rng.gen_range(0.01..0.99);
            let a = fuzzy_xor(i, j).unwrap();
            let b = fuzzy_xor(j, i).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fuzzy_xor_reproduces_crisp_truth_table() {
        let t = membership_mu(1.0).unwrap();
        let f = membership_mu(0.0).unwrap();
        assert!((fuzzy_xor(f, f).unwrap() - f).abs() < 1e-9);
        assert!((fuzzy_xor(t, t).unwrap() - f).abs() < 1e-9);
        assert!((fuzzy_xor(f, t).unwrap() - t).abs() < 1e-9);
        // self-XOR at the hand-evaluated μ(0)
        let v = fuzzy_xor(0.37754, 0.37754).unwrap();
        assert!((v - 0.37754).abs() < 1e-4);
    }

    #[test]
    fn surface_rows() {
        // fuzziness surface is constant 0.5 along a = 0.5
        let samples =
            surface_sample(SurfaceOp::Fuzziness, (0.5, 0.5), (-1.0, 2.0), 0.01).unwrap();
        assert!(!samples.is_empty());
        for s in &samples {
            assert!((s.value - 0.5).abs() < 1e-12);
        }
        // ghd surface reduces to the identity line at b = 0
        let samples = surface_sample(SurfaceOp::Ghd, (-1.0, 1.0), (0.0, 0.0), 0.25).unwrap();
        for s in &samples {
            assert!((s.value - s.a).abs() < 1e-12);
        }
        // chain-rule derivative vanishes at the fixed point
        let samples = surface_sample(SurfaceOp::DmuDa, (0.5, 0.5), (0.5, 0.5), 1.0).unwrap();
        assert_eq!(samples.len(), 1);
        assert!(samples[0].value.abs() < 1e-12);
    }

    #[test]
    fn surface_errors_and_csv() {
        assert!(surface_sample(SurfaceOp::Ghd, (0.0, 1.0), (0.0, 1.0), 0.0).is_err());
        assert!(surface_sample(SurfaceOp::Ghd, (1.0, 0.0), (0.0, 1.0), 0.1).is_err());
        let samples = surface_sample(SurfaceOp::Ghd, (0.0, 0.0), (0.0, 0.0), 1.0).unwrap();
        let csv = surface_csv(&samples);
        assert!(csv.starts_with("a,b,value\n"));
        assert_eq!(csv.lines().count(), 2);
    }
}
