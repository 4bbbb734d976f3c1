//! Paired significance testing: Student's t with p-values from the
//! regularized incomplete beta function (Lentz continued fraction).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Result of a paired two-sided t-test. `t` is infinite when the paired
/// differences have zero variance around a nonzero mean.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TTest {
    #[serde(with = "json_f64")]
    pub t: f64,
    pub df: usize,
    pub p: f64,
}

/// JSON cannot carry IEEE infinities; encode them as signed sentinels.
mod json_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else {
            Repr::Str(format!("{v}")).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => s.parse::<f64>().map_err(serde::de::Error::custom),
        }
    }
}

/// ln Gamma via the Lanczos approximation.
pub fn ln_gamma(z: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut sum = 1.000000000190015;
    for (i, c) in COEFFS.iter().enumerate() {
        sum += c / (z + i as f64 + 1.0);
    }
    let tmp = z + 5.5;
    (z + 0.5) * tmp.ln() - tmp + (2.5066282746310005 * sum / z).ln()
}

/// Continued-fraction factor of the incomplete beta (modified Lentz).
fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-14;
    const TINY: f64 = 1e-30;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // Even step.
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) || a <= 0.0 || b <= 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cont_frac(a, b, x) / a
    } else {
        1.0 - front * beta_cont_frac(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom:
/// `I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn student_t_two_sided_p(t: f64, df: usize) -> f64 {
    if df == 0 {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dff = df as f64;
    reg_inc_beta(dff / 2.0, 0.5, dff / (dff + t * t))
}

/// Paired two-sided t-test on per-subject values.
///
/// `t = mean(d) / (sd(d)/sqrt(n))` over the paired differences `d = a - b`
/// with the sample (n-1) standard deviation; `df = n - 1`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::data(format!("need at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                df,
                p: 0.0,
            }
        });
    }
    let t = mean / (var.sqrt() / nf.sqrt());
    Ok(TTest {
        t,
        df,
        p: student_t_two_sided_p(t, df),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_give_t_zero_p_one() {
        let a = [0.5, 0.75, 0.6, 0.9];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.df, 3);
    }

    #[test]
    fn hand_computed_example() {
        // d = [1,2,3,4]: mean 2.5, sd 1.2910, n 4 -> t = 3.873, df 3.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.0, 0.0, 0.0, 0.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t - 3.873).abs() < 1e-3, "t = {}", r.t);
        assert_eq!(r.df, 3);
        // Reference two-sided p from SciPy for t = 3.872983, df = 3.
        assert!((r.p - 0.030466291662170977).abs() < 1e-9, "p = {}", r.p);
    }

    #[test]
    fn hundred_pairs_have_df_99() {
        let a: Vec<f64> = (0..100).map(|i| 0.7 + (i as f64) * 1e-3).collect();
        let b: Vec<f64> = (0..100).map(|i| 0.5 + ((i * 7 % 13) as f64) * 1e-3).collect();
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.df, 99);
    }

    #[test]
    fn zero_variance_nonzero_mean_is_infinite() {
        let a = [0.9, 0.9, 0.9];
        let b = [0.4, 0.4, 0.4];
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.t.is_infinite() && r.t > 0.0);
        assert_eq!(r.p, 0.0);

        let r = paired_t_test(&b, &a).unwrap();
        assert!(r.t.is_infinite() && r.t < 0.0);
    }

    #[test]
    fn swapping_sides_flips_t_and_keeps_p() {
        let a = [0.8, 0.7, 0.95, 0.6, 0.75];
        let b = [0.5, 0.55, 0.7, 0.45, 0.6];
        let r1 = paired_t_test(&a, &b).unwrap();
        let r2 = paired_t_test(&b, &a).unwrap();
        assert!((r1.t + r2.t).abs() < 1e-12);
        assert!((r1.p - r2.p).abs() < 1e-12);
    }

    #[test]
    fn p_values_match_reference_table() {
        // Reference values computed with SciPy's t distribution.
        for (t, df, expected) in [
            (2.0, 10, 0.07338803477074039),
            (8.42, 99, 2.99790091965e-13),
            (1.0, 99, 0.3197484741393017),
            (2.82, 99, 0.005801802357280785),
        ] {
            let p = student_t_two_sided_p(t, df);
            assert!(
                (p - expected).abs() < 1e-9 * expected.max(1e-3),
                "t={t} df={df}: {p} vs {expected}"
            );
        }
    }

    #[test]
    fn incomplete_beta_matches_reference() {
        for (a, b, x, expected) in [
            (0.5, 0.5, 0.25, 0.33333333333333337),
            (2.5, 3.5, 0.7, 0.9228190654779191),
            (50.0, 0.5, 0.99, 0.3173043978741973),
        ] {
            let got = reg_inc_beta(a, b, x);
            assert!((got - expected).abs() < 1e-10, "I_{x}({a},{b}) = {got} vs {expected}");
        }
        assert_eq!(reg_inc_beta(1.0, 1.0, 0.0), 0.0);
        assert_eq!(reg_inc_beta(1.0, 1.0, 1.0), 1.0);
    }

    #[test]
    fn infinite_t_survives_json() {
        let r = TTest {
            t: f64::INFINITY,
            df: 5,
            p: 0.0,
        };
        let json = serde_json::to_string(&r).unwrap();
        let back: TTest = serde_json::from_str(&json).unwrap();
        assert!(back.t.is_infinite() && back.t > 0.0);

        let finite = TTest { t: 2.5, df: 9, p: 0.03 };
        let back: TTest = serde_json::from_str(&serde_json::to_string(&finite).unwrap()).unwrap();
        assert_eq!(back, finite);
    }

    #[test]
    fn mismatched_or_tiny_samples_rejected() {
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }
}
