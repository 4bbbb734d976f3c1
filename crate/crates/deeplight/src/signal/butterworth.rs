//! Digital Butterworth highpass design and zero-phase application.
//!
//! Design follows the classic route: analog prototype poles, lowpass-to-
//! highpass transform at the pre-warped cutoff, bilinear transform, then
//! polynomial expansion to transfer-function coefficients. Filtering offers
//! a single forward pass (direct form II transposed, steady-state initial
//! conditions) and a forward-backward zero-phase mode with odd reflective
//! edge padding.

use crate::error::{Error, Result};

/// Minimal complex arithmetic; enough for pole/zero manipulation.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Complex {
    re: f64,
    im: f64,
}

impl Complex {
    const ONE: Complex = Complex { re: 1.0, im: 0.0 };

    fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    fn add(self, o: Complex) -> Complex {
        Complex::new(self.re + o.re, self.im + o.im)
    }

    fn sub(self, o: Complex) -> Complex {
        Complex::new(self.re - o.re, self.im - o.im)
    }

    fn mul(self, o: Complex) -> Complex {
        Complex::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }

    fn div(self, o: Complex) -> Complex {
        let d = o.re * o.re + o.im * o.im;
        Complex::new(
            (self.re * o.re + self.im * o.im) / d,
            (self.im * o.re - self.re * o.im) / d,
        )
    }

    fn scale(self, s: f64) -> Complex {
        Complex::new(self.re * s, self.im * s)
    }

    fn neg(self) -> Complex {
        Complex::new(-self.re, -self.im)
    }

    fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }

    fn exp_i(theta: f64) -> Complex {
        Complex::new(theta.cos(), theta.sin())
    }
}

fn prod(vals: &[Complex]) -> Complex {
    vals.iter().fold(Complex::ONE, |acc, &v| acc.mul(v))
}

/// Transfer-function coefficients `b` (numerator) and `a` (denominator),
/// both of length `order + 1`, `a[0] == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCoeffs {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl FilterCoeffs {
    pub fn order(&self) -> usize {
        self.a.len() - 1
    }

    /// Magnitude of the frequency response at `freq_hz` for sampling rate
    /// `fs_hz`, evaluated on the unit circle.
    pub fn gain_at(&self, freq_hz: f64, fs_hz: f64) -> f64 {
        let omega = 2.0 * std::f64::consts::PI * freq_hz / fs_hz;
        let eval = |coeffs: &[f64]| {
            coeffs
                .iter()
                .enumerate()
                .fold(Complex::new(0.0, 0.0), |acc, (n, &c)| {
                    acc.add(Complex::exp_i(-omega * n as f64).scale(c))
                })
        };
        eval(&self.b).div(eval(&self.a)).abs()
    }
}

/// Analog Butterworth prototype: `order` poles on the unit circle in the
/// left half-plane, no zeros, unit gain.
fn prototype_poles(order: usize) -> Vec<Complex> {
    let n = order as i64;
    let mut poles = Vec::with_capacity(order);
    let mut m = -n + 1;
    while m < n {
        let theta = std::f64::consts::PI * m as f64 / (2.0 * n as f64);
        poles.push(Complex::exp_i(theta).neg());
        m += 2;
    }
    poles
}

/// Expands a polynomial from its roots; returns real coefficients,
/// highest degree first, leading coefficient 1.
fn poly_from_roots(roots: &[Complex]) -> Vec<f64> {
    let mut coeffs = vec![Complex::ONE];
    for &r in roots {
        let mut next = vec![Complex::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] = next[i].add(c);
            next[i + 1] = next[i + 1].sub(c.mul(r));
        }
        coeffs = next;
    }
    coeffs.iter().map(|c| c.re).collect()
}

/// Designs a digital Butterworth highpass.
///
/// `cutoff_hz` is the -3 dB frequency; the bilinear transform is applied
/// after pre-warping so the response is exactly 1/sqrt(2) there.
pub fn design_highpass(order: usize, cutoff_hz: f64, fs_hz: f64) -> Result<FilterCoeffs> {
    if order == 0 {
        return Err(Error::config("filter order must be >= 1"));
    }
    let nyquist = fs_hz / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::config(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) for fs = {fs_hz} Hz"
        )));
    }

    // Normalize to Nyquist and pre-warp (internal rate convention fs = 2).
    let wn = cutoff_hz / nyquist;
    let fs2 = 2.0 * 2.0;
    let warped = fs2 * (std::f64::consts::PI * wn / 2.0).tan();

    // Lowpass prototype -> highpass at the warped frequency.
    let lp_poles = prototype_poles(order);
    let hp_poles: Vec<Complex> = lp_poles
        .iter()
        .map(|&p| Complex::new(warped, 0.0).div(p))
        .collect();
    let hp_zeros = vec![Complex::new(0.0, 0.0); order];
    // Gain compensation: k * Re(prod(-z_lp) / prod(-p_lp)) with no zeros.
    let neg_poles: Vec<Complex> = lp_poles.iter().map(|&p| p.neg()).collect();
    let k_hp = Complex::ONE.div(prod(&neg_poles)).re;

    // Bilinear transform into the z-domain.
    let fs_c = Complex::new(fs2, 0.0);
    let z_digital: Vec<Complex> = hp_zeros
        .iter()
        .map(|&z| fs_c.add(z).div(fs_c.sub(z)))
        .collect();
    let p_digital: Vec<Complex> = hp_poles
        .iter()
        .map(|&p| fs_c.add(p).div(fs_c.sub(p)))
        .collect();
    let num: Vec<Complex> = hp_zeros.iter().map(|&z| fs_c.sub(z)).collect();
    let den: Vec<Complex> = hp_poles.iter().map(|&p| fs_c.sub(p)).collect();
    let k_digital = k_hp * prod(&num).div(prod(&den)).re;

    let b: Vec<f64> = poly_from_roots(&z_digital)
        .into_iter()
        .map(|c| c * k_digital)
        .collect();
    let a = poly_from_roots(&p_digital);
    Ok(FilterCoeffs { b, a })
}

/// Steady-state initial filter state so a step input produces its
/// steady-state response from the first sample.
pub fn steady_state_init(coeffs: &FilterCoeffs) -> Vec<f64> {
    let n = coeffs.a.len().max(coeffs.b.len());
    let mut b = coeffs.b.clone();
    let mut a = coeffs.a.clone();
    b.resize(n, 0.0);
    a.resize(n, 0.0);

    // Solve (I - A^T) zi = B with A the companion matrix of `a` and
    // B[i] = b[i+1] - a[i+1] * b[0].
    let dim = n - 1;
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = 1.0;
    }
    // companion(a)^T: column 0 is -a[1..]/a[0]; superdiagonal rows carry 1.
    for i in 0..dim {
        m[i * dim] += a[i + 1] / a[0];
    }
    for i in 0..dim - 1 {
        m[i * dim + i + 1] -= 1.0;
    }
    let mut rhs: Vec<f64> = (0..dim).map(|i| b[i + 1] - a[i + 1] * b[0]).collect();
    solve_dense(&mut m, &mut rhs, dim);
    rhs
}

/// Gaussian elimination with partial pivoting, in place.
fn solve_dense(m: &mut [f64], rhs: &mut [f64], n: usize) {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| {
                m[i * n + col]
                    .abs()
                    .partial_cmp(&m[j * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            rhs.swap(col, pivot);
        }
        let diag = m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = rhs[col];
        for k in col + 1..n {
            acc -= m[col * n + k] * rhs[k];
        }
        rhs[col] = acc / m[col * n + col];
    }
}

/// Direct form II transposed filter with initial state `zi` (scaled by the
/// caller); returns the filtered signal.
pub fn filter_with_state(coeffs: &FilterCoeffs, x: &[f64], zi: &[f64]) -> Vec<f64> {
    let n = coeffs.a.len().max(coeffs.b.len());
    let mut b = coeffs.b.clone();
    let mut a = coeffs.a.clone();
    b.resize(n, 0.0);
    a.resize(n, 0.0);
    let mut state = zi.to_vec();
    state.resize(n - 1, 0.0);
    let mut y = Vec::with_capacity(x.len());
    for &xv in x {
        let out = b[0] * xv + state[0];
        for i in 0..n - 2 {
            state[i] = b[i + 1] * xv + state[i + 1] - a[i + 1] * out;
        }
        state[n - 2] = b[n - 1] * xv - a[n - 1] * out;
        y.push(out);
    }
    y
}

/// Single forward pass with steady-state initialization against `x[0]`.
pub fn filter_forward(coeffs: &FilterCoeffs, x: &[f64]) -> Vec<f64> {
    let zi = steady_state_init(coeffs);
    let scaled: Vec<f64> = zi.iter().map(|z| z * x[0]).collect();
    filter_with_state(coeffs, x, &scaled)
}

/// Zero-phase forward-backward filtering with odd reflective padding of
/// `pad_len` samples on each edge.
pub fn filtfilt(coeffs: &FilterCoeffs, x: &[f64], pad_len: usize) -> Result<Vec<f64>> {
    if x.len() <= pad_len {
        return Err(Error::data(format!(
            "series of length {} too short for edge padding {pad_len}",
            x.len()
        )));
    }
    let t = x.len();
    let mut ext = Vec::with_capacity(t + 2 * pad_len);
    let first = x[0];
    let last = x[t - 1];
    for i in (1..=pad_len).rev() {
        ext.push(2.0 * first - x[i]);
    }
    ext.extend_from_slice(x);
    for i in (1..=pad_len).rev() {
        ext.push(2.0 * last - x[t - 1 - i]);
    }

    let zi = steady_state_init(coeffs);
    let zi_fwd: Vec<f64> = zi.iter().map(|z| z * ext[0]).collect();
    let fwd = filter_with_state(coeffs, &ext, &zi_fwd);

    let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
    let zi_bwd: Vec<f64> = zi.iter().map(|z| z * rev[0]).collect();
    rev = filter_with_state(coeffs, &rev, &zi_bwd);
    rev.reverse();

    Ok(rev[pad_len..pad_len + t].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference coefficients for order 5, cutoff 1/128 Hz, fs = 1/0.72 Hz,
    // computed independently with SciPy's butter().
    const REF_B: [f64; 6] = [
        0.9444148771433152,
        -4.722074385716576,
        9.444148771433152,
        -9.444148771433152,
        4.722074385716576,
        -0.9444148771433152,
    ];
    const REF_A: [f64; 6] = [
        1.0,
        -4.885629653222522,
        9.549031621541532,
        -9.333088894847107,
        4.561606438805293,
        -0.8919194601696225,
    ];
    const REF_ZI: [f64; 5] = [
        -0.9444148486111686,
        3.7776593977079065,
        -5.666489101270877,
        3.777659403869215,
        -0.9444148516949386,
    ];

    fn default_coeffs() -> FilterCoeffs {
        design_highpass(5, 1.0 / 128.0, 1.0 / 0.72).unwrap()
    }

    #[test]
    fn design_matches_reference_coefficients() {
        let c = default_coeffs();
        for (got, want) in c.b.iter().zip(REF_B) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        for (got, want) in c.a.iter().zip(REF_A) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn steady_state_matches_reference() {
        let c = default_coeffs();
        let zi = steady_state_init(&c);
        for (got, want) in zi.iter().zip(REF_ZI) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn gain_at_cutoff_is_minus_three_db() {
        let c = default_coeffs();
        let gain = c.gain_at(1.0 / 128.0, 1.0 / 0.72);
        assert!((gain - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-3, "gain {gain}");
    }

    #[test]
    fn rejects_cutoff_at_or_above_nyquist() {
        assert!(design_highpass(5, 0.7, 1.0).is_err());
        assert!(design_highpass(5, 0.5, 1.0).is_err());
        assert!(design_highpass(0, 0.1, 1.0).is_err());
    }

    #[test]
    fn dc_input_is_annihilated() {
        let c = default_coeffs();
        let x = vec![3.5; 400];
        let y = filter_forward(&c, &x);
        for (i, v) in y.iter().enumerate() {
            assert!(v.abs() < 3.5e-6, "sample {i}: {v}");
        }
        let y = filtfilt(&c, &x, 15).unwrap();
        for (i, v) in y.iter().enumerate() {
            assert!(v.abs() < 3.5e-6, "filtfilt sample {i}: {v}");
        }
    }

    #[test]
    fn zero_phase_preserves_passband_alignment() {
        // A passband sinusoid should come through with no lag: the
        // cross-correlation peak between input and output sits at lag 0.
        let fs = 1.0 / 0.72;
        let freq = 0.2; // well above the 1/128 Hz cutoff
        let t = 600;
        let x: Vec<f64> = (0..t)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
            .collect();
        let c = default_coeffs();
        let y = filtfilt(&c, &x, 15).unwrap();

        let max_lag = 8i64;
        let mut best = (0i64, f64::MIN);
        for lag in -max_lag..=max_lag {
            let mut acc = 0.0;
            for i in 0..t as i64 {
                let j = i + lag;
                if j >= 0 && (j as usize) < t {
                    acc += x[i as usize] * y[j as usize];
                }
            }
            if acc > best.1 {
                best = (lag, acc);
            }
        }
        assert_eq!(best.0, 0, "cross-correlation peak at lag {}", best.0);
    }
}
