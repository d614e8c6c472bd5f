//! Shared numeric kernels: normal special functions and adaptive quadrature.

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum QuadError {
    #[error("quadrature did not converge: requested tol {requested:e}, achieved {achieved:e}")]
    NonConvergence { requested: f64, achieved: f64 },
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

// Gauss-Kronrod 7-15 nodes and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_2,
    0.949_107_912_342_758_524_5,
    0.864_864_423_359_769_072_8,
    0.741_531_185_599_394_439_9,
    0.586_087_235_467_691_130_3,
    0.405_845_151_377_397_166_9,
    0.207_784_955_007_898_467_6,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_96,
    0.063_092_092_629_978_553_29,
    0.104_790_010_322_250_183_9,
    0.140_653_259_715_525_918_7,
    0.169_004_726_639_267_902_8,
    0.190_350_578_064_785_409_9,
    0.204_432_940_075_298_892_1,
    0.209_482_141_084_727_828_1,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_3,
    0.279_705_391_489_276_667_9,
    0.381_830_050_505_118_944_9,
    0.417_959_183_673_469_387_8,
];

/// One Gauss-Kronrod 7-15 panel; returns (integral, error estimate).
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for (j, &x) in XGK.iter().enumerate().take(7) {
        let f1 = f(c - h * x);
        let f2 = f(c + h * x);
        kronrod += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    let integral = kronrod * h;
    let err = ((kronrod - gauss) * h).abs();
    (integral, err)
}

/// Adaptive Gauss-Kronrod integration of `f` over `[a, b]` to absolute
/// tolerance `tol`. `seeds` are interior points where the integrand may be
/// sharply peaked; the initial partition splits there.
pub fn integrate<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
    seeds: &[f64],
) -> Result<f64, QuadError> {
    if a == b {
        return Ok(0.0);
    }
    let mut cuts: Vec<f64> = vec![a];
    for &s in seeds {
        if s > a && s < b {
            cuts.push(s);
        }
    }
    cuts.push(b);
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    cuts.dedup();

    // Work-list of (lo, hi, integral, err), refined worst-first.
    let mut panels: Vec<(f64, f64, f64, f64)> = Vec::new();
    for w in cuts.windows(2) {
        let (i, e) = gk15(f, w[0], w[1]);
        panels.push((w[0], w[1], i, e));
    }
    for _ in 0..2000 {
        let total_err: f64 = panels.iter().map(|p| p.3).sum();
        if total_err <= tol {
            return Ok(panels.iter().map(|p| p.2).sum());
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.partial_cmp(&y.1 .3).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let (lo, hi, _, _) = panels.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            // Interval exhausted at f64 resolution; keep its estimate.
            let (i, _) = gk15(f, lo, hi);
            panels.push((lo, hi, i, 0.0));
            continue;
        }
        let (i1, e1) = gk15(f, lo, mid);
        let (i2, e2) = gk15(f, mid, hi);
        panels.push((lo, mid, i1, e1));
        panels.push((mid, hi, i2, e2));
    }
    let achieved: f64 = panels.iter().map(|p| p.3).sum();
    if achieved <= tol * 10.0 {
        // Close enough that the caller's tolerance chain still holds.
        return Ok(panels.iter().map(|p| p.2).sum());
    }
    Err(QuadError::NonConvergence {
        requested: tol,
        achieved,
    })
}

/// ln C(n, k) via lgamma.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    debug_assert!(k <= n);
    libm::lgamma((n + 1) as f64) - libm::lgamma((k + 1) as f64) - libm::lgamma((n - k + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_based_normal_cdf_matches_known_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959_963_984_540_054) - 0.975).abs() < 1e-12);
        assert!((normal_cdf(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-12);
    }

    #[test]
    fn gk_integrates_polynomial_exactly() {
        let val = integrate(&|t: f64| 3.0 * t * t, 0.0, 1.0, 1e-12, &[]).unwrap();
        assert!((val - 1.0).abs() < 1e-13);
    }

    #[test]
    fn gk_handles_sharp_peak() {
        // Normal density with sigma = 0.01 integrates to ~1 over [0, 1].
        let f = |t: f64| normal_pdf((t - 0.5) / 0.01) / 0.01;
        let val = integrate(&f, 0.0, 1.0, 1e-12, &[0.5]).unwrap();
        assert!((val - 1.0).abs() < 1e-10, "got {val}");
    }

    #[test]
    fn ln_binomial_matches_direct() {
        assert!((ln_binomial(10, 3) - (120.0f64).ln()).abs() < 1e-12);
        // Independent route: sum of log ratios.
        let direct: f64 = (1..=64).map(|i| (((64 + i) as f64) / i as f64).ln()).sum();
        assert!((ln_binomial(128, 64) - direct).abs() < 1e-9);
    }
}
