//! Chi-square tail probabilities and multiple-testing adjustment.

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`.
///
/// Uses the series for `P` when `x < a + 1` and Lentz's continued fraction otherwise.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "shape must be positive");
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (1.0 - sum * log_prefix.exp()).max(0.0)
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (log_prefix.exp() * h).min(1.0)
    }
}

/// Survival function of the chi-square distribution with `df` degrees of freedom.
pub fn chi2_sf(stat: f64, df: usize) -> f64 {
    if stat <= 0.0 {
        return 1.0;
    }
    gamma_q(df as f64 / 2.0, stat / 2.0)
}

/// Benjamini–Yekutieli adjusted p-values, returned in input order.
pub fn by_adjust(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    let harmonic: f64 = (1..=m).map(|i| 1.0 / i as f64).sum();
    step_up(p_values, m as f64 * harmonic)
}

/// Benjamini–Hochberg adjusted p-values, returned in input order.
pub fn bh_adjust(p_values: &[f64]) -> Vec<f64> {
    step_up(p_values, p_values.len() as f64)
}

fn step_up(p_values: &[f64], factor: f64) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        let adj = factor * p_values[idx] / (rank + 1) as f64;
        running = running.min(adj).min(1.0);
        out[idx] = running;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    // Composite Simpson quadrature of the chi-square density on [x, upper].
    fn chi2_sf_quadrature(x: f64, df: usize) -> f64 {
        let k = df as f64 / 2.0;
        let density = |u: f64| {
            if u <= 0.0 {
                return 0.0;
            }
            ((k - 1.0) * u.ln() - u / 2.0 - k * 2f64.ln() - ln_gamma(k)).exp()
        };
        let upper = x + 200.0;
        let n = 400_000;
        let h = (upper - x) / n as f64;
        let mut s = density(x) + density(upper);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * density(x + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn ln_gamma_known_values() {
        assert_relative_eq!(ln_gamma(1.0), 0.0, epsilon = 1e-14);
        assert_relative_eq!(ln_gamma(5.0), 24f64.ln(), epsilon = 1e-13);
        assert_relative_eq!(
            ln_gamma(0.5),
            std::f64::consts::PI.sqrt().ln(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn chi2_two_df_is_exponential() {
        for x in [0.1, 1.0, 5.991, 12.0, 40.0] {
            assert_relative_eq!(chi2_sf(x, 2), (-x / 2.0).exp(), max_relative = 1e-12);
        }
        assert!((chi2_sf(5.991, 2) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn chi2_one_df_against_quadrature() {
        let oracle = chi2_sf_quadrature(3.8416, 1);
        assert!((oracle - 0.05).abs() < 1e-4);
        assert!((chi2_sf(3.8416, 1) - oracle).abs() < 1e-9);
        for (x, df) in [(0.5, 3), (2.0, 5), (9.0, 4), (20.0, 7)] {
            let q = chi2_sf_quadrature(x, df);
            assert!((chi2_sf(x, df) - q).abs() < 1e-9, "x={x} df={df}");
        }
    }

    #[test]
    fn chi2_at_zero() {
        assert_eq!(chi2_sf(0.0, 3), 1.0);
    }

    #[test]
    fn by_examples() {
        let adj = by_adjust(&[0.01, 0.02, 0.03, 0.04]);
        // c(4) = 25/12, so every entry is 4 * 25/12 * 0.04 / 4 = 1/12
        for a in adj {
            assert_relative_eq!(a, 1.0 / 12.0, epsilon = 1e-15);
        }
        assert_eq!(by_adjust(&[0.3]), vec![0.3]);
        assert_eq!(by_adjust(&[1.0, 1.0, 1.0]), vec![1.0, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn by_properties(ps in proptest::collection::vec(0.0f64..=1.0, 1..40), seed in any::<u64>()) {
            let adj = by_adjust(&ps);
            let bh = bh_adjust(&ps);
            for ((&p, &a), &b) in ps.iter().zip(&adj).zip(&bh) {
                prop_assert!(p <= a + 1e-15 && a <= 1.0);
                prop_assert!(a >= b - 1e-15);
            }
            // permuting the input permutes the output
            let mut order: Vec<usize> = (0..ps.len()).collect();
            let mut s = seed;
            for i in (1..order.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let permuted: Vec<f64> = order.iter().map(|&i| ps[i]).collect();
            let adj_perm = by_adjust(&permuted);
            for (k, &i) in order.iter().enumerate() {
                prop_assert_eq!(adj_perm[k], adj[i]);
            }
        }
    }
}
