use serde::{Deserialize, Serialize};

/// Discordant pair counts of a paired binary comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McNemarInput {
    pub b: u64,
    pub c: u64,
}

/// Exact two-sided McNemar test: binomial(b + c, 1/2) tail, doubled and capped
/// at 1, with no continuity correction.
pub fn mcnemar_exact(input: McNemarInput) -> f64 {
    let n = input.b + input.c;
    if n == 0 {
        return 1.0;
    }
    let k = input.b.min(input.c);
    let tail = if n <= 1000 {
        // Binomial coefficients stay finite here; the final power of two is exact.
        let mut coeff = 1.0f64;
        let mut sum = 1.0f64;
        for i in 0..k {
            coeff = coeff * (n - i) as f64 / (i + 1) as f64;
            sum += coeff;
        }
        sum * 0.5f64.powi(n as i32)
    } else {
        log_binomial_tail(n, k)
    };
    (2.0 * tail).min(1.0)
}

fn log_binomial_tail(n: u64, k: u64) -> f64 {
    let mut log_term = -(n as f64) * std::f64::consts::LN_2;
    let mut terms = Vec::with_capacity(k as usize + 1);
    terms.push(log_term);
    for i in 0..k {
        log_term += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        terms.push(log_term);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max.exp() * terms.iter().map(|t| (t - max).exp()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_and_hand_values() {
        assert_eq!(mcnemar_exact(McNemarInput { b: 6, c: 0 }), 0.03125);
        assert_eq!(mcnemar_exact(McNemarInput { b: 0, c: 0 }), 1.0);
        assert_eq!(mcnemar_exact(McNemarInput { b: 5, c: 1 }), 0.21875);
        assert_eq!(mcnemar_exact(McNemarInput { b: 3, c: 3 }), 1.0);
    }

    #[test]
    fn large_n_paths_agree() {
        // n = 1000 uses the direct sum, n = 1002 the log-space sum; both are tiny but positive.
        let a = mcnemar_exact(McNemarInput { b: 400, c: 600 });
        let b = mcnemar_exact(McNemarInput { b: 401, c: 601 });
        assert!(a > 0.0 && b > 0.0);
        let direct = 2.0 * log_binomial_tail(1000, 400);
        assert!(((direct - a) / a).abs() < 1e-9);
    }
}
