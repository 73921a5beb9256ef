//! Shared test oracles, all independent of the library's computation paths:
//! a dense-Kronecker multivariate normal density, a numerically integrated
//! maximum-likelihood tetrachoric estimator, and the enumeration+quadrature
//! posterior for the two-drug toy model.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

/// Matrix-normal log density evaluated the expensive way: explicitly build
/// the Nq x Nq Kronecker covariance and use a dense factorization.
pub fn dense_kronecker_logpdf(
    gamma: &DMatrix<f64>,
    sigma_d: &DMatrix<f64>,
    sigma_g: &DMatrix<f64>,
) -> f64 {
    let (n, q) = (gamma.nrows(), gamma.ncols());
    let big = sigma_d.kronecker(sigma_g);
    let mut x = DVector::zeros(n * q);
    for i in 0..n {
        for j in 0..q {
            x[i * q + j] = gamma[(i, j)];
        }
    }
    let chol = nalgebra::Cholesky::new(big).expect("oracle covariance must be PD");
    let sol = chol.solve(&x);
    let quad = x.dot(&sol);
    let logdet: f64 = (0..n * q).map(|i| chol.l()[(i, i)].ln()).sum::<f64>() * 2.0;
    -0.5 * ((n * q) as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// Upper-quadrant probability of a standard bivariate normal,
/// `P(X > h, Y > k; rho)`, by one-dimensional quadrature of
/// `phi(x) * (1 - Phi((k - rho x)/sqrt(1 - rho^2)))`.
pub fn bvn_upper_quadrant(h: f64, k: f64, rho: f64) -> f64 {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let s = (1.0 - rho * rho).sqrt();
    let lo = h.max(-9.0);
    let hi = 9.0f64;
    if lo >= hi {
        return 0.0;
    }
    // Simpson's rule over a fine grid.
    let steps = 1200usize;
    let dx = (hi - lo) / steps as f64;
    let f = |x: f64| -> f64 {
        let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let tail = 1.0 - std_normal.cdf((k - rho * x) / s);
        phi * tail
    };
    let mut total = f(lo) + f(hi);
    for i in 1..steps {
        let x = lo + i as f64 * dx;
        total += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    total * dx / 3.0
}

/// Maximum-likelihood tetrachoric correlation: thresholds fixed at the
/// empirical margins, multinomial log likelihood maximized by grid search.
pub fn ml_tetrachoric(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let n = a + b + c + d;
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let p_a = (a + b) / n;
    let p_b = (a + c) / n;
    let h = std_normal.inverse_cdf(1.0 - p_a);
    let k = std_normal.inverse_cdf(1.0 - p_b);
    let loglik = |rho: f64| -> f64 {
        let p11 = bvn_upper_quadrant(h, k, rho).clamp(1e-12, 1.0);
        let p10 = ((1.0 - std_normal.cdf(h)) - p11).clamp(1e-12, 1.0);
        let p01 = ((1.0 - std_normal.cdf(k)) - p11).clamp(1e-12, 1.0);
        let p00 = (1.0 - p11 - p10 - p01).clamp(1e-12, 1.0);
        a * p11.ln() + b * p10.ln() + c * p01.ln() + d * p00.ln()
    };
    // Coarse grid, then a fine pass around the best coarse point.
    let mut best = (-0.99, f64::NEG_INFINITY);
    let mut rho = -0.99f64;
    while rho <= 0.99 {
        let ll = loglik(rho);
        if ll > best.1 {
            best = (rho, ll);
        }
        rho += 0.01;
    }
    let center = best.0;
    let mut rho = (center - 0.012).max(-0.995);
    while rho <= (center + 0.012).min(0.995) {
        let ll = loglik(rho);
        if ll > best.1 {
            best = (rho, ll);
        }
        rho += 0.0005;
    }
    best.0
}

/// Binomial log kernel without the constant coefficient.
pub fn binom_kernel(y: f64, m: f64, eta: f64) -> f64 {
    y * eta - m * (1.0 + eta.exp()).ln()
}

/// The two-drug toy model: fixed beta, one random-effect column (the
/// exposure slope), fixed unit slab variance, drug covariance `sigma_d`.
/// Returns the exact posterior over the four inclusion configurations by
/// Beta-Bernoulli enumeration and 2-D quadrature over the slab.
pub struct ToyModel {
    /// (m_pre, y_pre, m_post, y_post) per drug.
    pub counts: [(f64, f64, f64, f64); 2],
    pub beta0: f64,
    pub sigma_d: DMatrix<f64>,
    pub pi_a: f64,
    pub pi_b: f64,
}

impl ToyModel {
    fn drug_loglik(&self, drug: usize, theta_x: f64) -> f64 {
        let (m_pre, y_pre, m_post, y_post) = self.counts[drug];
        binom_kernel(y_pre, m_pre, self.beta0) + binom_kernel(y_post, m_post, self.beta0 + theta_x)
    }

    /// P(delta) with pi integrated out under Beta(a, b).
    fn delta_prior(&self, on: [bool; 2]) -> f64 {
        let s = on.iter().filter(|&&x| x).count() as f64;
        let n = 2.0;
        // B(a + s, b + n - s) / B(a, b)
        let ln_b = |x: f64, y: f64| {
            statrs::function::gamma::ln_gamma(x) + statrs::function::gamma::ln_gamma(y)
                - statrs::function::gamma::ln_gamma(x + y)
        };
        (ln_b(self.pi_a + s, self.pi_b + n - s) - ln_b(self.pi_a, self.pi_b)).exp()
    }

    /// Exact posterior P(delta | data) over (00, 10, 01, 11), computed with
    /// a tensor quadrature grid over the latent slab values.
    pub fn posterior_delta(&self) -> [f64; 4] {
        let l = nalgebra::Cholesky::new(self.sigma_d.clone()).unwrap().unpack();
        let grid_n = 401usize;
        let span = 8.0;
        let step = 2.0 * span / (grid_n - 1) as f64;
        let configs = [[false, false], [true, false], [false, true], [true, true]];
        let mut weights = [0.0f64; 4];
        let ln_norm = -(2.0 * std::f64::consts::PI).ln(); // 2-D standard normal
        for (ci, config) in configs.iter().enumerate() {
            // log sum over the grid of exp(loglik + log phi(u)) * step^2
            let mut max_term = f64::NEG_INFINITY;
            let mut terms: Vec<f64> = Vec::with_capacity(grid_n * grid_n);
            for i in 0..grid_n {
                let u1 = -span + i as f64 * step;
                for j in 0..grid_n {
                    let u2 = -span + j as f64 * step;
                    let g1 = l[(0, 0)] * u1;
                    let g2 = l[(1, 0)] * u1 + l[(1, 1)] * u2;
                    let t1 = if config[0] { g1 } else { 0.0 };
                    let t2 = if config[1] { g2 } else { 0.0 };
                    let ll = self.drug_loglik(0, t1)
                        + self.drug_loglik(1, t2)
                        + ln_norm
                        - 0.5 * (u1 * u1 + u2 * u2);
                    terms.push(ll);
                    if ll > max_term {
                        max_term = ll;
                    }
                }
            }
            let sum: f64 = terms.iter().map(|t| (t - max_term).exp()).sum();
            let log_integral = max_term + sum.ln() + 2.0 * step.ln();
            weights[ci] = self.delta_prior(*config).ln() + log_integral;
        }
        let max_w = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = [0.0f64; 4];
        let total: f64 = weights.iter().map(|w| (w - max_w).exp()).sum();
        for (p, w) in probs.iter_mut().zip(&weights) {
            *p = (w - max_w).exp() / total;
        }
        probs
    }
}

/// Relative error between an analytic gradient and a central finite
/// difference, measured in the vector 2-norm.
pub fn grad_rel_error(analytic: &[f64], finite: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(finite)
        .map(|(a, f)| (a - f) * (a - f))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm.max(1e-10)
}
