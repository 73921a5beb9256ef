//! Hierarchical prior machinery: spike-and-slab latent effects, the
//! matrix-normal prior with drug-by-drug and within-drug covariance factors,
//! and the log-Cholesky parameterization of the within-drug covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

use crate::data::{DESIGN_DIM, EXPOSURE_COL};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Which design-vector columns carry drug-specific random effects.
///
/// The exposure column is always included; its position inside the layout is
/// where the spike-and-slab indicator acts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReLayout {
    cols: Vec<usize>,
    exposure_pos: usize,
}

impl ReLayout {
    pub fn new(cols: Vec<usize>) -> Result<Self> {
        if cols.is_empty() || cols.iter().any(|&c| c >= DESIGN_DIM) {
            return Err(Error::Dimension(format!(
                "random-effect columns {cols:?} must be nonempty indices below {DESIGN_DIM}"
            )));
        }
        let mut sorted = cols.clone();
        sorted.dedup();
        if sorted.len() != cols.len() {
            return Err(Error::Dimension("duplicate random-effect column".into()));
        }
        let exposure_pos = cols
            .iter()
            .position(|&c| c == EXPOSURE_COL)
            .ok_or_else(|| Error::Dimension("random-effect layout must include the exposure column".into()))?;
        Ok(ReLayout { cols, exposure_pos })
    }

    /// Random intercept plus exposure slope; the default.
    pub fn intercept_exposure() -> Self {
        ReLayout::new(vec![0, EXPOSURE_COL]).unwrap()
    }

    /// Random coefficients on every design column.
    pub fn full() -> Self {
        ReLayout::new((0..DESIGN_DIM).collect()).unwrap()
    }

    /// Exposure slope only (no random intercept).
    pub fn exposure_only() -> Self {
        ReLayout::new(vec![EXPOSURE_COL]).unwrap()
    }

    /// Design-vector indices of the random-effect columns.
    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    /// Number of random-effect columns.
    pub fn q(&self) -> usize {
        self.cols.len()
    }

    /// Position of the exposure column inside the layout.
    pub fn exposure_pos(&self) -> usize {
        self.exposure_pos
    }
}

/// Latent drug-specific effects: the slab values, the inclusion indicators,
/// and the global inclusion probability.
///
/// The effect actually entering the likelihood is derived, never stored:
/// the exposure slope of drug i is `delta[i] as f64 * gamma[(i, exposure)]`
/// and every other column passes through unchanged.
#[derive(Debug, Clone)]
pub struct LatentEffects {
    /// N x q matrix; row i holds drug i's random-effect vector.
    pub gamma: DMatrix<f64>,
    /// Spike-and-slab inclusion indicator per drug.
    pub delta: Vec<bool>,
    /// Global inclusion probability, in (0, 1).
    pub pi: f64,
}

impl LatentEffects {
    pub fn null(n_drugs: usize, q: usize) -> Self {
        LatentEffects {
            gamma: DMatrix::zeros(n_drugs, q),
            delta: vec![false; n_drugs],
            pi: 0.5,
        }
    }

    /// Exposure effect of drug i after applying the spike.
    pub fn exposure_effect(&self, drug: usize, layout: &ReLayout) -> f64 {
        if self.delta[drug] {
            self.gamma[(drug, layout.exposure_pos())]
        } else {
            0.0
        }
    }
}

fn tri_len(q: usize) -> usize {
    q * (q + 1) / 2
}

fn tri_dim(len: usize) -> Result<usize> {
    let mut q = 0;
    while tri_len(q) < len {
        q += 1;
    }
    if tri_len(q) != len {
        return Err(Error::Dimension(format!(
            "{len} is not a triangular number; cannot be a log-Cholesky vector"
        )));
    }
    Ok(q)
}

/// Within-drug covariance in its unconstrained log-Cholesky form: logs of
/// the Cholesky diagonal followed row-wise by the raw sub-diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct WithinDrugCov {
    log_chol: DVector<f64>,
    q: usize,
}

impl WithinDrugCov {
    pub fn from_log_chol(log_chol: DVector<f64>) -> Result<Self> {
        let q = tri_dim(log_chol.len())?;
        if log_chol.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite log-Cholesky element".into()));
        }
        Ok(WithinDrugCov { log_chol, q })
    }

    /// Identity covariance of dimension q.
    pub fn identity(q: usize) -> Self {
        WithinDrugCov { log_chol: DVector::zeros(tri_len(q)), q }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn log_chol(&self) -> &DVector<f64> {
        &self.log_chol
    }

    /// Lower-triangular Cholesky factor L with positive diagonal.
    pub fn chol(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.q, self.q);
        let mut k = 0;
        for i in 0..self.q {
            for j in 0..=i {
                l[(i, j)] = if i == j { self.log_chol[k].exp() } else { self.log_chol[k] };
                k += 1;
            }
        }
        l
    }

    /// The covariance matrix L * L^T.
    pub fn cov(&self) -> DMatrix<f64> {
        let l = self.chol();
        &l * l.transpose()
    }

    /// Inverse map: factor an SPD matrix and take logs of the diagonal.
    pub fn from_cov(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension("covariance must be square".into()));
        }
        let chol = nalgebra::Cholesky::new(m.clone())
            .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
        let l = chol.l();
        let q = m.nrows();
        let mut v = DVector::zeros(tri_len(q));
        let mut k = 0;
        for i in 0..q {
            for j in 0..=i {
                v[k] = if i == j { l[(i, j)].ln() } else { l[(i, j)] };
                k += 1;
            }
        }
        Ok(WithinDrugCov { log_chol: v, q })
    }
}

/// Map an unconstrained log-Cholesky vector to its SPD matrix.
pub fn log_chol_to_cov(log_chol: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(WithinDrugCov::from_log_chol(log_chol.clone())?.cov())
}

/// Inverse of [`log_chol_to_cov`].
pub fn cov_to_log_chol(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(WithinDrugCov::from_cov(m)?.log_chol.clone())
}

fn check_factor(l: &DMatrix<f64>, name: &str) -> Result<()> {
    if l.nrows() != l.ncols() {
        return Err(Error::Dimension(format!("{name} factor must be square")));
    }
    for i in 0..l.nrows() {
        if l[(i, i)] <= 0.0 || !l[(i, i)].is_finite() {
            return Err(Error::Numeric(format!("{name} factor is singular at {i}")));
        }
    }
    Ok(())
}

/// Log density of the matrix-normal prior on the latent effect matrix.
///
/// `gamma` is N x q with row i the effect vector of drug i; the stacked
/// vector of rows is normal with covariance `SigmaD (x) SigmaGamma`. Both
/// covariances enter through their lower Cholesky factors, and the density
/// is evaluated with two triangular solves instead of forming the Nq x Nq
/// Kronecker product.
pub fn log_prior_gamma(
    gamma: &DMatrix<f64>,
    sigma_d_chol: &DMatrix<f64>,
    sigma_g_chol: &DMatrix<f64>,
) -> Result<f64> {
    check_factor(sigma_d_chol, "drug covariance")?;
    check_factor(sigma_g_chol, "within-drug covariance")?;
    let n = gamma.nrows();
    let q = gamma.ncols();
    if sigma_d_chol.nrows() != n || sigma_g_chol.nrows() != q {
        return Err(Error::Dimension(format!(
            "gamma is {n}x{q} but factors are {}x{} and {}x{}",
            sigma_d_chol.nrows(),
            sigma_d_chol.ncols(),
            sigma_g_chol.nrows(),
            sigma_g_chol.ncols(),
        )));
    }
    let a = sigma_d_chol
        .solve_lower_triangular(gamma)
        .ok_or_else(|| Error::Numeric("drug covariance factor solve failed".into()))?;
    let b = sigma_g_chol
        .solve_lower_triangular(&a.transpose())
        .ok_or_else(|| Error::Numeric("within-drug covariance factor solve failed".into()))?;
    let quad = b.iter().map(|x| x * x).sum::<f64>();
    let log_det_d: f64 = (0..n).map(|i| sigma_d_chol[(i, i)].ln()).sum();
    let log_det_g: f64 = (0..q).map(|i| sigma_g_chol[(i, i)].ln()).sum();
    Ok(-0.5 * (n * q) as f64 * LN_2PI - q as f64 * log_det_d - n as f64 * log_det_g - 0.5 * quad)
}

/// Gradient of [`log_prior_gamma`] with respect to `gamma`:
/// `-SigmaD^-1 gamma SigmaGamma^-1`.
pub fn grad_log_prior_gamma(
    gamma: &DMatrix<f64>,
    sigma_d_chol: &DMatrix<f64>,
    sigma_g_chol: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let a = sigma_d_chol
        .solve_lower_triangular(gamma)
        .ok_or_else(|| Error::Numeric("drug covariance factor solve failed".into()))?;
    let x = sigma_d_chol
        .transpose()
        .solve_upper_triangular(&a)
        .ok_or_else(|| Error::Numeric("drug covariance factor solve failed".into()))?;
    // x * SigmaGamma^-1 computed through the factor of SigmaGamma.
    let y = sigma_g_chol
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| Error::Numeric("within-drug covariance factor solve failed".into()))?;
    let z = sigma_g_chol
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::Numeric("within-drug covariance factor solve failed".into()))?;
    Ok(-z.transpose())
}

/// Draw one N x q effect matrix from the matrix-normal prior:
/// `L_D Z L_gamma^T` with Z a matrix of iid standard normals.
pub fn sample_gamma_prior(
    rng: &mut impl Rng,
    sigma_d_chol: &DMatrix<f64>,
    sigma_g_chol: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = sigma_d_chol.nrows();
    let q = sigma_g_chol.nrows();
    let z = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    sigma_d_chol * z * sigma_g_chol.transpose()
}

pub(crate) fn ln_beta_pdf(pi: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * pi.ln() + (b - 1.0) * (1.0 - pi).ln() + ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
}

/// Log density of the hyperpriors: Beta(a, b) on the inclusion probability
/// and independent Normal(0, hyper_sd^2) on each log-Cholesky element.
pub fn log_prior_hyper(
    log_chol: &DVector<f64>,
    pi: f64,
    a: f64,
    b: f64,
    hyper_sd: f64,
) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Domain(format!("pi must lie strictly in (0, 1), got {pi}")));
    }
    if a <= 0.0 || b <= 0.0 || hyper_sd <= 0.0 {
        return Err(Error::Domain("Beta parameters and hyper_sd must be positive".into()));
    }
    let var = hyper_sd * hyper_sd;
    let normal_terms: f64 = log_chol
        .iter()
        .map(|&x| -0.5 * (LN_2PI + var.ln()) - 0.5 * x * x / var)
        .sum();
    Ok(ln_beta_pdf(pi, a, b) + normal_terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn zero_log_chol_is_identity() {
        let v = DVector::zeros(3);
        let m = log_chol_to_cov(&v).unwrap();
        assert_relative_eq!(m, DMatrix::identity(2, 2), epsilon = 1e-15);
    }

    #[test]
    fn log_chol_hand_example() {
        let v = DVector::from_vec(vec![2.0_f64.ln(), 0.0, 1.0_f64.ln()]);
        let m = log_chol_to_cov(&v).unwrap();
        assert_relative_eq!(m, DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]), epsilon = 1e-14);
    }

    #[test]
    fn log_chol_round_trip() {
        let v = DVector::from_vec(vec![0.3, -0.7, -0.1, 0.45, 1.2, -0.9]);
        let m = log_chol_to_cov(&v).unwrap();
        let back = cov_to_log_chol(&m).unwrap();
        assert_relative_eq!(back, v, epsilon = 1e-10);
    }

    #[test]
    fn bad_log_chol_length_rejected() {
        assert!(WithinDrugCov::from_log_chol(DVector::zeros(4)).is_err());
    }

    #[test]
    fn standard_normal_cases() {
        let g1 = DMatrix::zeros(1, 1);
        let id1 = DMatrix::identity(1, 1);
        assert_relative_eq!(
            log_prior_gamma(&g1, &id1, &id1).unwrap(),
            -0.5 * LN_2PI,
            epsilon = 1e-14
        );
        let g2 = DMatrix::zeros(2, 2);
        let id2 = DMatrix::identity(2, 2);
        assert_relative_eq!(
            log_prior_gamma(&g2, &id2, &id2).unwrap(),
            -2.0 * LN_2PI,
            epsilon = 1e-14
        );
    }

    #[test]
    fn matches_dense_kronecker_oracle() {
        // Small instance checked against the explicit Nq x Nq construction.
        let n = 3;
        let q = 2;
        let sigma_d = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.5, 0.2, 0.5, 1.0, 0.3, 0.2, 0.3, 1.0],
        );
        let sigma_g = DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 0.8]);
        let gamma = DMatrix::from_row_slice(3, 2, &[0.3, -1.2, 0.7, 0.1, -0.5, 0.9]);
        let l_d = nalgebra::Cholesky::new(sigma_d.clone()).unwrap().l();
        let l_g = nalgebra::Cholesky::new(sigma_g.clone()).unwrap().l();
        let fast = log_prior_gamma(&gamma, &l_d, &l_g).unwrap();

        let big = sigma_d.kronecker(&sigma_g);
        let mut x = DVector::zeros(n * q);
        for i in 0..n {
            for j in 0..q {
                x[i * q + j] = gamma[(i, j)];
            }
        }
        let chol = nalgebra::Cholesky::new(big.clone()).unwrap();
        let sol = chol.solve(&x);
        let quad = x.dot(&sol);
        let logdet: f64 = (0..n * q).map(|i| chol.l()[(i, i)].ln()).sum::<f64>() * 2.0;
        let dense = -0.5 * ((n * q) as f64 * LN_2PI + logdet + quad);
        assert_relative_eq!(fast, dense, epsilon = 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let sigma_d = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
        let sigma_g = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, 0.2, 1.3]);
        let l_d = nalgebra::Cholesky::new(sigma_d).unwrap().l();
        let l_g = nalgebra::Cholesky::new(sigma_g).unwrap().l();
        let gamma = DMatrix::from_row_slice(2, 2, &[0.5, -0.3, 1.1, 0.2]);
        let grad = grad_log_prior_gamma(&gamma, &l_d, &l_g).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            for j in 0..2 {
                let mut up = gamma.clone();
                let mut dn = gamma.clone();
                up[(i, j)] += h;
                dn[(i, j)] -= h;
                let fd = (log_prior_gamma(&up, &l_d, &l_g).unwrap()
                    - log_prior_gamma(&dn, &l_d, &l_g).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(grad[(i, j)], fd, epsilon = 1e-7, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_has_target_moments() {
        let l_d = DMatrix::identity(2, 2);
        let l_g = DMatrix::identity(1, 1);
        let a = sample_gamma_prior(&mut ChaCha12Rng::seed_from_u64(7), &l_d, &l_g);
        let b = sample_gamma_prior(&mut ChaCha12Rng::seed_from_u64(7), &l_d, &l_g);
        assert_eq!(a, b);

        // Correlated drugs: empirical correlation of the two rows ~ 0.5.
        let sigma_d = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let l_d = nalgebra::Cholesky::new(sigma_d).unwrap().l();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut sum = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        let mut cross = 0.0f64;
        let draws = 100_000;
        for _ in 0..draws {
            let g = sample_gamma_prior(&mut rng, &l_d, &l_g);
            sum[0] += g[(0, 0)];
            sum[1] += g[(1, 0)];
            sq[0] += g[(0, 0)] * g[(0, 0)];
            sq[1] += g[(1, 0)] * g[(1, 0)];
            cross += g[(0, 0)] * g[(1, 0)];
        }
        let nf = draws as f64;
        let mean = [sum[0] / nf, sum[1] / nf];
        let var = [sq[0] / nf - mean[0] * mean[0], sq[1] / nf - mean[1] * mean[1]];
        let cov = cross / nf - mean[0] * mean[1];
        let corr = cov / (var[0] * var[1]).sqrt();
        assert!((corr - 0.5).abs() < 0.02, "empirical correlation {corr}");
        assert!((var[0] - 1.0).abs() < 0.02 && (var[1] - 1.0).abs() < 0.02);
    }

    #[test]
    fn hyper_prior_values() {
        let v0 = DVector::zeros(0);
        // Uniform Beta contributes zero log density everywhere.
        assert_relative_eq!(log_prior_hyper(&v0, 0.3, 1.0, 1.0, 1.0).unwrap(), 0.0, epsilon = 1e-14);
        assert_relative_eq!(log_prior_hyper(&v0, 0.9, 1.0, 1.0, 1.0).unwrap(), 0.0, epsilon = 1e-14);
        assert_relative_eq!(
            log_prior_hyper(&v0, 0.5, 2.0, 2.0, 1.0).unwrap(),
            1.5f64.ln(),
            epsilon = 1e-12
        );
        let v3 = DVector::zeros(3);
        assert_relative_eq!(
            log_prior_hyper(&v3, 0.5, 1.0, 1.0, 1.0).unwrap(),
            3.0 * (-0.5 * LN_2PI),
            epsilon = 1e-12
        );
        assert!(log_prior_hyper(&v3, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(log_prior_hyper(&v3, 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn exposure_effect_respects_spike() {
        let layout = ReLayout::intercept_exposure();
        let mut eff = LatentEffects::null(2, layout.q());
        eff.gamma[(0, 1)] = 0.8;
        eff.gamma[(1, 1)] = -0.6;
        eff.delta[0] = true;
        assert_eq!(eff.exposure_effect(0, &layout), 0.8);
        assert_eq!(eff.exposure_effect(1, &layout), 0.0);
    }

    #[test]
    fn layout_requires_exposure() {
        assert!(ReLayout::new(vec![0, 1]).is_err());
        assert_eq!(ReLayout::exposure_only().q(), 1);
        assert_eq!(ReLayout::full().q(), DESIGN_DIM);
        assert_eq!(ReLayout::intercept_exposure().exposure_pos(), 1);
    }
}
