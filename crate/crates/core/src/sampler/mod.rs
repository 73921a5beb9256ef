//! MCMC engine for the joint posterior over fixed effects, latent drug
//! effects, inclusion indicators, the inclusion probability, and the
//! within-drug covariance.
//!
//! Each chain runs Metropolis-within-Gibbs sweeps in a fixed order
//! (fixed effects, each latent effect row, each inclusion indicator, the
//! inclusion probability, the within-drug covariance), with Robbins-Monro
//! step-size adaptation during warmup only.

mod chain;
mod diag;
mod draws;

pub use diag::{diagnostics, Diagnostics, ParamDiagnostic};
pub use draws::{compute_pip, summarize, write_draws_csv, ChainDraws, DrugSummary, PosteriorDraws};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Beta as BetaDist, Distribution};
use rayon::prelude::*;

use crate::copres::DrugCovariance;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::prior::{LatentEffects, ReLayout, WithinDrugCov};
use crate::seed::substream;

/// Linear predictors are clamped to this magnitude before exponentiation;
/// each clamp is counted and surfaced in diagnostics.
pub const ETA_CLAMP: f64 = 35.0;

/// `ln(1 + exp(x))` without overflow.
pub(crate) fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, stable in both tails.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) use logistic as sigmoid;

/// Proposal mechanism for the continuous blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalKind {
    RandomWalk,
    Mala,
}

impl ProposalKind {
    /// Standard optimal-scaling acceptance targets.
    pub fn default_accept_target(self) -> f64 {
        match self {
            ProposalKind::RandomWalk => 0.234,
            ProposalKind::Mala => 0.574,
        }
    }
}

/// Sampler settings.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_keep: usize,
    /// Keep every `thin`-th post-warmup iteration.
    pub thin: usize,
    pub seed: u64,
    pub proposal: ProposalKind,
    /// Acceptance-rate target for step adaptation; `None` uses the
    /// proposal kind's default.
    pub accept_target: Option<f64>,
    pub re_layout: ReLayout,
    /// Beta prior parameters for the inclusion probability.
    pub pi_a: f64,
    pub pi_b: f64,
    /// SD of the Normal hyperprior on each log-Cholesky element.
    pub hyper_sd: f64,
    /// Tighter hyperprior SD anchoring the exposure slab's log-scale near
    /// zero (unit slab). `None` applies `hyper_sd` uniformly. Without the
    /// anchor the slab scale can collapse to the per-drug noise level,
    /// which degrades FDR control at relaxed targets.
    pub slab_anchor_sd: Option<f64>,
    /// SD of the Normal prior on each fixed effect.
    pub beta_prior_sd: f64,
    /// When false the fixed effects stay at their initial value.
    pub sample_beta: bool,
    /// When false the within-drug covariance stays at its initial value.
    pub sample_sigma_gamma: bool,
    pub beta_init: Option<Vec<f64>>,
    pub sigma_init: Option<WithinDrugCov>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 4,
            n_warmup: 2000,
            n_keep: 2000,
            thin: 1,
            seed: 1,
            proposal: ProposalKind::RandomWalk,
            accept_target: None,
            re_layout: ReLayout::intercept_exposure(),
            pi_a: 1.0,
            pi_b: 1.0,
            hyper_sd: 1.0,
            slab_anchor_sd: Some(0.1),
            beta_prior_sd: 10.0,
            sample_beta: true,
            sample_sigma_gamma: true,
            beta_init: None,
            sigma_init: None,
        }
    }
}

impl SamplerConfig {
    pub fn accept_target_resolved(&self) -> f64 {
        self.accept_target.unwrap_or_else(|| self.proposal.default_accept_target())
    }

    fn validate(&self, n_drugs: usize) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::Validation("n_chains must be at least 1".into()));
        }
        if self.n_keep == 0 {
            return Err(Error::Validation("n_keep must be positive".into()));
        }
        if self.thin == 0 {
            return Err(Error::Validation("thin must be positive".into()));
        }
        if self.pi_a <= 0.0 || self.pi_b <= 0.0 || self.hyper_sd <= 0.0 || self.beta_prior_sd <= 0.0
        {
            return Err(Error::Validation(
                "pi_a, pi_b, hyper_sd and beta_prior_sd must be positive".into(),
            ));
        }
        if matches!(self.slab_anchor_sd, Some(s) if s <= 0.0) {
            return Err(Error::Validation("slab_anchor_sd must be positive".into()));
        }
        if self.n_keep < 100 {
            log::warn!(
                "n_keep = {} is below 100; inclusion probabilities will be noisy",
                self.n_keep
            );
        }
        if let Some(beta) = &self.beta_init {
            if beta.len() != crate::data::DESIGN_DIM {
                return Err(Error::Dimension(format!(
                    "beta_init has length {}, expected {}",
                    beta.len(),
                    crate::data::DESIGN_DIM
                )));
            }
        }
        if let Some(sigma) = &self.sigma_init {
            if sigma.q() != self.re_layout.q() {
                return Err(Error::Dimension(format!(
                    "sigma_init is {}x{} but the layout has {} random-effect columns",
                    sigma.q(),
                    sigma.q(),
                    self.re_layout.q()
                )));
            }
        }
        let _ = n_drugs;
        Ok(())
    }
}

/// Binomial log likelihood of the whole dataset at the given state,
/// omitting the binomial coefficients (constant in all parameters).
///
/// External likelihood comparisons must add
/// `sum_ij ln C(m_ij, Y_ij)` if they need the full log probability.
pub fn log_likelihood(
    data: &Dataset,
    beta: &DVector<f64>,
    effects: &LatentEffects,
    layout: &ReLayout,
) -> f64 {
    let mut clamps = 0u64;
    let mut total = 0.0;
    for rec in data.records() {
        let x = rec.design_vector();
        let mut eta = 0.0;
        for (k, xv) in x.iter().enumerate() {
            eta += beta[k] * xv;
        }
        for (pos, &col) in layout.cols().iter().enumerate() {
            let coef = if pos == layout.exposure_pos() {
                effects.exposure_effect(rec.drug, layout)
            } else {
                effects.gamma[(rec.drug, pos)]
            };
            eta += coef * x[col];
        }
        total += stratum_loglik(eta, rec.n_events as f64, rec.n_at_risk as f64, &mut clamps);
    }
    total
}

pub(crate) fn stratum_loglik(eta: f64, y: f64, m: f64, clamps: &mut u64) -> f64 {
    if m == 0.0 {
        return 0.0;
    }
    let e = if eta.abs() > ETA_CLAMP {
        *clamps += 1;
        eta.clamp(-ETA_CLAMP, ETA_CLAMP)
    } else {
        eta
    };
    y * e - m * log1p_exp(e)
}

/// Gradient of [`log_likelihood`] with respect to the fixed effects:
/// `sum_ij (Y_ij - m_ij sigma(eta_ij)) x_ij`.
pub fn loglik_grad_beta(
    data: &Dataset,
    beta: &DVector<f64>,
    effects: &LatentEffects,
    layout: &ReLayout,
) -> DVector<f64> {
    let mut grad = DVector::zeros(crate::data::DESIGN_DIM);
    for rec in data.records() {
        if rec.n_at_risk == 0 {
            continue;
        }
        let x = rec.design_vector();
        let eta = eta_for(rec, beta, effects, layout);
        let resid = rec.n_events as f64 - rec.n_at_risk as f64 * sigmoid(eta);
        for k in 0..x.len() {
            grad[k] += resid * x[k];
        }
    }
    grad
}

/// Gradient of [`log_likelihood`] with respect to one drug's latent effect
/// row. The exposure coordinate carries the inclusion indicator, so it is
/// zero whenever the drug's spike is active.
pub fn loglik_grad_gamma_row(
    data: &Dataset,
    drug: usize,
    beta: &DVector<f64>,
    effects: &LatentEffects,
    layout: &ReLayout,
) -> DVector<f64> {
    let mut grad = DVector::zeros(layout.q());
    for rec in data.drug_records(drug) {
        if rec.n_at_risk == 0 {
            continue;
        }
        let x = rec.design_vector();
        let eta = eta_for(rec, beta, effects, layout);
        let resid = rec.n_events as f64 - rec.n_at_risk as f64 * sigmoid(eta);
        for (pos, &col) in layout.cols().iter().enumerate() {
            let gate = if pos == layout.exposure_pos() {
                effects.delta[drug] as u8 as f64
            } else {
                1.0
            };
            grad[pos] += resid * x[col] * gate;
        }
    }
    grad
}

fn eta_for(
    rec: &crate::data::StratumRecord,
    beta: &DVector<f64>,
    effects: &LatentEffects,
    layout: &ReLayout,
) -> f64 {
    let x = rec.design_vector();
    let mut eta = 0.0;
    for (k, xv) in x.iter().enumerate() {
        eta += beta[k] * xv;
    }
    for (pos, &col) in layout.cols().iter().enumerate() {
        let coef = if pos == layout.exposure_pos() {
            effects.exposure_effect(rec.drug, layout)
        } else {
            effects.gamma[(rec.drug, pos)]
        };
        eta += coef * x[col];
    }
    eta.clamp(-ETA_CLAMP, ETA_CLAMP)
}

/// Exact conjugate Gibbs draw of the inclusion probability:
/// `Beta(a + sum(delta), b + N - sum(delta))`.
pub fn update_pi(rng: &mut impl Rng, delta: &[bool], a: f64, b: f64) -> f64 {
    let s = delta.iter().filter(|&&d| d).count() as f64;
    let n = delta.len() as f64;
    let dist = BetaDist::new(a + s, b + n - s).expect("Beta parameters are positive");
    let draw: f64 = dist.sample(rng);
    draw.clamp(1e-12, 1.0 - 1e-12)
}

/// Run all configured chains and pool their draws.
///
/// Chains execute concurrently, each with a substream-derived generator, so
/// results are deterministic in `(seed, chain index)` regardless of thread
/// scheduling.
pub fn run_chains(
    config: &SamplerConfig,
    data: &Dataset,
    sigma_d: &DrugCovariance,
) -> Result<PosteriorDraws> {
    config.validate(data.n_drugs())?;
    if sigma_d.n_drugs() != data.n_drugs() {
        return Err(Error::Dimension(format!(
            "drug covariance is {}x{} but the dataset has {} drugs",
            sigma_d.n_drugs(),
            sigma_d.n_drugs(),
            data.n_drugs()
        )));
    }
    let ctx = chain::ChainContext::prepare(config, data, sigma_d)?;
    let chains: Result<Vec<ChainDraws>> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(config.seed, "chain", c as u64);
            chain::run_chain(&ctx, c, &mut rng)
        })
        .collect();
    Ok(PosteriorDraws::new(
        data.n_drugs(),
        config.re_layout.q(),
        config.thin,
        chains?,
    ))
}
