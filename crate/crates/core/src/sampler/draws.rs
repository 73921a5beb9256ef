//! Kept posterior draws, pooled summaries, and draw export.

use std::io::Write;

use crate::error::{Error, Result};

/// Draws kept by one chain, plus acceptance and adaptation bookkeeping.
#[derive(Debug, Clone)]
pub struct ChainDraws {
    pub chain_id: usize,
    /// One row per kept iteration.
    pub beta: Vec<Vec<f64>>,
    pub delta: Vec<Vec<bool>>,
    /// Exposure effect after the spike: exactly 0 whenever delta is 0.
    pub theta_x: Vec<Vec<f64>>,
    pub pi: Vec<f64>,
    /// Unconstrained within-drug covariance parameters per kept draw.
    pub sigma_log_chol: Vec<Vec<f64>>,
    pub log_post: Vec<f64>,
    /// Post-warmup acceptance rates; `None` when a block is not sampled.
    pub accept_beta: Option<f64>,
    pub accept_gamma: Option<f64>,
    pub accept_sigma: Option<f64>,
    /// Acceptance over the final quarter of warmup (adaptation check).
    pub warmup_tail_accept_beta: Option<f64>,
    pub warmup_tail_accept_gamma: Option<f64>,
    pub warmup_tail_accept_sigma: Option<f64>,
    /// Number of linear predictors clamped at the stability bound.
    pub eta_clamps: u64,
    pub step_beta: f64,
    pub step_gamma_mean: f64,
    pub step_sigma: f64,
}

impl ChainDraws {
    pub(crate) fn with_capacity(chain_id: usize, n_keep: usize, _n_drugs: usize) -> Self {
        ChainDraws {
            chain_id,
            beta: Vec::with_capacity(n_keep),
            delta: Vec::with_capacity(n_keep),
            theta_x: Vec::with_capacity(n_keep),
            pi: Vec::with_capacity(n_keep),
            sigma_log_chol: Vec::with_capacity(n_keep),
            log_post: Vec::with_capacity(n_keep),
            accept_beta: None,
            accept_gamma: None,
            accept_sigma: None,
            warmup_tail_accept_beta: None,
            warmup_tail_accept_gamma: None,
            warmup_tail_accept_sigma: None,
            eta_clamps: 0,
            step_beta: 0.0,
            step_gamma_mean: 0.0,
            step_sigma: 0.0,
        }
    }

    pub fn n_kept(&self) -> usize {
        self.pi.len()
    }
}

/// Pooled draws from all chains of one run.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    n_drugs: usize,
    q: usize,
    thin: usize,
    chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub(crate) fn new(n_drugs: usize, q: usize, thin: usize, chains: Vec<ChainDraws>) -> Self {
        PosteriorDraws { n_drugs, q, thin, chains }
    }

    pub fn n_drugs(&self) -> usize {
        self.n_drugs
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn thin(&self) -> usize {
        self.thin
    }

    pub fn chains(&self) -> &[ChainDraws] {
        &self.chains
    }

    pub fn total_kept(&self) -> usize {
        self.chains.iter().map(|c| c.n_kept()).sum()
    }

    pub fn total_eta_clamps(&self) -> u64 {
        self.chains.iter().map(|c| c.eta_clamps).sum()
    }
}

/// Posterior inclusion probability per drug: the pooled mean of the
/// inclusion indicator over all kept draws of all chains.
pub fn compute_pip(draws: &PosteriorDraws) -> Result<Vec<f64>> {
    let total = draws.total_kept();
    if total == 0 {
        return Err(Error::EmptyInput("no kept draws".into()));
    }
    let mut pip = vec![0.0; draws.n_drugs()];
    for chain in draws.chains() {
        for row in &chain.delta {
            for (i, &d) in row.iter().enumerate() {
                pip[i] += d as u8 as f64;
            }
        }
    }
    for p in &mut pip {
        *p /= total as f64;
    }
    Ok(pip)
}

/// Per-drug posterior summary of the exposure effect.
#[derive(Debug, Clone)]
pub struct DrugSummary {
    pub drug: usize,
    pub pip: f64,
    /// Posterior mean of the spiked exposure effect (zeros included).
    pub theta_mean: f64,
    /// Posterior mean adjusted odds ratio, zeros included (primary summary).
    pub or_mean: f64,
    pub or_lo: f64,
    pub or_hi: f64,
    /// Same summaries conditional on inclusion; absent when the drug was
    /// never included.
    pub or_mean_cond: Option<f64>,
    pub or_lo_cond: Option<f64>,
    pub or_hi_cond: Option<f64>,
}

/// Equal-tailed quantile with linear interpolation on the sorted sample.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Summarize pooled draws per drug: PIP, posterior mean adjusted odds ratio
/// with an equal-tailed 95% credible interval, both marginal (zeros
/// included, the primary summary) and conditional on inclusion.
pub fn summarize(draws: &PosteriorDraws) -> Result<Vec<DrugSummary>> {
    let total = draws.total_kept();
    if total == 0 {
        return Err(Error::EmptyInput("no kept draws".into()));
    }
    let pip = compute_pip(draws)?;
    let mut out = Vec::with_capacity(draws.n_drugs());
    let mut ors: Vec<f64> = Vec::with_capacity(total);
    let mut ors_cond: Vec<f64> = Vec::with_capacity(total);
    for drug in 0..draws.n_drugs() {
        ors.clear();
        ors_cond.clear();
        let mut theta_sum = 0.0;
        for chain in draws.chains() {
            for (row, deltas) in chain.theta_x.iter().zip(&chain.delta) {
                let theta = row[drug];
                theta_sum += theta;
                let or = theta.exp();
                ors.push(or);
                if deltas[drug] {
                    ors_cond.push(or);
                }
            }
        }
        ors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let or_mean = ors.iter().sum::<f64>() / total as f64;
        let (cond_mean, cond_lo, cond_hi) = if ors_cond.is_empty() {
            (None, None, None)
        } else {
            ors_cond.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (
                Some(ors_cond.iter().sum::<f64>() / ors_cond.len() as f64),
                Some(quantile(&ors_cond, 0.025)),
                Some(quantile(&ors_cond, 0.975)),
            )
        };
        out.push(DrugSummary {
            drug,
            pip: pip[drug],
            theta_mean: theta_sum / total as f64,
            or_mean,
            or_lo: quantile(&ors, 0.025),
            or_hi: quantile(&ors, 0.975),
            or_mean_cond: cond_mean,
            or_lo_cond: cond_lo,
            or_hi_cond: cond_hi,
        });
    }
    Ok(out)
}

/// Stream kept draws to a columnar CSV, one row per kept iteration per chain.
pub fn write_draws_csv(
    draws: &PosteriorDraws,
    labels: &[String],
    mut out: impl Write,
) -> Result<()> {
    if labels.len() != draws.n_drugs() {
        return Err(Error::Dimension(format!(
            "{} labels for {} drugs",
            labels.len(),
            draws.n_drugs()
        )));
    }
    write!(out, "chain,iteration,log_post,pi")?;
    for k in 0..crate::data::DESIGN_DIM {
        write!(out, ",beta_{k}")?;
    }
    for label in labels {
        write!(out, ",theta_x_{label}")?;
    }
    for label in labels {
        write!(out, ",delta_{label}")?;
    }
    writeln!(out)?;
    for chain in draws.chains() {
        for row in 0..chain.n_kept() {
            write!(
                out,
                "{},{},{},{}",
                chain.chain_id, row, chain.log_post[row], chain.pi[row]
            )?;
            for v in &chain.beta[row] {
                write!(out, ",{v}")?;
            }
            for v in &chain.theta_x[row] {
                write!(out, ",{v}")?;
            }
            for v in &chain.delta[row] {
                write!(out, ",{}", *v as u8)?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
