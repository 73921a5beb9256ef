//! Convergence diagnostics: split R-hat and effective sample size.

use serde::Serialize;

use crate::error::{Error, Result};

use super::draws::PosteriorDraws;

/// R-hat values above this are flagged in reports.
pub const RHAT_FLAG: f64 = 1.05;

#[derive(Debug, Clone, Serialize)]
pub struct ParamDiagnostic {
    pub name: String,
    pub rhat: f64,
    pub ess: f64,
    /// All draws identical; R-hat is reported as 1 in that case.
    pub zero_variance: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub params: Vec<ParamDiagnostic>,
    pub eta_clamps: u64,
    pub max_rhat: f64,
    pub n_flagged: usize,
}

impl Diagnostics {
    pub fn any_above(&self, threshold: f64) -> bool {
        self.params.iter().any(|p| !p.zero_variance && p.rhat > threshold)
    }
}

/// Split each chain's draws in half; drops the middle element of odd chains.
fn split_sequences(chains: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let min_len = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = min_len / 2;
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

struct SeqStats {
    means: Vec<f64>,
    vars: Vec<f64>,
    len: usize,
}

fn seq_stats(seqs: &[Vec<f64>]) -> SeqStats {
    let len = seqs[0].len();
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / len as f64).collect();
    let vars: Vec<f64> = seqs
        .iter()
        .zip(&means)
        .map(|(s, &m)| s.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (len - 1) as f64)
        .collect();
    SeqStats { means, vars, len }
}

/// Split R-hat and ESS for one scalar parameter.
///
/// Uses the standard between/within variance ratio on split chains and the
/// paired-autocorrelation (initial positive sequence) truncation for ESS.
fn scalar_diagnostics(chains: Vec<Vec<f64>>) -> (f64, f64, bool) {
    let seqs = split_sequences(chains);
    let m = seqs.len();
    let total: usize = seqs.iter().map(Vec::len).sum();
    if m < 2 || seqs[0].len() < 2 {
        return (1.0, total as f64, false);
    }
    let stats = seq_stats(&seqs);
    let w = stats.vars.iter().sum::<f64>() / m as f64;
    let grand = stats.means.iter().sum::<f64>() / m as f64;
    let b_over_n =
        stats.means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>() / (m - 1) as f64;
    let len = stats.len as f64;
    let var_plus = (len - 1.0) / len * w + b_over_n;
    if w <= 0.0 || var_plus <= 0.0 {
        // Constant draws: R-hat undefined, reported as 1 with a flag.
        return (1.0, 0.0, true);
    }
    let rhat = (var_plus / w).sqrt();

    // Combined autocorrelation estimate across split sequences.
    let acov = |lag: usize| -> f64 {
        let mut total_cov = 0.0;
        for (s, &mean) in seqs.iter().zip(&stats.means) {
            let mut c = 0.0;
            for i in 0..(s.len() - lag) {
                c += (s[i] - mean) * (s[i + lag] - mean);
            }
            total_cov += c / s.len() as f64;
        }
        total_cov / m as f64
    };

    let rho = |lag: usize, acov_lag: f64| -> f64 {
        let _ = lag;
        1.0 - (w - acov_lag) / var_plus
    };

    let max_lag = stats.len - 1;
    let mut tau = 1.0; // 2 * Gamma_0 - 1 with Gamma_0 = (rho_0 + rho_1)/... accumulated below
    let mut sum_pairs = 0.0;
    let mut lag = 1;
    let mut prev_pair = f64::INFINITY;
    // Geyer initial positive (and monotone) sequence over pairs
    // (rho_1 + rho_2), (rho_3 + rho_4), ...
    while lag + 1 <= max_lag {
        let pair = rho(lag, acov(lag)) + rho(lag + 1, acov(lag + 1));
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        prev_pair = pair;
        sum_pairs += pair;
        lag += 2;
        if lag > 1000 {
            break;
        }
    }
    tau += 2.0 * sum_pairs;
    let ess = total as f64 / tau.max(1e-12);
    (rhat, ess, false)
}

/// Per-parameter split R-hat and effective sample size over kept draws.
///
/// Covers each fixed effect, the inclusion probability, every drug's spiked
/// exposure effect, and the log posterior. Parameters with R-hat above
/// [`RHAT_FLAG`] are marked.
pub fn diagnostics(draws: &PosteriorDraws) -> Result<Diagnostics> {
    if draws.total_kept() == 0 {
        return Err(Error::EmptyInput("no kept draws".into()));
    }
    if draws.chains().iter().any(|c| c.n_kept() < 4) {
        return Err(Error::Validation(
            "diagnostics need at least 4 kept draws per chain".into(),
        ));
    }
    let mut params = Vec::new();
    let mut push = |name: String, chains: Vec<Vec<f64>>| {
        let (rhat, ess, zero_variance) = scalar_diagnostics(chains);
        let flagged = !zero_variance && rhat > RHAT_FLAG;
        params.push(ParamDiagnostic { name, rhat, ess, zero_variance, flagged });
    };

    for k in 0..crate::data::DESIGN_DIM {
        let chains: Vec<Vec<f64>> = draws
            .chains()
            .iter()
            .map(|c| c.beta.iter().map(|row| row[k]).collect())
            .collect();
        push(format!("beta[{k}]"), chains);
    }
    {
        let chains: Vec<Vec<f64>> = draws.chains().iter().map(|c| c.pi.clone()).collect();
        push("pi".to_string(), chains);
    }
    for drug in 0..draws.n_drugs() {
        let chains: Vec<Vec<f64>> = draws
            .chains()
            .iter()
            .map(|c| c.theta_x.iter().map(|row| row[drug]).collect())
            .collect();
        push(format!("theta_x[{drug}]"), chains);
    }
    {
        let chains: Vec<Vec<f64>> = draws.chains().iter().map(|c| c.log_post.clone()).collect();
        push("log_post".to_string(), chains);
    }

    let max_rhat = params
        .iter()
        .filter(|p| !p.zero_variance)
        .map(|p| p.rhat)
        .fold(1.0, f64::max);
    let n_flagged = params.iter().filter(|p| p.flagged).count();
    Ok(Diagnostics { params, eta_clamps: draws.total_eta_clamps(), max_rhat, n_flagged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn constant_chains_report_unit_rhat_with_zero_variance_flag() {
        let chains = vec![vec![2.0; 100], vec![2.0; 100]];
        let (rhat, ess, zero) = scalar_diagnostics(chains);
        assert_eq!(rhat, 1.0);
        assert_eq!(ess, 0.0);
        assert!(zero);
    }

    #[test]
    fn iid_normal_chains_look_converged() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 2000;
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let total = 4 * n;
        let (rhat, ess, zero) = scalar_diagnostics(chains);
        assert!(!zero);
        assert!((0.99..=1.02).contains(&rhat), "rhat {rhat}");
        assert!(
            (ess - total as f64).abs() < 0.2 * total as f64,
            "ess {ess} vs total {total}"
        );
    }

    #[test]
    fn shifted_chain_is_detected() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let n = 500;
        let mut chains: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        for x in &mut chains[1] {
            *x += 10.0;
        }
        let (rhat, _, _) = scalar_diagnostics(chains);
        assert!(rhat > 2.0, "rhat {rhat}");
    }

    #[test]
    fn autocorrelated_chain_has_reduced_ess() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let n = 4000;
        let rho: f64 = 0.9;
        let chains: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let mut x = 0.0;
                (0..n)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        x = rho * x + (1.0 - rho * rho).sqrt() * z;
                        x
                    })
                    .collect()
            })
            .collect();
        let (_, ess, _) = scalar_diagnostics(chains);
        // AR(1) with rho = 0.9 has tau = (1+rho)/(1-rho) = 19.
        let expected = (2 * n) as f64 / 19.0;
        assert!(
            ess < expected * 2.0 && ess > expected / 2.0,
            "ess {ess}, expected about {expected}"
        );
    }
}
