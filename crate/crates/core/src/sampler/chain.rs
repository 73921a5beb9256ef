//! Single-chain state, update kernels, and the warmup/keep loop.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::copres::DrugCovariance;
use crate::data::{Dataset, DESIGN_DIM};
use crate::error::{Error, Result};
use crate::prior::WithinDrugCov;

use super::draws::ChainDraws;
use super::{sigmoid, stratum_loglik, update_pi, ProposalKind, SamplerConfig, ETA_CLAMP};

const LN_2PI: f64 = 1.8378770664093453;
// Largest supported random-effect dimension; stack buffers are sized by it.
const MAX_Q: usize = DESIGN_DIM;

struct Strat {
    design: [f64; DESIGN_DIM],
    y: f64,
    m: f64,
}

/// Everything shared read-only by all chains of one run.
pub(crate) struct ChainContext<'a> {
    cfg: &'a SamplerConfig,
    strata: Vec<Strat>,
    by_drug: Vec<Vec<u32>>,
    n_drugs: usize,
    q: usize,
    xpos: usize,
    cols: Vec<usize>,
    l_d: DMatrix<f64>,
    omega: DMatrix<f64>,
    sigma_identity: bool,
    accept_target: f64,
    beta_init: DVector<f64>,
    sigma_init: WithinDrugCov,
    /// Per-element hyperprior SDs over the log-Cholesky vector.
    hyper_sds: Vec<f64>,
}

impl<'a> ChainContext<'a> {
    pub(crate) fn prepare(
        cfg: &'a SamplerConfig,
        data: &Dataset,
        sigma_d: &DrugCovariance,
    ) -> Result<Self> {
        let n_drugs = data.n_drugs();
        let strata: Vec<Strat> = data
            .records()
            .iter()
            .map(|r| Strat {
                design: r.design_vector(),
                y: r.n_events as f64,
                m: r.n_at_risk as f64,
            })
            .collect();
        let mut by_drug = vec![Vec::new(); n_drugs];
        for (i, r) in data.records().iter().enumerate() {
            by_drug[r.drug].push(i as u32);
        }

        let sigma_identity = sigma_d.is_identity();
        let (l_d, omega) = if sigma_identity {
            (DMatrix::identity(n_drugs, n_drugs), DMatrix::identity(n_drugs, n_drugs))
        } else {
            let chol = nalgebra::Cholesky::new(sigma_d.matrix.clone()).ok_or_else(|| {
                Error::Numeric("drug covariance is not positive definite; run nearest_pd first".into())
            })?;
            let omega = chol.inverse();
            (chol.unpack(), omega)
        };

        let beta_init = match &cfg.beta_init {
            Some(v) => DVector::from_vec(v.clone()),
            None => {
                // Start the intercept at the pooled empirical logit so rare
                // events do not begin hundreds of log-units from the mass.
                let y = data.total_events() as f64;
                let m = data.total_at_risk() as f64;
                let p = (y + 0.5) / (m + 1.0);
                let mut b = DVector::zeros(DESIGN_DIM);
                b[0] = (p / (1.0 - p)).ln();
                b
            }
        };
        let q = cfg.re_layout.q();
        let sigma_init = cfg.sigma_init.clone().unwrap_or_else(|| WithinDrugCov::identity(q));

        let xpos = cfg.re_layout.exposure_pos();
        let mut hyper_sds = vec![cfg.hyper_sd; q * (q + 1) / 2];
        if let Some(anchor) = cfg.slab_anchor_sd {
            // The exposure column is last, so every Cholesky element feeding
            // the exposure slab variance lives in its row-major lower-
            // triangular row: indices base..=base+xpos.
            let base = xpos * (xpos + 1) / 2;
            for slot in hyper_sds.iter_mut().skip(base).take(xpos + 1) {
                *slot = anchor;
            }
        }

        Ok(ChainContext {
            cfg,
            strata,
            by_drug,
            n_drugs,
            q,
            xpos,
            cols: cfg.re_layout.cols().to_vec(),
            l_d,
            omega,
            sigma_identity,
            accept_target: cfg.accept_target_resolved(),
            beta_init,
            sigma_init,
            hyper_sds,
        })
    }

    fn theta_row(&self, gamma: &DMatrix<f64>, delta_i: bool, drug: usize, out: &mut [f64]) {
        for k in 0..self.q {
            out[k] = gamma[(drug, k)];
        }
        if !delta_i {
            out[self.xpos] = 0.0;
        }
    }

    fn eta(&self, s: &Strat, beta: &DVector<f64>, theta: &[f64]) -> f64 {
        let mut eta = 0.0;
        for k in 0..DESIGN_DIM {
            eta += beta[k] * s.design[k];
        }
        for (pos, &col) in self.cols.iter().enumerate() {
            eta += theta[pos] * s.design[col];
        }
        eta
    }

    fn drug_ll(&self, drug: usize, beta: &DVector<f64>, theta: &[f64], clamps: &mut u64) -> f64 {
        let mut total = 0.0;
        for &idx in &self.by_drug[drug] {
            let s = &self.strata[idx as usize];
            total += stratum_loglik(self.eta(s, beta, theta), s.y, s.m, clamps);
        }
        total
    }

    fn full_ll(
        &self,
        beta: &DVector<f64>,
        gamma: &DMatrix<f64>,
        delta: &[bool],
        per_drug: &mut [f64],
        clamps: &mut u64,
    ) -> f64 {
        let mut theta = [0.0; MAX_Q];
        let mut total = 0.0;
        for drug in 0..self.n_drugs {
            self.theta_row(gamma, delta[drug], drug, &mut theta[..self.q]);
            let ll = self.drug_ll(drug, beta, &theta[..self.q], clamps);
            per_drug[drug] = ll;
            total += ll;
        }
        total
    }

    /// Matrix-normal log prior of the whole latent matrix, with a short-cut
    /// when the drug covariance is the identity.
    fn gamma_log_prior(&self, gamma: &DMatrix<f64>, l_gamma: &DMatrix<f64>) -> f64 {
        let n = self.n_drugs;
        let q = self.q;
        let log_det_g: f64 = (0..q).map(|i| l_gamma[(i, i)].ln()).sum();
        let a_t = if self.sigma_identity {
            gamma.transpose()
        } else {
            match self.l_d.solve_lower_triangular(gamma) {
                Some(a) => a.transpose(),
                None => return f64::NEG_INFINITY,
            }
        };
        let b = match l_gamma.solve_lower_triangular(&a_t) {
            Some(b) => b,
            None => return f64::NEG_INFINITY,
        };
        let quad: f64 = b.iter().map(|x| x * x).sum();
        let log_det_d: f64 = if self.sigma_identity {
            0.0
        } else {
            (0..n).map(|i| self.l_d[(i, i)].ln()).sum()
        };
        -0.5 * (n * q) as f64 * LN_2PI - q as f64 * log_det_d - n as f64 * log_det_g - 0.5 * quad
    }

    /// Conditional prior mean of row `drug` given all other rows, and the
    /// row's precision weight: `gamma_i | rest ~ N(mu_i, Sigma_gamma / w)`.
    fn row_conditional(&self, gamma: &DMatrix<f64>, drug: usize, mu: &mut [f64]) -> f64 {
        if self.sigma_identity {
            mu[..self.q].fill(0.0);
            return 1.0;
        }
        let w = self.omega[(drug, drug)];
        let mut acc = [0.0; MAX_Q];
        for j in 0..self.n_drugs {
            if j == drug {
                continue;
            }
            let o = self.omega[(drug, j)];
            if o != 0.0 {
                for k in 0..self.q {
                    acc[k] += o * gamma[(j, k)];
                }
            }
        }
        for k in 0..self.q {
            mu[k] = -acc[k] / w;
        }
        w
    }

    fn grad_beta(&self, beta: &DVector<f64>, gamma: &DMatrix<f64>, delta: &[bool]) -> DVector<f64> {
        let mut grad = DVector::zeros(DESIGN_DIM);
        let mut theta = [0.0; MAX_Q];
        for drug in 0..self.n_drugs {
            self.theta_row(gamma, delta[drug], drug, &mut theta[..self.q]);
            for &idx in &self.by_drug[drug] {
                let s = &self.strata[idx as usize];
                if s.m == 0.0 {
                    continue;
                }
                let eta = self.eta(s, beta, &theta[..self.q]).clamp(-ETA_CLAMP, ETA_CLAMP);
                let resid = s.y - s.m * sigmoid(eta);
                for k in 0..DESIGN_DIM {
                    grad[k] += resid * s.design[k];
                }
            }
        }
        // Gaussian prior on the fixed effects.
        let var = self.cfg.beta_prior_sd * self.cfg.beta_prior_sd;
        for k in 0..DESIGN_DIM {
            grad[k] -= beta[k] / var;
        }
        grad
    }

    fn grad_gamma_row(
        &self,
        drug: usize,
        beta: &DVector<f64>,
        row: &[f64],
        delta_i: bool,
        mu: &[f64],
        weight: f64,
        l_gamma: &DMatrix<f64>,
        out: &mut [f64],
    ) {
        let mut theta = [0.0; MAX_Q];
        theta[..self.q].copy_from_slice(row);
        if !delta_i {
            theta[self.xpos] = 0.0;
        }
        out[..self.q].fill(0.0);
        for &idx in &self.by_drug[drug] {
            let s = &self.strata[idx as usize];
            if s.m == 0.0 {
                continue;
            }
            let eta = self.eta(s, beta, &theta[..self.q]).clamp(-ETA_CLAMP, ETA_CLAMP);
            let resid = s.y - s.m * sigmoid(eta);
            for (pos, &col) in self.cols.iter().enumerate() {
                let gate = if pos == self.xpos && !delta_i { 0.0 } else { 1.0 };
                out[pos] += resid * s.design[col] * gate;
            }
        }
        // Conditional-prior gradient: -w * SigmaGamma^-1 (row - mu).
        let mut diff = [0.0; MAX_Q];
        for k in 0..self.q {
            diff[k] = row[k] - mu[k];
        }
        forward_solve(l_gamma, &mut diff[..self.q]);
        backward_solve_t(l_gamma, &mut diff[..self.q]);
        for k in 0..self.q {
            out[k] -= weight * diff[k];
        }
    }

    fn beta_log_prior(&self, beta: &DVector<f64>) -> f64 {
        let var = self.cfg.beta_prior_sd * self.cfg.beta_prior_sd;
        let mut lp = -0.5 * DESIGN_DIM as f64 * (LN_2PI + var.ln());
        for k in 0..DESIGN_DIM {
            lp -= 0.5 * beta[k] * beta[k] / var;
        }
        lp
    }
}

/// In-place forward substitution: v := L^-1 v.
fn forward_solve(l: &DMatrix<f64>, v: &mut [f64]) {
    for i in 0..v.len() {
        let mut s = v[i];
        for j in 0..i {
            s -= l[(i, j)] * v[j];
        }
        v[i] = s / l[(i, i)];
    }
}

/// In-place backward substitution with the transpose: v := L^-T v.
fn backward_solve_t(l: &DMatrix<f64>, v: &mut [f64]) {
    for i in (0..v.len()).rev() {
        let mut s = v[i];
        for j in (i + 1)..v.len() {
            s -= l[(j, i)] * v[j];
        }
        v[i] = s / l[(i, i)];
    }
}

/// Squared Mahalanobis norm through a lower Cholesky factor.
fn chol_quad_form(l: &DMatrix<f64>, diff: &mut [f64]) -> f64 {
    forward_solve(l, diff);
    diff.iter().map(|x| x * x).sum()
}

/// Robbins-Monro step-size adaptation toward a target acceptance rate.
struct AdaptiveStep {
    log_step: f64,
    target: f64,
    t: u64,
}

impl AdaptiveStep {
    fn new(initial: f64, target: f64) -> Self {
        AdaptiveStep { log_step: initial.ln(), target, t: 0 }
    }

    fn step(&self) -> f64 {
        self.log_step.exp()
    }

    fn update(&mut self, accept_prob: f64) {
        self.t += 1;
        let gain = (self.t as f64).powf(-0.6);
        self.log_step = (self.log_step + gain * (accept_prob - self.target)).clamp(-12.0, 4.0);
    }

    /// Re-open the adaptation gain after a preconditioner change.
    fn reopen(&mut self) {
        self.t = self.t.min(50);
    }
}

/// Running componentwise variance for the fixed-effect preconditioner.
struct Welford {
    n: u64,
    mean: [f64; DESIGN_DIM],
    m2: [f64; DESIGN_DIM],
}

impl Welford {
    fn new() -> Self {
        Welford { n: 0, mean: [0.0; DESIGN_DIM], m2: [0.0; DESIGN_DIM] }
    }

    fn reset(&mut self) {
        *self = Welford::new();
    }

    fn update(&mut self, x: &DVector<f64>) {
        self.n += 1;
        for k in 0..DESIGN_DIM {
            let d = x[k] - self.mean[k];
            self.mean[k] += d / self.n as f64;
            self.m2[k] += d * (x[k] - self.mean[k]);
        }
    }

    fn sd(&self, k: usize) -> f64 {
        if self.n < 10 {
            1.0
        } else {
            (self.m2[k] / (self.n - 1) as f64).sqrt().max(1e-6)
        }
    }
}

struct State {
    beta: DVector<f64>,
    gamma: DMatrix<f64>,
    delta: Vec<bool>,
    pi: f64,
    within: WithinDrugCov,
    l_gamma: DMatrix<f64>,
    g_inv: DMatrix<f64>,
    per_drug_ll: Vec<f64>,
    total_ll: f64,
    gamma_log_prior: f64,
    clamps: u64,
}

fn inverse_from_chol(l: &DMatrix<f64>) -> DMatrix<f64> {
    let q = l.nrows();
    let eye = DMatrix::identity(q, q);
    let linv = l.solve_lower_triangular(&eye).expect("factor is nonsingular");
    linv.transpose() * linv
}

#[derive(Default)]
struct AcceptCounter {
    proposed: u64,
    accepted: u64,
    tail_proposed: u64,
    tail_accepted: u64,
}

impl AcceptCounter {
    fn record(&mut self, accepted: bool, in_tail: bool) {
        self.proposed += 1;
        self.accepted += accepted as u64;
        if in_tail {
            self.tail_proposed += 1;
            self.tail_accepted += accepted as u64;
        }
    }

    fn rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }

    fn tail_rate(&self) -> Option<f64> {
        (self.tail_proposed > 0).then(|| self.tail_accepted as f64 / self.tail_proposed as f64)
    }
}

pub(crate) fn run_chain(
    ctx: &ChainContext<'_>,
    chain_id: usize,
    rng: &mut impl Rng,
) -> Result<ChainDraws> {
    let cfg = ctx.cfg;
    let n = ctx.n_drugs;
    let q = ctx.q;

    let l_init = ctx.sigma_init.chol();
    let g_inv_init = inverse_from_chol(&l_init);
    let mut state = State {
        beta: ctx.beta_init.clone(),
        gamma: DMatrix::zeros(n, q),
        delta: vec![false; n],
        pi: 0.5,
        within: ctx.sigma_init.clone(),
        l_gamma: l_init,
        g_inv: g_inv_init,
        per_drug_ll: vec![0.0; n],
        total_ll: 0.0,
        gamma_log_prior: 0.0,
        clamps: 0,
    };
    let mut clamps = 0u64;
    state.total_ll = ctx.full_ll(
        &state.beta,
        &state.gamma,
        &state.delta,
        &mut state.per_drug_ll,
        &mut clamps,
    );
    state.clamps = clamps;
    state.gamma_log_prior = ctx.gamma_log_prior(&state.gamma, &state.l_gamma);
    if !state.total_ll.is_finite() {
        return Err(Error::Numeric(format!(
            "chain {chain_id}: log likelihood not finite at the initial state"
        )));
    }

    let mut step_beta = AdaptiveStep::new(0.1, ctx.accept_target);
    let mut steps_gamma: Vec<AdaptiveStep> =
        (0..n).map(|_| AdaptiveStep::new(0.5, ctx.accept_target)).collect();
    // The log-Cholesky walks are always plain random walks.
    let mut step_sigma = AdaptiveStep::new(0.2, 0.234);
    let mut step_sigma_nc = AdaptiveStep::new(0.1, 0.234);
    let mut precond = Welford::new();

    let mut acc_beta = AcceptCounter::default();
    let mut acc_gamma = AcceptCounter::default();
    let mut acc_sigma = AcceptCounter::default();
    let mut acc_sigma_nc = AcceptCounter::default();

    let total_iters = cfg.n_warmup + cfg.n_keep * cfg.thin;
    let tail_start = cfg.n_warmup.saturating_sub(cfg.n_warmup / 4);

    let mut draws = ChainDraws::with_capacity(chain_id, cfg.n_keep, n);
    let mut proposal_ll = vec![0.0; n];
    let paranoid = std::env::var_os("SLABSCREEN_PARANOID").is_some();

    for iter in 0..total_iters {
        let adapting = iter < cfg.n_warmup;
        let in_tail = adapting && iter >= tail_start;
        if !state.total_ll.is_finite() || !state.gamma_log_prior.is_finite() {
            return Err(Error::Numeric(format!(
                "chain {chain_id}, iteration {iter}: log posterior became non-finite"
            )));
        }

        if cfg.sample_beta {
            let accepted = update_beta(
                ctx,
                &mut state,
                rng,
                &mut step_beta,
                &precond,
                adapting,
                &mut proposal_ll,
            );
            acc_beta.record(accepted, in_tail);
            if adapting {
                if iter == cfg.n_warmup / 4 || iter == cfg.n_warmup / 2 {
                    precond.reset();
                    step_beta.reopen();
                }
                precond.update(&state.beta);
            }
        }

        for drug in 0..n {
            let accepted =
                update_gamma_row(ctx, &mut state, drug, rng, &mut steps_gamma[drug], adapting);
            acc_gamma.record(accepted, in_tail);
        }
        // Excluded exposure slopes feel no likelihood, so their scalar full
        // conditional is Gaussian and can be refreshed exactly; this keeps
        // the spike indicators well mixed.
        gibbs_refresh_excluded_slopes(ctx, &mut state, rng);

        for drug in 0..n {
            update_delta(ctx, &mut state, drug, rng);
        }

        state.pi = update_pi(rng, &state.delta, cfg.pi_a, cfg.pi_b);

        // Row moves invalidated the cached matrix-normal prior value.
        state.gamma_log_prior = ctx.gamma_log_prior(&state.gamma, &state.l_gamma);

        if cfg.sample_sigma_gamma {
            let accepted = update_sigma_gamma(ctx, &mut state, rng, &mut step_sigma, adapting);
            acc_sigma.record(accepted, in_tail);
            // Interweaved non-centered move: rescale the latent field and
            // the covariance together, which crosses the scale funnel that
            // pins a centered random walk.
            let accepted_nc = update_sigma_gamma_noncentered(
                ctx,
                &mut state,
                rng,
                &mut step_sigma_nc,
                adapting,
                &mut proposal_ll,
            );
            acc_sigma_nc.record(accepted_nc, in_tail);
        }

        if paranoid {
            let mut clamps = 0;
            let mut fresh = vec![0.0; n];
            let total =
                ctx.full_ll(&state.beta, &state.gamma, &state.delta, &mut fresh, &mut clamps);
            assert!(
                (total - state.total_ll).abs() < 1e-6 * (1.0 + total.abs()),
                "iteration {iter}: cached log likelihood {} drifted from {total}",
                state.total_ll
            );
            for (drug, (&a, &b)) in fresh.iter().zip(&state.per_drug_ll).enumerate() {
                assert!(
                    (a - b).abs() < 1e-6 * (1.0 + a.abs()),
                    "iteration {iter}, drug {drug}: cached {b} vs fresh {a}"
                );
            }
        }

        if !adapting && (iter - cfg.n_warmup + 1) % cfg.thin == 0 {
            record_draw(ctx, &state, &mut draws);
        }
    }

    // Both covariance kernels target the same rate; report them pooled.
    let acc_sigma_all = AcceptCounter {
        proposed: acc_sigma.proposed + acc_sigma_nc.proposed,
        accepted: acc_sigma.accepted + acc_sigma_nc.accepted,
        tail_proposed: acc_sigma.tail_proposed + acc_sigma_nc.tail_proposed,
        tail_accepted: acc_sigma.tail_accepted + acc_sigma_nc.tail_accepted,
    };
    draws.accept_beta = acc_beta.rate();
    draws.accept_gamma = acc_gamma.rate();
    draws.accept_sigma = acc_sigma_all.rate();
    draws.warmup_tail_accept_beta = acc_beta.tail_rate();
    draws.warmup_tail_accept_gamma = acc_gamma.tail_rate();
    draws.warmup_tail_accept_sigma = acc_sigma_all.tail_rate();
    draws.eta_clamps = state.clamps;
    draws.step_beta = step_beta.step();
    draws.step_gamma_mean = steps_gamma.iter().map(|s| s.step()).sum::<f64>() / n as f64;
    draws.step_sigma = step_sigma.step();
    Ok(draws)
}

fn update_beta(
    ctx: &ChainContext<'_>,
    state: &mut State,
    rng: &mut impl Rng,
    step: &mut AdaptiveStep,
    precond: &Welford,
    adapting: bool,
    proposal_ll: &mut [f64],
) -> bool {
    let eps = step.step();
    let current = &state.beta;
    let (proposal, logq_diff) = match ctx.cfg.proposal {
        ProposalKind::RandomWalk => {
            let mut p = current.clone();
            for k in 0..DESIGN_DIM {
                let z: f64 = rng.sample(StandardNormal);
                p[k] += eps * precond.sd(k) * z;
            }
            (p, 0.0)
        }
        ProposalKind::Mala => {
            let grad = ctx.grad_beta(current, &state.gamma, &state.delta);
            let mut p = current.clone();
            for k in 0..DESIGN_DIM {
                let z: f64 = rng.sample(StandardNormal);
                p[k] += 0.5 * eps * eps * grad[k] + eps * z;
            }
            let grad_p = ctx.grad_beta(&p, &state.gamma, &state.delta);
            let fwd = mala_logq(current, &p, &grad, eps);
            let bwd = mala_logq(&p, current, &grad_p, eps);
            (p, bwd - fwd)
        }
    };

    let mut clamps = state.clamps;
    let prop_total =
        ctx.full_ll(&proposal, &state.gamma, &state.delta, proposal_ll, &mut clamps);
    let delta_post = (prop_total - state.total_ll)
        + (ctx.beta_log_prior(&proposal) - ctx.beta_log_prior(current))
        + logq_diff;
    let alpha = if delta_post.is_nan() { 0.0 } else { delta_post.min(0.0).exp() };
    let accept = !delta_post.is_nan() && rng.gen::<f64>().ln() < delta_post;
    if accept {
        state.beta = proposal;
        state.per_drug_ll.copy_from_slice(proposal_ll);
        state.total_ll = prop_total;
        state.clamps = clamps;
    }
    if adapting {
        step.update(alpha);
    }
    accept
}

fn mala_logq(from: &DVector<f64>, to: &DVector<f64>, grad_from: &DVector<f64>, eps: f64) -> f64 {
    let mut ss = 0.0;
    for k in 0..from.len() {
        let d = to[k] - from[k] - 0.5 * eps * eps * grad_from[k];
        ss += d * d;
    }
    -ss / (2.0 * eps * eps)
}

fn update_gamma_row(
    ctx: &ChainContext<'_>,
    state: &mut State,
    drug: usize,
    rng: &mut impl Rng,
    step: &mut AdaptiveStep,
    adapting: bool,
) -> bool {
    let q = ctx.q;
    let eps = step.step();
    let mut mu = [0.0; MAX_Q];
    let weight = ctx.row_conditional(&state.gamma, drug, &mut mu[..q]);

    let mut current = [0.0; MAX_Q];
    for k in 0..q {
        current[k] = state.gamma[(drug, k)];
    }

    let mut proposal = [0.0; MAX_Q];
    let mut logq_diff = 0.0;
    match ctx.cfg.proposal {
        ProposalKind::RandomWalk => {
            for k in 0..q {
                let z: f64 = rng.sample(StandardNormal);
                proposal[k] = current[k] + eps * z;
            }
        }
        ProposalKind::Mala => {
            let mut grad = [0.0; MAX_Q];
            ctx.grad_gamma_row(
                drug,
                &state.beta,
                &current[..q],
                state.delta[drug],
                &mu[..q],
                weight,
                &state.l_gamma,
                &mut grad,
            );
            for k in 0..q {
                let z: f64 = rng.sample(StandardNormal);
                proposal[k] = current[k] + 0.5 * eps * eps * grad[k] + eps * z;
            }
            let mut grad_p = [0.0; MAX_Q];
            ctx.grad_gamma_row(
                drug,
                &state.beta,
                &proposal[..q],
                state.delta[drug],
                &mu[..q],
                weight,
                &state.l_gamma,
                &mut grad_p,
            );
            let fwd = mala_logq_slice(&current[..q], &proposal[..q], &grad[..q], eps);
            let bwd = mala_logq_slice(&proposal[..q], &current[..q], &grad_p[..q], eps);
            logq_diff = bwd - fwd;
        }
    }

    // Conditional-prior quadratic forms.
    let mut diff_cur = [0.0; MAX_Q];
    let mut diff_prop = [0.0; MAX_Q];
    for k in 0..q {
        diff_cur[k] = current[k] - mu[k];
        diff_prop[k] = proposal[k] - mu[k];
    }
    let prior_cur = -0.5 * weight * chol_quad_form(&state.l_gamma, &mut diff_cur[..q]);
    let prior_prop = -0.5 * weight * chol_quad_form(&state.l_gamma, &mut diff_prop[..q]);

    let mut theta = [0.0; MAX_Q];
    theta[..q].copy_from_slice(&proposal[..q]);
    if !state.delta[drug] {
        theta[ctx.xpos] = 0.0;
    }
    let mut clamps = state.clamps;
    let ll_prop = ctx.drug_ll(drug, &state.beta, &theta[..q], &mut clamps);
    let ll_cur = state.per_drug_ll[drug];

    let delta_post = (ll_prop - ll_cur) + (prior_prop - prior_cur) + logq_diff;
    let alpha = if delta_post.is_nan() { 0.0 } else { delta_post.min(0.0).exp() };
    let accept = !delta_post.is_nan() && rng.gen::<f64>().ln() < delta_post;
    if accept {
        for k in 0..q {
            state.gamma[(drug, k)] = proposal[k];
        }
        state.total_ll += ll_prop - ll_cur;
        state.per_drug_ll[drug] = ll_prop;
        state.clamps = clamps;
    }
    if adapting {
        step.update(alpha);
    }
    accept
}

fn mala_logq_slice(from: &[f64], to: &[f64], grad_from: &[f64], eps: f64) -> f64 {
    let mut ss = 0.0;
    for k in 0..from.len() {
        let d = to[k] - from[k] - 0.5 * eps * eps * grad_from[k];
        ss += d * d;
    }
    -ss / (2.0 * eps * eps)
}

/// Exact Gibbs update of one inclusion indicator from its full conditional:
/// odds(delta = 1) = pi/(1-pi) * exp(ll(slab) - ll(spike)).
fn update_delta(ctx: &ChainContext<'_>, state: &mut State, drug: usize, rng: &mut impl Rng) {
    let q = ctx.q;
    let mut theta = [0.0; MAX_Q];
    for k in 0..q {
        theta[k] = state.gamma[(drug, k)];
    }
    let mut clamps = state.clamps;
    let (ll_on, ll_off) = if state.delta[drug] {
        let ll_on = state.per_drug_ll[drug];
        theta[ctx.xpos] = 0.0;
        let ll_off = ctx.drug_ll(drug, &state.beta, &theta[..q], &mut clamps);
        (ll_on, ll_off)
    } else {
        let ll_off = state.per_drug_ll[drug];
        // theta currently holds the slab value in the exposure slot.
        let ll_on = ctx.drug_ll(drug, &state.beta, &theta[..q], &mut clamps);
        (ll_on, ll_off)
    };
    let logit_odds = (state.pi / (1.0 - state.pi)).ln() + (ll_on - ll_off);
    let p_on = sigmoid(logit_odds);
    let new = rng.gen::<f64>() < p_on;
    let new_ll = if new { ll_on } else { ll_off };
    state.total_ll += new_ll - state.per_drug_ll[drug];
    state.per_drug_ll[drug] = new_ll;
    state.delta[drug] = new;
    state.clamps = clamps;
}

fn update_sigma_gamma(
    ctx: &ChainContext<'_>,
    state: &mut State,
    rng: &mut impl Rng,
    step: &mut AdaptiveStep,
    adapting: bool,
) -> bool {
    let eps = step.step();
    let v = state.within.log_chol();
    let dim = v.len();
    let mut proposal = DVector::zeros(dim);
    for k in 0..dim {
        let z: f64 = rng.sample(StandardNormal);
        proposal[k] = v[k] + eps * z;
    }
    let hyper_cur = log_chol_normal_terms(v, &ctx.hyper_sds);
    let hyper_prop = log_chol_normal_terms(&proposal, &ctx.hyper_sds);

    let within_prop = match WithinDrugCov::from_log_chol(proposal) {
        Ok(w) => w,
        Err(_) => return false,
    };
    let l_prop = within_prop.chol();
    let gamma_prior_prop = ctx.gamma_log_prior(&state.gamma, &l_prop);

    let delta_post = (gamma_prior_prop + hyper_prop) - (state.gamma_log_prior + hyper_cur);
    let alpha = if delta_post.is_nan() { 0.0 } else { delta_post.min(0.0).exp() };
    let accept = !delta_post.is_nan() && rng.gen::<f64>().ln() < delta_post;
    if accept {
        state.within = within_prop;
        state.l_gamma = l_prop;
        state.g_inv = inverse_from_chol(&state.l_gamma);
        state.gamma_log_prior = gamma_prior_prop;
    }
    if adapting {
        step.update(alpha);
    }
    accept
}

/// Exact Gibbs refresh of the exposure slope for every drug whose spike is
/// active. With the likelihood gated off, the scalar full conditional under
/// the Kronecker prior is Gaussian:
/// precision `Omega_ii G_xx`, mean `gamma_ix - (Omega gamma G)_ix / prec`,
/// with `G = SigmaGamma^-1`.
fn gibbs_refresh_excluded_slopes(ctx: &ChainContext<'_>, state: &mut State, rng: &mut impl Rng) {
    let n = ctx.n_drugs;
    let q = ctx.q;
    let x = ctx.xpos;
    let g = &state.g_inv;
    let gxx = g[(x, x)];
    // t_j = (gamma G)_jx
    let mut t = vec![0.0; n];
    for (j, tj) in t.iter_mut().enumerate() {
        let mut s = 0.0;
        for l in 0..q {
            s += state.gamma[(j, l)] * g[(l, x)];
        }
        *tj = s;
    }
    for i in 0..n {
        if state.delta[i] {
            continue;
        }
        let (weight, coupled) = if ctx.sigma_identity {
            (1.0, t[i])
        } else {
            let mut s = 0.0;
            for j in 0..n {
                s += ctx.omega[(i, j)] * t[j];
            }
            (ctx.omega[(i, i)], s)
        };
        let prec = weight * gxx;
        let mean = state.gamma[(i, x)] - coupled / prec;
        let z: f64 = rng.sample(StandardNormal);
        let new = mean + z / prec.sqrt();
        let old = state.gamma[(i, x)];
        state.gamma[(i, x)] = new;
        t[i] += (new - old) * gxx;
    }
}

/// Non-centered (interweaved) covariance move: holding the whitened field
/// `Z = L_D^-1 gamma L^-T` fixed, a proposal on the log-Cholesky vector
/// rescales the whole latent matrix, `gamma' = gamma L^-T L'^T`. The
/// drug-side factor cancels, and the acceptance ratio is the likelihood
/// change plus the hyperprior change.
fn update_sigma_gamma_noncentered(
    ctx: &ChainContext<'_>,
    state: &mut State,
    rng: &mut impl Rng,
    step: &mut AdaptiveStep,
    adapting: bool,
    proposal_ll: &mut [f64],
) -> bool {
    let eps = step.step();
    let v = state.within.log_chol();
    let dim = v.len();
    let mut prop_v = DVector::zeros(dim);
    for k in 0..dim {
        let z: f64 = rng.sample(StandardNormal);
        prop_v[k] = v[k] + eps * z;
    }
    let hyper_cur = log_chol_normal_terms(v, &ctx.hyper_sds);
    let hyper_prop = log_chol_normal_terms(&prop_v, &ctx.hyper_sds);
    let within_prop = match WithinDrugCov::from_log_chol(prop_v) {
        Ok(w) => w,
        Err(_) => return false,
    };
    let l_prop = within_prop.chol();
    let whitened = match state.l_gamma.solve_lower_triangular(&state.gamma.transpose()) {
        Some(m) => m,
        None => return false,
    };
    let gamma_prop = (&l_prop * whitened).transpose();

    let mut clamps = state.clamps;
    let ll_prop =
        ctx.full_ll(&state.beta, &gamma_prop, &state.delta, proposal_ll, &mut clamps);
    let delta_post = (ll_prop - state.total_ll) + (hyper_prop - hyper_cur);
    let alpha = if delta_post.is_nan() { 0.0 } else { delta_post.min(0.0).exp() };
    let accept = !delta_post.is_nan() && rng.gen::<f64>().ln() < delta_post;
    if accept {
        state.gamma = gamma_prop;
        state.l_gamma = l_prop;
        state.g_inv = inverse_from_chol(&state.l_gamma);
        state.within = within_prop;
        state.per_drug_ll.copy_from_slice(proposal_ll);
        state.total_ll = ll_prop;
        state.clamps = clamps;
        state.gamma_log_prior = ctx.gamma_log_prior(&state.gamma, &state.l_gamma);
    }
    if adapting {
        step.update(alpha);
    }
    accept
}

fn log_chol_normal_terms(v: &DVector<f64>, sds: &[f64]) -> f64 {
    v.iter()
        .zip(sds)
        .map(|(&x, &sd)| {
            let var = sd * sd;
            -0.5 * (LN_2PI + var.ln()) - 0.5 * x * x / var
        })
        .sum()
}

fn record_draw(ctx: &ChainContext<'_>, state: &State, draws: &mut ChainDraws) {
    let n = ctx.n_drugs;
    let mut theta_x = Vec::with_capacity(n);
    for drug in 0..n {
        // Exact zero under the spike, by construction.
        theta_x.push(if state.delta[drug] { state.gamma[(drug, ctx.xpos)] } else { 0.0 });
    }
    let s = state.delta.iter().filter(|&&d| d).count() as f64;
    let n_f = n as f64;
    let delta_pmf = s * state.pi.ln() + (n_f - s) * (1.0 - state.pi).ln();
    let hyper = crate::prior::ln_beta_pdf(state.pi, ctx.cfg.pi_a, ctx.cfg.pi_b)
        + log_chol_normal_terms(state.within.log_chol(), &ctx.hyper_sds);
    let log_post = state.total_ll
        + state.gamma_log_prior
        + delta_pmf
        + hyper
        + ctx.beta_log_prior(&state.beta);

    draws.beta.push(state.beta.iter().copied().collect());
    draws.delta.push(state.delta.clone());
    draws.theta_x.push(theta_x);
    draws.pi.push(state.pi);
    draws.sigma_log_chol.push(state.within.log_chol().iter().copied().collect());
    draws.log_post.push(log_post);
}
