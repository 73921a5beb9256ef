//! Scratch: dissect one Scenario 2 replicate in detail.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use slabscreen::baselines::eb_fit;
use slabscreen::copres::DrugCovariance;
use slabscreen::prior::WithinDrugCov;
use slabscreen::sampler::{compute_pip, run_chains, SamplerConfig};
use slabscreen::simulate::{build_scenario_sigma, generate_dataset, scenario2_spec, StratumSizes};

#[test]
#[ignore]
fn dissect_scenario2_replicate() {
    let mu: f64 = std::env::var("PROBE_MU").ok().and_then(|s| s.parse().ok()).unwrap_or(13.0);
    let mut spec = scenario2_spec();
    spec.m_dist = StratumSizes::LogNormal { mu, sigma: 1.5 };
    let mut rng = ChaCha12Rng::seed_from_u64(777);
    let (data, truth) = generate_dataset(&mut rng, &spec).unwrap();

    // Per-drug crude z from the EB fit for orientation.
    let eb = eb_fit(&data);

    let cfg = SamplerConfig { n_chains: 2, n_warmup: 2000, n_keep: 2000, seed: 31, ..Default::default() };
    let plain = run_chains(&cfg, &data, &DrugCovariance::identity(100)).unwrap();
    let pips_plain = compute_pip(&plain).unwrap();

    let mut sigma_rng = ChaCha12Rng::seed_from_u64(778);
    let sigma = build_scenario_sigma(&mut sigma_rng, &spec).unwrap();
    let cfg2 = SamplerConfig { seed: 32, ..cfg.clone() };
    let copres = run_chains(&cfg2, &data, &sigma).unwrap();
    let pips_copres = compute_pip(&copres).unwrap();

    let pi_mean: f64 = plain.chains().iter().flat_map(|c| c.pi.iter()).sum::<f64>()
        / plain.total_kept() as f64;
    let sxx_mean: f64 = plain
        .chains()
        .iter()
        .flat_map(|c| c.sigma_log_chol.iter())
        .map(|v| {
            WithinDrugCov::from_log_chol(nalgebra::DVector::from_vec(v.clone()))
                .unwrap()
                .cov()[(1, 1)]
        })
        .sum::<f64>()
        / plain.total_kept() as f64;
    println!("mu={mu} plain: pi_mean={pi_mean:.3} sigma_xx_mean={sxx_mean:.3}");

    // Per-chain PIPs expose stuck chains.
    for &probe in &[55usize, 44, 22] {
        let per_chain: Vec<f64> = plain
            .chains()
            .iter()
            .map(|c| {
                c.delta.iter().filter(|d| d[probe]).count() as f64 / c.delta.len() as f64
            })
            .collect();
        let theta_on: Vec<f64> = plain
            .chains()
            .iter()
            .flat_map(|c| c.theta_x.iter().map(|t| t[probe]))
            .filter(|&t| t != 0.0)
            .collect();
        let mean_on = theta_on.iter().sum::<f64>() / theta_on.len().max(1) as f64;
        println!("drug {probe}: per-chain PIP {per_chain:?}, mean theta|on {mean_on:.3}");
    }

    // Direct likelihood profile for drug 55 at the posterior-mean state.
    {
        use slabscreen::prior::{LatentEffects, ReLayout};
        let layout = ReLayout::intercept_exposure();
        let kept = plain.total_kept() as f64;
        let mut beta_mean = nalgebra::DVector::zeros(5);
        for c in plain.chains() {
            for row in &c.beta {
                for k in 0..5 {
                    beta_mean[k] += row[k] / kept;
                }
            }
        }
        println!("posterior mean beta: {:?}", beta_mean.as_slice());
        // Profile out the drug's random intercept on a grid for each theta_x.
        let probe = 55usize;
        let base = {
            let mut e = LatentEffects::null(100, 2);
            e.delta = vec![false; 100];
            e
        };
        for theta_x in [-0.3, -0.19, -0.1, 0.0, 0.1] {
            let mut best = f64::NEG_INFINITY;
            let mut best_t1 = 0.0;
            for t1_step in -60..=60 {
                let t1 = t1_step as f64 * 0.01;
                let mut eff = base.clone();
                eff.gamma[(probe, 0)] = t1;
                eff.gamma[(probe, 1)] = theta_x;
                eff.delta[probe] = true;
                let ll = slabscreen::sampler::log_likelihood(&data, &beta_mean, &eff, &layout);
                if ll > best {
                    best = ll;
                    best_t1 = t1;
                }
            }
            println!("theta_x={theta_x:+.2}: profile ll={best:.3} at theta_1={best_t1:+.2}");
        }
    }

    // Conditional-binomial z per null drug under the true generative beta:
    // within each covariate cell, post events given the cell total are
    // binomial with weight m_post e^{beta5} / (m_pre + m_post e^{beta5}).
    {
        let b5: f64 = 0.078;
        let mut zs = Vec::new();
        for drug in 0..100 {
            if truth[drug] {
                continue;
            }
            let mut obs = 0.0;
            let mut expd = 0.0;
            let mut var = 0.0;
            for cell in [(false, false), (false, true), (true, false), (true, true)] {
                let mut m_pre = 0.0;
                let mut m_post = 0.0;
                let mut y_pre = 0.0;
                let mut y_post = 0.0;
                for r in data.drug_records(drug) {
                    if (r.age_adult, r.sex_female) == cell {
                        if r.post_exposure {
                            m_post = r.n_at_risk as f64;
                            y_post = r.n_events as f64;
                        } else {
                            m_pre = r.n_at_risk as f64;
                            y_pre = r.n_events as f64;
                        }
                    }
                }
                let total = y_pre + y_post;
                if total == 0.0 {
                    continue;
                }
                let w = m_post * b5.exp() / (m_pre + m_post * b5.exp());
                obs += y_post;
                expd += total * w;
                var += total * w * (1.0 - w);
            }
            if var > 0.0 {
                let z = (obs - expd) / var.sqrt();
                if [55, 60, 75, 45, 22, 29].contains(&drug) {
                    println!("drug {drug}: conditional z {z:.2}");
                }
                zs.push(z);
            }
        }
        let mean = zs.iter().sum::<f64>() / zs.len() as f64;
        let sd = (zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>()
            / (zs.len() - 1) as f64)
            .sqrt();
        let extreme = zs.iter().filter(|z| z.abs() > 2.5).count();
        println!(
            "null-drug conditional z: mean {mean:.2}, sd {sd:.2}, |z|>2.5 count {extreme}/{}",
            zs.len()
        );
    }

    // Raw strata of drug 55.
    for r in data.drug_records(55) {
        println!(
            "drug55 stratum age={} sex={} post={}: m={} y={}",
            r.age_adult as u8, r.sex_female as u8, r.post_exposure as u8, r.n_at_risk, r.n_events
        );
    }

    println!("drug truth  events  raw_z   pip_plain pip_copres");
    for i in 0..100 {
        let events: u64 = data.drug_records(i).map(|r| r.n_events).sum();
        let z = match (eb.drugs[i].estimate, eb.drugs[i].se) {
            (Some(e), Some(s)) => e / s,
            _ => f64::NAN,
        };
        let interesting = truth[i] || pips_plain[i] > 0.3 || pips_copres[i] > 0.3;
        if interesting {
            println!(
                "{i:>4} {:>5} {events:>7} {z:>7.2} {:>9.3} {:>10.3}",
                truth[i] as u8, pips_plain[i], pips_copres[i]
            );
        }
    }
}
