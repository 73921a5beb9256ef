//! Scratch: in-block null behavior under the informed covariance.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use slabscreen::baselines::eb_fit;
use slabscreen::prior::WithinDrugCov;
use slabscreen::sampler::{compute_pip, run_chains, SamplerConfig};
use slabscreen::simulate::{build_scenario_sigma, generate_dataset, scenario2_spec, StratumSizes};

#[test]
#[ignore]
fn block_null_pips() {
    let mut spec = scenario2_spec();
    spec.m_dist = StratumSizes::LogNormal { mu: 12.5, sigma: 1.0 };
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    let (data, truth) = generate_dataset(&mut rng, &spec).unwrap();
    let eb = eb_fit(&data);

    let mut sigma_rng = ChaCha12Rng::seed_from_u64(405);
    let sigma = build_scenario_sigma(&mut sigma_rng, &spec).unwrap();
    let cfg = SamplerConfig { n_chains: 2, n_warmup: 2000, n_keep: 2000, seed: 7, ..Default::default() };
    let draws = run_chains(&cfg, &data, &sigma).unwrap();
    let pips = compute_pip(&draws).unwrap();

    let pi_mean: f64 = draws.chains().iter().flat_map(|c| c.pi.iter()).sum::<f64>()
        / draws.total_kept() as f64;
    let sxx: f64 = draws
        .chains()
        .iter()
        .flat_map(|c| c.sigma_log_chol.iter())
        .map(|v| {
            WithinDrugCov::from_log_chol(nalgebra::DVector::from_vec(v.clone())).unwrap().cov()[(1, 1)]
        })
        .sum::<f64>()
        / draws.total_kept() as f64;
    println!("pi_mean={pi_mean:.3} sigma_xx_mean={sxx:.3}");
    println!("in-block drugs (20..30 are true nulls):");
    for i in 0..32 {
        let (z, se) = match (eb.drugs[i].estimate, eb.drugs[i].se) {
            (Some(e), Some(s)) => (e / s, s),
            _ => (f64::NAN, f64::NAN),
        };
        let theta_on: Vec<f64> = draws
            .chains()
            .iter()
            .flat_map(|c| c.theta_x.iter().map(|t| t[i]))
            .filter(|&t| t != 0.0)
            .collect();
        let mean_on = theta_on.iter().sum::<f64>() / theta_on.len().max(1) as f64;
        println!(
            "{i:>3} truth={} pip={:.3} eb_z={z:+.2} eb_se={se:.3} theta|on={mean_on:+.3}",
            truth[i] as u8, pips[i]
        );
    }
}
