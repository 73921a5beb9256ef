//! Scratch: Scenario 1 desk-scale check at the frozen defaults.

use slabscreen::sampler::SamplerConfig;
use slabscreen::simulate::{evaluate, run_replicates, scenario1_desk_spec, Method};

#[test]
#[ignore]
fn scenario1_desk_probe() {
    let methods = [Method::EbBonferroni, Method::EbBh, Method::SpikeSlab];
    let sampler = SamplerConfig { n_chains: 2, n_warmup: 1500, n_keep: 1500, ..Default::default() };
    let mut spec = scenario1_desk_spec();
    spec.n_replicates = 3;
    let t0 = std::time::Instant::now();
    let scores = run_replicates(&spec, &methods, &sampler).unwrap();
    println!("3 replicates in {:.0}s", t0.elapsed().as_secs_f64());
    let result = evaluate(&scores, &methods, 0.05, 0.02).unwrap();
    for s in &result.summary {
        println!(
            "{:<16} n_sel={:>5.1} power={:.2} ({:.2}) fdr={:.3} ({:.3})",
            s.method.to_string(),
            s.n_selected_median,
            s.power_median,
            s.power_mad,
            s.fdr_median,
            s.fdr_mad
        );
    }
}
