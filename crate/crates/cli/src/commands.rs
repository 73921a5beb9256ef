//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use slabscreen::copres::{
    build_sigma_d, min_eigenvalue, read_sigma_csv, CoprescriptionTable, DrugCovariance,
    SigmaMethod,
};
use slabscreen::data::Dataset;
use slabscreen::prior::ReLayout;
use slabscreen::sampler::{
    diagnostics, run_chains, summarize, write_draws_csv, DrugSummary, ProposalKind, SamplerConfig,
};
use slabscreen::selection::{optimal_threshold, write_selection_report, write_threshold_curve};
use slabscreen::simulate::{
    run_benchmark, scenario1_desk_spec, scenario1_spec, scenario2_spec, write_benchmark_csv,
    write_summary_csv, Method, ScenarioSpec, SigmaDSpec, StratumSizes,
};

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::{atomic_write, BuildSigmaArgs, FitArgs, ReportArgs, SelectArgs, SimulateArgs};

fn out_dir(cfg: &mut RunConfig) -> Result<PathBuf> {
    let dir = cfg.get("out_dir").unwrap_or("out").to_string();
    cfg.set_flag("out_dir", Some(&dir));
    let path = PathBuf::from(dir);
    std::fs::create_dir_all(&path)
        .with_context(|| format!("creating output directory {}", path.display()))?;
    Ok(path)
}

/// Resolve a value (flag/config/default) and echo it back so the manifest
/// records it.
fn resolve<T: std::str::FromStr + ToString>(
    cfg: &mut RunConfig,
    key: &str,
    default: T,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = cfg.parsed_or(key, default)?;
    cfg.set_flag(key, Some(v.to_string()));
    Ok(v)
}

pub fn build_sigma(args: &BuildSigmaArgs, cfg: &mut RunConfig) -> Result<u8> {
    cfg.set_flag("input", args.input.as_ref().map(|p| p.display().to_string()));
    cfg.set_flag("n_total", args.n_total);
    cfg.set_flag("n_total_file", args.n_total_file.as_ref().map(|p| p.display().to_string()));
    cfg.set_flag("method", args.method.clone());
    cfg.set_flag("n_drugs", args.n_drugs);
    cfg.set_flag("eps_pd", args.eps_pd);

    let dir = out_dir(cfg)?;
    let mut manifest = Manifest::start("build-sigma");
    let method = SigmaMethod::parse(cfg.get("method").unwrap_or("tetrachoric"))?;
    cfg.set_flag("method", Some(method.to_string()));
    let eps_pd = resolve(cfg, "eps_pd", 1e-6)?;

    let input_path = cfg.get("input").map(String::from);
    let (sigma, labels, n_total, min_before) = match input_path {
        Some(input) => {
            let n_total = match (cfg.parsed::<u64>("n_total")?, cfg.get("n_total_file")) {
                (Some(n), _) => n,
                (None, Some(file)) => std::fs::read_to_string(file)
                    .with_context(|| format!("reading {file}"))?
                    .trim()
                    .parse()
                    .map_err(|_| anyhow!("n_total file must hold one integer"))?,
                (None, None) => bail!("build-sigma needs --n-total or --n-total-file"),
            };
            cfg.set_flag("n_total", Some(n_total));
            let table = CoprescriptionTable::from_csv(&input, n_total)?;
            // Raw (pre-repair) minimum eigenvalue for provenance.
            let raw = build_sigma_d(&table, method, f64::MIN_POSITIVE)?;
            let min_before = min_eigenvalue(&raw.matrix)?;
            let sigma = build_sigma_d(&table, method, eps_pd)?;
            (sigma, table.labels().to_vec(), Some(n_total), min_before)
        }
        None => {
            if method != SigmaMethod::Identity {
                bail!("build-sigma needs --input unless --method identity");
            }
            let n = cfg
                .parsed::<usize>("n_drugs")?
                .ok_or_else(|| anyhow!("identity without a table needs --n-drugs"))?;
            let labels = (0..n).map(|i| format!("drug{i:04}")).collect();
            (DrugCovariance::identity(n), labels, None, 1.0)
        }
    };

    let sigma_path = dir.join("sigma_d.csv");
    let mut buf = Vec::new();
    sigma.write_csv(&labels, &mut buf)?;
    atomic_write(&sigma_path, &buf)?;
    manifest.record_output(&sigma_path);

    let min_after = min_eigenvalue(&sigma.matrix)?;
    let provenance = serde_json::json!({
        "method": sigma.method.to_string(),
        "eps_pd": eps_pd,
        "repaired": sigma.repaired,
        "min_eigenvalue_before": min_before,
        "min_eigenvalue_after": min_after,
        "n_drugs": sigma.n_drugs(),
        "n_total": n_total,
    });
    let prov_path = dir.join("sigma_d_provenance.json");
    atomic_write(&prov_path, (serde_json::to_string_pretty(&provenance)? + "\n").as_bytes())?;
    manifest.record_output(&prov_path);
    manifest.write(cfg, &dir)?;
    println!(
        "sigma_d: {} drugs, method {}, repaired {}, min eigenvalue {:.3e} -> {:.3e}",
        sigma.n_drugs(),
        sigma.method,
        sigma.repaired,
        min_before,
        min_after
    );
    Ok(0)
}

fn sampler_config_from(cfg: &mut RunConfig) -> Result<SamplerConfig> {
    let defaults = SamplerConfig::default();
    let proposal = match cfg.get("proposal").unwrap_or("random-walk") {
        "random-walk" => ProposalKind::RandomWalk,
        "mala" => ProposalKind::Mala,
        other => bail!("unknown proposal kind `{other}`"),
    };
    cfg.set_flag(
        "proposal",
        Some(if proposal == ProposalKind::Mala { "mala" } else { "random-walk" }),
    );
    let re_layout = match cfg.get("re").unwrap_or("intercept-exposure") {
        "exposure" => ReLayout::exposure_only(),
        "intercept-exposure" => ReLayout::intercept_exposure(),
        "full" => ReLayout::full(),
        other => bail!("unknown random-effect layout `{other}`"),
    };
    let re_name = cfg.get("re").unwrap_or("intercept-exposure").to_string();
    cfg.set_flag("re", Some(re_name));
    let anchor = resolve(cfg, "slab_anchor_sd", 0.1)?;
    Ok(SamplerConfig {
        n_chains: resolve(cfg, "chains", defaults.n_chains)?,
        n_warmup: resolve(cfg, "warmup", defaults.n_warmup)?,
        n_keep: resolve(cfg, "keep", defaults.n_keep)?,
        thin: resolve(cfg, "thin", defaults.thin)?,
        seed: resolve(cfg, "seed", defaults.seed)?,
        proposal,
        accept_target: None,
        re_layout,
        pi_a: resolve(cfg, "pi_a", defaults.pi_a)?,
        pi_b: resolve(cfg, "pi_b", defaults.pi_b)?,
        hyper_sd: resolve(cfg, "hyper_sd", defaults.hyper_sd)?,
        slab_anchor_sd: (anchor > 0.0).then_some(anchor),
        beta_prior_sd: resolve(cfg, "beta_prior_sd", defaults.beta_prior_sd)?,
        sample_beta: true,
        sample_sigma_gamma: true,
        beta_init: None,
        sigma_init: None,
    })
}

/// Reorder a labeled covariance matrix to the dataset's drug order.
fn align_sigma(data: &Dataset, labels: &[String], m: &nalgebra::DMatrix<f64>) -> Result<DrugCovariance> {
    if labels.len() != data.n_drugs() {
        bail!(slabscreen::Error::Validation(format!(
            "covariance has {} drugs but the dataset has {}",
            labels.len(),
            data.n_drugs()
        )));
    }
    let mut pos = Vec::with_capacity(data.n_drugs());
    for name in data.drug_names() {
        let idx = labels.iter().position(|l| l == name).ok_or_else(|| {
            anyhow!(slabscreen::Error::Validation(format!(
                "drug `{name}` missing from the covariance file"
            )))
        })?;
        pos.push(idx);
    }
    let n = pos.len();
    let matrix = nalgebra::DMatrix::from_fn(n, n, |i, j| m[(pos[i], pos[j])]);
    let method = SigmaMethod::Synthetic;
    Ok(DrugCovariance { matrix, method, repaired: false })
}

fn write_posterior_summary(
    labels: &[String],
    summaries: &[DrugSummary],
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(
        "drug,pip,theta_mean,or_mean,cri_low,cri_high,or_mean_conditional,cri_low_conditional,cri_high_conditional\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            labels[s.drug],
            s.pip,
            s.theta_mean,
            s.or_mean,
            s.or_lo,
            s.or_hi,
            opt(s.or_mean_cond),
            opt(s.or_lo_cond),
            opt(s.or_hi_cond),
        ));
    }
    atomic_write(path, out.as_bytes())
}

fn read_posterior_summary(path: &Path) -> Result<(Vec<String>, Vec<DrugSummary>)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut labels = Vec::new();
    let mut summaries = Vec::new();
    let parse_opt = |s: &str| -> Option<f64> { (!s.is_empty()).then(|| s.parse().unwrap()) };
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() != 9 {
            bail!("{}: row {} has {} fields, expected 9", path.display(), i + 2, row.len());
        }
        let num = |k: usize| -> Result<f64> {
            row[k].parse().map_err(|_| anyhow!("{}: bad number `{}`", path.display(), &row[k]))
        };
        labels.push(row[0].to_string());
        summaries.push(DrugSummary {
            drug: i,
            pip: num(1)?,
            theta_mean: num(2)?,
            or_mean: num(3)?,
            or_lo: num(4)?,
            or_hi: num(5)?,
            or_mean_cond: parse_opt(&row[6]),
            or_lo_cond: parse_opt(&row[7]),
            or_hi_cond: parse_opt(&row[8]),
        });
    }
    Ok((labels, summaries))
}

pub fn fit(args: &FitArgs, cfg: &mut RunConfig) -> Result<u8> {
    cfg.set_flag("data", args.data.as_ref().map(|p| p.display().to_string()));
    cfg.set_flag("sigma_d", args.sigma_d.as_ref().map(|p| p.display().to_string()));
    cfg.set_flag("chains", args.chains);
    cfg.set_flag("warmup", args.warmup);
    cfg.set_flag("keep", args.keep);
    cfg.set_flag("thin", args.thin);
    cfg.set_flag("proposal", args.proposal.clone());
    cfg.set_flag("re", args.re.clone());
    cfg.set_flag("pi_a", args.pi_a);
    cfg.set_flag("pi_b", args.pi_b);
    cfg.set_flag("hyper_sd", args.hyper_sd);
    cfg.set_flag("slab_anchor_sd", args.slab_anchor_sd);
    cfg.set_flag("beta_prior_sd", args.beta_prior_sd);
    cfg.set_flag("save_draws", args.save_draws.then_some(true));

    let dir = out_dir(cfg)?;
    let mut manifest = Manifest::start("fit");
    let data_path = cfg.get("data").ok_or_else(|| anyhow!("fit needs --data"))?.to_string();
    let data = Dataset::from_csv(&data_path)?;
    let sigma = match cfg.get("sigma_d") {
        Some(path) => {
            let (labels, m) = read_sigma_csv(path)?;
            align_sigma(&data, &labels, &m)?
        }
        None => DrugCovariance::identity(data.n_drugs()),
    };
    let sampler_cfg = sampler_config_from(cfg)?;

    let draws = run_chains(&sampler_cfg, &data, &sigma)?;
    let summaries = summarize(&draws)?;
    let diag = diagnostics(&draws)?;

    let summary_path = dir.join("posterior_summary.csv");
    write_posterior_summary(data.drug_names(), &summaries, &summary_path)?;
    manifest.record_output(&summary_path);

    let names_path = dir.join("drug_names.csv");
    let mut buf = Vec::new();
    data.write_drug_names(&mut buf)?;
    atomic_write(&names_path, &buf)?;
    manifest.record_output(&names_path);

    let diag_path = dir.join("diagnostics.json");
    atomic_write(&diag_path, (serde_json::to_string_pretty(&diag)? + "\n").as_bytes())?;
    manifest.record_output(&diag_path);

    if cfg.get("save_draws").is_some() {
        let draws_path = dir.join("draws.csv");
        let mut buf = Vec::new();
        write_draws_csv(&draws, data.drug_names(), &mut buf)?;
        atomic_write(&draws_path, &buf)?;
        manifest.record_output(&draws_path);
    }
    manifest.write(cfg, &dir)?;

    println!(
        "fit: {} drugs, {} kept draws, max split R-hat {:.3}, {} eta clamps",
        data.n_drugs(),
        draws.total_kept(),
        diag.max_rhat,
        diag.eta_clamps
    );
    if diag.any_above(1.1) {
        eprintln!(
            "warning: {} parameters have split R-hat above 1.1; results were written but the \
             chains have not converged",
            diag.params.iter().filter(|p| !p.zero_variance && p.rhat > 1.1).count()
        );
        return Ok(4);
    }
    Ok(0)
}

pub fn select(args: &SelectArgs, cfg: &mut RunConfig) -> Result<u8> {
    cfg.set_flag("summary", args.summary.as_ref().map(|p| p.display().to_string()));
    cfg.set_flag("alpha_r", args.alpha_r);

    let dir = out_dir(cfg)?;
    let mut manifest = Manifest::start("select");
    let summary_path =
        cfg.get("summary").ok_or_else(|| anyhow!("select needs --summary"))?.to_string();
    let alpha_r = resolve(cfg, "alpha_r", 0.05)?;
    let (labels, summaries) = read_posterior_summary(Path::new(&summary_path))?;
    let pips: Vec<f64> = summaries.iter().map(|s| s.pip).collect();
    let result = optimal_threshold(&pips, alpha_r)?;

    let selection_path = dir.join("selection.csv");
    let mut buf = Vec::new();
    write_selection_report(&args.method_label, &labels, &summaries, &result, &mut buf)?;
    atomic_write(&selection_path, &buf)?;
    manifest.record_output(&selection_path);

    let curve_path = dir.join("fdr_curve.csv");
    let mut buf = Vec::new();
    write_threshold_curve(&pips, &mut buf)?;
    atomic_write(&curve_path, &buf)?;
    manifest.record_output(&curve_path);
    manifest.write(cfg, &dir)?;

    println!(
        "select: {} of {} drugs at threshold {} (expected FDR {:.4}, feasible {})",
        result.selected.len(),
        pips.len(),
        result.threshold,
        result.expected_fdr,
        result.feasible
    );
    Ok(0)
}

fn parse_layout(text: &str) -> Result<Vec<(usize, f64)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (count, value) = pair
                .split_once(':')
                .ok_or_else(|| anyhow!("layout entries look like `count:value`, got `{pair}`"))?;
            Ok((count.trim().parse()?, value.trim().parse()?))
        })
        .collect()
}

fn scenario_from(cfg: &mut RunConfig) -> Result<ScenarioSpec> {
    let name = cfg.get("scenario").unwrap_or("2").to_string();
    cfg.set_flag("scenario", Some(&name));
    let mut spec = match name.as_str() {
        "1" => scenario1_desk_spec(),
        "1-full" => scenario1_spec(),
        "2" => scenario2_spec(),
        "custom" => {
            let n_drugs = cfg
                .parsed::<usize>("n_drugs")?
                .ok_or_else(|| anyhow!("custom scenario needs n_drugs"))?;
            let layout = parse_layout(
                cfg.get("layout").ok_or_else(|| anyhow!("custom scenario needs layout"))?,
            )?;
            let sigma_d = match cfg.get("sigma_block") {
                None | Some("identity") => SigmaDSpec::Identity,
                Some(block) => {
                    let parts: Vec<&str> = block.split(':').collect();
                    if parts.len() != 3 {
                        bail!("sigma_block looks like `first_k:low:high`");
                    }
                    SigmaDSpec::Block {
                        first_k: parts[0].parse()?,
                        low: parts[1].parse()?,
                        high: parts[2].parse()?,
                    }
                }
            };
            ScenarioSpec {
                name: "custom".into(),
                n_drugs,
                effect_layout: layout,
                sigma_d,
                ..scenario2_spec()
            }
        }
        other => bail!("unknown scenario `{other}`; use 1, 1-full, 2 or custom"),
    };
    spec.random_intercept_sd = resolve(cfg, "intercept_sd", spec.random_intercept_sd)?;
    spec.effect_corr_scale = resolve(cfg, "tau", spec.effect_corr_scale)?;
    spec.n_replicates = resolve(cfg, "replicates", 20usize)?;
    spec.seed = resolve(cfg, "seed", spec.seed)?;
    spec.m_dist = match (cfg.get("m_file"), cfg.parsed::<u64>("m_fixed")?) {
        (Some(file), _) => StratumSizes::from_stratum_csv(file)?,
        (None, Some(m)) => StratumSizes::Fixed(m),
        (None, None) => StratumSizes::LogNormal {
            mu: resolve(cfg, "m_mu", slabscreen::simulate::DEFAULT_M_MU)?,
            sigma: resolve(cfg, "m_sigma", slabscreen::simulate::DEFAULT_M_SIGMA)?,
        },
    };
    Ok(spec)
}

pub fn simulate(args: &SimulateArgs, cfg: &mut RunConfig) -> Result<u8> {
    cfg.set_flag("scenario", args.scenario.clone());
    cfg.set_flag("replicates", args.replicates);
    cfg.set_flag("alpha", args.alpha);
    cfg.set_flag("alpha_r", args.alpha_r);
    cfg.set_flag("methods", args.methods.clone());
    cfg.set_flag("m_mu", args.m_mu);
    cfg.set_flag("m_sigma", args.m_sigma);
    cfg.set_flag("m_fixed", args.m_fixed);
    cfg.set_flag("m_file", args.m_file.as_ref().map(|p| p.display().to_string()));
    cfg.set_flag("tau", args.tau);
    cfg.set_flag("n_drugs", args.n_drugs);
    cfg.set_flag("layout", args.layout.clone());
    cfg.set_flag("sigma_block", args.sigma_block.clone());
    cfg.set_flag("intercept_sd", args.intercept_sd);
    cfg.set_flag("chains", args.chains);
    cfg.set_flag("warmup", args.warmup);
    cfg.set_flag("keep", args.keep);

    let dir = out_dir(cfg)?;
    let mut manifest = Manifest::start("simulate");
    let spec = scenario_from(cfg)?;
    let methods: Vec<Method> = match cfg.get("methods") {
        Some(list) => list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| Ok(Method::parse(s.trim())?))
            .collect::<Result<_>>()?,
        None => {
            if matches!(spec.sigma_d, SigmaDSpec::Identity) {
                vec![Method::EbBonferroni, Method::EbBh, Method::SpikeSlab]
            } else {
                Method::ALL.to_vec()
            }
        }
    };
    cfg.set_flag(
        "methods",
        Some(methods.iter().map(Method::to_string).collect::<Vec<_>>().join(",")),
    );
    let alpha = resolve(cfg, "alpha", 0.05)?;
    let default_alpha_r = if spec.name.starts_with("scenario1") { 0.02 } else { alpha };
    let alpha_r = resolve(cfg, "alpha_r", default_alpha_r)?;
    let sampler_cfg = sampler_config_from(cfg)?;

    let result = run_benchmark(&spec, &methods, &sampler_cfg, alpha, alpha_r)?;

    let bench_path = dir.join(format!("benchmark_{}.csv", spec.name));
    let mut buf = Vec::new();
    write_benchmark_csv(&result, &mut buf)?;
    atomic_write(&bench_path, &buf)?;
    manifest.record_output(&bench_path);

    let summary_path = dir.join(format!("benchmark_{}_summary.csv", spec.name));
    let mut buf = Vec::new();
    write_summary_csv(&result, &mut buf)?;
    atomic_write(&summary_path, &buf)?;
    manifest.record_output(&summary_path);
    manifest.write(cfg, &dir)?;

    for s in &result.summary {
        println!(
            "{}: selected {} ({}), power {} ({}), FDR {} ({}), failures {}",
            s.method,
            s.n_selected_median,
            s.n_selected_mad,
            s.power_median,
            s.power_mad,
            s.fdr_median,
            s.fdr_mad,
            s.n_failed
        );
    }
    Ok(0)
}

fn method_display(name: &str) -> &str {
    match name {
        "eb_bonferroni" => "Bonferroni",
        "eb_bh" => "BH",
        "spike_slab" => "Spike-and-Slab",
        "spike_slab_copres" => "Spike-and-Slab with Co-prescription",
        other => other,
    }
}

/// Render the medians and MADs exactly as the summary CSV records them; no
/// numbers are recomputed or reformatted.
pub fn report(args: &ReportArgs, cfg: &mut RunConfig) -> Result<u8> {
    cfg.set_flag("summary", args.summary.as_ref().map(|p| p.display().to_string()));
    let dir = out_dir(cfg)?;
    let mut manifest = Manifest::start("report");
    let summary_path =
        cfg.get("summary").ok_or_else(|| anyhow!("report needs --summary"))?.to_string();
    let text = std::fs::read_to_string(&summary_path)
        .with_context(|| format!("reading {summary_path}"))?;

    let mut alpha = String::new();
    let mut alpha_r = String::new();
    let mut rows: Vec<Vec<String>> = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# alpha_r=") {
            alpha_r = rest.to_string();
        } else if let Some(rest) = line.strip_prefix("# alpha=") {
            alpha = rest.to_string();
        } else if !line.starts_with('#') && !line.starts_with("method,") && !line.is_empty() {
            rows.push(line.split(',').map(String::from).collect());
        }
    }

    let title = args
        .title
        .clone()
        .unwrap_or_else(|| format!("Benchmark results (targeted FDR <= {alpha})"));
    let mut md = String::new();
    md.push_str(&format!("# {title}\n\n"));
    md.push_str(&format!(
        "Baselines tested at alpha = {alpha}; Bayesian selection at alpha_R = {alpha_r}.\n\n"
    ));
    md.push_str("| Method | Number Selected | Power | FDR |\n");
    md.push_str("| --- | --- | --- | --- |\n");
    md.push_str("| | Median (MAD) | Median (MAD) | Median (MAD) |\n");
    for row in &rows {
        if row.len() < 9 {
            bail!("summary row has {} fields, expected 9", row.len());
        }
        md.push_str(&format!(
            "| {} | {} ({}) | {} ({}) | {} ({}) |\n",
            method_display(&row[0]),
            row[3],
            row[4],
            row[5],
            row[6],
            row[7],
            row[8],
        ));
    }
    let n_failed: Vec<&Vec<String>> = rows.iter().filter(|r| r[2] != "0").collect();
    if !n_failed.is_empty() {
        md.push('\n');
        for row in n_failed {
            md.push_str(&format!(
                "{} replicates of {} failed and are excluded from the medians.\n",
                row[2],
                method_display(&row[0])
            ));
        }
    }
    md.push_str(
        "\nThe empirical-Bayes comparator is a simplified stand-in (per-drug logistic fits with \
         zero-centered moment shrinkage), aimed at the qualitative ranking rather than the \
         original algorithm's exact numbers.\n",
    );

    let report_path = dir.join("report.md");
    atomic_write(&report_path, md.as_bytes())?;
    manifest.record_output(&report_path);
    manifest.write(cfg, &dir)?;
    println!("report: wrote {}", report_path.display());
    Ok(0)
}
