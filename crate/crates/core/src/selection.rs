//! Bayesian FDR/FNR decision theory: posterior expected error rates, the
//! optimal PIP threshold, and direction classification for selected drugs.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::sampler::DrugSummary;

/// Threshold reported for an empty selection; strictly above every PIP.
pub const EMPTY_SELECTION_THRESHOLD: f64 = 1.0 + 1e-9;

/// Posterior expected false discovery rate of the rule `select PIP >= t`:
/// `sum_i (1 - PIP_i) 1[PIP_i >= t] / max(R, 1)`.
pub fn expected_fdr(pips: &[f64], t: f64) -> f64 {
    let mut loss = 0.0;
    let mut selected = 0usize;
    for &p in pips {
        if p >= t {
            loss += 1.0 - p;
            selected += 1;
        }
    }
    loss / (selected.max(1) as f64)
}

/// Posterior expected false non-discovery rate of the same rule:
/// `sum_i PIP_i 1[PIP_i < t] / max(N - R, 1)`.
pub fn expected_fnr(pips: &[f64], t: f64) -> f64 {
    let mut loss = 0.0;
    let mut selected = 0usize;
    for &p in pips {
        if p >= t {
            selected += 1;
        } else {
            loss += p;
        }
    }
    loss / ((pips.len() - selected).max(1) as f64)
}

/// Direction of a selected drug's association.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Increased,
    Decreased,
    /// Posterior mean odds ratio exactly 1; not observed in practice.
    Indeterminate,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Increased => "increased",
            Direction::Decreased => "decreased",
            Direction::Indeterminate => "indeterminate",
        })
    }
}

/// Classify by the posterior mean adjusted odds ratio.
pub fn classify_direction(or_mean: f64) -> Direction {
    if or_mean > 1.0 {
        Direction::Increased
    } else if or_mean < 1.0 {
        Direction::Decreased
    } else {
        Direction::Indeterminate
    }
}

/// Outcome of the threshold optimization.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub threshold: f64,
    /// Indices with PIP at or above the threshold, ascending.
    pub selected: Vec<usize>,
    pub expected_fdr: f64,
    pub expected_fnr: f64,
    pub alpha_r: f64,
    /// False when no nonempty selection satisfied the FDR constraint and
    /// the empty selection was returned.
    pub feasible: bool,
}

/// One evaluated candidate threshold, for the threshold-curve export.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub n_selected: usize,
    pub expected_fdr: f64,
    pub expected_fnr: f64,
}

/// Evaluate both error rates at every distinct PIP value plus the
/// empty-selection threshold, ascending.
pub fn threshold_curve(pips: &[f64]) -> Vec<ThresholdPoint> {
    let mut candidates: Vec<f64> = pips.to_vec();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    candidates.push(EMPTY_SELECTION_THRESHOLD);
    candidates
        .into_iter()
        .map(|t| ThresholdPoint {
            threshold: t,
            n_selected: pips.iter().filter(|&&p| p >= t).count(),
            expected_fdr: expected_fdr(pips, t),
            expected_fnr: expected_fnr(pips, t),
        })
        .collect()
}

/// Find the PIP threshold minimizing expected FNR subject to
/// `expected FDR <= alpha_r`.
///
/// Both rates are step functions changing only at observed PIP values, so
/// the grid of distinct PIPs is searched exactly. Ties in FNR break toward
/// the smaller threshold (the larger selected set). When no nonempty
/// selection is feasible the empty selection is returned with
/// `feasible = false`.
pub fn optimal_threshold(pips: &[f64], alpha_r: f64) -> Result<SelectionResult> {
    if !(alpha_r > 0.0 && alpha_r <= 1.0) {
        return Err(Error::Domain(format!(
            "alpha_r must lie in (0, 1], got {alpha_r}"
        )));
    }
    if pips.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Domain("PIPs must lie in [0, 1]".into()));
    }
    let mut best: Option<ThresholdPoint> = None;
    for point in threshold_curve(pips) {
        if point.n_selected == 0 || point.expected_fdr > alpha_r {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => point.expected_fnr < b.expected_fnr,
        };
        if better {
            best = Some(point);
        }
    }
    let result = match best {
        Some(p) => SelectionResult {
            threshold: p.threshold,
            selected: select_at(pips, p.threshold),
            expected_fdr: p.expected_fdr,
            expected_fnr: p.expected_fnr,
            alpha_r,
            feasible: true,
        },
        None => SelectionResult {
            threshold: EMPTY_SELECTION_THRESHOLD,
            selected: Vec::new(),
            expected_fdr: 0.0,
            expected_fnr: expected_fnr(pips, EMPTY_SELECTION_THRESHOLD),
            alpha_r,
            feasible: false,
        },
    };
    Ok(result)
}

fn select_at(pips: &[f64], t: f64) -> Vec<usize> {
    pips.iter()
        .enumerate()
        .filter(|(_, &p)| p >= t)
        .map(|(i, _)| i)
        .collect()
}

/// Write the selection report CSV: one row per drug with its PIP, posterior
/// mean adjusted odds ratio, credible interval, selection flag and
/// direction. The threshold and target rate sit in `#` header comments.
pub fn write_selection_report(
    method: &str,
    labels: &[String],
    summaries: &[DrugSummary],
    result: &SelectionResult,
    mut out: impl Write,
) -> Result<()> {
    if labels.len() != summaries.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} summaries",
            labels.len(),
            summaries.len()
        )));
    }
    writeln!(out, "# method={method}")?;
    writeln!(out, "# alpha_r={}", result.alpha_r)?;
    writeln!(out, "# threshold={}", result.threshold)?;
    writeln!(out, "# expected_fdr={}", result.expected_fdr)?;
    writeln!(out, "# expected_fnr={}", result.expected_fnr)?;
    writeln!(out, "# feasible={}", result.feasible)?;
    writeln!(out, "method,drug,pip,or_mean,cri_low,cri_high,selected,direction")?;
    let selected: std::collections::HashSet<usize> = result.selected.iter().copied().collect();
    for (i, s) in summaries.iter().enumerate() {
        let is_selected = selected.contains(&i);
        let direction = if is_selected {
            classify_direction(s.or_mean).to_string()
        } else {
            String::new()
        };
        writeln!(
            out,
            "{method},{},{},{},{},{},{},{direction}",
            labels[i], s.pip, s.or_mean, s.or_lo, s.or_hi, is_selected as u8,
        )?;
    }
    Ok(())
}

/// Write the FDR-vs-threshold curve as plot-ready CSV.
pub fn write_threshold_curve(pips: &[f64], mut out: impl Write) -> Result<()> {
    writeln!(out, "threshold,n_selected,expected_fdr,expected_fnr")?;
    for p in threshold_curve(pips) {
        writeln!(
            out,
            "{},{},{},{}",
            p.threshold, p.n_selected, p.expected_fdr, p.expected_fnr
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn fdr_examples() {
        assert_eq!(expected_fdr(&[1.0, 1.0, 1.0], 0.7), 0.0);
        assert_relative_eq!(expected_fdr(&[0.9, 0.8], 0.5), 0.15);
        assert_eq!(expected_fdr(&[0.9, 0.8], 0.95), 0.0);
    }

    #[test]
    fn fnr_examples() {
        assert_eq!(expected_fnr(&[0.4, 0.7], 0.0), 0.0);
        assert_relative_eq!(expected_fnr(&[0.9, 0.1], 0.5), 0.1);
        assert_eq!(expected_fnr(&[0.0, 0.0], 1.0), 0.0);
    }

    #[test]
    fn worked_example_selects_top_three() {
        let pips = [0.99, 0.98, 0.9, 0.5, 0.1];
        let r = optimal_threshold(&pips, 0.05).unwrap();
        assert!(r.feasible);
        assert_eq!(r.selected, vec![0, 1, 2]);
        assert_relative_eq!(r.threshold, 0.9);
        assert_relative_eq!(r.expected_fdr, (0.01 + 0.02 + 0.1) / 3.0);
        assert_relative_eq!(r.expected_fnr, (0.5 + 0.1) / 2.0);
    }

    #[test]
    fn alpha_one_selects_everything() {
        let pips = [0.7, 0.2, 0.05];
        let r = optimal_threshold(&pips, 1.0).unwrap();
        assert_eq!(r.selected, vec![0, 1, 2]);
        assert_eq!(r.expected_fnr, 0.0);
    }

    #[test]
    fn infeasible_returns_empty_with_flag() {
        let pips = [0.5, 0.4, 0.3];
        let r = optimal_threshold(&pips, 0.01).unwrap();
        assert!(!r.feasible);
        assert!(r.selected.is_empty());
        assert!(r.threshold > 1.0);
        assert_eq!(r.expected_fdr, 0.0);
    }

    #[test]
    fn direction_classification() {
        assert_eq!(classify_direction(1.664), Direction::Increased);
        assert_eq!(classify_direction(0.353), Direction::Decreased);
        assert_eq!(classify_direction(1.0), Direction::Indeterminate);
    }

    #[test]
    fn alpha_domain_enforced() {
        assert!(optimal_threshold(&[0.5], 0.0).is_err());
        assert!(optimal_threshold(&[0.5], 1.5).is_err());
        assert!(optimal_threshold(&[1.5], 0.5).is_err());
    }

    /// Independent brute force: re-derive the rates from scratch at every
    /// distinct PIP and pick the feasible minimum-FNR threshold by scan.
    fn brute_force(pips: &[f64], alpha_r: f64) -> (Vec<usize>, f64) {
        let mut thresholds: Vec<f64> = pips.to_vec();
        thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        thresholds.dedup();
        let mut best: Option<(f64, f64)> = None; // (threshold, fnr)
        for &t in &thresholds {
            let sel: Vec<usize> = (0..pips.len()).filter(|&i| pips[i] >= t).collect();
            if sel.is_empty() {
                continue;
            }
            let fdr = sel.iter().map(|&i| 1.0 - pips[i]).sum::<f64>() / sel.len() as f64;
            if fdr > alpha_r {
                continue;
            }
            let unsel: Vec<usize> = (0..pips.len()).filter(|&i| pips[i] < t).collect();
            let fnr = if unsel.is_empty() {
                0.0
            } else {
                unsel.iter().map(|&i| pips[i]).sum::<f64>() / unsel.len() as f64
            };
            match best {
                None => best = Some((t, fnr)),
                Some((_, bf)) if fnr < bf => best = Some((t, fnr)),
                _ => {}
            }
        }
        match best {
            Some((t, fnr)) => ((0..pips.len()).filter(|&i| pips[i] >= t).collect(), fnr),
            None => (Vec::new(), f64::NAN),
        }
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pips in proptest::collection::vec(0.0f64..=1.0, 1..60),
            alpha in 0.005f64..0.9,
        ) {
            let r = optimal_threshold(&pips, alpha).unwrap();
            let (bf_sel, bf_fnr) = brute_force(&pips, alpha);
            prop_assert_eq!(&r.selected, &bf_sel);
            if r.feasible {
                prop_assert!((r.expected_fnr - bf_fnr).abs() < 1e-12);
            }
        }

        #[test]
        fn rates_are_monotone_on_the_grid(
            pips in proptest::collection::vec(0.0f64..=1.0, 2..40),
        ) {
            let curve = threshold_curve(&pips);
            let nonempty: Vec<_> = curve.iter().filter(|p| p.n_selected > 0).collect();
            for w in nonempty.windows(2) {
                prop_assert!(w[1].expected_fdr <= w[0].expected_fdr + 1e-12);
            }
            for w in curve.windows(2) {
                prop_assert!(w[1].expected_fnr >= w[0].expected_fnr - 1e-12);
            }
        }
    }

    // The paper never claims this monotonicity, so violations are printed
    // for inspection rather than failed.
    #[test]
    fn raising_a_pip_rarely_deselects_it() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        let mut violations = 0;
        let trials = 500;
        for trial in 0..trials {
            let n = rng.gen_range(3..30);
            let mut pips: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let alpha = rng.gen_range(0.02..0.3);
            let before = optimal_threshold(&pips, alpha).unwrap();
            let i = rng.gen_range(0..n);
            if !before.selected.contains(&i) {
                continue;
            }
            pips[i] = (pips[i] + rng.gen::<f64>() * (1.0 - pips[i])).min(1.0);
            let after = optimal_threshold(&pips, alpha).unwrap();
            if !after.selected.contains(&i) {
                violations += 1;
                println!(
                    "monotonicity counterexample (trial {trial}): pips={pips:?}, \
                     alpha={alpha}, raised index {i}"
                );
            }
        }
        println!("selection monotonicity: {violations}/{trials} violations logged");
    }
}
