//! Drug-level covariance from co-prescription counts.
//!
//! Pairwise co-use counts are turned into a correlation-like matrix by one
//! of three methods (conditional-probability similarity, Pearson correlation
//! of the binary indicators, or a cosine approximation to the tetrachoric
//! correlation), then repaired to positive definiteness by eigenvalue
//! clipping with unit-diagonal rescaling.

use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Pairwise co-prescription counts for N drugs.
///
/// `counts[(i, i)]` is the number of patients on drug i, `counts[(i, j)]`
/// the number on both i and j, out of `n_total` patients overall.
#[derive(Debug, Clone)]
pub struct CoprescriptionTable {
    n_total: u64,
    labels: Vec<String>,
    counts: DMatrix<u64>,
}

impl CoprescriptionTable {
    pub fn new(n_total: u64, labels: Vec<String>, counts: DMatrix<u64>) -> Result<Self> {
        let n = labels.len();
        if counts.nrows() != n || counts.ncols() != n {
            return Err(Error::Dimension(format!(
                "count matrix is {}x{} but there are {} labels",
                counts.nrows(),
                counts.ncols(),
                n
            )));
        }
        for i in 0..n {
            if counts[(i, i)] > n_total {
                return Err(Error::Validation(format!(
                    "drug {} count {} exceeds n_total {}",
                    labels[i],
                    counts[(i, i)],
                    n_total
                )));
            }
            for j in (i + 1)..n {
                if counts[(i, j)] != counts[(j, i)] {
                    return Err(Error::Validation(format!(
                        "count matrix not symmetric at ({i}, {j})"
                    )));
                }
                let (nij, ni, nj) = (counts[(i, j)], counts[(i, i)], counts[(j, j)]);
                if nij > ni.min(nj) {
                    return Err(Error::Validation(format!(
                        "pair count {} for ({}, {}) exceeds a marginal count",
                        nij, labels[i], labels[j]
                    )));
                }
                if ni + nj - nij > n_total {
                    return Err(Error::Validation(format!(
                        "union of ({}, {}) exceeds n_total {}",
                        labels[i], labels[j], n_total
                    )));
                }
            }
        }
        Ok(CoprescriptionTable { n_total, labels, counts })
    }

    pub fn n_drugs(&self) -> usize {
        self.labels.len()
    }

    pub fn n_total(&self) -> u64 {
        self.n_total
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn counts(&self) -> &DMatrix<u64> {
        &self.counts
    }

    /// 2x2 cells (a, b, c, d) for a drug pair: both, i only, j only, neither.
    pub fn cells(&self, i: usize, j: usize) -> (u64, u64, u64, u64) {
        let nij = self.counts[(i, j)];
        let ni = self.counts[(i, i)];
        let nj = self.counts[(j, j)];
        (nij, ni - nij, nj - nij, self.n_total - ni - nj + nij)
    }

    /// Read a square labeled count matrix: header row of labels, each data
    /// row starting with its label. `n_total` is supplied separately.
    pub fn from_csv(path: impl AsRef<Path>, n_total: u64) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let labels: Vec<String> = reader.headers()?.iter().skip(1).map(String::from).collect();
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyInput(format!("{}: no drug columns", path.display())));
        }
        let mut counts = DMatrix::<u64>::zeros(n, n);
        let mut rows_seen = 0;
        for (i, row) in reader.records().enumerate() {
            let line = i + 2;
            let loc = format!("{}:{line}", path.display());
            let row = row?;
            if i >= n {
                return Err(Error::parse(loc, "more rows than header columns".to_string()));
            }
            if row.len() != n + 1 {
                return Err(Error::parse(
                    loc,
                    format!("expected {} fields, got {}", n + 1, row.len()),
                ));
            }
            if row[0] != labels[i] {
                return Err(Error::parse(
                    loc,
                    format!("row label `{}` does not match header `{}`", &row[0], labels[i]),
                ));
            }
            for j in 0..n {
                counts[(i, j)] = row[j + 1].parse().map_err(|_| {
                    Error::parse(loc.clone(), format!("count `{}` is not an integer", &row[j + 1]))
                })?;
            }
            rows_seen += 1;
        }
        if rows_seen != n {
            return Err(Error::parse(
                path.display().to_string(),
                format!("expected {n} data rows, got {rows_seen}"),
            ));
        }
        CoprescriptionTable::new(n_total, labels, counts)
    }
}

/// Method used to convert pairwise counts into correlations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMethod {
    Conditional,
    Pearson,
    Tetrachoric,
    Identity,
    /// Constructed directly (simulation scenarios), not from counts.
    Synthetic,
}

impl SigmaMethod {
    /// Parse a user-facing method name; the synthetic variant is internal
    /// and not accepted here.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conditional" => Ok(SigmaMethod::Conditional),
            "pearson" => Ok(SigmaMethod::Pearson),
            "tetrachoric" => Ok(SigmaMethod::Tetrachoric),
            "identity" => Ok(SigmaMethod::Identity),
            other => Err(Error::Validation(format!("unknown sigma method `{other}`"))),
        }
    }
}

impl fmt::Display for SigmaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SigmaMethod::Conditional => "conditional",
            SigmaMethod::Pearson => "pearson",
            SigmaMethod::Tetrachoric => "tetrachoric",
            SigmaMethod::Identity => "identity",
            SigmaMethod::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

/// The drug-level correlation matrix used by the hierarchical prior.
#[derive(Debug, Clone)]
pub struct DrugCovariance {
    pub matrix: DMatrix<f64>,
    pub method: SigmaMethod,
    /// Whether positive-definiteness repair changed the raw matrix.
    pub repaired: bool,
}

impl DrugCovariance {
    pub fn identity(n: usize) -> Self {
        DrugCovariance {
            matrix: DMatrix::identity(n, n),
            method: SigmaMethod::Identity,
            repaired: false,
        }
    }

    pub fn n_drugs(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_identity(&self) -> bool {
        let n = self.matrix.nrows();
        (0..n).all(|i| (0..n).all(|j| self.matrix[(i, j)] == if i == j { 1.0 } else { 0.0 }))
    }

    /// Write as a labeled dense CSV with 17 significant digits.
    pub fn write_csv(&self, labels: &[String], mut out: impl Write) -> Result<()> {
        let n = self.matrix.nrows();
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for a {n}x{n} matrix",
                labels.len()
            )));
        }
        writeln!(out, "drug,{}", labels.join(","))?;
        for i in 0..n {
            write!(out, "{}", labels[i])?;
            for j in 0..n {
                write!(out, ",{:.16e}", self.matrix[(i, j)])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Read a labeled dense correlation matrix written by [`DrugCovariance::write_csv`].
pub fn read_sigma_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, DMatrix<f64>)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let labels: Vec<String> = reader.headers()?.iter().skip(1).map(String::from).collect();
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyInput(format!("{}: no columns", path.display())));
    }
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut rows = 0;
    for (i, row) in reader.records().enumerate() {
        let loc = format!("{}:{}", path.display(), i + 2);
        let row = row?;
        if i >= n || row.len() != n + 1 {
            return Err(Error::parse(loc, "matrix shape does not match header".to_string()));
        }
        for j in 0..n {
            m[(i, j)] = row[j + 1]
                .parse()
                .map_err(|_| Error::parse(loc.clone(), format!("bad number `{}`", &row[j + 1])))?;
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected {n} rows, got {rows}"),
        ));
    }
    Ok((labels, m))
}

/// Symmetrized conditional-probability similarity: the average of
/// P(B | A) and P(A | B). Lies in [0, 1].
pub fn conditional_similarity(n_ab: u64, n_a: u64, n_b: u64) -> Result<f64> {
    if n_a == 0 || n_b == 0 {
        return Err(Error::UndefinedSimilarity(format!(
            "conditional similarity needs positive marginals (n_a={n_a}, n_b={n_b})"
        )));
    }
    if n_ab > n_a.min(n_b) {
        return Err(Error::Validation(format!(
            "pair count {n_ab} exceeds a marginal (n_a={n_a}, n_b={n_b})"
        )));
    }
    Ok(0.5 * (n_ab as f64 / n_a as f64 + n_ab as f64 / n_b as f64))
}

/// Pearson correlation of the two binary prescription indicators.
pub fn pearson_binary(n: u64, n_a: u64, n_b: u64, n_ab: u64) -> Result<f64> {
    if n_a == 0 || n_a == n || n_b == 0 || n_b == n {
        return Err(Error::UndefinedSimilarity(format!(
            "Pearson correlation undefined for degenerate marginals \
             (n={n}, n_a={n_a}, n_b={n_b})"
        )));
    }
    let n = n as f64;
    let pa = n_a as f64 / n;
    let pb = n_b as f64 / n;
    let pab = n_ab as f64 / n;
    Ok((pab - pa * pb) / (pa * (1.0 - pa) * pb * (1.0 - pb)).sqrt())
}

/// Cosine approximation to the tetrachoric correlation of a 2x2 table.
///
/// `rho ~ cos(pi / (1 + sqrt(ad / bc)))`, extended to zero cells by its
/// limits: +1 when bc = 0 with ad > 0, -1 when ad = 0 with bc > 0, and 0
/// when both products vanish.
pub fn tetrachoric_approx(a: f64, b: f64, c: f64, d: f64) -> f64 {
    debug_assert!(a >= 0.0 && b >= 0.0 && c >= 0.0 && d >= 0.0);
    let ad = a * d;
    let bc = b * c;
    if bc == 0.0 && ad == 0.0 {
        return 0.0;
    }
    if bc == 0.0 {
        return 1.0;
    }
    if ad == 0.0 {
        return -1.0;
    }
    (std::f64::consts::PI / (1.0 + (ad / bc).sqrt())).cos()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues
        .iter()
        .copied()
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.min(x))))
        .ok_or_else(|| Error::EmptyInput("empty matrix".into()))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

fn rescale_unit_diagonal(m: &mut DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    let mut scale = vec![0.0; n];
    for i in 0..n {
        let d = m[(i, i)];
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Numeric(format!("nonpositive diagonal entry {d} at {i}")));
        }
        scale[i] = 1.0 / d.sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] *= scale[i] * scale[j];
        }
        m[(i, i)] = 1.0;
    }
    Ok(())
}

/// Nearest (in the eigenvalue-clipping sense) symmetric positive definite
/// correlation matrix.
///
/// Symmetrizes, clips eigenvalues below `eps_pd` up to `eps_pd`, rescales to
/// unit diagonal, and iterates the pair to a fixed point so the operation is
/// idempotent. Returns the repaired matrix and whether anything changed.
pub fn nearest_pd(m: &DMatrix<f64>, eps_pd: f64) -> Result<(DMatrix<f64>, bool)> {
    if eps_pd <= 0.0 {
        return Err(Error::Domain(format!("eps_pd must be positive, got {eps_pd}")));
    }
    if m.nrows() == 0 {
        return Err(Error::EmptyInput("nearest_pd on an empty matrix".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let mut a = symmetrize(m);
    let mut changed = false;
    // Rescaling after a clip can push the smallest eigenvalue slightly back
    // under eps_pd; iterating converges in a handful of passes and the fixed
    // point is what makes a second nearest_pd call a no-op.
    for _ in 0..200 {
        let eig = SymmetricEigen::new(a.clone());
        let min = eig.eigenvalues.min();
        if min >= eps_pd * (1.0 - 1e-9) {
            return Ok((a, changed));
        }
        changed = true;
        let clipped = eig.eigenvalues.map(|x| x.max(eps_pd));
        let v = &eig.eigenvectors;
        a = v * DMatrix::from_diagonal(&clipped) * v.transpose();
        a = symmetrize(&a);
        rescale_unit_diagonal(&mut a)?;
    }
    // The loop converges geometrically; reaching here still guarantees the
    // documented floor because the last pass clipped to eps_pd before the
    // mild rescale.
    let min = min_eigenvalue(&a)?;
    if min >= eps_pd * 0.5 {
        Ok((a, changed))
    } else {
        Err(Error::Numeric(format!(
            "positive-definiteness repair did not converge (min eigenvalue {min:e})"
        )))
    }
}

/// Build the drug covariance from a co-prescription table.
///
/// Applies the pairwise method to every off-diagonal pair, forces a unit
/// diagonal, maps undefined pairs to 0 (prior independence), and repairs to
/// positive definiteness when any eigenvalue falls below `eps_pd`.
pub fn build_sigma_d(
    table: &CoprescriptionTable,
    method: SigmaMethod,
    eps_pd: f64,
) -> Result<DrugCovariance> {
    let n = table.n_drugs();
    if n == 0 {
        return Err(Error::EmptyInput("co-prescription table has no drugs".into()));
    }
    if eps_pd <= 0.0 {
        return Err(Error::Domain(format!("eps_pd must be positive, got {eps_pd}")));
    }
    if method == SigmaMethod::Identity {
        return Ok(DrugCovariance::identity(n));
    }
    if method == SigmaMethod::Synthetic {
        return Err(Error::Validation(
            "synthetic covariances are built by the simulation layer, not from counts".into(),
        ));
    }
    let mut m = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b, c, d) = table.cells(i, j);
            let value = match method {
                SigmaMethod::Conditional => {
                    conditional_similarity(a, table.counts[(i, i)], table.counts[(j, j)])
                        .unwrap_or(0.0)
                }
                SigmaMethod::Pearson => {
                    pearson_binary(table.n_total, table.counts[(i, i)], table.counts[(j, j)], a)
                        .unwrap_or(0.0)
                }
                SigmaMethod::Tetrachoric => {
                    tetrachoric_approx(a as f64, b as f64, c as f64, d as f64)
                }
                SigmaMethod::Identity | SigmaMethod::Synthetic => unreachable!(),
            };
            m[(i, j)] = value;
            m[(j, i)] = value;
        }
    }
    let needs_repair = min_eigenvalue(&m)? < eps_pd;
    let (matrix, repaired) = if needs_repair { nearest_pd(&m, eps_pd)? } else { (m, false) };
    Ok(DrugCovariance { matrix, method, repaired })
}
