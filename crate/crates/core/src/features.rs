//! Content factors from per-song descriptors: standardization, PCA,
//! oblimin rotation and regression scoring.
//!
//! Loadings follow the correlation convention: for standardized inputs,
//! entry `(j, k)` of an unrotated loading matrix is the correlation between
//! feature `j` and component `k`. All variances use the population (divide
//! by `n`) convention.

use std::io::{BufRead, Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfile::MatrixData;

/// Raw descriptor table, one row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    item_ids: Vec<String>,
    feature_names: Vec<String>,
    values: DMatrix<f64>,
}

impl FeatureTable {
    pub fn new(
        item_ids: Vec<String>,
        feature_names: Vec<String>,
        values: DMatrix<f64>,
    ) -> Result<Self> {
        if values.nrows() != item_ids.len() || values.ncols() != feature_names.len() {
            return Err(Error::Shape(format!(
                "{} items x {} features but values are {}x{}",
                item_ids.len(),
                feature_names.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(Error::Data(format!(
                "missing or non-finite value for item {} feature {}",
                item_ids[r], feature_names[c]
            )));
        }
        Ok(FeatureTable {
            item_ids,
            feature_names,
            values,
        })
    }

    /// Reads a header line of feature names (optionally preceded by an id
    /// column label) followed by `item_id, v1, ..., vF` rows. Comma or tab
    /// separated.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "missing header line"))?;
        let header = header?;
        let sep = if header.contains('\t') { '\t' } else { ',' };
        let header: Vec<String> = header.split(sep).map(|s| s.trim().to_string()).collect();

        let mut item_ids = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut n_features = None;
        for (k, line) in lines {
            let lineno = k + 1;
            let line = line?;
            let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
            let f = *n_features.get_or_insert(fields.len().saturating_sub(1));
            if fields.len() != f + 1 || f == 0 {
                return Err(Error::parse(
                    lineno,
                    format!("expected {} fields, found {}", f + 1, fields.len()),
                ));
            }
            let row = fields[1..]
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::parse(lineno, format!("bad value `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            item_ids.push(fields[0].to_string());
            rows.push(row);
        }
        let f = n_features.unwrap_or(header.len());
        let names = match header.len() {
            n if n == f => header,
            n if n == f + 1 => header[1..].to_vec(),
            n => {
                return Err(Error::parse(
                    1,
                    format!("header has {n} names for {f} feature columns"),
                ))
            }
        };
        let values = DMatrix::from_fn(rows.len(), f, |r, c| rows[r][c]);
        let mut seen = std::collections::HashSet::new();
        for id in &item_ids {
            if !seen.insert(id) {
                return Err(Error::Data(format!("item `{id}` appears twice")));
            }
        }
        FeatureTable::new(item_ids, names, values)
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Rows for the given items, in the given order. Items without a row are
    /// rejected.
    pub fn select<S: AsRef<str>>(&self, ids: &[S]) -> Result<DMatrix<f64>> {
        let index: std::collections::HashMap<&str, usize> = self
            .item_ids
            .iter()
            .enumerate()
            .map(|(k, id)| (id.as_str(), k))
            .collect();
        let rows = ids
            .iter()
            .map(|id| {
                index.get(id.as_ref()).copied().ok_or_else(|| {
                    Error::Data(format!("item `{}` has no feature row", id.as_ref()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.values.select_rows(rows.iter()))
    }
}

/// Per-feature training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.means.len() {
            return Err(Error::Shape(format!(
                "{} feature columns, statistics cover {}",
                x.ncols(),
                self.means.len()
            )));
        }
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.means[j]) / self.stds[j]);
        }
        Ok(out)
    }
}

/// Scales every column to zero mean and unit population variance.
pub fn standardize<S: AsRef<str>>(
    x: &DMatrix<f64>,
    feature_names: &[S],
) -> Result<(DMatrix<f64>, Standardization)> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Shape("no rows to standardize".into()));
    }
    let mut means = Vec::with_capacity(x.ncols());
    let mut stds = Vec::with_capacity(x.ncols());
    for (j, col) in x.column_iter().enumerate() {
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std.is_nan() || std <= 1e-12 * mean.abs().max(1.0) {
            let name = feature_names
                .get(j)
                .map_or_else(|| format!("#{j}"), |s| s.as_ref().to_string());
            return Err(Error::DegenerateFeature(name));
        }
        means.push(mean);
        stds.push(std);
    }
    let stats = Standardization { means, stds };
    let xs = stats.apply(x)?;
    Ok((xs, stats))
}

/// Column-wise population correlation matrix of a centred matrix.
fn covariance(xc: &DMatrix<f64>) -> DMatrix<f64> {
    let n = xc.nrows() as f64;
    let mut c = xc.tr_mul(xc) / n;
    // exact symmetry for the eigen solver
    c = (&c + c.transpose()) * 0.5;
    c
}

fn center(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut xc = x.clone();
    for mut col in xc.column_iter_mut() {
        let m = col.sum() / n;
        col.add_scalar_mut(-m);
    }
    xc
}

/// Eigen-decomposition sorted by decreasing eigenvalue, each eigenvector
/// signed so that its largest-magnitude entry is positive.
fn sorted_eigen(c: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = eig.eigenvectors.select_columns(order.iter());
    for mut col in vectors.column_iter_mut() {
        if col[col.iamax()] < 0.0 {
            col.neg_mut();
        }
    }
    (values, vectors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// Features x components, correlation-scaled.
    pub loadings: DMatrix<f64>,
    /// Items x components, unit-variance component scores.
    pub scores: DMatrix<f64>,
    /// Variance of every principal component (all of them, not only the
    /// retained ones), non-increasing.
    pub explained_variance: Vec<f64>,
}

/// Principal components of `x_std`. Loadings are the unit eigenvectors of
/// the feature covariance scaled by the square roots of their eigenvalues;
/// scores are `X V D^{-1/2}` so that `scores * loadings^T` reconstructs the
/// data when every component is kept.
pub fn pca(x_std: &DMatrix<f64>, n_components: usize) -> Result<Pca> {
    let (n, f) = x_std.shape();
    if n_components == 0 || n_components > f || f > n {
        return Err(Error::Shape(format!(
            "need 1 <= components ({n_components}) <= features ({f}) <= items ({n})"
        )));
    }
    let xc = center(x_std);
    let (values, vectors) = sorted_eigen(covariance(&xc));
    let scale = values[0].abs().max(f64::MIN_POSITIVE);
    let rank = values.iter().filter(|&&v| v > 1e-10 * scale).count();
    if rank < n_components {
        return Err(Error::Rank {
            rank,
            requested: n_components,
        });
    }
    let axes = vectors.columns(0, n_components).into_owned();
    let mut loadings = axes.clone();
    let mut weights = axes;
    for (k, v) in values.iter().enumerate().take(n_components) {
        let s = v.sqrt();
        loadings.column_mut(k).scale_mut(s);
        weights.column_mut(k).scale_mut(1.0 / s);
    }
    let scores = &xc * weights;
    let explained_variance = values.iter().map(|v| v.max(0.0)).collect();
    Ok(Pca {
        loadings,
        scores,
        explained_variance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotationOptions {
    pub gamma: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for RotationOptions {
    fn default() -> Self {
        RotationOptions {
            gamma: 0.0,
            max_iter: 1000,
            tol: 1e-8,
        }
    }
}

/// Oblimin criterion `1/4 * sum(L^2 .* ((I - gamma/p) L^2 (11^T - I)))` and
/// its gradient with respect to `L`.
fn oblimin_value_grad(l: &DMatrix<f64>, gamma: f64) -> (f64, DMatrix<f64>) {
    let (p, k) = l.shape();
    let l2 = l.map(|v| v * v);
    let off = DMatrix::from_fn(k, k, |a, b| if a == b { 0.0 } else { 1.0 });
    let mut x = &l2 * off;
    if gamma != 0.0 {
        let col_means = DVector::from_fn(k, |c, _| x.column(c).sum() * gamma / p as f64);
        for (c, mut col) in x.column_iter_mut().enumerate() {
            col.add_scalar_mut(-col_means[c]);
        }
    }
    let value = l2.component_mul(&x).sum() / 4.0;
    let grad = l.component_mul(&x);
    (value, grad)
}

pub fn oblimin_criterion(loadings: &DMatrix<f64>, gamma: f64) -> f64 {
    oblimin_value_grad(loadings, gamma).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    /// Rotated pattern matrix `L (T^T)^{-1}`.
    pub pattern: DMatrix<f64>,
    /// Factor correlations `T^T T`.
    pub phi: DMatrix<f64>,
    /// Oblique transform with unit-norm columns.
    pub transform: DMatrix<f64>,
    pub criterion: f64,
    /// Criterion at the start and after every accepted step.
    pub criterion_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Oblique oblimin rotation by gradient projection, starting from the
/// identity. Steps are only accepted when they decrease the criterion.
pub fn oblimin_rotate(loadings: &DMatrix<f64>, opts: &RotationOptions) -> Result<Rotation> {
    oblimin_rotate_with(loadings, opts, |_, _, _| {})
}

/// As [`oblimin_rotate`], calling `observe(T, pattern, criterion)` at the
/// start and after every accepted step.
pub fn oblimin_rotate_with<F>(
    loadings: &DMatrix<f64>,
    opts: &RotationOptions,
    mut observe: F,
) -> Result<Rotation>
where
    F: FnMut(&DMatrix<f64>, &DMatrix<f64>, f64),
{
    let k = loadings.ncols();
    if k < 2 {
        return Err(Error::Shape("rotation needs at least two factors".into()));
    }
    let pattern_of = |t: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let inv = t.clone().try_inverse()?;
        Some(loadings * inv.transpose())
    };
    // d f / d T = -(T^{-1})^T Gq^T L  (chain rule through L T^{-T})
    let grad_t = |t: &DMatrix<f64>, l: &DMatrix<f64>, gq: &DMatrix<f64>| -> DMatrix<f64> {
        let inv = t.clone().try_inverse().expect("accepted T is invertible");
        -(inv.transpose() * gq.transpose() * l)
    };

    let mut t = DMatrix::<f64>::identity(k, k);
    let mut l = loadings.clone();
    let (mut f, gq) = oblimin_value_grad(&l, opts.gamma);
    let mut g = grad_t(&t, &l, &gq);
    let mut trace = vec![f];
    observe(&t, &l, f);

    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        // project onto the tangent space of the unit-column constraint
        let mut gp = g.clone();
        for c in 0..k {
            let d = t.column(c).dot(&g.column(c));
            let tc = t.column(c).into_owned();
            gp.column_mut(c).axpy(-d, &tc, 1.0);
        }
        let s = gp.norm();
        if s < opts.tol {
            converged = true;
            break;
        }
        step *= 2.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut x = &t - &gp * step;
            for mut col in x.column_iter_mut() {
                let norm = col.norm();
                col.scale_mut(1.0 / norm);
            }
            if let Some(lt) = pattern_of(&x) {
                let (ft, gqt) = oblimin_value_grad(&lt, opts.gamma);
                if f - ft > 0.5 * s * s * step {
                    accepted = Some((x, lt, ft, gqt));
                    break;
                }
            }
            step /= 2.0;
        }
        let Some((tt, lt, ft, gqt)) = accepted else {
            // no descent direction left at machine precision
            converged = s < opts.tol.sqrt();
            break;
        };
        iterations += 1;
        let decrease = f - ft;
        t = tt;
        l = lt;
        f = ft;
        g = grad_t(&t, &l, &gqt);
        trace.push(f);
        observe(&t, &l, f);
        if decrease < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("oblimin rotation stopped after {iterations} iterations without converging");
    }
    let phi = t.tr_mul(&t);
    Ok(Rotation {
        pattern: l,
        phi,
        transform: t,
        criterion: f,
        criterion_trace: trace,
        iterations,
        converged,
    })
}

/// Rotated factor solution plus the weights that score new items.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorResult {
    /// Features x factors pattern matrix.
    pub loadings: DMatrix<f64>,
    pub factor_correlation: DMatrix<f64>,
    /// Features x factors regression weights, `Z = X_std * W`.
    pub score_weights: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
    pub rotation_criterion: f64,
    pub gamma: f64,
    pub converged: bool,
}

impl FactorResult {
    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.loadings.nrows()
    }
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix.
fn pinv_symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.amax();
    let inv = eig
        .eigenvalues
        .map(|v| if v > 1e-12 * top { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// PCA with `n_components` components followed (for two or more) by an
/// oblimin rotation. Each factor is signed so that its largest-magnitude
/// loading is positive. Score weights are the regression weights
/// `R^+ * pattern * Phi`.
pub fn fit_factors(
    x_std: &DMatrix<f64>,
    n_components: usize,
    opts: &RotationOptions,
) -> Result<FactorResult> {
    let p = pca(x_std, n_components)?;
    let (mut pattern, mut t, criterion, converged) = if n_components >= 2 {
        let r = oblimin_rotate(&p.loadings, opts)?;
        (r.pattern, r.transform, r.criterion, r.converged)
    } else {
        (p.loadings.clone(), DMatrix::identity(1, 1), 0.0, true)
    };
    for c in 0..pattern.ncols() {
        let col = pattern.column(c);
        if col[col.iamax()] < 0.0 {
            pattern.column_mut(c).neg_mut();
            t.column_mut(c).neg_mut();
        }
    }
    let phi = t.tr_mul(&t);
    let r = covariance(&center(x_std));
    let score_weights = pinv_symmetric(&r) * &pattern * &phi;
    Ok(FactorResult {
        loadings: pattern,
        factor_correlation: phi,
        score_weights,
        explained_variance: p.explained_variance,
        rotation_criterion: criterion,
        gamma: opts.gamma,
        converged,
    })
}

/// Regression factor scores, one row per item.
pub fn factor_scores(x_std: &DMatrix<f64>, result: &FactorResult) -> Result<DMatrix<f64>> {
    if x_std.ncols() != result.n_features() {
        return Err(Error::Shape(format!(
            "{} features given, factor solution expects {}",
            x_std.ncols(),
            result.n_features()
        )));
    }
    Ok(x_std * &result.score_weights)
}

/// Population Pearson correlation of every feature with every factor.
pub fn correlation_report(x_std: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x_std.nrows();
    if n < 2 || z.nrows() != n {
        return Err(Error::Shape(format!(
            "need >= 2 matching rows, got {} and {}",
            n,
            z.nrows()
        )));
    }
    let xc = center(x_std);
    let zc = center(z);
    let x_sd: Vec<f64> = xc.column_iter().map(|c| c.norm()).collect();
    let mut z_sd = Vec::with_capacity(z.ncols());
    for (k, c) in zc.column_iter().enumerate() {
        let sd = c.norm();
        if sd.is_nan() || sd <= 1e-12 {
            return Err(Error::DegenerateFactor(k));
        }
        z_sd.push(sd);
    }
    let cross = xc.tr_mul(&zc);
    Ok(DMatrix::from_fn(x_std.ncols(), z.ncols(), |j, k| {
        if x_sd[j] > 0.0 {
            (cross[(j, k)] / (x_sd[j] * z_sd[k])).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    }))
}

/// Writes the correlation table as CSV, one row per feature.
pub fn write_correlation_report<W: Write, S: AsRef<str>>(
    mut out: W,
    feature_names: &[S],
    corr: &DMatrix<f64>,
) -> Result<()> {
    write!(out, "feature")?;
    for k in 0..corr.ncols() {
        write!(out, ",factor_{}", k + 1)?;
    }
    writeln!(out)?;
    for (j, name) in feature_names.iter().enumerate() {
        write!(out, "{}", name.as_ref())?;
        for k in 0..corr.ncols() {
            write!(out, ",{:.4}", corr[(j, k)])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Everything needed to score unseen items from raw descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorArtifact {
    pub feature_names: Vec<String>,
    pub standardization: Standardization,
    pub result: FactorResult,
    pub config_hash: String,
}

const ARTIFACT_FORMAT: &str = "avdrec-factors";
const ARTIFACT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArtifactFile {
    format: String,
    version: u32,
    feature_names: Vec<String>,
    means: Vec<f64>,
    stds: Vec<f64>,
    loadings: MatrixData,
    factor_correlation: MatrixData,
    score_weights: MatrixData,
    explained_variance: Vec<f64>,
    rotation_criterion: f64,
    gamma: f64,
    converged: bool,
    config_hash: String,
}

impl FactorArtifact {
    /// Standardizes raw rows with the stored statistics and scores them.
    pub fn score_raw(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        factor_scores(&self.standardization.apply(raw)?, &self.result)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let r = &self.result;
        let file = ArtifactFile {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            feature_names: self.feature_names.clone(),
            means: self.standardization.means.clone(),
            stds: self.standardization.stds.clone(),
            loadings: (&r.loadings).into(),
            factor_correlation: (&r.factor_correlation).into(),
            score_weights: (&r.score_weights).into(),
            explained_variance: r.explained_variance.clone(),
            rotation_criterion: r.rotation_criterion,
            gamma: r.gamma,
            converged: r.converged,
            config_hash: self.config_hash.clone(),
        };
        serde_json::to_writer_pretty(out, &file)?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let f: ArtifactFile = serde_json::from_reader(input)?;
        if f.format != ARTIFACT_FORMAT || f.version != ARTIFACT_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported factor artifact {} v{}",
                f.format, f.version
            )));
        }
        let result = FactorResult {
            loadings: f.loadings.into_matrix()?,
            factor_correlation: f.factor_correlation.into_matrix()?,
            score_weights: f.score_weights.into_matrix()?,
            explained_variance: f.explained_variance,
            rotation_criterion: f.rotation_criterion,
            gamma: f.gamma,
            converged: f.converged,
        };
        let nf = f.feature_names.len();
        if f.means.len() != nf || f.stds.len() != nf || result.n_features() != nf {
            return Err(Error::Artifact("feature counts disagree".into()));
        }
        Ok(FactorArtifact {
            feature_names: f.feature_names,
            standardization: Standardization {
                means: f.means,
                stds: f.stds,
            },
            result,
            config_hash: f.config_hash,
        })
    }
}
