//! Weighted matrix factorization for implicit feedback.
//!
//! The model minimizes
//!
//! ```text
//! sum_{u,i} c_ui (r_ui - w_u^T h_i)^2 + lambda_W sum_u |w_u|^2 + lambda_H sum_i |h_i - B z_i|^2
//! ```
//!
//! over user factors `W` (K x U), item factors `H` (K x I) and, in the
//! content-aware variant, the content map `B` (K x L). The data term runs over
//! every user and every training item: pairs without an observation count
//! as `r = 0` with the base confidence. Each block has a closed-form
//! minimizer, so alternating them never increases the objective.
//!
//! Matrices store one entity per column (`w_u = W[:, u]`), and content
//! features are passed the same way, `Z` being L x I.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{InteractionSet, SplitLabel};
use crate::matfile::MatrixData;

/// Standard deviation of the Gaussian factor initialization.
pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Latent rank K.
    pub rank: usize,
    pub lambda_w: f64,
    pub lambda_h: f64,
    /// Diagonal offset of the content-map solve.
    pub lambda_b: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub n_iters: usize,
    /// Added to every confidence, including unobserved pairs.
    pub base_confidence: f64,
    /// Raw entries below the binarization threshold enter training as
    /// `r = 0` with their playcount confidence.
    pub sub_threshold_confidence: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            rank: 50,
            lambda_w: 1.0,
            lambda_h: 1.0,
            lambda_b: 1e-2,
            alpha: 2.0,
            epsilon: 1e-6,
            n_iters: 20,
            base_confidence: 0.0,
            sub_threshold_confidence: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.epsilon > 0.0) {
            return bad(format!(
                "alpha ({}) and epsilon ({}) must be positive",
                self.alpha, self.epsilon
            ));
        }
        for (name, v) in [
            ("lambda_w", self.lambda_w),
            ("lambda_h", self.lambda_h),
            ("lambda_b", self.lambda_b),
            ("base_confidence", self.base_confidence),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn confidence(&self, playcount: u64) -> f64 {
        confidence(
            playcount as f64,
            self.alpha,
            self.epsilon,
            self.base_confidence,
        )
    }
}

/// `base + alpha * ln(1 + y / epsilon)`.
pub fn confidence(y: f64, alpha: f64, epsilon: f64, base: f64) -> f64 {
    base + alpha * (y / epsilon).ln_1p()
}

/// One explicitly stored entry of the training matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Item index in a user row, user index in an item column.
    pub index: usize,
    pub r: f64,
    pub c: f64,
}

/// Training matrix in the full-matrix convention: every (user, active item)
/// pair not listed explicitly has `r = 0` and confidence `base`. Inactive
/// items (the held-out songs) take no part in training.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    n_users: usize,
    n_items: usize,
    base: f64,
    active: Vec<bool>,
    by_user: Vec<Vec<Observation>>,
    by_item: Vec<Vec<Observation>>,
}

impl Feedback {
    /// Builds from `(user, item, r, c)` tuples. Pairs must be unique and lie
    /// on active items.
    pub fn new(
        n_users: usize,
        n_items: usize,
        active: Vec<bool>,
        base: f64,
        entries: impl IntoIterator<Item = (usize, usize, f64, f64)>,
    ) -> Result<Self> {
        if active.len() != n_items {
            return Err(Error::Shape(
                "active mask length differs from item count".into(),
            ));
        }
        let mut by_user = vec![Vec::new(); n_users];
        let mut by_item = vec![Vec::new(); n_items];
        for (u, i, r, c) in entries {
            if u >= n_users || i >= n_items {
                return Err(Error::Index(format!(
                    "({u}, {i}) outside {n_users}x{n_items}"
                )));
            }
            if !active[i] {
                return Err(Error::Data(format!(
                    "observation ({u}, {i}) on an inactive item"
                )));
            }
            if !(c >= 0.0 && c.is_finite() && r.is_finite()) {
                return Err(Error::Data(format!(
                    "bad observation ({u}, {i}): r={r}, c={c}"
                )));
            }
            by_user[u].push(Observation { index: i, r, c });
            by_item[i].push(Observation { index: u, r, c });
        }
        for row in by_user.iter_mut() {
            row.sort_by_key(|o| o.index);
            if row.windows(2).any(|w| w[0].index == w[1].index) {
                return Err(Error::Data("duplicate observation".into()));
            }
        }
        for col in by_item.iter_mut() {
            col.sort_by_key(|o| o.index);
        }
        Ok(Feedback {
            n_users,
            n_items,
            base,
            active,
            by_user,
            by_item,
        })
    }

    /// Training matrix from the positives carrying one of `labels` plus,
    /// when enabled, the below-threshold raw entries on in-matrix items.
    pub fn from_interactions(
        set: &InteractionSet,
        labels: &[SplitLabel],
        hp: &Hyperparams,
    ) -> Result<Self> {
        let active: Vec<bool> = (0..set.n_items())
            .map(|i| !set.is_out_of_matrix(i))
            .collect();
        let mut entries: Vec<(usize, usize, f64, f64)> = set
            .entries()
            .iter()
            .filter(|e| labels.contains(&e.label) && active[e.item])
            .map(|e| (e.user, e.item, 1.0, hp.confidence(e.playcount)))
            .collect();
        if hp.sub_threshold_confidence {
            entries.extend(
                set.sub_threshold()
                    .iter()
                    .filter(|e| active[e.item])
                    .map(|e| (e.user, e.item, 0.0, hp.confidence(e.count))),
            );
        }
        Feedback::new(
            set.n_users(),
            set.n_items(),
            active,
            hp.base_confidence,
            entries,
        )
    }

    /// Dense view, for small problems and tests. Entries that differ from
    /// the implicit `(r = 0, c = base)` are stored explicitly.
    pub fn from_dense(r: &DMatrix<f64>, c: &DMatrix<f64>, base: f64) -> Result<Self> {
        if r.shape() != c.shape() {
            return Err(Error::Shape("r and c differ in shape".into()));
        }
        let (nu, ni) = r.shape();
        let entries = (0..nu)
            .flat_map(|u| (0..ni).map(move |i| (u, i)))
            .filter(|&(u, i)| r[(u, i)] != 0.0 || c[(u, i)] != base)
            .map(|(u, i)| (u, i, r[(u, i)], c[(u, i)]))
            .collect::<Vec<_>>();
        Feedback::new(nu, ni, vec![true; ni], base, entries)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn is_active(&self, item: usize) -> bool {
        self.active[item]
    }

    pub fn active_items(&self) -> Vec<usize> {
        (0..self.n_items).filter(|&i| self.active[i]).collect()
    }

    pub fn user_row(&self, u: usize) -> &[Observation] {
        &self.by_user[u]
    }

    pub fn item_column(&self, i: usize) -> &[Observation] {
        &self.by_item[i]
    }

    pub fn n_observations(&self) -> usize {
        self.by_user.iter().map(Vec::len).sum()
    }
}

/// Solves `(base * gram + sum_obs (c - base) x x^T + lambda I) y = sum_obs c r x + extra`
/// where `x` ranges over the columns of `other` named by the observations.
fn solve_block(
    other: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    base: f64,
    obs: &[Observation],
    lambda: f64,
    extra: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let k = other.nrows();
    let mut a = gram * base;
    let mut b = DVector::zeros(k);
    for o in obs {
        let x = other.column(o.index);
        a.ger(o.c - base, &x, &x, 1.0);
        if o.r != 0.0 {
            b.axpy(o.c * o.r, &x, 1.0);
        }
    }
    for d in 0..k {
        a[(d, d)] += lambda;
    }
    if let Some(e) = extra {
        b += e;
    }
    let scale = a.diagonal().max().max(f64::MIN_POSITIVE);
    let singular = || {
        Error::Solver(
            "normal equations are not positive definite; use a positive regularizer".into(),
        )
    };
    let ch = a.cholesky().ok_or_else(singular)?;
    // Cholesky can succeed on a numerically singular matrix through rounding.
    if ch
        .l_dirty()
        .diagonal()
        .iter()
        .any(|&l| l * l <= 1e-12 * scale)
    {
        return Err(singular());
    }
    Ok(ch.solve(&b))
}

/// Gram matrix over the selected columns.
fn gram(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    let k = m.nrows();
    let mut g = DMatrix::zeros(k, k);
    for &c in cols {
        let x = m.column(c);
        g.ger(1.0, &x, &x, 1.0);
    }
    g
}

fn check_rows(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Shape(format!(
            "{name} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Exact minimizer of the objective in `w_u` with `H` fixed.
pub fn update_user(
    u: usize,
    h: &DMatrix<f64>,
    fb: &Feedback,
    lambda_w: f64,
) -> Result<DVector<f64>> {
    if u >= fb.n_users {
        return Err(Error::Index(format!("user {u} of {}", fb.n_users)));
    }
    check_rows("H", h, h.nrows(), fb.n_items)?;
    let g = gram(h, &fb.active_items());
    solve_block(h, &g, fb.base, &fb.by_user[u], lambda_w, None)
}

/// Exact minimizer of the objective in `h_i` with `W` fixed. `content`
/// supplies `(B, z_i)` for the content-aware prior mean `B z_i`.
pub fn update_item(
    i: usize,
    w: &DMatrix<f64>,
    fb: &Feedback,
    lambda_h: f64,
    content: Option<(&DMatrix<f64>, &DVector<f64>)>,
) -> Result<DVector<f64>> {
    if i >= fb.n_items {
        return Err(Error::Index(format!("item {i} of {}", fb.n_items)));
    }
    check_rows("W", w, w.nrows(), fb.n_users)?;
    let prior = match content {
        Some((b, z)) => {
            check_rows("B", b, w.nrows(), z.len())?;
            Some(b * z * lambda_h)
        }
        None => None,
    };
    let g = w * w.transpose();
    solve_block(w, &g, fb.base, &fb.by_item[i], lambda_h, prior.as_ref())
}

/// Ridge map from content to item factors over `items`:
/// `B = H Z^T (Z Z^T + lambda_B I)^{-1}`.
pub fn update_content_map(
    h: &DMatrix<f64>,
    z: &DMatrix<f64>,
    items: &[usize],
    lambda_b: f64,
) -> Result<DMatrix<f64>> {
    if h.ncols() != z.ncols() {
        return Err(Error::Shape(format!(
            "H has {} items, Z has {}",
            h.ncols(),
            z.ncols()
        )));
    }
    let l = z.nrows();
    let mut zzt = gram(z, items);
    for d in 0..l {
        zzt[(d, d)] += lambda_b;
    }
    let mut zht = DMatrix::zeros(l, h.nrows());
    for &i in items {
        zht.ger(1.0, &z.column(i), &h.column(i), 1.0);
    }
    if zht.iter().all(|&v| v == 0.0) && lambda_b > 0.0 {
        return Ok(DMatrix::zeros(h.nrows(), l));
    }
    let ch = zzt
        .cholesky()
        .ok_or_else(|| Error::Solver("Z Z^T + lambda_B I is singular; use lambda_b > 0".into()))?;
    Ok(ch.solve(&zht).transpose())
}

/// Trained factors. `b` is present iff the model was trained with content.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub w: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub b: Option<DMatrix<f64>>,
    pub hyperparams: Hyperparams,
    pub seed: u64,
    /// Objective after every sweep.
    pub objective_trace: Vec<f64>,
}

impl FactorModel {
    pub fn rank(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_users(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_items(&self) -> usize {
        self.h.ncols()
    }

    /// Content dimension L, 0 for content-free models.
    pub fn content_dim(&self) -> usize {
        self.b.as_ref().map_or(0, |b| b.ncols())
    }

    pub fn is_content_aware(&self) -> bool {
        self.b.is_some()
    }
}

fn check_content(fb: &Feedback, z: Option<&DMatrix<f64>>) -> Result<()> {
    if let Some(z) = z {
        if z.ncols() != fb.n_items || z.nrows() == 0 {
            return Err(Error::Shape(format!(
                "content matrix is {}x{}, expected L x {}",
                z.nrows(),
                z.ncols(),
                fb.n_items
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("content matrix has non-finite values".into()));
        }
    }
    Ok(())
}

/// Value of the training objective. The `lambda_B` offset is a numerical
/// device of the content-map solve and is not part of the value.
pub fn objective(model: &FactorModel, fb: &Feedback, z: Option<&DMatrix<f64>>) -> Result<f64> {
    let k = model.rank();
    check_rows("W", &model.w, k, fb.n_users)?;
    check_rows("H", &model.h, k, fb.n_items)?;
    check_content(fb, z)?;
    let mapped = match (&model.b, z) {
        (Some(b), Some(z)) => {
            check_rows("B", b, k, z.nrows())?;
            Some(b * z)
        }
        (None, None) => None,
        (Some(_), None) => {
            return Err(Error::Shape(
                "content-aware model needs content features".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::Shape(
                "content-free model given content features".into(),
            ))
        }
    };
    let active = fb.active_items();

    // base * sum over all pairs of (w^T h)^2 = base * <W W^T, H_a H_a^T>
    let mut data = 0.0;
    if fb.base != 0.0 {
        let gw = &model.w * model.w.transpose();
        let gh = gram(&model.h, &active);
        data += fb.base * gw.component_mul(&gh).sum();
    }
    for (u, row) in fb.by_user.iter().enumerate() {
        let wu = model.w.column(u);
        for o in row {
            let p = wu.dot(&model.h.column(o.index));
            data += o.c * (o.r - p).powi(2) - fb.base * p * p;
        }
    }
    let reg_w = model.w.norm_squared();
    let mut reg_h = 0.0;
    for &i in &active {
        reg_h += match &mapped {
            Some(bz) => (model.h.column(i) - bz.column(i)).norm_squared(),
            None => model.h.column(i).norm_squared(),
        };
    }
    Ok(data + model.hyperparams.lambda_w * reg_w + model.hyperparams.lambda_h * reg_h)
}

/// Seeded initial factors: Gaussian `W` then `H` (std [`INIT_STD`]), zero
/// columns for inactive items, `B = 0`.
pub fn initialize(
    fb: &Feedback,
    content_dim: Option<usize>,
    hp: &Hyperparams,
    seed: u64,
) -> FactorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let k = hp.rank;
    let w = DMatrix::from_fn(k, fb.n_users, |_, _| rng.sample(normal));
    let mut h = DMatrix::from_fn(k, fb.n_items, |_, _| rng.sample(normal));
    for i in 0..fb.n_items {
        if !fb.active[i] {
            h.column_mut(i).fill(0.0);
        }
    }
    FactorModel {
        w,
        h,
        b: content_dim.map(|l| DMatrix::zeros(k, l)),
        hyperparams: *hp,
        seed,
        objective_trace: Vec::new(),
    }
}

/// Alternating exact minimization: each sweep updates every user, then every
/// training item, then (with content) the map `B`, and records the
/// objective.
pub fn train(
    fb: &Feedback,
    z: Option<&DMatrix<f64>>,
    hp: &Hyperparams,
    seed: u64,
) -> Result<FactorModel> {
    hp.validate()?;
    if fb.n_users == 0 || fb.active.iter().all(|a| !a) {
        return Err(Error::Data("no users or no training items".into()));
    }
    check_content(fb, z)?;
    let mut model = initialize(fb, z.map(|z| z.nrows()), hp, seed);
    let active = fb.active_items();

    for sweep in 0..hp.n_iters {
        let gh = gram(&model.h, &active);
        let h = &model.h;
        let cols = (0..fb.n_users)
            .into_par_iter()
            .map(|u| solve_block(h, &gh, fb.base, &fb.by_user[u], hp.lambda_w, None))
            .collect::<Result<Vec<_>>>()?;
        for (u, c) in cols.into_iter().enumerate() {
            model.w.set_column(u, &c);
        }

        let gw = &model.w * model.w.transpose();
        let w = &model.w;
        let prior = match (&model.b, z) {
            (Some(b), Some(z)) => Some(b * z * hp.lambda_h),
            _ => None,
        };
        let cols = active
            .par_iter()
            .map(|&i| {
                let extra = prior.as_ref().map(|p| p.column(i).into_owned());
                solve_block(w, &gw, fb.base, &fb.by_item[i], hp.lambda_h, extra.as_ref())
            })
            .collect::<Result<Vec<_>>>()?;
        for (&i, c) in active.iter().zip(cols) {
            model.h.set_column(i, &c);
        }

        if let Some(z) = z {
            model.b = Some(update_content_map(&model.h, z, &active, hp.lambda_b)?);
        }

        let obj = objective(&model, fb, z)?;
        if !obj.is_finite() {
            return Err(Error::Divergence(sweep + 1));
        }
        log::debug!("sweep {}: objective {obj:.6}", sweep + 1);
        model.objective_trace.push(obj);
    }
    Ok(model)
}

/// `w_u^T h_i`.
pub fn predict_in_matrix(model: &FactorModel, u: usize, i: usize) -> Result<f64> {
    if u >= model.n_users() || i >= model.n_items() {
        return Err(Error::Index(format!(
            "({u}, {i}) outside a {}x{} model",
            model.n_users(),
            model.n_items()
        )));
    }
    Ok(model.w.column(u).dot(&model.h.column(i)))
}

/// Cold-start score `w_u^T B z`.
pub fn predict_out_of_matrix(model: &FactorModel, u: usize, z_new: &DVector<f64>) -> Result<f64> {
    let b = model.b.as_ref().ok_or_else(|| {
        Error::Capability("content-free model cannot score out-of-matrix items".into())
    })?;
    if u >= model.n_users() {
        return Err(Error::Index(format!("user {u} of {}", model.n_users())));
    }
    if z_new.len() != b.ncols() {
        return Err(Error::Shape(format!(
            "content vector has {} entries, model expects {}",
            z_new.len(),
            b.ncols()
        )));
    }
    Ok(model.w.column(u).dot(&(b * z_new)))
}

const MODEL_FORMAT: &str = "avdrec-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    rank: usize,
    content_dim: usize,
    hyperparams: Hyperparams,
    seed: u64,
    config_hash: String,
    w: MatrixData,
    h: MatrixData,
    b: Option<MatrixData>,
    objective_trace: Vec<f64>,
}

impl FactorModel {
    /// JSON container; floats round-trip exactly.
    pub fn write<W: Write>(&self, out: W, config_hash: &str) -> Result<()> {
        let f = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            rank: self.rank(),
            content_dim: self.content_dim(),
            hyperparams: self.hyperparams,
            seed: self.seed,
            config_hash: config_hash.into(),
            w: (&self.w).into(),
            h: (&self.h).into(),
            b: self.b.as_ref().map(Into::into),
            objective_trace: self.objective_trace.clone(),
        };
        serde_json::to_writer(out, &f)?;
        Ok(())
    }

    /// Returns the model and the config hash it was written with.
    pub fn read<R: Read>(input: R) -> Result<(Self, String)> {
        let f: ModelFile = serde_json::from_reader(input)?;
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported model file {} v{}",
                f.format, f.version
            )));
        }
        let model = FactorModel {
            w: f.w.into_matrix()?,
            h: f.h.into_matrix()?,
            b: f.b.map(MatrixData::into_matrix).transpose()?,
            hyperparams: f.hyperparams,
            seed: f.seed,
            objective_trace: f.objective_trace,
        };
        if model.h.nrows() != f.rank
            || model.w.nrows() != f.rank
            || model.content_dim() != f.content_dim
            || model.b.as_ref().is_some_and(|b| b.nrows() != f.rank)
        {
            return Err(Error::Artifact(
                "model dimensions disagree with header".into(),
            ));
        }
        Ok((model, f.config_hash))
    }
}
