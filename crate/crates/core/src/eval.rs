//! Ranked lists, NDCG, per-task evaluation and the pure-content baseline.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cf::FactorModel;
use crate::error::{Error, Result};
use crate::ingest::{InteractionSet, SplitLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Held-in test positives among songs seen in training.
    InMatrix,
    /// Positives on the held-out (cold-start) songs.
    OutOfMatrix,
    /// Validation positives among songs seen in training; used for tuning.
    Validation,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::InMatrix => "in_matrix",
            Task::OutOfMatrix => "out_of_matrix",
            Task::Validation => "validation",
        }
    }

    fn target(&self) -> SplitLabel {
        match self {
            Task::InMatrix => SplitLabel::TestIn,
            Task::OutOfMatrix => SplitLabel::TestOut,
            Task::Validation => SplitLabel::Validation,
        }
    }

    /// Labels whose positives are removed from a user's candidates.
    fn excluded(&self) -> &'static [SplitLabel] {
        match self {
            Task::InMatrix => &[SplitLabel::Train, SplitLabel::Validation],
            Task::OutOfMatrix => &[],
            Task::Validation => &[SplitLabel::Train],
        }
    }

    pub fn candidate_definition(&self) -> &'static str {
        match self {
            Task::InMatrix => {
                "in-matrix songs with at least one test_in positive, minus the user's train and validation positives"
            }
            Task::OutOfMatrix => "all held-out (out-of-matrix) songs",
            Task::Validation => {
                "in-matrix songs with at least one validation positive, minus the user's train positives"
            }
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_matrix" => Ok(Task::InMatrix),
            "out_of_matrix" => Ok(Task::OutOfMatrix),
            "validation" => Ok(Task::Validation),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Candidates sorted by descending score, ties by ascending item index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub user: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

pub fn rank_candidates<F>(score_fn: F, user: usize, candidates: &[usize]) -> RankedList
where
    F: Fn(usize, usize) -> f64,
{
    let scores: Vec<f64> = candidates.iter().map(|&i| score_fn(user, i)).collect();
    rank_scored(user, candidates, &scores)
}

fn rank_scored(user: usize, candidates: &[usize], scores: &[f64]) -> RankedList {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(candidates[a].cmp(&candidates[b]))
    });
    RankedList {
        user,
        items: order.iter().map(|&k| candidates[k]).collect(),
        scores: order.iter().map(|&k| scores[k]).collect(),
    }
}

/// `sum_p rel_p / log2(p + 1)` over 1-based positions.
pub fn dcg(relevances: &[bool]) -> f64 {
    relevances
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
        .sum()
}

/// Normalized DCG of a binary relevance list in ranked order. `None` when
/// nothing is relevant (the ideal DCG is zero).
pub fn ndcg(relevances: &[bool]) -> Option<f64> {
    let n_rel = relevances.iter().filter(|&&r| r).count();
    if n_rel == 0 {
        return None;
    }
    let ideal: f64 = (0..n_rel).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    Some((dcg(relevances) / ideal).min(1.0))
}

/// Something that scores a user's candidate items for a task.
pub trait Scorer: Sync {
    fn supports(&self, task: Task) -> bool;

    /// Scores aligned with `items`; `None` means the user cannot be scored
    /// and is skipped.
    fn score_user(&self, user: usize, items: &[usize], task: Task) -> Option<Vec<f64>>;
}

/// Wraps a plain scoring function; supports every task.
pub struct FnScorer<F>(pub F);

impl<F: Fn(usize, usize) -> f64 + Sync> Scorer for FnScorer<F> {
    fn supports(&self, _task: Task) -> bool {
        true
    }

    fn score_user(&self, user: usize, items: &[usize], _task: Task) -> Option<Vec<f64>> {
        Some(items.iter().map(|&i| (self.0)(user, i)).collect())
    }
}

/// Factor-model scorer: `w_u^T h_i` for in-matrix tasks and `w_u^T B z_i`
/// for held-out songs. `content` is L x I.
pub struct WmfScorer<'a> {
    model: &'a FactorModel,
    mapped: Option<DMatrix<f64>>,
}

impl<'a> WmfScorer<'a> {
    pub fn new(model: &'a FactorModel, content: Option<&DMatrix<f64>>) -> Result<Self> {
        let mapped = match (&model.b, content) {
            (Some(b), Some(z)) => {
                if z.nrows() != b.ncols() || z.ncols() != model.n_items() {
                    return Err(Error::Shape(format!(
                        "content is {}x{}, model expects {}x{}",
                        z.nrows(),
                        z.ncols(),
                        b.ncols(),
                        model.n_items()
                    )));
                }
                Some(b * z)
            }
            _ => None,
        };
        Ok(WmfScorer { model, mapped })
    }
}

impl Scorer for WmfScorer<'_> {
    fn supports(&self, task: Task) -> bool {
        match task {
            Task::InMatrix | Task::Validation => true,
            Task::OutOfMatrix => self.mapped.is_some(),
        }
    }

    fn score_user(&self, user: usize, items: &[usize], task: Task) -> Option<Vec<f64>> {
        let w = self.model.w.column(user);
        let factors = match task {
            Task::OutOfMatrix => self.mapped.as_ref()?,
            _ => &self.model.h,
        };
        Some(items.iter().map(|&i| w.dot(&factors.column(i))).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    /// Negative Euclidean distance.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineOptions {
    pub similarity: Similarity,
    /// Weight each training song by its playcount when averaging.
    pub playcount_weighted: bool,
}

/// Pure-content recommender: each user's mean content vector over their
/// training positives, compared with a song's content vector.
pub struct ContentBaseline {
    profiles: Vec<Option<DVector<f64>>>,
    content: DMatrix<f64>,
    similarity: Similarity,
}

/// Builds per-user profiles from the `train` positives. `content` is L x I.
/// Users without training positives, or with a zero profile, get no profile.
pub fn pure_content_baseline(
    set: &InteractionSet,
    content: &DMatrix<f64>,
    opts: BaselineOptions,
) -> Result<ContentBaseline> {
    if content.ncols() != set.n_items() {
        return Err(Error::Shape(format!(
            "content covers {} items, interactions have {}",
            content.ncols(),
            set.n_items()
        )));
    }
    let l = content.nrows();
    let mut sums = vec![DVector::zeros(l); set.n_users()];
    let mut weights = vec![0.0; set.n_users()];
    for e in set.with_label(SplitLabel::Train) {
        let wgt = if opts.playcount_weighted {
            e.playcount as f64
        } else {
            1.0
        };
        sums[e.user].axpy(wgt, &content.column(e.item), 1.0);
        weights[e.user] += wgt;
    }
    let profiles = sums
        .into_iter()
        .zip(weights)
        .map(|(s, w)| {
            if w == 0.0 {
                return None;
            }
            let p = s / w;
            (p.norm() > 0.0).then_some(p)
        })
        .collect();
    Ok(ContentBaseline {
        profiles,
        content: content.clone(),
        similarity: opts.similarity,
    })
}

impl ContentBaseline {
    pub fn profile(&self, user: usize) -> Option<&DVector<f64>> {
        self.profiles.get(user)?.as_ref()
    }

    pub fn score(&self, user: usize, z: &DVector<f64>) -> Option<f64> {
        let p = self.profile(user)?;
        Some(match self.similarity {
            Similarity::Cosine => {
                let nz = z.norm();
                if nz == 0.0 {
                    0.0
                } else {
                    p.dot(z) / (p.norm() * nz)
                }
            }
            Similarity::Euclidean => -(p - z).norm(),
        })
    }
}

impl Scorer for ContentBaseline {
    fn supports(&self, task: Task) -> bool {
        task == Task::OutOfMatrix
    }

    fn score_user(&self, user: usize, items: &[usize], _task: Task) -> Option<Vec<f64>> {
        self.profile(user)?;
        items
            .iter()
            .map(|&i| self.score(user, &self.content.column(i).into_owned()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub method: String,
    pub candidate_definition: String,
    /// `(user_index, ndcg)` for every evaluated user, ascending by user.
    pub per_user: Vec<(usize, f64)>,
    /// Mean over evaluated users; `None` when nobody was evaluated.
    pub mean_ndcg: Option<f64>,
    /// Users with no relevant candidate.
    pub skipped_no_relevant: usize,
    /// Users the scorer could not score (e.g. empty content profile).
    pub skipped_unscorable: usize,
}

impl EvalReport {
    /// `user_id ndcg` lines preceded by a `#` summary block.
    pub fn write<W: Write>(
        &self,
        mut out: W,
        user_ids: &[String],
        config_hash: &str,
    ) -> Result<()> {
        writeln!(out, "# task: {}", self.task)?;
        writeln!(out, "# method: {}", self.method)?;
        writeln!(out, "# candidates: {}", self.candidate_definition)?;
        match self.mean_ndcg {
            Some(m) => writeln!(out, "# mean_ndcg: {m:.6}")?,
            None => writeln!(out, "# mean_ndcg: -")?,
        }
        writeln!(out, "# users_evaluated: {}", self.per_user.len())?;
        writeln!(out, "# skipped_no_relevant: {}", self.skipped_no_relevant)?;
        writeln!(out, "# skipped_unscorable: {}", self.skipped_unscorable)?;
        writeln!(out, "# config_hash: {config_hash}")?;
        for &(u, v) in &self.per_user {
            let id = user_ids.get(u).map_or_else(|| u.to_string(), Clone::clone);
            writeln!(out, "{id} {v:.6}")?;
        }
        Ok(())
    }
}

/// Per-user candidate lists and relevant sets for a task.
pub struct TaskCandidates {
    pub candidates: Vec<Vec<usize>>,
    pub relevant: Vec<HashSet<usize>>,
}

pub fn task_candidates(set: &InteractionSet, task: Task) -> Result<TaskCandidates> {
    let target = task.target();
    let pool: Vec<usize> = match task {
        Task::OutOfMatrix => set.out_of_matrix_items(),
        _ => {
            let mut items: Vec<usize> = set.with_label(target).map(|e| e.item).collect();
            items.sort_unstable();
            items.dedup();
            items
        }
    };
    if pool.is_empty() {
        return Err(Error::Config(format!(
            "task {task} has an empty candidate set"
        )));
    }
    let mut excluded = vec![HashSet::new(); set.n_users()];
    let mut relevant = vec![HashSet::new(); set.n_users()];
    for e in set.entries() {
        if e.label == target {
            relevant[e.user].insert(e.item);
        } else if task.excluded().contains(&e.label) {
            excluded[e.user].insert(e.item);
        }
    }
    let candidates = excluded
        .iter()
        .map(|ex| pool.iter().copied().filter(|i| !ex.contains(i)).collect())
        .collect();
    Ok(TaskCandidates {
        candidates,
        relevant,
    })
}

/// Ranks every user's candidates with `scorer` and averages NDCG over the
/// users that have at least one relevant candidate and can be scored.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    method: &str,
    set: &InteractionSet,
    task: Task,
) -> Result<EvalReport> {
    if !scorer.supports(task) {
        return Err(Error::Capability(format!(
            "{method} cannot score task {task}"
        )));
    }
    let tc = task_candidates(set, task)?;

    enum Outcome {
        Scored(f64),
        NoRelevant,
        Unscorable,
    }
    let outcomes: Vec<Outcome> = (0..set.n_users())
        .into_par_iter()
        .map(|u| {
            let cands = &tc.candidates[u];
            let rel = &tc.relevant[u];
            if cands.is_empty() || !cands.iter().any(|i| rel.contains(i)) {
                return Outcome::NoRelevant;
            }
            let Some(scores) = scorer.score_user(u, cands, task) else {
                return Outcome::Unscorable;
            };
            let ranked = rank_scored(u, cands, &scores);
            let flags: Vec<bool> = ranked.items.iter().map(|i| rel.contains(i)).collect();
            Outcome::Scored(ndcg(&flags).expect("at least one relevant"))
        })
        .collect();

    let mut per_user = Vec::new();
    let mut skipped_no_relevant = 0;
    let mut skipped_unscorable = 0;
    for (u, o) in outcomes.into_iter().enumerate() {
        match o {
            Outcome::Scored(v) => per_user.push((u, v)),
            Outcome::NoRelevant => skipped_no_relevant += 1,
            Outcome::Unscorable => skipped_unscorable += 1,
        }
    }
    let mean_ndcg = (!per_user.is_empty())
        .then(|| per_user.iter().map(|&(_, v)| v).sum::<f64>() / per_user.len() as f64);
    Ok(EvalReport {
        task,
        method: method.to_string(),
        candidate_definition: task.candidate_definition().to_string(),
        per_user,
        mean_ndcg,
        skipped_no_relevant,
        skipped_unscorable,
    })
}
