//! Batch driver: one run configuration, five commands, archivable outputs.
//!
//! Every artifact records a hash of the configuration sections it depends
//! on, and downstream commands refuse artifacts whose hash does not match
//! the current configuration unless `allow_hash_mismatch` is set.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cf::{self, FactorModel, Feedback, Hyperparams};
use crate::error::{Error, Result};
use crate::eval::{self, BaselineOptions, Similarity, Task, WmfScorer};
use crate::features::{self, FactorArtifact, FeatureTable, RotationOptions};
use crate::ingest::{self, InteractionSet, PlaycountMatrix, SplitConfig, SplitLabel};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub playcounts: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    pub min_songs_per_user: usize,
    pub min_users_per_song: usize,
    pub binarize_threshold: u64,
    /// Optional popularity cut applied before activity filtering.
    pub top_users: Option<usize>,
    pub top_items: Option<usize>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            min_songs_per_user: 20,
            min_users_per_song: 50,
            binarize_threshold: 5,
            top_users: None,
            top_items: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub out_of_matrix_song_fraction: f64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        let d = SplitConfig::default();
        SplitFractions {
            out_of_matrix_song_fraction: d.out_of_matrix_song_fraction,
            train_fraction: d.train_fraction,
            validation_fraction: d.validation_fraction,
            test_fraction: d.test_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    pub n_components: usize,
    #[serde(flatten)]
    pub rotation: RotationOptions,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            n_components: 3,
            rotation: RotationOptions::default(),
        }
    }
}

/// Optional overrides on top of the experiment defaults
/// ([`RunConfig::experiment_hyperparams`]).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperparamOverrides {
    pub rank: Option<usize>,
    pub lambda_w: Option<f64>,
    pub lambda_h: Option<f64>,
    pub lambda_b: Option<f64>,
    pub alpha: Option<f64>,
    pub epsilon: Option<f64>,
    pub n_iters: Option<usize>,
    pub base_confidence: Option<f64>,
    pub sub_threshold_confidence: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ContentFree,
    ContentAware,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::ContentFree => "content_free",
            Variant::ContentAware => "content_aware",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "content_free" => Ok(Variant::ContentFree),
            "content_aware" => Ok(Variant::ContentAware),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub variants: Vec<Variant>,
    /// Validation-NDCG grid over lambda_W and lambda_H; empty disables it.
    pub grid_lambda_w: Vec<f64>,
    pub grid_lambda_h: Vec<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            variants: vec![Variant::ContentFree, Variant::ContentAware],
            grid_lambda_w: Vec::new(),
            grid_lambda_h: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub tasks: Vec<Task>,
    pub pure_content_baseline: bool,
    pub similarity: Similarity,
    pub playcount_weighted: bool,
    pub allow_hash_mismatch: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tasks: vec![Task::InMatrix, Task::OutOfMatrix],
            pure_content_baseline: true,
            similarity: Similarity::Cosine,
            playcount_weighted: false,
            allow_hash_mismatch: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub ingest: IngestOptions,
    pub split: SplitFractions,
    pub features: FeatureOptions,
    pub hyperparams: HyperparamOverrides,
    pub train: TrainOptions,
    pub eval: EvalOptions,
}

fn sha256_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())[..16].to_string()
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Path {
            field: "--config".into(),
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::from_toml(&text)
    }

    /// Hyperparameters for experiments: the model defaults with base
    /// confidence 1, so unobserved pairs keep a unit weight.
    pub fn experiment_hyperparams() -> Hyperparams {
        Hyperparams {
            base_confidence: 1.0,
            ..Hyperparams::default()
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        let o = &self.hyperparams;
        let d = RunConfig::experiment_hyperparams();
        Hyperparams {
            rank: o.rank.unwrap_or(d.rank),
            lambda_w: o.lambda_w.unwrap_or(d.lambda_w),
            lambda_h: o.lambda_h.unwrap_or(d.lambda_h),
            lambda_b: o.lambda_b.unwrap_or(d.lambda_b),
            alpha: o.alpha.unwrap_or(d.alpha),
            epsilon: o.epsilon.unwrap_or(d.epsilon),
            n_iters: o.n_iters.unwrap_or(d.n_iters),
            base_confidence: o.base_confidence.unwrap_or(d.base_confidence),
            sub_threshold_confidence: o
                .sub_threshold_confidence
                .unwrap_or(d.sub_threshold_confidence),
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig {
            out_of_matrix_song_fraction: self.split.out_of_matrix_song_fraction,
            train_fraction: self.split.train_fraction,
            validation_fraction: self.split.validation_fraction,
            test_fraction: self.split.test_fraction,
            seed: self.seed,
        }
    }

    pub fn ingest_hash(&self) -> String {
        sha256_hex(&[
            "ingest",
            &self.seed.to_string(),
            &to_json(&self.paths.playcounts),
            &to_json(&self.ingest),
            &to_json(&self.split),
        ])
    }

    pub fn features_hash(&self) -> String {
        sha256_hex(&[
            "features",
            &self.ingest_hash(),
            &to_json(&self.paths.features),
            &to_json(&self.features),
        ])
    }

    pub fn train_hash(&self) -> String {
        sha256_hex(&[
            "train",
            &self.features_hash(),
            &to_json(&self.hyperparams()),
            &to_json(&self.train.grid_lambda_w),
            &to_json(&self.train.grid_lambda_h),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        self.split_config().validate()?;
        self.hyperparams().validate()?;
        if self.features.n_components == 0 {
            return Err(Error::Config("features.n_components must be >= 1".into()));
        }
        if self.train.variants.contains(&Variant::ContentAware) && self.paths.features.is_none() {
            return Err(Error::Config(
                "train.variants includes content_aware but paths.features is not set".into(),
            ));
        }
        if self.train.grid_lambda_w.is_empty() != self.train.grid_lambda_h.is_empty() {
            return Err(Error::Config(
                "grid_lambda_w and grid_lambda_h must both be set or both empty".into(),
            ));
        }
        Ok(())
    }

    fn require_input(&self, field: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        let p = path
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{field} is not set")))?;
        if !p.is_file() {
            return Err(Error::Path {
                field: field.into(),
                path: p.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            });
        }
        Ok(p.clone())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.paths.output_dir.join(name)
    }

    fn check_hash(&self, artifact: &str, found: &str, expected: &str) -> Result<()> {
        if found != expected && !self.eval.allow_hash_mismatch {
            return Err(Error::HashMismatch {
                artifact: artifact.into(),
                expected: expected.into(),
                found: found.into(),
            });
        }
        Ok(())
    }
}

pub const FILTERED_PLAYCOUNTS: &str = "filtered_playcounts.tsv";
pub const SPLIT_MANIFEST: &str = "split_manifest.txt";
pub const FACTOR_ARTIFACT: &str = "factors.json";
pub const CONTENT_FACTORS: &str = "content_factors.tsv";
pub const CORRELATIONS: &str = "correlations.csv";
pub const SUMMARY: &str = "summary.txt";

pub fn model_file(v: Variant) -> String {
    format!("model_{}.json", v.as_str())
}

pub fn trace_file(v: Variant) -> String {
    format!("trace_{}.txt", v.as_str())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|source| {
        Error::Path {
            field: "output".into(),
            path: path.to_path_buf(),
            source,
        }
    })?))
}

fn open(path: &Path, what: &str) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| Error::Path {
            field: what.into(),
            path: path.to_path_buf(),
            source,
        })
}

/// Filtered playcounts and split, as written by [`cmd_ingest`].
pub struct Dataset {
    pub raw: PlaycountMatrix,
    pub split: InteractionSet,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let raw = ingest::read_playcounts(open(&cfg.out(FILTERED_PLAYCOUNTS), "filtered playcounts")?)?;
    let (split, header) =
        InteractionSet::read_manifest(open(&cfg.out(SPLIT_MANIFEST), "split manifest")?, &raw)?;
    cfg.check_hash(SPLIT_MANIFEST, &header.config_hash, &cfg.ingest_hash())?;
    Ok(Dataset { raw, split })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub n_users: usize,
    pub n_items: usize,
    pub n_playcounts: usize,
    pub n_positives: usize,
    pub n_out_of_matrix: usize,
}

/// Reads, filters, binarizes and splits the playcounts; writes the
/// filtered dataset and the split manifest.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    cfg.validate()?;
    let path = cfg.require_input("paths.playcounts", &cfg.paths.playcounts)?;
    let raw = ingest::read_playcounts(open(&path, "paths.playcounts")?)?;
    let raw = if cfg.ingest.top_users.is_some() || cfg.ingest.top_items.is_some() {
        ingest::retain_top(&raw, cfg.ingest.top_users, cfg.ingest.top_items)
    } else {
        raw
    };
    let filtered = ingest::filter_activity(
        &raw,
        cfg.ingest.min_songs_per_user,
        cfg.ingest.min_users_per_song,
    );
    let bin = ingest::binarize(&filtered, cfg.ingest.binarize_threshold);
    let split = ingest::make_splits(&bin, &filtered, &cfg.split_config())?;

    let mut out = create(&cfg.out(FILTERED_PLAYCOUNTS))?;
    filtered.write_tsv(&mut out)?;
    out.flush()?;
    let mut out = create(&cfg.out(SPLIT_MANIFEST))?;
    split.write_manifest(&mut out, &cfg.ingest_hash())?;
    out.flush()?;

    let summary = IngestSummary {
        n_users: filtered.n_users(),
        n_items: filtered.n_items(),
        n_playcounts: filtered.entries().len(),
        n_positives: split.entries().len(),
        n_out_of_matrix: split.out_of_matrix_items().len(),
    };
    log::info!("ingest: {summary:?}");
    Ok(summary)
}

/// Fits standardization and oblique factors on the in-matrix songs, scores
/// every song, and writes the factor artifact, the per-song content factors
/// and the feature/factor correlation table.
pub fn cmd_features(cfg: &RunConfig) -> Result<FactorArtifact> {
    cfg.validate()?;
    let path = cfg.require_input("paths.features", &cfg.paths.features)?;
    let table = FeatureTable::read(open(&path, "paths.features")?)?;
    if cfg.features.n_components > table.feature_names().len() {
        return Err(Error::Config(format!(
            "features.n_components = {} exceeds the {} features available",
            cfg.features.n_components,
            table.feature_names().len()
        )));
    }
    let data = load_dataset(cfg)?;
    let all_items = data.raw.item_ids();
    let x_all = table.select(all_items)?;
    let in_matrix = data.split.in_matrix_items();
    let x_train = x_all.select_rows(in_matrix.iter());

    let (x_std, stats) = features::standardize(&x_train, table.feature_names())?;
    let result = features::fit_factors(&x_std, cfg.features.n_components, &cfg.features.rotation)?;
    let artifact = FactorArtifact {
        feature_names: table.feature_names().to_vec(),
        standardization: stats,
        result,
        config_hash: cfg.features_hash(),
    };

    let z_train = features::factor_scores(&x_std, &artifact.result)?;
    let corr = features::correlation_report(&x_std, &z_train)?;
    let z_all = artifact.score_raw(&x_all)?;

    let mut out = create(&cfg.out(FACTOR_ARTIFACT))?;
    artifact.write(&mut out)?;
    out.flush()?;
    let mut out = create(&cfg.out(CORRELATIONS))?;
    features::write_correlation_report(&mut out, table.feature_names(), &corr)?;
    out.flush()?;
    let mut out = create(&cfg.out(CONTENT_FACTORS))?;
    write_content_factors(&mut out, all_items, &z_all, &artifact.config_hash)?;
    out.flush()?;
    Ok(artifact)
}

/// `item_id z_1 ... z_L` per line, full precision.
fn write_content_factors<W: Write>(
    mut out: W,
    item_ids: &[String],
    z: &DMatrix<f64>,
    config_hash: &str,
) -> Result<()> {
    writeln!(out, "# config_hash: {config_hash}")?;
    for (r, id) in item_ids.iter().enumerate() {
        write!(out, "{id}")?;
        for v in z.row(r).iter() {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Content factors as an L x I matrix aligned with the dataset's items.
pub fn load_content(cfg: &RunConfig, item_ids: &[String]) -> Result<DMatrix<f64>> {
    let reader = open(&cfg.out(CONTENT_FACTORS), "content factors")?;
    let mut rows: std::collections::HashMap<String, Vec<f64>> = Default::default();
    let mut hash = None;
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if let Some(h) = line.strip_prefix("# config_hash: ") {
            hash = Some(h.trim().to_string());
            continue;
        }
        let mut f = line.split('\t');
        let id = f.next().unwrap_or_default().to_string();
        let vals = f
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::parse(k + 1, format!("bad value `{v}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.insert(id, vals);
    }
    cfg.check_hash(
        CONTENT_FACTORS,
        hash.as_deref().unwrap_or(""),
        &cfg.features_hash(),
    )?;
    let l = rows.values().next().map_or(0, Vec::len);
    let mut z = DMatrix::zeros(l, item_ids.len());
    for (i, id) in item_ids.iter().enumerate() {
        let row = rows
            .get(id)
            .ok_or_else(|| Error::Data(format!("no content factors for item `{id}`")))?;
        if row.len() != l {
            return Err(Error::Data(format!(
                "item `{id}` has {} factors, expected {l}",
                row.len()
            )));
        }
        z.column_mut(i).copy_from_slice(row);
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub lambda_w: f64,
    pub lambda_h: f64,
    pub validation_ndcg: Option<f64>,
}

/// Trains `variant`, first picking lambda_W and lambda_H by validation NDCG
/// when a grid is configured.
pub fn train_variant(
    split: &InteractionSet,
    content: Option<&DMatrix<f64>>,
    hp: &Hyperparams,
    grid_w: &[f64],
    grid_h: &[f64],
    seed: u64,
) -> Result<(FactorModel, Vec<GridPoint>)> {
    let fb = Feedback::from_interactions(split, &[SplitLabel::Train], hp)?;
    let mut grid = Vec::new();
    let mut best = *hp;
    let mut best_score = f64::NEG_INFINITY;
    for &lw in grid_w {
        for &lh in grid_h {
            let trial = Hyperparams {
                lambda_w: lw,
                lambda_h: lh,
                ..*hp
            };
            let model = cf::train(&fb, content, &trial, seed)?;
            let scorer = WmfScorer::new(&model, content)?;
            let rep = eval::evaluate(&scorer, "grid", split, Task::Validation)?;
            log::info!(
                "grid lambda_w={lw} lambda_h={lh}: validation ndcg {:?}",
                rep.mean_ndcg
            );
            if let Some(v) = rep.mean_ndcg {
                if v > best_score {
                    best_score = v;
                    best = trial;
                }
            }
            grid.push(GridPoint {
                lambda_w: lw,
                lambda_h: lh,
                validation_ndcg: rep.mean_ndcg,
            });
        }
    }
    let model = cf::train(&fb, content, &best, seed)?;
    Ok((model, grid))
}

/// Trains every configured variant and writes model files, objective traces
/// and (with a grid) the validation results.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<(Variant, FactorModel)>> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let hp = cfg.hyperparams();
    let mut models = Vec::new();
    for &variant in &cfg.train.variants {
        let content = match variant {
            Variant::ContentAware => Some(load_content(cfg, data.raw.item_ids())?),
            Variant::ContentFree => None,
        };
        let (model, grid) = train_variant(
            &data.split,
            content.as_ref(),
            &hp,
            &cfg.train.grid_lambda_w,
            &cfg.train.grid_lambda_h,
            cfg.seed,
        )?;
        let mut out = create(&cfg.out(&model_file(variant)))?;
        model.write(&mut out, &cfg.train_hash())?;
        out.flush()?;
        let mut out = create(&cfg.out(&trace_file(variant)))?;
        for v in &model.objective_trace {
            writeln!(out, "{v}")?;
        }
        out.flush()?;
        if !grid.is_empty() {
            let mut out = create(&cfg.out(&format!("grid_{}.txt", variant.as_str())))?;
            writeln!(out, "# lambda_w lambda_h validation_ndcg")?;
            for g in &grid {
                match g.validation_ndcg {
                    Some(v) => writeln!(out, "{} {} {v:.6}", g.lambda_w, g.lambda_h)?,
                    None => writeln!(out, "{} {} -", g.lambda_w, g.lambda_h)?,
                }
            }
            out.flush()?;
        }
        models.push((variant, model));
    }
    Ok(models)
}

/// One row of the summary table: a method and its mean NDCG per task.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub tasks: Vec<Task>,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn render(&self) -> String {
        let mut s = format!("{:<22}", "method");
        for t in &self.tasks {
            s.push_str(&format!("{:>15}", t.as_str()));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<22}", r.method));
            for v in &r.values {
                match v {
                    Some(v) => s.push_str(&format!("{v:>15.4}")),
                    None => s.push_str(&format!("{:>15}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates every trained model (and the pure-content baseline when
/// enabled) on each configured task; writes one report per defined cell and
/// a summary table with dashes where a method cannot score a task.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Summary> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let needs_content = cfg.train.variants.contains(&Variant::ContentAware)
        || cfg.eval.pure_content_baseline && cfg.paths.features.is_some();
    let content = if needs_content {
        Some(load_content(cfg, data.raw.item_ids())?)
    } else {
        None
    };

    let mut models = Vec::new();
    for &variant in &cfg.train.variants {
        let (model, hash) = FactorModel::read(open(&cfg.out(&model_file(variant)), "model file")?)?;
        cfg.check_hash(&model_file(variant), &hash, &cfg.train_hash())?;
        if (variant == Variant::ContentAware) != model.is_content_aware() {
            return Err(Error::Artifact(format!(
                "{} does not hold a {} model",
                model_file(variant),
                variant.as_str()
            )));
        }
        models.push((variant, model));
    }

    let mut methods: Vec<(String, Box<dyn eval::Scorer + '_>)> = Vec::new();
    for (variant, model) in &models {
        let name = match variant {
            Variant::ContentFree => "content-free WMF",
            Variant::ContentAware => "content-aware WMF",
        };
        let scorer = WmfScorer::new(
            model,
            if model.is_content_aware() {
                content.as_ref()
            } else {
                None
            },
        )?;
        methods.push((name.to_string(), Box::new(scorer)));
    }
    if cfg.eval.pure_content_baseline {
        if let Some(z) = &content {
            let opts = BaselineOptions {
                similarity: cfg.eval.similarity,
                playcount_weighted: cfg.eval.playcount_weighted,
            };
            let base = eval::pure_content_baseline(&data.split, z, opts)?;
            // keep the table order: content-free, pure content, content-aware
            let pos = usize::from(models.first().is_some_and(|m| m.0 == Variant::ContentFree));
            methods.insert(pos, ("pure content".to_string(), Box::new(base)));
        }
    }

    for &task in &cfg.eval.tasks {
        if !methods.iter().any(|(_, s)| s.supports(task)) {
            return Err(Error::Capability(format!(
                "no configured method can score task {task}; train a content-aware model or enable the pure-content baseline"
            )));
        }
    }

    let mut rows = Vec::new();
    for (name, scorer) in &methods {
        let mut values = Vec::new();
        for &task in &cfg.eval.tasks {
            if !scorer.supports(task) {
                values.push(None);
                continue;
            }
            let rep = eval::evaluate(scorer.as_ref(), name, &data.split, task)?;
            let file = format!("report_{}_{}.txt", name.replace(' ', "_"), task.as_str());
            let mut out = create(&cfg.out(&file))?;
            rep.write(&mut out, data.raw.user_ids(), &cfg.train_hash())?;
            out.flush()?;
            values.push(rep.mean_ndcg);
        }
        rows.push(SummaryRow {
            method: name.clone(),
            values,
        });
    }
    let summary = Summary {
        tasks: cfg.eval.tasks.clone(),
        rows,
    };
    let mut out = create(&cfg.out(SUMMARY))?;
    writeln!(out, "# config_hash: {}", cfg.train_hash())?;
    out.write_all(summary.render().as_bytes())?;
    out.flush()?;
    Ok(summary)
}

/// Ingest, features (when a feature table is configured), train, evaluate.
pub fn cmd_run_all(cfg: &RunConfig) -> Result<Summary> {
    cmd_ingest(cfg)?;
    if cfg.paths.features.is_some() {
        cmd_features(cfg)?;
    }
    cmd_train(cfg)?;
    cmd_evaluate(cfg)
}
