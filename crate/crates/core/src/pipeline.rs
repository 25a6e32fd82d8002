//! End-to-end pruning jobs, baselines and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{partition, Partition, PartitionAlgorithm};
use crate::io::{self, random_tokens, CalibrationBatch};
use crate::matrix::Matrix;
use crate::merging::{
    drop_experts, learn_alphas, max_frequency_spec, prune_model_with, uniform_alphas, LearnConfig, LearnOutcome,
    MergeSpec, MergeStrategy, TopKPolicy,
};
use crate::model::{layer_forward, model_forward, LayerVisits, MoELayer, MoEModel, VisitCounter};
use crate::similarity::{
    represent_data_centric, represent_weights, similarity_matrix_with_bandwidth, Metric, RepresentationKind,
    SimilarityMatrix,
};
use crate::{Real, Storage};

/// Largest enumeration `enumerate_drop` will attempt.
pub const MAX_DROP_SUBSETS: usize = 10_000;

/// Everything that decides how a model is pruned, independent of file paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSettings {
    pub metric: Metric,
    pub representation: RepresentationKind,
    pub algorithm: PartitionAlgorithm,
    /// Experts kept per layer.
    pub r: usize,
    pub strategy: MergeStrategy,
    pub seed: u64,
    /// Mixup augmentation of the data-centric batch.
    pub augment: bool,
    pub rbf_factor: f64,
    pub top_k_policy: TopKPolicy,
    pub learn: LearnConfig,
}

impl Default for PruneSettings {
    fn default() -> Self {
        Self {
            metric: Metric::CkaLinear,
            representation: RepresentationKind::DataOutput,
            algorithm: PartitionAlgorithm::Greedy,
            r: 6,
            strategy: MergeStrategy::Uniform,
            seed: 0,
            augment: false,
            rbf_factor: 1.0,
            top_k_policy: TopKPolicy::Preserve,
            learn: LearnConfig::default(),
        }
    }
}

impl PruneSettings {
    pub fn validate(&self, has_calibration: bool) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("r must be at least 1".into()));
        }
        if !has_calibration {
            if self.representation.needs_data() {
                return Err(Error::Config("the data representation requires calibration data".into()));
            }
            if self.strategy.needs_calibration() {
                return Err(Error::Config(format!(
                    "the {} merge strategy requires calibration data",
                    self.strategy.name()
                )));
            }
        }
        if !(self.rbf_factor > 0.0 && self.rbf_factor.is_finite()) {
            return Err(Error::Config("rbf_factor must be positive".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            serde_plain(&self.representation),
            serde_plain(&self.metric),
            serde_plain(&self.algorithm),
            self.strategy.name()
        )
    }
}

fn serde_plain<S: Serialize>(v: &S) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// Result of pruning in memory.
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub pruned: MoEModel<Real>,
    pub similarities: Vec<SimilarityMatrix<Real>>,
    pub partitions: Vec<Partition>,
    pub specs: Vec<MergeSpec>,
    pub learned: Vec<Option<LearnOutcome>>,
}

fn stack(batches: &[CalibrationBatch<Real>]) -> Result<Option<Matrix<Real>>> {
    if batches.is_empty() {
        return Ok(None);
    }
    let parts: Vec<&Matrix<Real>> = batches.iter().map(CalibrationBatch::embeddings).collect();
    Matrix::vstack(&parts).map(Some)
}

/// Layer inputs of the stacked calibration batches, one batch per layer.
pub fn layer_batches(m: &MoEModel<Real>, calib: &[CalibrationBatch<Real>]) -> Result<Option<Vec<CalibrationBatch<Real>>>> {
    let Some(x) = stack(calib)? else {
        return Ok(None);
    };
    let mut inputs = m.layer_inputs(&x)?;
    inputs.pop();
    inputs
        .into_iter()
        .enumerate()
        .map(|(l, h)| CalibrationBatch::new(h, format!("layer{l}")))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn layer_similarity(
    layer: &MoELayer<Real>,
    batch: Option<&CalibrationBatch<Real>>,
    settings: &PruneSettings,
    seed: u64,
) -> Result<SimilarityMatrix<Real>> {
    let reps = match (settings.representation, batch) {
        (RepresentationKind::DataOutput, Some(b)) => represent_data_centric(layer, b, settings.augment, seed)?,
        (kind, _) => represent_weights(layer, kind)?,
    };
    similarity_matrix_with_bandwidth(&reps, settings.metric, settings.rbf_factor)
}

/// Similarity matrix of every layer, using `metric`, `representation`,
/// `augment`, `rbf_factor` and `seed` from `settings`.
pub fn similarities(
    m: &MoEModel<Real>,
    calib: &[CalibrationBatch<Real>],
    settings: &PruneSettings,
) -> Result<Vec<SimilarityMatrix<Real>>> {
    if settings.representation.needs_data() && calib.is_empty() {
        return Err(Error::Config("the data representation requires calibration data".into()));
    }
    let batches = layer_batches(m, calib)?;
    m.layers
        .par_iter()
        .enumerate()
        .map(|(l, layer)| {
            let seed = settings.seed.wrapping_add(l as u64);
            layer_similarity(layer, batches.as_ref().map(|b| &b[l]), settings, seed).map_err(|e| e.in_layer(l))
        })
        .collect()
}

/// Merge coefficients for one layer; `batch` holds that layer's inputs.
pub fn merge_spec(
    layer: &MoELayer<Real>,
    p: &Partition,
    strategy: MergeStrategy,
    batch: &CalibrationBatch<Real>,
    learn: &LearnConfig,
    seed: u64,
) -> Result<(MergeSpec, Option<LearnOutcome>)> {
    Ok(match strategy {
        MergeStrategy::Uniform => (uniform_alphas(p), None),
        MergeStrategy::MaxFrequency => {
            let mut visits = LayerVisits::new(layer.n_experts());
            layer_forward(layer, batch.embeddings(), Some(&mut visits))?;
            (max_frequency_spec(p, &visits)?, None)
        }
        MergeStrategy::Learned => {
            let cfg = LearnConfig {
                seed,
                ..learn.clone()
            };
            let out = learn_alphas(layer, p, std::slice::from_ref(batch), &cfg)?;
            (out.spec.clone(), Some(out))
        }
    })
}

/// Represent, score, partition and merge every layer of `m`.
///
/// Calibration batches are model inputs; each layer sees them as they
/// arrive at that layer in the original model.
pub fn prune(m: &MoEModel<Real>, calib: &[CalibrationBatch<Real>], settings: &PruneSettings) -> Result<PruneOutcome> {
    settings.validate(!calib.is_empty())?;
    let batches = layer_batches(m, calib)?;
    let per_layer = m
        .layers
        .par_iter()
        .enumerate()
        .map(|(l, layer)| -> Result<_> {
            let seed = settings.seed.wrapping_add(l as u64);
            let batch = batches.as_ref().map(|b| &b[l]);
            let sim = layer_similarity(layer, batch, settings, seed)?;
            let p = partition(&sim, settings.algorithm, settings.r, layer.protected(), seed)?;
            let (spec, learned) = match (settings.strategy, &batch) {
                (MergeStrategy::Uniform, _) => (uniform_alphas(&p), None),
                (strategy, Some(b)) => merge_spec(layer, &p, strategy, b, &settings.learn, seed)?,
                (_, None) => unreachable!("validated above"),
            };
            log::info!(
                "layer {l}: {} groups, objective {:.6}",
                p.r(),
                p.objective_value.unwrap_or(f64::NAN)
            );
            Ok((sim, p, spec, learned))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .enumerate()
        .map(|(l, r)| r.map_err(|e| e.in_layer(l)))
        .collect::<Result<Vec<_>>>()?;

    let mut similarities = Vec::new();
    let mut partitions = Vec::new();
    let mut specs = Vec::new();
    let mut learned = Vec::new();
    for (sim, p, spec, out) in per_layer {
        similarities.push(sim);
        partitions.push(p);
        specs.push(spec);
        learned.push(out);
    }
    let plan: Vec<(Partition, MergeSpec)> = partitions.iter().cloned().zip(specs.iter().cloned()).collect();
    let pruned = prune_model_with(m, &plan, settings.top_k_policy)?;
    Ok(PruneOutcome {
        pruned,
        similarities,
        partitions,
        specs,
        learned,
    })
}

/// Merges `m` along fixed per-layer groups.
pub fn apply_groups(
    m: &MoEModel<Real>,
    partitions: &[Partition],
    calib: &[CalibrationBatch<Real>],
    strategy: MergeStrategy,
    learn: &LearnConfig,
    policy: TopKPolicy,
    seed: u64,
) -> Result<(MoEModel<Real>, Vec<MergeSpec>, Vec<Option<LearnOutcome>>)> {
    if strategy.needs_calibration() && calib.is_empty() {
        return Err(Error::Config(format!(
            "the {} merge strategy requires calibration data",
            strategy.name()
        )));
    }
    if partitions.len() != m.layers.len() {
        return Err(Error::Config(format!(
            "{} groupings for {} layers",
            partitions.len(),
            m.layers.len()
        )));
    }
    let batches = layer_batches(m, calib)?;
    let specs = m
        .layers
        .par_iter()
        .zip(partitions)
        .enumerate()
        .map(|(l, (layer, p))| {
            let seed = seed.wrapping_add(l as u64);
            match &batches {
                Some(b) => merge_spec(layer, p, strategy, &b[l], learn, seed),
                None => Ok((uniform_alphas(p), None)),
            }
            .map_err(|e| e.in_layer(l))
        })
        .collect::<Result<Vec<_>>>()?;
    let (specs, learned): (Vec<_>, Vec<_>) = specs.into_iter().unzip();
    let plan: Vec<(Partition, MergeSpec)> = partitions.iter().cloned().zip(specs.iter().cloned()).collect();
    Ok((prune_model_with(m, &plan, policy)?, specs, learned))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEval {
    pub layer: usize,
    pub experts_before: usize,
    pub experts_after: usize,
    pub top_k_after: usize,
    /// MSE between original and pruned layer outputs on the original layer inputs.
    pub reconstruction_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub layers: Vec<LayerEval>,
    pub end_to_end_mse: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub expert_params_before: usize,
    pub expert_params_after: usize,
    pub eval_tokens: usize,
    /// Seconds spent; left out of serialised reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Compares `pruned` with `original` on the tokens `x`.
pub fn evaluate(original: &MoEModel<Real>, pruned: &MoEModel<Real>, x: &Matrix<Real>) -> Result<EvalReport> {
    let start = Instant::now();
    if original.layers.len() != pruned.layers.len() || original.d_model != pruned.d_model {
        return Err(Error::InvalidModel(format!(
            "pruned model has {} layers of width {}, original has {} of width {}",
            pruned.layers.len(),
            pruned.d_model,
            original.layers.len(),
            original.d_model
        )));
    }
    let inputs = original.layer_inputs(x)?;
    let layers = original
        .layers
        .par_iter()
        .zip(&pruned.layers)
        .enumerate()
        .map(|(l, (a, b))| -> Result<LayerEval> {
            let ya = layer_forward(a, &inputs[l], None)?;
            let yb = layer_forward(b, &inputs[l], None).map_err(|e| e.in_layer(l))?;
            Ok(LayerEval {
                layer: l,
                experts_before: a.n_experts(),
                experts_after: b.n_experts(),
                top_k_after: b.top_k(),
                reconstruction_mse: ya.mse(&yb)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = model_forward(pruned, x, None)?;
    let end_to_end_mse = inputs.last().expect("final output").mse(&out)?;
    let report = EvalReport {
        layers,
        end_to_end_mse,
        params_before: original.param_count(),
        params_after: pruned.param_count(),
        expert_params_before: original.expert_param_count(),
        expert_params_after: pruned.expert_param_count(),
        eval_tokens: x.rows(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let values = std::iter::once(report.end_to_end_mse).chain(report.layers.iter().map(|l| l.reconstruction_mse));
    if values.clone().any(|v| !(v.is_finite() && v >= 0.0)) {
        return Err(Error::Numeric("evaluation produced a non-finite error".into()));
    }
    Ok(report)
}

/// Default evaluation tokens: standard normal, seeded separately from calibration.
pub fn eval_tokens(n: usize, d_model: usize, seed: u64) -> Matrix<Real> {
    random_tokens(n, d_model, seed ^ 0x5eed_e7a1)
}

/// A pruning run driven by files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneJob {
    pub model: PathBuf,
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    /// Rows per calibration batch and number of batches drawn from the corpus.
    #[serde(default = "default_calib_rows")]
    pub calib_rows: usize,
    #[serde(default = "default_calib_batches")]
    pub calib_batches: usize,
    /// Embeddings used for evaluation; random tokens when absent.
    #[serde(default)]
    pub eval: Option<PathBuf>,
    #[serde(default = "default_eval_tokens")]
    pub eval_tokens: usize,
    pub out_dir: PathBuf,
    #[serde(flatten)]
    pub settings: PruneSettings,
}

fn default_calib_rows() -> usize {
    128
}

fn default_calib_batches() -> usize {
    1
}

fn default_eval_tokens() -> usize {
    64
}

impl PruneJob {
    pub fn new(model: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, settings: PruneSettings) -> Self {
        Self {
            model: model.into(),
            calibration: None,
            calib_rows: default_calib_rows(),
            calib_batches: default_calib_batches(),
            eval: None,
            eval_tokens: default_eval_tokens(),
            out_dir: out_dir.into(),
            settings,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.settings.validate(self.calibration.is_some())
    }

    pub fn load_calibration(&self) -> Result<Vec<CalibrationBatch<Real>>> {
        match &self.calibration {
            Some(p) => io::load_calibration(p, self.calib_rows, self.calib_batches, self.settings.seed),
            None => Ok(Vec::new()),
        }
    }

    pub fn load_eval(&self, d_model: usize) -> Result<Matrix<Real>> {
        match &self.eval {
            Some(p) => io::load_embeddings(p),
            None => Ok(eval_tokens(self.eval_tokens, d_model, self.settings.seed)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub groups: Vec<Vec<usize>>,
    pub objective_value: Option<f64>,
    pub merge: MergeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learned_eval_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform_eval_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub settings: PruneSettings,
    pub layers: Vec<LayerSummary>,
    pub eval: EvalReport,
}

impl PipelineReport {
    fn new(settings: &PruneSettings, outcome: &PruneOutcome, eval: EvalReport) -> Self {
        let layers = outcome
            .partitions
            .iter()
            .zip(&outcome.specs)
            .zip(&outcome.learned)
            .enumerate()
            .map(|(l, ((p, spec), learned))| LayerSummary {
                layer: l,
                groups: p.groups.clone(),
                objective_value: p.objective_value,
                merge: spec.clone(),
                learned_eval_loss: learned.as_ref().map(|o| o.eval_loss),
                uniform_eval_loss: learned.as_ref().map(|o| o.uniform_eval_loss),
            })
            .collect();
        Self {
            settings: settings.clone(),
            layers,
            eval,
        }
    }
}

pub fn write_json<S: Serialize>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<S> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Per-layer groups as a plain nested array.
pub fn save_groups(path: impl AsRef<Path>, partitions: &[Partition]) -> Result<()> {
    let groups: Vec<&Vec<Vec<usize>>> = partitions.iter().map(|p| &p.groups).collect();
    write_json(path, &groups)
}

pub fn load_groups(path: impl AsRef<Path>, m: &MoEModel<Real>) -> Result<Vec<Partition>> {
    let groups: Vec<Vec<Vec<usize>>> = read_json(path)?;
    if groups.len() != m.layers.len() {
        return Err(Error::Config(format!(
            "groups file has {} layers, model has {}",
            groups.len(),
            m.layers.len()
        )));
    }
    groups
        .into_iter()
        .zip(&m.layers)
        .enumerate()
        .map(|(l, (g, layer))| Partition::new(g, layer.n_experts()).map_err(|e| e.in_layer(l)))
        .collect()
}

pub fn similarity_csv_name(layer: usize) -> String {
    format!("sim_layer{layer}.csv")
}

/// Runs `job` and writes `pruned.bin`, `groups.json`, `report.json` and one
/// similarity CSV per layer into `job.out_dir`.
pub fn run_pipeline(job: &PruneJob) -> Result<PipelineReport> {
    job.validate()?;
    let start = Instant::now();
    let m: MoEModel<Real> = io::load_model::<Storage>(&job.model)?.cast();
    let calib = job.load_calibration()?;
    let x_eval = job.load_eval(m.d_model)?;
    let outcome = prune(&m, &calib, &job.settings)?;
    let mut eval = evaluate(&m, &outcome.pruned, &x_eval)?;
    eval.wall_time_s = start.elapsed().as_secs_f64();
    let report = PipelineReport::new(&job.settings, &outcome, eval);

    fs::create_dir_all(&job.out_dir)?;
    io::save_model(&outcome.pruned.cast::<Storage>(), job.out_dir.join("pruned.bin"))?;
    save_groups(job.out_dir.join("groups.json"), &outcome.partitions)?;
    for (l, sim) in outcome.similarities.iter().enumerate() {
        fs::write(job.out_dir.join(similarity_csv_name(l)), sim.to_csv())?;
    }
    write_json(job.out_dir.join("report.json"), &report)?;
    log::info!(
        "pruned {} -> {} parameters, end-to-end mse {:.3e}, {:.2}s",
        report.eval.params_before,
        report.eval.params_after,
        report.eval.end_to_end_mse,
        report.eval.wall_time_s
    );
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRow {
    pub dropped: Vec<usize>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDropTable {
    pub layer: usize,
    pub rows: Vec<DropRow>,
    pub best: Vec<usize>,
    pub best_loss: f64,
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    usize::try_from(acc).unwrap_or(usize::MAX)
}

/// Scores every way of dropping `drop_count` experts from each layer.
///
/// Layers are scored independently on the inputs they receive in the
/// original model. Subsets that include a protected expert are skipped; the
/// first subset in lexicographic order wins ties.
pub fn enumerate_drop(m: &MoEModel<Real>, drop_count: usize, x: &Matrix<Real>) -> Result<Vec<LayerDropTable>> {
    for (l, layer) in m.layers.iter().enumerate() {
        let subsets = binomial(layer.n_experts(), drop_count);
        if subsets > MAX_DROP_SUBSETS {
            return Err(Error::Config(format!(
                "layer {l}: {subsets} drop subsets exceed the limit of {MAX_DROP_SUBSETS}; use greedy grouping instead"
            )));
        }
        if drop_count >= layer.n_experts() {
            return Err(Error::Config(format!(
                "cannot drop {drop_count} of {} experts in layer {l}",
                layer.n_experts()
            )));
        }
    }
    let inputs = m.layer_inputs(x)?;
    m.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| -> Result<LayerDropTable> {
            let y = layer_forward(layer, &inputs[l], None)?;
            let subsets: Vec<Vec<usize>> = (0..layer.n_experts())
                .combinations(drop_count)
                .filter(|s| s.iter().all(|i| !layer.protected().contains(i)))
                .collect();
            let rows = subsets
                .into_par_iter()
                .map(|dropped| -> Result<DropRow> {
                    let reduced = drop_experts(layer, &dropped)?;
                    let loss = layer_forward(&reduced, &inputs[l], None)?.mse(&y)?;
                    Ok(DropRow { dropped, loss })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_layer(l))?;
            let best = rows
                .iter()
                .fold(None::<&DropRow>, |b, r| match b {
                    Some(b) if b.loss <= r.loss => Some(b),
                    _ => Some(r),
                })
                .ok_or_else(|| Error::Config(format!("layer {l}: no droppable subset")))?;
            Ok(LayerDropTable {
                layer: l,
                best: best.dropped.clone(),
                best_loss: best.loss,
                rows,
            })
        })
        .collect()
}

/// Applies one drop set per layer.
pub fn drop_model(m: &MoEModel<Real>, drops: &[Vec<usize>]) -> Result<MoEModel<Real>> {
    if drops.len() != m.layers.len() {
        return Err(Error::Config(format!("{} drop sets for {} layers", drops.len(), m.layers.len())));
    }
    let layers = m
        .layers
        .iter()
        .zip(drops)
        .enumerate()
        .map(|(l, (layer, d))| drop_experts(layer, d).map_err(|e| e.in_layer(l)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = MoEModel::new(layers, m.d_model)?;
    out.metadata = m.metadata.clone();
    Ok(out)
}

/// Visit counts of every layer over all batches.
pub fn hint_stats(m: &MoEModel<Real>, calib: &[CalibrationBatch<Real>]) -> Result<VisitCounter> {
    if calib.is_empty() {
        return Err(Error::Config("visit statistics need calibration data".into()));
    }
    let mut total = VisitCounter::for_model(m);
    for b in calib {
        let mut c = VisitCounter::for_model(m);
        model_forward(m, b.embeddings(), Some(&mut c))?;
        total.absorb(&c);
    }
    Ok(total)
}

/// `layer,expert,count,share` rows, share = count / (tokens · K).
pub fn hints_csv(m: &MoEModel<Real>, visits: &VisitCounter) -> String {
    let mut out = String::from("layer,expert,count,share\n");
    for (l, (layer, v)) in m.layers.iter().zip(&visits.layers).enumerate() {
        for (e, (c, s)) in v.counts.iter().zip(v.shares(layer.top_k())).enumerate() {
            out.push_str(&format!("{l},{e},{c},{s}\n"));
        }
    }
    out
}

/// Drops the `N − r` least visited unprotected experts of every layer; ties
/// keep the lower index.
pub fn count_guided(m: &MoEModel<Real>, visits: &VisitCounter, r: usize) -> Result<MoEModel<Real>> {
    let drops = m
        .layers
        .iter()
        .zip(&visits.layers)
        .enumerate()
        .map(|(l, (layer, v))| -> Result<Vec<usize>> {
            let n = layer.n_experts();
            if r > n || v.counts.len() != n {
                return Err(Error::Config(format!("layer {l}: cannot keep {r} of {n} experts")));
            }
            let mut candidates: Vec<usize> = (0..n).filter(|i| !layer.protected().contains(i)).collect();
            candidates.sort_by(|&a, &b| v.counts[a].cmp(&v.counts[b]).then(b.cmp(&a)));
            if candidates.len() < n - r {
                return Err(Error::Config(format!("layer {l}: too many protected experts to keep only {r}")));
            }
            let mut d = candidates[..n - r].to_vec();
            d.sort_unstable();
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    drop_model(m, &drops)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub settings: PruneSettings,
    pub eval: EvalReport,
    /// Count-guided dropping to the same `r`, when calibration is available.
    pub count_guided: Option<EvalReport>,
}

/// Runs every job on the same model and data.
pub fn compare_strategies(
    m: &MoEModel<Real>,
    calib: &[CalibrationBatch<Real>],
    x_eval: &Matrix<Real>,
    jobs: &[PruneSettings],
) -> Result<Vec<ComparisonRow>> {
    let visits = if calib.is_empty() {
        None
    } else {
        Some(hint_stats(m, calib)?)
    };
    jobs.iter()
        .map(|s| {
            let outcome = prune(m, calib, s)?;
            let count_guided = match &visits {
                Some(v) => Some(evaluate(m, &count_guided(m, v, s.r)?, x_eval)?),
                None => None,
            };
            Ok(ComparisonRow {
                label: s.label(),
                settings: s.clone(),
                eval: evaluate(m, &outcome.pruned, x_eval)?,
                count_guided,
            })
        })
        .collect()
}
