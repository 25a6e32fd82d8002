//! Collapsing expert groups into single experts in weight space.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::Partition;
use crate::io::CalibrationBatch;
use crate::matrix::Matrix;
use crate::model::{layer_forward, softmax, ExpertParams, LayerVisits, MoELayer, MoEModel};
use crate::scalar::Scalar;

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MergeStrategy {
    #[default]
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "max", alias = "max-frequency")]
    MaxFrequency,
    #[serde(rename = "learn", alias = "learned")]
    Learned,
}

impl MergeStrategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::MaxFrequency => "max",
            Self::Learned => "learn",
        }
    }

    pub fn needs_calibration(self) -> bool {
        self != Self::Uniform
    }
}

/// Merge coefficients for one layer: a simplex vector per group, plus a
/// scale per group that only [`MergeStrategy::Learned`] applies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub strategy: MergeStrategy,
    pub alphas: Vec<Vec<f64>>,
    pub lambdas: Vec<f64>,
}

impl MergeSpec {
    pub fn validate(&self, p: &Partition) -> Result<()> {
        if self.alphas.len() != p.r() || self.lambdas.len() != p.r() {
            return Err(Error::Config(format!(
                "merge spec has {} alpha vectors and {} lambdas for {} groups",
                self.alphas.len(),
                self.lambdas.len(),
                p.r()
            )));
        }
        for (g, (a, members)) in self.alphas.iter().zip(&p.groups).enumerate() {
            if a.len() != members.len() {
                return Err(Error::Config(format!(
                    "group {g} has {} members but {} coefficients",
                    members.len(),
                    a.len()
                )));
            }
            let sum: f64 = a.iter().sum();
            if a.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Config(format!("group {g} coefficients {a:?} are not on the simplex")));
            }
        }
        if self.lambdas.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric("non-finite lambda".into()));
        }
        Ok(())
    }
}

pub fn uniform_alphas(p: &Partition) -> MergeSpec {
    MergeSpec {
        strategy: MergeStrategy::Uniform,
        alphas: p
            .groups
            .iter()
            .map(|g| vec![1.0 / g.len() as f64; g.len()])
            .collect(),
        lambdas: vec![1.0; p.r()],
    }
}

/// Keeps the most visited member of each group (ties go to the lower index).
pub fn max_frequency_spec(p: &Partition, visits: &LayerVisits) -> Result<MergeSpec> {
    if visits.counts.len() != p.n() {
        return Err(Error::Config(format!(
            "visit counts cover {} experts, partition covers {}",
            visits.counts.len(),
            p.n()
        )));
    }
    let alphas = p
        .groups
        .iter()
        .map(|g| {
            let mut best = 0;
            for (pos, &i) in g.iter().enumerate() {
                if visits.counts[i] > visits.counts[g[best]] {
                    best = pos;
                }
            }
            (0..g.len()).map(|pos| if pos == best { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    Ok(MergeSpec {
        strategy: MergeStrategy::MaxFrequency,
        alphas,
        lambdas: vec![1.0; p.r()],
    })
}

fn combine<T: Scalar>(parts: &[&Matrix<T>], alphas: &[f64], uniform: bool) -> Matrix<T> {
    let mut out = Matrix::zeros(parts[0].rows(), parts[0].cols());
    if uniform {
        for m in parts {
            out.add_scaled(m, T::one()).expect("same shapes");
        }
        return out.scale(T::one() / T::from_usize(parts.len()).unwrap());
    }
    for (m, &a) in parts.iter().zip(alphas) {
        if a != 0.0 {
            out.add_scaled(m, T::lit(a)).expect("same shapes");
        }
    }
    out
}

/// Merges every group of `p` into one expert and one router row.
///
/// Output experts are ordered by the smallest original index in their group;
/// `top_k` is kept unchanged.
pub fn merge_layer<T: Scalar>(layer: &MoELayer<T>, p: &Partition, spec: &MergeSpec) -> Result<MoELayer<T>> {
    merge_layer_with_top_k(layer, p, spec, layer.top_k())
}

fn merge_layer_with_top_k<T: Scalar>(
    layer: &MoELayer<T>,
    p: &Partition,
    spec: &MergeSpec,
    top_k: usize,
) -> Result<MoELayer<T>> {
    if p.n() != layer.n_experts() {
        return Err(Error::Partition(format!(
            "partition covers {} experts, layer has {}",
            p.n(),
            layer.n_experts()
        )));
    }
    let p = Partition {
        objective_value: p.objective_value,
        ..Partition::new(p.groups.clone(), layer.n_experts())?
    };
    spec.validate(&p)?;
    p.check_protected(layer.protected())?;
    if top_k > p.r() {
        return Err(Error::Config(format!(
            "top_k = {top_k} exceeds the {} experts left after merging; lower top_k",
            p.r()
        )));
    }
    let uniform = spec.strategy == MergeStrategy::Uniform;
    let d = layer.d_model();
    let mut experts = Vec::with_capacity(p.r());
    let mut router = Vec::with_capacity(p.r() * d);
    for (g, members) in p.groups.iter().enumerate() {
        let alphas = &spec.alphas[g];
        let lambda = if spec.strategy == MergeStrategy::Learned {
            spec.lambdas[g]
        } else {
            1.0
        };
        let src: Vec<&ExpertParams<T>> = members.iter().map(|&i| &layer.experts()[i]).collect();
        let mut e = if members.len() == 1 {
            src[0].clone()
        } else {
            let pick = |f: fn(&ExpertParams<T>) -> &Matrix<T>| -> Vec<&Matrix<T>> { src.iter().map(|e| f(e)).collect() };
            ExpertParams {
                theta1: combine(&pick(|e| &e.theta1), alphas, uniform),
                theta2: combine(&pick(|e| &e.theta2), alphas, uniform),
                theta3: combine(&pick(|e| &e.theta3), alphas, uniform),
                activation: src[0].activation,
            }
        };
        if lambda != 1.0 {
            let l = T::lit(lambda);
            e.theta1 = e.theta1.scale(l);
            e.theta2 = e.theta2.scale(l);
            e.theta3 = e.theta3.scale(l);
        }
        experts.push(e);
        let rows: Vec<Matrix<T>> = members
            .iter()
            .map(|&i| Matrix::new(1, d, layer.router().row(i).to_vec()).expect("row"))
            .collect();
        let refs: Vec<&Matrix<T>> = rows.iter().collect();
        router.extend(combine(&refs, alphas, uniform && members.len() > 1).into_vec());
    }
    let assignment = p.assignment();
    let protected: Vec<usize> = layer.protected().iter().map(|&i| assignment[i]).collect();
    MoELayer::new(experts, Matrix::new(p.r(), d, router)?, top_k)?
        .with_renormalize(layer.renormalize_topk())
        .with_protected(protected)
}

/// Removes experts and their router rows without merging anything.
pub fn drop_experts<T: Scalar>(layer: &MoELayer<T>, drop: &[usize]) -> Result<MoELayer<T>> {
    let n = layer.n_experts();
    let mut dropped = vec![false; n];
    for &i in drop {
        if i >= n {
            return Err(Error::Config(format!("cannot drop expert {i} of {n}")));
        }
        if layer.protected().contains(&i) {
            return Err(Error::Config(format!("expert {i} is protected")));
        }
        dropped[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !dropped[i]).collect();
    if layer.top_k() > keep.len() {
        return Err(Error::Config(format!(
            "top_k = {} exceeds the {} experts left after dropping; lower top_k",
            layer.top_k(),
            keep.len()
        )));
    }
    let experts = keep.iter().map(|&i| layer.experts()[i].clone()).collect();
    let protected: Vec<usize> = keep
        .iter()
        .enumerate()
        .filter(|(_, i)| layer.protected().contains(i))
        .map(|(pos, _)| pos)
        .collect();
    MoELayer::new(experts, layer.router().select_rows(&keep), layer.top_k())?
        .with_renormalize(layer.renormalize_topk())
        .with_protected(protected)
}

/// How `top_k` of a pruned layer is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopKPolicy {
    /// Keep the original `K`.
    #[default]
    Preserve,
    /// Scale `K` with the expert count: `max(1, round(K·r/N))`.
    Proportional,
}

impl TopKPolicy {
    pub fn apply(self, top_k: usize, n: usize, r: usize) -> usize {
        match self {
            Self::Preserve => top_k,
            Self::Proportional => ((top_k * r) as f64 / n as f64).round().max(1.0) as usize,
        }
    }
}

pub fn prune_model<T: Scalar>(m: &MoEModel<T>, per_layer: &[(Partition, MergeSpec)]) -> Result<MoEModel<T>> {
    prune_model_with(m, per_layer, TopKPolicy::Preserve)
}

pub fn prune_model_with<T: Scalar>(
    m: &MoEModel<T>,
    per_layer: &[(Partition, MergeSpec)],
    policy: TopKPolicy,
) -> Result<MoEModel<T>> {
    if per_layer.len() != m.layers.len() {
        return Err(Error::Config(format!(
            "{} merge plans for {} layers",
            per_layer.len(),
            m.layers.len()
        )));
    }
    let layers = m
        .layers
        .iter()
        .zip(per_layer)
        .enumerate()
        .map(|(l, (layer, (p, spec)))| {
            let k = policy.apply(layer.top_k(), layer.n_experts(), p.r());
            merge_layer_with_top_k(layer, p, spec, k).map_err(|e| e.in_layer(l))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = MoEModel::new(layers, m.d_model)?;
    out.metadata = m.metadata.clone();
    let rs: Vec<String> = per_layer.iter().map(|(p, _)| p.r().to_string()).collect();
    out.metadata.insert("pruned_experts_per_layer".into(), rs.join(","));
    Ok(out)
}

/// Parameter count of `m` with `r[l]` experts left in layer `l`, from shapes alone.
pub fn analytic_parameter_count<T: Scalar>(m: &MoEModel<T>, r: &[usize]) -> usize {
    m.layers
        .iter()
        .zip(r)
        .map(|(l, &r)| r * (3 * l.d_model() * l.d_ff() + l.d_model()))
        .sum()
}

/// Optimiser settings for [`learn_alphas`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub lr: f64,
    pub epochs: usize,
    pub samples: usize,
    pub train_fraction: f64,
    pub batch_size: usize,
    pub fd_step: f64,
    pub learn_lambda: bool,
    pub seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 50,
            samples: 128,
            train_fraction: 0.75,
            batch_size: 8,
            fd_step: 1e-4,
            learn_lambda: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnOutcome {
    pub spec: MergeSpec,
    pub eval_loss: f64,
    pub uniform_eval_loss: f64,
    pub train_loss: f64,
    /// Epoch that produced `spec`; 0 means the uniform start was never beaten.
    pub best_epoch: usize,
}

struct Objective<'a, T> {
    layer: &'a MoELayer<T>,
    p: &'a Partition,
    /// groups with more than one member, whose logits are trainable
    free: Vec<usize>,
    learn_lambda: bool,
}

impl<T: Scalar> Objective<'_, T> {
    fn n_params(&self) -> usize {
        self.free.iter().map(|&g| self.p.groups[g].len()).sum::<usize>()
            + if self.learn_lambda { self.p.r() } else { 0 }
    }

    fn initial(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n_params()];
        if self.learn_lambda {
            let n = v.len();
            v[n - self.p.r()..].fill(1.0);
        }
        v
    }

    fn spec(&self, params: &[f64]) -> MergeSpec {
        let mut alphas: Vec<Vec<f64>> = self.p.groups.iter().map(|g| vec![1.0 / g.len() as f64; g.len()]).collect();
        let mut at = 0;
        for &g in &self.free {
            let k = self.p.groups[g].len();
            alphas[g] = softmax(&params[at..at + k]);
            at += k;
        }
        let lambdas = if self.learn_lambda {
            params[at..].to_vec()
        } else {
            vec![1.0; self.p.r()]
        };
        MergeSpec {
            strategy: MergeStrategy::Learned,
            alphas,
            lambdas,
        }
    }

    fn loss(&self, params: &[f64], x: &Matrix<T>, y: &Matrix<T>) -> Result<f64> {
        let merged = merge_layer(self.layer, self.p, &self.spec(params))?;
        let v = layer_forward(&merged, x, None)?.mse(y)?.to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("merge loss became {v} at parameters {params:?}")));
        }
        Ok(v)
    }
}

/// Learns merge coefficients by minimising the reconstruction error of the
/// layer output.
///
/// `calib` holds the inputs of this layer. Gradients are central finite
/// differences, the optimiser is plain minibatch SGD, and the iterate with
/// the lowest eval-split loss is returned (the uniform start included).
pub fn learn_alphas<T: Scalar>(
    layer: &MoELayer<T>,
    p: &Partition,
    calib: &[CalibrationBatch<T>],
    cfg: &LearnConfig,
) -> Result<LearnOutcome> {
    if calib.is_empty() {
        return Err(Error::Config("learned merging needs calibration data".into()));
    }
    if !(cfg.lr > 0.0 && cfg.fd_step > 0.0 && cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Config(format!("invalid learning settings {cfg:?}")));
    }
    let p = Partition::new(p.groups.clone(), layer.n_experts())?;
    let parts: Vec<&Matrix<T>> = calib.iter().map(CalibrationBatch::embeddings).collect();
    let all = Matrix::vstack(&parts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows: Vec<usize> = (0..all.rows()).collect();
    rows.shuffle(&mut rng);
    rows.truncate(cfg.samples.max(2));
    if rows.len() < 2 {
        return Err(Error::Config("learned merging needs at least 2 calibration rows".into()));
    }
    let n_train = ((rows.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, rows.len() - 1);
    let x_train = all.select_rows(&rows[..n_train]);
    let x_eval = all.select_rows(&rows[n_train..]);
    let y_train = layer_forward(layer, &x_train, None)?;
    let y_eval = layer_forward(layer, &x_eval, None)?;

    let obj = Objective {
        layer,
        p: &p,
        free: (0..p.r()).filter(|&g| p.groups[g].len() > 1).collect(),
        learn_lambda: cfg.learn_lambda,
    };
    let mut params = obj.initial();
    let uniform_eval = obj.loss(&params, &x_eval, &y_eval)?;
    let mut best = (uniform_eval, params.clone(), 0usize);
    let h = cfg.fd_step;
    let batch = cfg.batch_size.clamp(1, n_train);
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=cfg.epochs {
        if params.is_empty() {
            break;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xb = x_train.select_rows(chunk);
            let yb = y_train.select_rows(chunk);
            let mut grad = vec![0.0; params.len()];
            for i in 0..params.len() {
                let keep = params[i];
                params[i] = keep + h;
                let up = obj.loss(&params, &xb, &yb)?;
                params[i] = keep - h;
                let down = obj.loss(&params, &xb, &yb)?;
                params[i] = keep;
                grad[i] = (up - down) / (2.0 * h);
            }
            for (w, g) in params.iter_mut().zip(&grad) {
                *w -= cfg.lr * g;
            }
        }
        let ev = obj.loss(&params, &x_eval, &y_eval)?;
        log::debug!("epoch {epoch}: eval loss {ev:.6e}");
        if ev < best.0 {
            best = (ev, params.clone(), epoch);
        }
    }
    let (eval_loss, params, best_epoch) = best;
    Ok(LearnOutcome {
        train_loss: obj.loss(&params, &x_train, &y_train)?,
        spec: obj.spec(&params),
        eval_loss,
        uniform_eval_loss: uniform_eval,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synthetic, random_tokens, SyntheticSpec};
    use crate::model::{model_forward, Activation};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn fixture(noise: f64) -> MoEModel<f64> {
        generate_synthetic(&SyntheticSpec {
            noise_sigma: noise,
            seed: 11,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn pairs(n: usize) -> Partition {
        Partition::new((0..n / 2).map(|g| vec![2 * g, 2 * g + 1]).collect(), n).unwrap()
    }

    #[test]
    fn singleton_merge_is_identity() {
        let m = fixture(0.1);
        let p = Partition::singletons(8);
        let merged = merge_layer(&m.layers[0], &p, &uniform_alphas(&p)).unwrap();
        assert_eq!(merged, m.layers[0]);
    }

    #[test]
    fn identical_pair_is_idempotent() {
        let m = fixture(0.0);
        let p = Partition::new(vec![vec![0, 1], vec![2], vec![3], vec![4], vec![5], vec![6], vec![7]], 8).unwrap();
        let merged = merge_layer(&m.layers[0], &p, &uniform_alphas(&p)).unwrap();
        assert_eq!(merged.experts()[0], m.layers[0].experts()[0]);
        assert_eq!(merged.router().row(0), m.layers[0].router().row(0));
        assert_eq!(merged.n_experts(), 7);
        assert_eq!(merged.experts()[1], m.layers[0].experts()[2]);
    }

    #[test]
    fn router_row_is_mean() {
        let m = fixture(0.1);
        let l = &m.layers[0];
        let p = Partition::new(vec![vec![0, 5], vec![1, 2, 3, 4, 6, 7]], 8).unwrap();
        let merged = merge_layer(&l.clone().with_top_k(1).unwrap(), &p, &uniform_alphas(&p)).unwrap();
        for c in 0..16 {
            let want = (l.router()[(0, c)] + l.router()[(5, c)]) / 2.0;
            assert!((merged.router()[(0, c)] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn theta_and_three_theta_average_to_two_theta() {
        let m = fixture(0.0);
        let base = m.layers[0].experts()[0].clone();
        let triple = ExpertParams {
            theta1: base.theta1.scale(3.0),
            theta2: base.theta2.scale(3.0),
            theta3: base.theta3.scale(3.0),
            activation: base.activation,
        };
        let layer = MoELayer::new(vec![base.clone(), triple], Matrix::zeros(2, 16), 1).unwrap();
        let p = Partition::new(vec![vec![0, 1]], 2).unwrap();
        let spec = MergeSpec {
            strategy: MergeStrategy::Learned,
            alphas: vec![vec![0.5, 0.5]],
            lambdas: vec![1.0],
        };
        let merged = merge_layer(&layer, &p, &spec).unwrap();
        let want = base.theta2.scale(2.0);
        for (a, b) in merged.experts()[0].theta2.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn lambda_scales_weights_not_router() {
        let m = fixture(0.05);
        let l = m.layers[0].clone().with_top_k(1).unwrap();
        let p = Partition::new(vec![vec![0, 1, 2, 3, 4, 5, 6, 7]], 8).unwrap();
        let mut spec = uniform_alphas(&p);
        spec.strategy = MergeStrategy::Learned;
        spec.alphas = vec![vec![0.125; 8]];
        spec.lambdas = vec![2.0];
        let scaled = merge_layer(&l, &p, &spec).unwrap();
        spec.lambdas = vec![1.0];
        let plain = merge_layer(&l, &p, &spec).unwrap();
        assert_eq!(scaled.router(), plain.router());
        assert_eq!(scaled.experts()[0].theta1, plain.experts()[0].theta1.scale(2.0));
        // uniform ignores lambda
        let mut u = uniform_alphas(&p);
        u.lambdas = vec![2.0];
        assert_eq!(merge_layer(&l, &p, &u).unwrap().experts()[0].theta3, uniform_merge_theta3(&l));
    }

    fn uniform_merge_theta3(l: &MoELayer<f64>) -> Matrix<f64> {
        let mut acc = Matrix::zeros(32, 16);
        for e in l.experts() {
            acc = acc.add(&e.theta3).unwrap();
        }
        acc.scale(1.0 / 8.0)
    }

    #[test]
    fn output_order_and_top_k() {
        let m = fixture(0.1);
        let p = Partition::new(vec![vec![7, 1], vec![0, 3], vec![2], vec![4, 5, 6]], 8).unwrap();
        let merged = merge_layer(&m.layers[0], &p, &uniform_alphas(&p)).unwrap();
        // groups sorted by minimum: {0,3}, {1,7}, {2}, {4,5,6}
        assert_eq!(merged.experts()[2], m.layers[0].experts()[2]);
        assert_eq!(merged.top_k(), 2);
        let p1 = Partition::new(vec![(0..8).collect()], 8).unwrap();
        let err = merge_layer(&m.layers[0], &p1, &uniform_alphas(&p1)).unwrap_err();
        assert!(matches!(err, Error::Config(msg) if msg.contains("lower top_k")));
    }

    #[test]
    fn protected_experts_are_remapped() {
        let m = fixture(0.1);
        let l = m.layers[0].clone().with_protected([4]).unwrap();
        let p = Partition::new(vec![vec![0, 1], vec![2, 3], vec![4], vec![5, 6, 7]], 8).unwrap();
        let merged = merge_layer(&l, &p, &uniform_alphas(&p)).unwrap();
        assert_eq!(merged.protected(), &BTreeSet::from([2]));
        let bad = Partition::new(vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]], 8).unwrap();
        assert!(matches!(merge_layer(&l, &bad, &uniform_alphas(&bad)), Err(Error::Partition(_))));
    }

    #[test]
    fn spec_must_match_partition() {
        let m = fixture(0.1);
        let p = pairs(8);
        let mut spec = uniform_alphas(&p);
        spec.alphas[0] = vec![0.7, 0.7];
        assert!(merge_layer(&m.layers[0], &p, &spec).is_err());
        spec.alphas[0] = vec![1.0];
        assert!(merge_layer(&m.layers[0], &p, &spec).is_err());
    }

    #[test]
    fn uniform_alpha_values() {
        let p = Partition::new(vec![vec![0], vec![1, 2, 3]], 4).unwrap();
        let s = uniform_alphas(&p);
        assert_eq!(s.alphas[0], vec![1.0]);
        assert_eq!(s.alphas[1], vec![1.0 / 3.0; 3]);
        let s = uniform_alphas(&Partition::singletons(5));
        assert!(s.alphas.iter().all(|a| a == &vec![1.0]));
    }

    #[test]
    fn max_frequency_indicator() {
        let p = Partition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let visits = LayerVisits {
            counts: vec![5, 9, 7, 7],
            tokens: 14,
        };
        let s = max_frequency_spec(&p, &visits).unwrap();
        assert_eq!(s.alphas, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn max_frequency_keeps_winner_bitwise() {
        let m = fixture(0.1);
        let l = &m.layers[0];
        let mut visits = LayerVisits::new(8);
        layer_forward(l, &random_tokens(64, 16, 2), Some(&mut visits)).unwrap();
        let p = pairs(8);
        let spec = max_frequency_spec(&p, &visits).unwrap();
        let merged = merge_layer(l, &p, &spec).unwrap();
        for (g, members) in p.groups.iter().enumerate() {
            let c = &visits.counts;
            let winner = if c[members[1]] > c[members[0]] { members[1] } else { members[0] };
            assert_eq!(merged.experts()[g], l.experts()[winner]);
            assert_eq!(merged.router().row(g), l.router().row(winner));
        }
    }

    #[test]
    fn prune_identity_and_accounting() {
        let m = fixture(0.1);
        let plan: Vec<_> = (0..2)
            .map(|_| {
                let p = Partition::singletons(8);
                let s = uniform_alphas(&p);
                (p, s)
            })
            .collect();
        let mut same = prune_model(&m, &plan).unwrap();
        same.metadata = m.metadata.clone();
        assert_eq!(same, m);

        let plan: Vec<_> = (0..2)
            .map(|_| {
                let p = Partition::new(vec![vec![0, 1], vec![2, 3], vec![4], vec![5], vec![6], vec![7]], 8).unwrap();
                let s = uniform_alphas(&p);
                (p, s)
            })
            .collect();
        let pruned = prune_model(&m, &plan).unwrap();
        assert_eq!(pruned.param_count(), analytic_parameter_count(&m, &[6, 6]));
        // 25% fewer expert parameters per layer
        for (a, b) in pruned.layers.iter().zip(&m.layers) {
            assert_eq!(a.expert_param_count() * 4, b.expert_param_count() * 3);
        }
    }

    #[test]
    fn planted_duplicates_prune_losslessly() {
        let m = fixture(0.0);
        let plan: Vec<_> = (0..2)
            .map(|_| {
                let p = pairs(8);
                let s = uniform_alphas(&p);
                (p, s)
            })
            .collect();
        let pruned = prune_model_with(&m, &plan, TopKPolicy::Proportional).unwrap();
        assert_eq!(pruned.layers[0].top_k(), 1);
        let x = random_tokens(64, 16, 9);
        let a = model_forward(&m, &x, None).unwrap();
        let b = model_forward(&pruned, &x, None).unwrap();
        assert!(a.mse(&b).unwrap() < 1e-20);
    }

    #[test]
    fn top_k_policy() {
        assert_eq!(TopKPolicy::Preserve.apply(2, 8, 4), 2);
        assert_eq!(TopKPolicy::Proportional.apply(2, 8, 4), 1);
        assert_eq!(TopKPolicy::Proportional.apply(2, 8, 6), 2);
        assert_eq!(TopKPolicy::Proportional.apply(1, 8, 2), 1);
    }

    #[test]
    fn drop_removes_rows() {
        let m = fixture(0.1);
        let l = &m.layers[0];
        let d = drop_experts(l, &[1, 6]).unwrap();
        assert_eq!(d.n_experts(), 6);
        assert_eq!(d.experts()[1], l.experts()[2]);
        assert_eq!(d.router().row(5), l.router().row(7));
        assert!(drop_experts(l, &[0, 1, 2, 3, 4, 5, 6]).is_err());
        assert_eq!(&drop_experts(l, &[]).unwrap(), l);
    }

    fn batches(x: Matrix<f64>) -> Vec<CalibrationBatch<f64>> {
        vec![CalibrationBatch::new(x, "t").unwrap()]
    }

    #[test]
    fn learned_identical_group_recovers_routing_mass() {
        // two copies with tied router rows: the original sends each token to
        // copy 0 with weight 1/2 while the merged expert gets weight 1; only λ
        // can shrink the output back, α has no effect
        let m = fixture(0.0);
        let e = m.layers[0].experts()[0].clone();
        let row = m.layers[0].router().row(0).to_vec();
        let layer = MoELayer::new(vec![e.clone(), e], Matrix::from_rows(&[row.clone(), row]).unwrap(), 1).unwrap();
        let cfg = LearnConfig { lr: 0.2, ..LearnConfig::default() };
        let p = Partition::new(vec![vec![0, 1]], 2).unwrap();
        let out = learn_alphas(&layer, &p, &batches(random_tokens(128, 16, 1)), &cfg).unwrap();
        assert!(out.uniform_eval_loss > 0.0);
        assert!(out.eval_loss < 0.01 * out.uniform_eval_loss, "{out:?}");
        assert_eq!(out.spec.alphas[0], vec![0.5, 0.5]);
        assert!(out.spec.lambdas[0] < 1.0);
    }

    #[test]
    fn learned_recovers_planted_member() {
        // original single-expert layer equals expert a; candidate group is {a, b}
        let m = fixture(0.0);
        let a = m.layers[0].experts()[0].clone();
        let b = m.layers[0].experts()[2].clone();
        let w = Matrix::zeros(2, 16);
        let pair = MoELayer::new(vec![a.clone(), b], w.clone(), 1).unwrap();
        // the tie sends every token to expert 0 with weight 1/2
        let p = Partition::new(vec![vec![0, 1]], 2).unwrap();
        let cfg = LearnConfig {
            lr: 0.5,
            learn_lambda: false,
            epochs: 20,
            ..LearnConfig::default()
        };
        let out = learn_alphas(&pair, &p, &batches(random_tokens(128, 16, 4)), &cfg).unwrap();
        assert!(out.eval_loss < out.uniform_eval_loss);
        assert!(out.spec.alphas[0][0] > 0.5);
    }

    /// Single group of two 1×1 experts sharing θ1 and θ3; the loss is a
    /// quadratic in α with minimiser Σ g²(t − b) / ((a − b) Σ g²).
    #[test]
    fn one_dimensional_closed_form() {
        let (a, b) = (20.0, -10.0);
        let mk = |t2: f64| {
            ExpertParams::new(
                Matrix::filled(1, 1, 1.0),
                Matrix::filled(1, 1, t2),
                Matrix::filled(1, 1, 1.0),
                Activation::Silu,
            )
            .unwrap()
        };
        let router = Matrix::from_rows(&[vec![0.5], vec![-0.5]]).unwrap();
        let layer = MoELayer::new(vec![mk(a), mk(b)], router, 1).unwrap();
        let x = Matrix::from_fn(128, 1, |i, _| 1.0 + i as f64 / 127.0);
        let cfg = LearnConfig {
            learn_lambda: false,
            batch_size: 96,
            ..LearnConfig::default()
        };
        let out = learn_alphas(&layer, &Partition::new(vec![vec![0, 1]], 2).unwrap(), &batches(x.clone()), &cfg).unwrap();

        // the closed form on the eval split, which is what best-iterate selection targets
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut rows: Vec<usize> = (0..128).collect();
        rows.shuffle(&mut rng);
        let (mut num, mut den) = (0.0, 0.0);
        for &r in &rows[96..] {
            let v = x[(r, 0)];
            let g = v / (1.0 + (-v).exp()) * v;
            let p0 = 1.0 / (1.0 + (-v).exp()); // softmax over logits ±v/2
            let t = p0 * a;
            num += g * g * (t - b);
            den += g * g;
        }
        let alpha_star = num / (den * (a - b));
        assert!(
            (out.spec.alphas[0][0] - alpha_star).abs() < 1e-3,
            "learned {} closed form {alpha_star}",
            out.spec.alphas[0][0]
        );
    }

    #[test]
    fn learning_rejects_empty_calibration() {
        let m = fixture(0.0);
        assert!(matches!(
            learn_alphas(&m.layers[0], &pairs(8), &[], &LearnConfig::default()),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn uniform_alphas_sum_to_one(seed in 0u64..500, n in 1usize..12, r_off in 0usize..12) {
            let r = 1 + r_off % n;
            let p = crate::grouping::partition_random(n, r, &BTreeSet::new(), seed).unwrap();
            let s = uniform_alphas(&p);
            prop_assert!(s.validate(&p).is_ok());
            for a in &s.alphas {
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn merged_layers_stay_valid(seed in 0u64..200, r in 2usize..9) {
            let m = fixture(0.1);
            let p = crate::grouping::partition_random(8, r, &BTreeSet::new(), seed).unwrap();
            let merged = merge_layer(&m.layers[1], &p, &uniform_alphas(&p)).unwrap();
            prop_assert!(merged.validate().is_ok());
            prop_assert_eq!(merged.router().rows(), r);
        }
    }
}
