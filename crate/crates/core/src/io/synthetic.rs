//! Synthetic MoE models with planted groups of near-duplicate experts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Activation, ExpertParams, MoELayer, MoEModel};
use crate::scalar::Scalar;

fn default_router_std() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

/// Recipe for [`generate_synthetic`]. Expert indices are zero-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_experts: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub top_k: usize,
    /// Disjoint cover of `0..n_experts`; members of a group share one base expert.
    pub duplicate_groups: Vec<Vec<usize>>,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
    /// Standard deviation of router entries.
    #[serde(default = "default_router_std")]
    pub router_std: f64,
    /// Members of a planted group also share their router row (plus the same
    /// noise); otherwise every router row is drawn independently.
    #[serde(default = "default_true")]
    pub tie_router: bool,
    #[serde(default)]
    pub renormalize_topk: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_experts: 8,
            d_model: 16,
            d_ff: 32,
            n_layers: 2,
            top_k: 2,
            duplicate_groups: (0..4).map(|g| vec![2 * g, 2 * g + 1]).collect(),
            noise_sigma: 0.0,
            seed: 0,
            activation: Activation::Silu,
            router_std: default_router_std(),
            tie_router: true,
            renormalize_topk: false,
        }
    }
}

impl SyntheticSpec {
    /// `n_experts` experts planted as consecutive pairs.
    pub fn paired(n_experts: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            n_experts,
            duplicate_groups: (0..n_experts / 2).map(|g| vec![2 * g, 2 * g + 1]).collect(),
            noise_sigma,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.n_experts];
        for g in &self.duplicate_groups {
            if g.is_empty() {
                return Err(Error::Config("empty planted group".into()));
            }
            for &i in g {
                if i >= self.n_experts || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Config(format!(
                        "planted groups must be a disjoint cover of 0..{}; bad index {i}",
                        self.n_experts
                    )));
                }
            }
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(Error::Config(format!("expert {i} is in no planted group")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("d_model and d_ff must be positive".into()));
        }
        Ok(())
    }

    /// Planted group id of every expert.
    pub fn group_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_experts];
        for (g, members) in self.duplicate_groups.iter().enumerate() {
            for &i in members {
                out[i] = g;
            }
        }
        out
    }
}

fn sample_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..rows * cols).map(|_| normal.sample(rng)).collect()
}

fn perturb(base: &[f64], rng: &mut ChaCha8Rng, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return base.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    base.iter().map(|&v| v + normal.sample(rng)).collect()
}

fn to_matrix<T: Scalar>(rows: usize, cols: usize, v: Vec<f64>) -> Matrix<T> {
    Matrix::new(rows, cols, v.into_iter().map(T::lit).collect()).expect("sized buffer")
}

/// Builds a model whose planted groups hold one random base expert plus
/// i.i.d. Gaussian noise of scale `noise_sigma` per weight.
///
/// Weights are drawn as N(0, 1/fan_in); the model is a pure function of `spec`.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<MoEModel<T>> {
    spec.validate()?;
    let (n, d, dff) = (spec.n_experts, spec.d_model, spec.d_ff);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::with_capacity(spec.n_layers);
    for _ in 0..spec.n_layers {
        let mut experts: Vec<Option<ExpertParams<T>>> = vec![None; n];
        let mut router = vec![Vec::new(); n];
        for group in &spec.duplicate_groups {
            let t1 = sample_matrix(&mut rng, dff, d, 1.0 / (d as f64).sqrt());
            let t2 = sample_matrix(&mut rng, d, dff, 1.0 / (dff as f64).sqrt());
            let t3 = sample_matrix(&mut rng, dff, d, 1.0 / (d as f64).sqrt());
            let w = sample_matrix(&mut rng, 1, d, spec.router_std);
            for &i in group {
                experts[i] = Some(ExpertParams::new(
                    to_matrix(dff, d, perturb(&t1, &mut rng, spec.noise_sigma)),
                    to_matrix(d, dff, perturb(&t2, &mut rng, spec.noise_sigma)),
                    to_matrix(dff, d, perturb(&t3, &mut rng, spec.noise_sigma)),
                    spec.activation,
                )?);
                router[i] = if spec.tie_router {
                    perturb(&w, &mut rng, spec.noise_sigma)
                } else {
                    sample_matrix(&mut rng, 1, d, spec.router_std)
                };
            }
        }
        let router = to_matrix(n, d, router.concat());
        let experts = experts.into_iter().map(|e| e.expect("cover checked")).collect();
        layers.push(MoELayer::new(experts, router, spec.top_k)?.with_renormalize(spec.renormalize_topk));
    }
    let mut m = MoEModel::new(layers, d)?;
    m.metadata.insert("source".into(), "synthetic".into());
    m.metadata.insert("seed".into(), spec.seed.to_string());
    m.metadata.insert("noise_sigma".into(), spec.noise_sigma.to_string());
    Ok(m)
}

/// `rows × d_model` standard-normal tokens.
pub fn random_tokens<T: Scalar>(rows: usize, d_model: usize, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    to_matrix(rows, d_model, sample_matrix(&mut rng, rows, d_model, 1.0))
}
