//! Gated-FFN experts, softmax top-K routing and the MoE forward pass.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    GeluTanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Relu => x.max(T::zero()),
            Activation::GeluTanh => {
                let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
                let inner = c * (x + T::lit(0.044715) * x * x * x);
                T::lit(0.5) * x * (T::one() + inner.tanh())
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::GeluTanh => "gelu-tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "silu" => Some(Activation::Silu),
            "relu" => Some(Activation::Relu),
            "gelu-tanh" => Some(Activation::GeluTanh),
            _ => None,
        }
    }
}

/// One gated feed-forward expert: `θ2 · (σ(θ1 x) ⊙ θ3 x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams<T> {
    /// Gate projection, `d_ff × d_model`.
    pub theta1: Matrix<T>,
    /// Down projection, `d_model × d_ff`.
    pub theta2: Matrix<T>,
    /// Up projection, `d_ff × d_model`.
    pub theta3: Matrix<T>,
    pub activation: Activation,
}

impl<T: Scalar> ExpertParams<T> {
    pub fn new(theta1: Matrix<T>, theta2: Matrix<T>, theta3: Matrix<T>, activation: Activation) -> Result<Self> {
        let e = Self {
            theta1,
            theta2,
            theta3,
            activation,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta1.shape() != self.theta3.shape() {
            return Err(Error::Dimension {
                op: "expert gate/up projections",
                left: self.theta1.shape(),
                right: self.theta3.shape(),
            });
        }
        if self.theta2.shape() != (self.theta1.cols(), self.theta1.rows()) {
            return Err(Error::Dimension {
                op: "expert down projection",
                left: self.theta1.shape(),
                right: self.theta2.shape(),
            });
        }
        if !(self.theta1.is_finite() && self.theta2.is_finite() && self.theta3.is_finite()) {
            return Err(Error::InvalidModel("expert weights contain NaN or Inf".into()));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.theta1.cols()
    }

    pub fn d_ff(&self) -> usize {
        self.theta1.rows()
    }

    pub fn param_count(&self) -> usize {
        self.theta1.len() + self.theta2.len() + self.theta3.len()
    }

    pub fn cast<U: Scalar>(&self) -> ExpertParams<U> {
        ExpertParams {
            theta1: self.theta1.cast(),
            theta2: self.theta2.cast(),
            theta3: self.theta3.cast(),
            activation: self.activation,
        }
    }
}

/// Applies one expert to every row of `x` (`s × d_model`).
pub fn expert_forward<T: Scalar>(e: &ExpertParams<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    if x.cols() != e.d_model() {
        return Err(Error::Dimension {
            op: "expert_forward input",
            left: x.shape(),
            right: e.theta1.shape(),
        });
    }
    let gate = x.matmul_t(&e.theta1)?;
    let up = x.matmul_t(&e.theta3)?;
    let act = e.activation;
    let hidden = Matrix::new(
        gate.rows(),
        gate.cols(),
        gate.as_slice()
            .iter()
            .zip(up.as_slice())
            .map(|(&g, &u)| act.apply(g) * u)
            .collect(),
    )?;
    hidden.matmul_t(&e.theta2)
}

/// An MoE layer `F(·; Θ, W, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoELayer<T> {
    experts: Vec<ExpertParams<T>>,
    /// `N × d_model`, one row per expert.
    router: Matrix<T>,
    top_k: usize,
    renormalize_topk: bool,
    /// Experts exempt from pruning (shared experts).
    protected: BTreeSet<usize>,
}

impl<T: Scalar> MoELayer<T> {
    pub fn new(experts: Vec<ExpertParams<T>>, router: Matrix<T>, top_k: usize) -> Result<Self> {
        let layer = Self {
            experts,
            router,
            top_k,
            renormalize_topk: false,
            protected: BTreeSet::new(),
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn with_renormalize(mut self, renormalize: bool) -> Self {
        self.renormalize_topk = renormalize;
        self
    }

    pub fn with_protected(mut self, protected: impl IntoIterator<Item = usize>) -> Result<Self> {
        self.protected = protected.into_iter().collect();
        self.validate()?;
        Ok(self)
    }

    pub fn with_top_k(mut self, top_k: usize) -> Result<Self> {
        self.top_k = top_k;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.experts.len();
        if n == 0 {
            return Err(Error::InvalidModel("layer has no experts".into()));
        }
        if self.top_k == 0 || self.top_k > n {
            return Err(Error::Config(format!(
                "top_k = {} must lie in 1..={n} (number of experts)",
                self.top_k
            )));
        }
        let first = &self.experts[0];
        for (i, e) in self.experts.iter().enumerate() {
            e.validate()
                .map_err(|err| Error::InvalidModel(format!("expert {i}: {err}")))?;
            if e.theta1.shape() != first.theta1.shape() {
                return Err(Error::InvalidModel(format!(
                    "expert {i} has shape {:?}, expert 0 has {:?}",
                    e.theta1.shape(),
                    first.theta1.shape()
                )));
            }
        }
        if self.router.shape() != (n, first.d_model()) {
            return Err(Error::InvalidModel(format!(
                "router is {:?}, expected ({n}, {})",
                self.router.shape(),
                first.d_model()
            )));
        }
        if !self.router.is_finite() {
            return Err(Error::InvalidModel("router contains NaN or Inf".into()));
        }
        if let Some(&p) = self.protected.iter().find(|&&p| p >= n) {
            return Err(Error::InvalidModel(format!("protected expert {p} out of range")));
        }
        Ok(())
    }

    pub fn experts(&self) -> &[ExpertParams<T>] {
        &self.experts
    }

    pub fn router(&self) -> &Matrix<T> {
        &self.router
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn renormalize_topk(&self) -> bool {
        self.renormalize_topk
    }

    pub fn protected(&self) -> &BTreeSet<usize> {
        &self.protected
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.experts[0].d_model()
    }

    pub fn d_ff(&self) -> usize {
        self.experts[0].d_ff()
    }

    pub fn expert_param_count(&self) -> usize {
        self.experts.iter().map(ExpertParams::param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.expert_param_count() + self.router.len()
    }

    pub fn cast<U: Scalar>(&self) -> MoELayer<U> {
        MoELayer {
            experts: self.experts.iter().map(ExpertParams::cast).collect(),
            router: self.router.cast(),
            top_k: self.top_k,
            renormalize_topk: self.renormalize_topk,
            protected: self.protected.clone(),
        }
    }

    /// Softmax over all `N` router logits for one token.
    pub fn routing_probs(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.d_model() {
            return Err(Error::Dimension {
                op: "route input",
                left: (1, x.len()),
                right: self.router.shape(),
            });
        }
        let logits: Vec<T> = (0..self.n_experts()).map(|n| dot(self.router.row(n), x)).collect();
        Ok(softmax(&logits))
    }
}

pub(crate) fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Selects the top-K experts for one token.
///
/// Returns `(expert, weight)` pairs by descending weight; equal weights keep
/// the lower expert index first.
pub fn route<T: Scalar>(layer: &MoELayer<T>, x: &[T]) -> Result<Vec<(usize, T)>> {
    if layer.top_k == 0 || layer.top_k > layer.n_experts() {
        return Err(Error::Config(format!(
            "top_k = {} exceeds the {} available experts",
            layer.top_k,
            layer.n_experts()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("routing input contains NaN or Inf".into()));
    }
    let probs = layer.routing_probs(x)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    order.truncate(layer.top_k);
    let mut picked: Vec<(usize, T)> = order.into_iter().map(|n| (n, probs[n])).collect();
    if layer.renormalize_topk {
        let total: T = picked.iter().map(|&(_, w)| w).sum();
        for (_, w) in &mut picked {
            *w = *w / total;
        }
    }
    Ok(picked)
}

/// Per-expert top-K selection counts for one layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerVisits {
    pub counts: Vec<u64>,
    pub tokens: u64,
}

impl LayerVisits {
    pub fn new(n_experts: usize) -> Self {
        Self {
            counts: vec![0; n_experts],
            tokens: 0,
        }
    }

    /// Visit share per expert: count / (tokens · K).
    pub fn shares(&self, top_k: usize) -> Vec<f64> {
        let denom = (self.tokens * top_k as u64) as f64;
        self.counts
            .iter()
            .map(|&c| if denom > 0.0 { c as f64 / denom } else { 0.0 })
            .collect()
    }

    pub fn absorb(&mut self, other: &LayerVisits) {
        assert_eq!(self.counts.len(), other.counts.len(), "visit counters cover different expert sets");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.tokens += other.tokens;
    }
}

/// Visit counts for a whole model. Concurrent workers keep private counters
/// and combine them with [`VisitCounter::absorb`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitCounter {
    pub layers: Vec<LayerVisits>,
}

impl VisitCounter {
    pub fn for_model<T: Scalar>(m: &MoEModel<T>) -> Self {
        Self {
            layers: m.layers.iter().map(|l| LayerVisits::new(l.n_experts())).collect(),
        }
    }

    pub fn absorb(&mut self, other: &VisitCounter) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.absorb(b);
        }
    }
}

/// `y = Σ_{n ∈ topK(x)} p_n(x) · f_n(x)` for every token row of `x`.
pub fn layer_forward<T: Scalar>(
    layer: &MoELayer<T>,
    x: &Matrix<T>,
    mut visits: Option<&mut LayerVisits>,
) -> Result<Matrix<T>> {
    if x.cols() != layer.d_model() {
        return Err(Error::Dimension {
            op: "layer_forward input",
            left: x.shape(),
            right: layer.router.shape(),
        });
    }
    if let Some(v) = visits.as_deref() {
        if v.counts.len() != layer.n_experts() {
            return Err(Error::Config(format!(
                "visit counter has {} slots for {} experts",
                v.counts.len(),
                layer.n_experts()
            )));
        }
    }
    let s = x.rows();
    let mut routes = Vec::with_capacity(s);
    // token rows handled by each expert, in token order
    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); layer.n_experts()];
    for t in 0..s {
        let picked = route(layer, x.row(t))?;
        for &(n, _) in &picked {
            per_expert[n].push(t);
        }
        routes.push(picked);
    }
    // position of token t inside per_expert[n]
    let mut outputs: Vec<Option<(Matrix<T>, BTreeMap<usize, usize>)>> = Vec::with_capacity(layer.n_experts());
    for (n, tokens) in per_expert.iter().enumerate() {
        if tokens.is_empty() {
            outputs.push(None);
            continue;
        }
        let out = expert_forward(&layer.experts[n], &x.select_rows(tokens))?;
        let pos = tokens.iter().enumerate().map(|(p, &t)| (t, p)).collect();
        outputs.push(Some((out, pos)));
    }
    let mut y = Matrix::zeros(s, x.cols());
    for (t, picked) in routes.iter().enumerate() {
        let row = y.row_mut(t);
        for &(n, w) in picked {
            let (out, pos) = outputs[n].as_ref().expect("selected expert has outputs");
            for (o, &v) in row.iter_mut().zip(out.row(pos[&t])) {
                *o += w * v;
            }
        }
    }
    if let Some(v) = visits.as_deref_mut() {
        for picked in &routes {
            for &(n, _) in picked {
                v.counts[n] += 1;
            }
        }
        v.tokens += s as u64;
    }
    Ok(y)
}

/// A stack of MoE layers, each wrapped in a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct MoEModel<T> {
    pub layers: Vec<MoELayer<T>>,
    pub d_model: usize,
    pub metadata: BTreeMap<String, String>,
}

impl<T: Scalar> MoEModel<T> {
    pub fn new(layers: Vec<MoELayer<T>>, d_model: usize) -> Result<Self> {
        let m = Self {
            layers,
            d_model,
            metadata: BTreeMap::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| e.in_layer(l))?;
            if layer.d_model() != self.d_model {
                return Err(Error::InvalidModel(format!(
                    "layer {l} has d_model {}, model has {}",
                    layer.d_model(),
                    self.d_model
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(MoELayer::param_count).sum()
    }

    pub fn expert_param_count(&self) -> usize {
        self.layers.iter().map(MoELayer::expert_param_count).sum()
    }

    pub fn cast<U: Scalar>(&self) -> MoEModel<U> {
        MoEModel {
            layers: self.layers.iter().map(MoELayer::cast).collect(),
            d_model: self.d_model,
            metadata: self.metadata.clone(),
        }
    }

    /// Inputs seen by each layer during a forward pass of `x`; entry `l` is
    /// the input of layer `l` and the final entry is the model output.
    pub fn layer_inputs(&self, x: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let y = layer_forward(layer, &h, None).map_err(|e| e.in_layer(l))?;
            let next = h.add(&y)?;
            out.push(h);
            h = next;
        }
        out.push(h);
        Ok(out)
    }
}

/// Applies `x ← x + layer_forward(layer, x)` for each layer in order.
pub fn model_forward<T: Scalar>(
    m: &MoEModel<T>,
    x: &Matrix<T>,
    mut visits: Option<&mut VisitCounter>,
) -> Result<Matrix<T>> {
    if x.cols() != m.d_model {
        return Err(Error::Dimension {
            op: "model_forward input",
            left: x.shape(),
            right: (x.rows(), m.d_model),
        });
    }
    if let Some(v) = visits.as_deref() {
        if v.layers.len() != m.layers.len() {
            return Err(Error::Config("visit counter does not match model depth".into()));
        }
    }
    let mut h = x.clone();
    for (l, layer) in m.layers.iter().enumerate() {
        let lv = visits.as_deref_mut().map(|v| &mut v.layers[l]);
        let y = layer_forward(layer, &h, lv).map_err(|e| e.in_layer(l))?;
        h = h.add(&y)?;
    }
    Ok(h)
}
