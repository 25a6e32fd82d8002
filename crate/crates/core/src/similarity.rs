//! Expert representations and pairwise similarity (CKA, cosine, negative MSE).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CalibrationBatch;
use crate::matrix::{dot, Matrix};
use crate::model::{expert_forward, ExpertParams, MoELayer};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepresentationKind {
    /// Expert outputs on a shared batch, `s × d_model`.
    #[serde(rename = "data")]
    DataOutput,
    /// `concat{θ1, θ2, θ3}` flattened row-major, `1 × P`.
    #[serde(rename = "vectorized")]
    VectorizedWeights,
    /// `θ2 · (θ1 ⊙ θ3)`, `d_model × d_model`.
    #[serde(rename = "surrogate")]
    SurrogateWeight,
}

impl RepresentationKind {
    pub fn needs_data(self) -> bool {
        self == RepresentationKind::DataOutput
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "cka-linear")]
    CkaLinear,
    #[serde(rename = "cka-rbf")]
    CkaRbf,
    #[serde(rename = "cosine")]
    Cosine,
    #[serde(rename = "neg-mse")]
    NegMse,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::CkaLinear, Metric::CkaRbf, Metric::Cosine, Metric::NegMse];

    /// Score of an expert against itself.
    pub fn maximum<T: Scalar>(self) -> T {
        match self {
            Metric::NegMse => T::zero(),
            _ => T::one(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertRepresentation<T> {
    pub kind: RepresentationKind,
    pub data: Matrix<T>,
    /// Row width used when a flat weight vector is viewed as samples for a kernel.
    pub d_model: usize,
}

impl<T: Scalar> ExpertRepresentation<T> {
    /// Rows treated as samples by kernel metrics. Vectorized weights are
    /// viewed as `(P / d_model) × d_model` so that CKA has more than one sample.
    pub fn samples(&self) -> Result<Matrix<T>> {
        match self.kind {
            RepresentationKind::VectorizedWeights => self.data.reshape(self.data.len() / self.d_model, self.d_model),
            _ => Ok(self.data.clone()),
        }
    }
}

/// Mixup: each output row is `λ·x_a + (1−λ)·x_b` for two distinct random
/// rows and `λ ~ U(0, 1)`; the batch size is unchanged.
pub fn mixup<T: Scalar>(x: &Matrix<T>, seed: u64) -> Result<Matrix<T>> {
    let s = x.rows();
    if s < 2 {
        return Err(Error::Degenerate("mixup needs at least two rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Matrix::zeros(s, x.cols());
    for i in 0..s {
        let a = rng.random_range(0..s);
        let mut b = rng.random_range(0..s - 1);
        if b >= a {
            b += 1;
        }
        let lam = T::lit(rng.random::<f64>());
        for (o, (&u, &v)) in out.row_mut(i).iter_mut().zip(x.row(a).iter().zip(x.row(b))) {
            *o = lam * u + (T::one() - lam) * v;
        }
    }
    Ok(out)
}

/// Feeds the same batch (optionally mixup-augmented) to every expert; the
/// router is not involved.
pub fn represent_data_centric<T: Scalar>(
    layer: &MoELayer<T>,
    batch: &CalibrationBatch<T>,
    augment: bool,
    seed: u64,
) -> Result<Vec<ExpertRepresentation<T>>> {
    let x = batch.embeddings();
    if x.cols() != layer.d_model() {
        return Err(Error::Dimension {
            op: "data-centric representation",
            left: x.shape(),
            right: layer.router().shape(),
        });
    }
    let input = if augment { mixup(x, seed)? } else { x.clone() };
    layer
        .experts()
        .iter()
        .map(|e| {
            Ok(ExpertRepresentation {
                kind: RepresentationKind::DataOutput,
                data: expert_forward(e, &input)?,
                d_model: layer.d_model(),
            })
        })
        .collect()
}

pub fn represent_vectorized<T: Scalar>(e: &ExpertParams<T>) -> ExpertRepresentation<T> {
    let mut v = Vec::with_capacity(e.param_count());
    v.extend_from_slice(e.theta1.as_slice());
    v.extend_from_slice(e.theta2.as_slice());
    v.extend_from_slice(e.theta3.as_slice());
    let len = v.len();
    ExpertRepresentation {
        kind: RepresentationKind::VectorizedWeights,
        data: Matrix::new(1, len, v).expect("sized buffer"),
        d_model: e.d_model(),
    }
}

pub fn represent_surrogate<T: Scalar>(e: &ExpertParams<T>) -> Result<ExpertRepresentation<T>> {
    let gated = e.theta1.hadamard(&e.theta3)?;
    Ok(ExpertRepresentation {
        kind: RepresentationKind::SurrogateWeight,
        data: e.theta2.matmul(&gated)?,
        d_model: e.d_model(),
    })
}

/// Model-centric representations of every expert in a layer.
pub fn represent_weights<T: Scalar>(
    layer: &MoELayer<T>,
    kind: RepresentationKind,
) -> Result<Vec<ExpertRepresentation<T>>> {
    match kind {
        RepresentationKind::VectorizedWeights => Ok(layer.experts().iter().map(represent_vectorized).collect()),
        RepresentationKind::SurrogateWeight => layer.experts().iter().map(represent_surrogate).collect(),
        RepresentationKind::DataOutput => Err(Error::Config(
            "data-centric representations need a calibration batch".into(),
        )),
    }
}

/// Double-centers a kernel: `H K H` with `H = I − 11ᵀ/s`.
fn center<T: Scalar>(k: &Matrix<T>) -> Matrix<T> {
    let s = k.rows();
    let n = T::from_usize(s).unwrap();
    let row_means: Vec<T> = (0..s).map(|i| k.row(i).iter().copied().sum::<T>() / n).collect();
    let col_means: Vec<T> = (0..s).map(|j| (0..s).map(|i| k[(i, j)]).sum::<T>() / n).collect();
    let grand = row_means.iter().copied().sum::<T>() / n;
    Matrix::from_fn(s, s, |i, j| k[(i, j)] - row_means[i] - col_means[j] + grand)
}

fn check_kernel_pair<T: Scalar>(ki: &Matrix<T>, kj: &Matrix<T>) -> Result<()> {
    if ki.rows() != ki.cols() || ki.shape() != kj.shape() {
        return Err(Error::Dimension {
            op: "hsic",
            left: ki.shape(),
            right: kj.shape(),
        });
    }
    if ki.rows() < 2 {
        return Err(Error::Degenerate(format!(
            "HSIC needs at least 2 samples, got {}",
            ki.rows()
        )));
    }
    Ok(())
}

fn hsic_centered<T: Scalar>(ci: &Matrix<T>, cj: &Matrix<T>) -> T {
    let s = T::from_usize(ci.rows()).unwrap();
    // tr(HKiH · HKjH) for symmetric kernels
    dot(ci.as_slice(), cj.as_slice()) / ((s - T::one()) * (s - T::one()))
}

/// `tr(Ki H Kj H) / (s − 1)²`.
pub fn hsic<T: Scalar>(ki: &Matrix<T>, kj: &Matrix<T>) -> Result<T> {
    check_kernel_pair(ki, kj)?;
    Ok(hsic_centered(&center(ki), &center(kj)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel<T> {
    Linear,
    /// RBF with `σ = median pairwise distance × factor`.
    Rbf { factor: T },
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

pub fn kernel_matrix<T: Scalar>(r: &Matrix<T>, kernel: Kernel<T>) -> Result<Matrix<T>> {
    match kernel {
        Kernel::Linear => r.matmul_t(r),
        Kernel::Rbf { factor } => {
            let s = r.rows();
            let d2 = Matrix::from_fn(s, s, |i, j| sq_dist(r.row(i), r.row(j)));
            let mut dists: Vec<T> = (0..s).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| d2[(i, j)].sqrt()).collect();
            if dists.is_empty() {
                return Err(Error::Degenerate("RBF kernel needs at least 2 samples".into()));
            }
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let m = dists.len();
            let median = if m % 2 == 1 {
                dists[m / 2]
            } else {
                (dists[m / 2 - 1] + dists[m / 2]) / T::lit(2.0)
            };
            let sigma = median * factor;
            if !(sigma > T::zero()) {
                return Err(Error::UndefinedSimilarity(
                    "RBF bandwidth is zero (median pairwise distance vanishes)".into(),
                ));
            }
            let denom = T::lit(2.0) * sigma * sigma;
            Ok(d2.map(|v| (-v / denom).exp()))
        }
    }
}

/// Centered kernel of one representation together with its self-HSIC.
#[derive(Clone, Debug)]
pub struct CenteredKernel<T> {
    centered: Matrix<T>,
    self_hsic: T,
}

impl<T: Scalar> CenteredKernel<T> {
    pub fn new(r: &ExpertRepresentation<T>, kernel: Kernel<T>) -> Result<Self> {
        let samples = r.samples()?;
        if samples.rows() < 2 {
            return Err(Error::Degenerate(format!(
                "CKA needs at least 2 samples, got {}",
                samples.rows()
            )));
        }
        let k = kernel_matrix(&samples, kernel)?;
        let centered = center(&k);
        let self_hsic = hsic_centered(&centered, &centered);
        // constant kernels centre to round-off only
        let s = T::from_usize(k.rows()).unwrap();
        let scale = k.frobenius_sq() / ((s - T::one()) * (s - T::one()));
        if !(self_hsic > T::epsilon() * T::lit(100.0) * scale) || !self_hsic.is_finite() {
            return Err(Error::UndefinedSimilarity(
                "representation has zero variance (HSIC self-term vanishes)".into(),
            ));
        }
        Ok(Self { centered, self_hsic })
    }

    pub fn alignment(&self, other: &Self) -> Result<T> {
        if self.centered.shape() != other.centered.shape() {
            return Err(Error::Dimension {
                op: "cka",
                left: self.centered.shape(),
                right: other.centered.shape(),
            });
        }
        let cross = hsic_centered(&self.centered, &other.centered);
        Ok(cross / (self.self_hsic * other.self_hsic).sqrt())
    }
}

/// `HSIC(Ki, Kj) / sqrt(HSIC(Ki, Ki) · HSIC(Kj, Kj))`.
pub fn cka<T: Scalar>(ri: &ExpertRepresentation<T>, rj: &ExpertRepresentation<T>, kernel: Kernel<T>) -> Result<T> {
    if ri.data.shape() != rj.data.shape() || ri.kind != rj.kind {
        return Err(Error::Dimension {
            op: "cka",
            left: ri.data.shape(),
            right: rj.data.shape(),
        });
    }
    CenteredKernel::new(ri, kernel)?.alignment(&CenteredKernel::new(rj, kernel)?)
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

pub fn neg_mse<T: Scalar>(a: &[T], b: &[T]) -> T {
    -sq_dist(a, b) / T::from_usize(a.len().max(1)).unwrap()
}

/// Pairwise expert scores for one layer; the weights of the expert graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub scores: Matrix<T>,
    pub metric: Metric,
    pub kind: Option<RepresentationKind>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn new(scores: Matrix<T>, metric: Metric, kind: Option<RepresentationKind>) -> Result<Self> {
        if scores.rows() != scores.cols() {
            return Err(Error::Dimension {
                op: "similarity matrix",
                left: scores.shape(),
                right: (scores.cols(), scores.rows()),
            });
        }
        Ok(Self { scores, metric, kind })
    }

    pub fn n(&self) -> usize {
        self.scores.rows()
    }

    /// Matrix rows as CSV lines with 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n() {
            let line: Vec<String> = self.scores.row(i).iter().map(|v| format_sig9(v.to_f64_lossy())).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, metric: Metric) -> Result<Self> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row = line
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map(T::lit)
                        .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))
                })
                .collect::<Result<Vec<T>>>()?;
            rows.push(row);
        }
        let scores = Matrix::from_rows(&rows)?;
        if !scores.is_finite() {
            return Err(Error::Format("similarity CSV contains non-finite values".into()));
        }
        Self::new(scores, metric, None)
    }
}

pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    format!("{v:.8e}")
}

/// Fills the `N × N` score matrix.
///
/// Kernel metrics compare [`ExpertRepresentation::samples`]; cosine and
/// negative MSE compare flattened representations. The diagonal is the
/// metric maximum. Pairs whose CKA or cosine is undefined (a constant
/// representation) score 0.
pub fn similarity_matrix<T: Scalar>(reps: &[ExpertRepresentation<T>], metric: Metric) -> Result<SimilarityMatrix<T>> {
    similarity_matrix_with_bandwidth(reps, metric, T::one())
}

pub fn similarity_matrix_with_bandwidth<T: Scalar>(
    reps: &[ExpertRepresentation<T>],
    metric: Metric,
    rbf_factor: T,
) -> Result<SimilarityMatrix<T>> {
    let n = reps.len();
    if n == 0 {
        return Err(Error::Degenerate("no experts to compare".into()));
    }
    let kind = reps[0].kind;
    if let Some(bad) = reps.iter().find(|r| r.kind != kind || r.data.shape() != reps[0].data.shape()) {
        return Err(Error::Dimension {
            op: "similarity_matrix (representations differ)",
            left: reps[0].data.shape(),
            right: bad.data.shape(),
        });
    }
    let kernels: Option<Vec<Option<CenteredKernel<T>>>> = match metric {
        Metric::CkaLinear | Metric::CkaRbf => {
            let kernel = if metric == Metric::CkaLinear {
                Kernel::Linear
            } else {
                Kernel::Rbf { factor: rbf_factor }
            };
            let built = reps
                .par_iter()
                .enumerate()
                .map(|(i, r)| match CenteredKernel::new(r, kernel) {
                    Ok(k) => Ok(Some(k)),
                    Err(Error::UndefinedSimilarity(msg)) => {
                        log::warn!("expert {i}: {msg}; similarity set to 0");
                        Ok(None)
                    }
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<_>>>()?;
            Some(built)
        }
        _ => None,
    };
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| -> Result<T> {
            let a = reps[i].data.as_slice();
            let b = reps[j].data.as_slice();
            let v = match metric {
                Metric::CkaLinear | Metric::CkaRbf => {
                    let ks = kernels.as_ref().unwrap();
                    match (&ks[i], &ks[j]) {
                        (Some(ki), Some(kj)) => ki.alignment(kj)?,
                        _ => T::zero(),
                    }
                }
                Metric::Cosine => cosine(a, b).unwrap_or_else(T::zero),
                Metric::NegMse => neg_mse(a, b),
            };
            if !v.is_finite() {
                return Err(Error::Numeric(format!("similarity of experts {i} and {j} is not finite")));
            }
            Ok(match metric {
                Metric::NegMse => v.min(T::zero()),
                _ => v.max(-T::one()).min(T::one()),
            })
        })
        .collect::<Result<Vec<T>>>()?;
    let mut scores = Matrix::filled(n, n, metric.maximum());
    for (&(i, j), &v) in pairs.iter().zip(&values) {
        scores[(i, j)] = v;
        scores[(j, i)] = v;
    }
    SimilarityMatrix::new(scores, metric, Some(kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synthetic, random_tokens, SyntheticSpec};
    use crate::model::Activation;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rand_matrix(seed: u64, r: usize, c: usize) -> Matrix<f64> {
        random_tokens(r, c, seed)
    }

    fn rep(data: Matrix<f64>) -> ExpertRepresentation<f64> {
        let d = data.cols();
        ExpertRepresentation {
            kind: RepresentationKind::DataOutput,
            data,
            d_model: d,
        }
    }

    // tr(Ki H Kj H)/(s-1)^2 with H materialized
    fn hsic_oracle(ki: &Matrix<f64>, kj: &Matrix<f64>) -> f64 {
        let s = ki.rows();
        let h = Matrix::from_fn(s, s, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / s as f64);
        let p = ki.matmul(&h).unwrap().matmul(kj).unwrap().matmul(&h).unwrap();
        (0..s).map(|i| p[(i, i)]).sum::<f64>() / ((s - 1) * (s - 1)) as f64
    }

    #[test]
    fn constant_kernel_has_zero_hsic() {
        let k = Matrix::filled(5, 5, 1.0);
        assert_abs_diff_eq!(hsic(&k, &k).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn identity_kernels_two_samples() {
        // H = [[.5,-.5],[-.5,.5]] is idempotent, so tr(I H I H) = tr(H) = 1
        let k = Matrix::<f64>::identity(2);
        assert_abs_diff_eq!(hsic_oracle(&k, &k), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(hsic(&k, &k).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn hsic_rejects_single_sample() {
        let k = Matrix::<f64>::identity(1);
        assert!(matches!(hsic(&k, &k), Err(Error::Degenerate(_))));
    }

    #[test]
    fn hsic_matches_explicit_centering() {
        let a = rand_matrix(1, 7, 3);
        let b = rand_matrix(2, 7, 4);
        let ka = a.matmul_t(&a).unwrap();
        let kb = b.matmul_t(&b).unwrap();
        assert_abs_diff_eq!(hsic(&ka, &kb).unwrap(), hsic_oracle(&ka, &kb), epsilon = 1e-10);
        assert_abs_diff_eq!(hsic(&ka, &kb).unwrap(), hsic(&kb, &ka).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn self_alignment_is_one() {
        let r = rep(rand_matrix(3, 12, 5));
        for kernel in [Kernel::Linear, Kernel::Rbf { factor: 1.0 }] {
            assert_abs_diff_eq!(cka(&r, &r, kernel).unwrap(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn disjoint_coordinates_give_zero_linear_cka() {
        // centred columns; R1 lives in coords {0,1}, R2 in {2,3} and is
        // uncorrelated with R1 sample-wise
        let r1 = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![-1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, -1.0, 0.0, 0.0],
        ])
        .unwrap();
        let r2 = Matrix::from_rows(&[
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, -1.0, 0.0],
            vec![0.0, 0.0, -1.0, 0.0],
        ])
        .unwrap();
        assert_abs_diff_eq!(cka(&rep(r1), &rep(r2), Kernel::Linear).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_representation_is_undefined() {
        let r = rep(Matrix::filled(4, 3, 2.0));
        let other = rep(rand_matrix(4, 4, 3));
        assert!(matches!(cka(&r, &other, Kernel::Linear), Err(Error::UndefinedSimilarity(_))));
        let sim = similarity_matrix(&[r, other], Metric::CkaLinear).unwrap();
        assert_eq!(sim.scores[(0, 1)], 0.0);
        assert_eq!(sim.scores[(0, 0)], 1.0);
    }

    #[test]
    fn vectorized_layout() {
        let e = ExpertParams::new(
            Matrix::filled(1, 1, 2.0),
            Matrix::filled(1, 1, 3.0),
            Matrix::filled(1, 1, 5.0),
            Activation::Silu,
        )
        .unwrap();
        assert_eq!(represent_vectorized(&e).data.as_slice(), &[2.0, 3.0, 5.0]);

        let m: crate::MoEModel<f64> = generate_synthetic(&SyntheticSpec {
            n_experts: 2,
            d_model: 5,
            d_ff: 7,
            n_layers: 1,
            top_k: 1,
            duplicate_groups: vec![vec![0, 1]],
            ..SyntheticSpec::default()
        })
        .unwrap();
        let v = represent_vectorized(&m.layers[0].experts()[0]);
        assert_eq!(v.data.len(), 7 * 5 + 5 * 7 + 7 * 5);
        assert_eq!(v.samples().unwrap().shape(), (21, 5));
        assert_eq!(v, represent_vectorized(&m.layers[0].experts()[1]));
    }

    #[test]
    fn surrogate_examples() {
        let ones = Matrix::filled(3, 3, 1.0);
        let e = ExpertParams::new(ones.clone(), Matrix::identity(3), ones, Activation::Silu).unwrap();
        assert_eq!(represent_surrogate(&e).unwrap().data, Matrix::filled(3, 3, 1.0));

        let mut rng_m = rand_matrix(8, 3, 2);
        let zero = ExpertParams::new(Matrix::zeros(3, 2), rand_matrix(9, 2, 3), rng_m.clone(), Activation::Silu).unwrap();
        assert!(represent_surrogate(&zero).unwrap().data.as_slice().iter().all(|&v| v == 0.0));

        // d_ff = 3, d_model = 2: triple loop oracle
        rng_m = rand_matrix(10, 3, 2);
        let t1 = rand_matrix(11, 3, 2);
        let t2 = rand_matrix(12, 2, 3);
        let e = ExpertParams::new(t1.clone(), t2.clone(), rng_m.clone(), Activation::Silu).unwrap();
        let s = represent_surrogate(&e).unwrap().data;
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += t2[(a, k)] * t1[(k, b)] * rng_m[(k, b)];
                }
                assert_abs_diff_eq!(s[(a, b)], acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn neg_mse_arithmetic() {
        let reps: Vec<_> = [1.0, 3.0]
            .iter()
            .map(|&v| rep(Matrix::filled(1, 1, v)))
            .collect();
        let sim = similarity_matrix(&reps, Metric::NegMse).unwrap();
        assert_eq!(sim.scores[(0, 1)], -4.0);
        assert_eq!(sim.scores[(1, 1)], 0.0);
    }

    #[test]
    fn data_centric_ignores_router_and_is_deterministic() {
        let m: crate::MoEModel<f64> = generate_synthetic(&SyntheticSpec::paired(4, 0.0, 5)).unwrap();
        let layer = &m.layers[0];
        let batch = CalibrationBatch::new(random_tokens(6, 16, 1), "t").unwrap();
        let reps = represent_data_centric(layer, &batch, false, 0).unwrap();
        assert_eq!(reps[0], reps[1]);
        assert_eq!(reps[2].data, expert_forward(&layer.experts()[2], batch.embeddings()).unwrap());
        let a = represent_data_centric(layer, &batch, true, 7).unwrap();
        let b = represent_data_centric(layer, &batch, true, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], reps[0]);
        let wrong = CalibrationBatch::new(random_tokens(6, 3, 1), "t").unwrap();
        assert!(represent_data_centric(layer, &wrong, false, 0).is_err());
    }

    #[test]
    fn mixup_rows_are_convex_combinations() {
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let y = mixup(&x, 3).unwrap();
        assert_eq!(y.shape(), x.shape());
        for i in 0..3 {
            let (a, b) = (y[(i, 0)], y[(i, 1)]);
            assert!(a >= 0.0 && b >= 0.0 && a + b <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_keeps_nine_digits() {
        let scores = Matrix::from_rows(&[vec![1.0, 0.123456789123], vec![0.123456789123, 1.0]]).unwrap();
        let sim = SimilarityMatrix::new(scores, Metric::Cosine, None).unwrap();
        let csv = sim.to_csv();
        assert!(csv.starts_with("1.00000000e0,1.23456789e-1"), "{csv}");
        let back = SimilarityMatrix::<f64>::from_csv(&csv, Metric::Cosine).unwrap();
        assert_abs_diff_eq!(back.scores[(0, 1)], 0.123456789, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn cka_symmetric_and_bounded(seed in 0u64..300) {
            let a = rep(rand_matrix(seed, 9, 4));
            let b = rep(rand_matrix(seed + 1000, 9, 4));
            for kernel in [Kernel::Linear, Kernel::Rbf { factor: 1.0 }] {
                let ab = cka(&a, &b, kernel).unwrap();
                let ba = cka(&b, &a, kernel).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-9);
                prop_assert!((-1e-9..=1.0 + 1e-9).contains(&ab));
            }
        }

        #[test]
        fn hsic_of_psd_kernel_nonnegative(seed in 0u64..300) {
            let a = rand_matrix(seed, 6, 3);
            let k = a.matmul_t(&a).unwrap();
            prop_assert!(hsic(&k, &k).unwrap() >= -1e-9);
        }

        #[test]
        fn similarity_matrix_invariants(seed in 0u64..100, metric_ix in 0usize..4) {
            let metric = Metric::ALL[metric_ix];
            let reps: Vec<_> = (0..4).map(|i| rep(rand_matrix(seed * 10 + i, 6, 3))).collect();
            let sim = similarity_matrix(&reps, metric).unwrap();
            prop_assert!(sim.scores.is_symmetric(1e-9));
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert!(sim.scores[(i, i)] >= sim.scores[(i, j)]);
                }
            }
        }
    }
}
