//! Dominant curvature direction of the loss over the prunable weights.
//!
//! Hessian-vector products are approximated by a forward difference of
//! gradients, `(grad(w + eps v) - grad(w)) / eps`, and fed to power
//! iteration. Only weights take part; biases are held fixed.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Batch, Network};
use crate::scalar::{cosine, dot, max_abs, norm2, Scalar};
use crate::seeding::{self, Stream};

/// Vectors with a smaller norm are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A differentiable objective evaluated at arbitrary points.
pub trait GradientField<T> {
    fn dim(&self) -> usize;

    fn gradient_at(&mut self, point: &[T]) -> Result<Vec<T>>;
}

/// A linear map applied by value, e.g. an approximate Hessian.
pub trait LinearOperator<T> {
    fn dim(&self) -> usize;

    fn apply(&mut self, v: &[T]) -> Result<Vec<T>>;
}

/// Mean loss over a fixed batch as a function of the weight-only view.
/// Evaluates on a private copy, so the source network is never touched.
pub struct NetworkObjective<'a, T> {
    scratch: Network<T>,
    batch: &'a Batch<T>,
}

impl<'a, T: Scalar> NetworkObjective<'a, T> {
    pub fn new(net: &Network<T>, batch: &'a Batch<T>) -> Self {
        Self { scratch: net.clone(), batch }
    }
}

impl<T: Scalar> GradientField<T> for NetworkObjective<'_, T> {
    fn dim(&self) -> usize {
        self.scratch.weight_count()
    }

    fn gradient_at(&mut self, point: &[T]) -> Result<Vec<T>> {
        self.scratch.set_weights_flat(point)?;
        self.scratch.weight_gradient(self.batch)
    }
}

/// `L(w) = 0.5 w^T A w` for a dense symmetric `A` (row-major).
#[derive(Debug, Clone)]
pub struct Quadratic {
    dim: usize,
    matrix: Vec<f64>,
}

impl Quadratic {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != dim * dim {
            return Err(Error::Shape(format!("{dim}x{dim} matrix needs {} entries", dim * dim)));
        }
        Ok(Self { dim, matrix })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut matrix = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            matrix[i * n + i] = *d;
        }
        Self { dim: n, matrix }
    }
}

impl<T: Scalar> GradientField<T> for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn gradient_at(&mut self, point: &[T]) -> Result<Vec<T>> {
        if point.len() != self.dim {
            return Err(Error::Shape(format!("point has length {}, expected {}", point.len(), self.dim)));
        }
        Ok(self
            .matrix
            .chunks_exact(self.dim)
            .map(|row| T::from_acc(row.iter().zip(point).map(|(a, x)| a * x.to_acc()).sum()))
            .collect())
    }
}

/// Forward-difference Hessian-vector product around a fixed base point.
pub struct FiniteDifferenceHvp<T, F> {
    field: F,
    base: Vec<T>,
    base_gradient: Vec<T>,
    epsilon: f64,
}

impl<T: Scalar, F: GradientField<T>> FiniteDifferenceHvp<T, F> {
    pub fn new(mut field: F, base: Vec<T>, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        if base.len() != field.dim() {
            return Err(Error::Shape(format!(
                "base point has length {}, objective has dimension {}",
                base.len(),
                field.dim()
            )));
        }
        let base_gradient = field.gradient_at(&base)?;
        Ok(Self { field, base, base_gradient, epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

impl<T: Scalar, F: GradientField<T>> LinearOperator<T> for FiniteDifferenceHvp<T, F> {
    fn dim(&self) -> usize {
        self.base.len()
    }

    fn apply(&mut self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.base.len() {
            return Err(Error::Shape(format!(
                "direction has length {}, expected {}",
                v.len(),
                self.base.len()
            )));
        }
        let norm = norm2(v);
        if norm < DEGENERATE_NORM {
            return Err(Error::InvalidArgument(format!(
                "Hessian-vector product direction has norm {norm:e}"
            )));
        }
        let eps = self.epsilon;
        let shifted: Vec<T> = self
            .base
            .iter()
            .zip(v)
            .map(|(w, d)| T::from_acc(w.to_acc() + eps * d.to_acc()))
            .collect();
        let g = self.field.gradient_at(&shifted)?;
        let hv: Vec<T> = g
            .iter()
            .zip(&self.base_gradient)
            .map(|(a, b)| T::from_acc((a.to_acc() - b.to_acc()) / eps))
            .collect();
        if hv.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericOverflow(format!(
                "Hessian-vector product is not finite at epsilon {eps:e}; try a smaller epsilon"
            )));
        }
        Ok(hv)
    }
}

/// How the finite-difference step is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum EpsilonPolicy {
    /// `Scaled` with a base picked by storage precision: 1e-3 for f32,
    /// 1e-5 for f64. Larger steps on ReLU nets start to straddle kinks.
    #[default]
    Auto,
    /// `base * max(1, max|w|)`.
    Scaled { base: f64 },
    Fixed { value: f64 },
}

pub const F32_EPSILON_BASE: f64 = 1e-3;
pub const F64_EPSILON_BASE: f64 = 1e-5;

impl EpsilonPolicy {
    pub fn resolve<T: Scalar>(&self, weights: &[T]) -> f64 {
        let scale = || max_abs(weights).max(1.0);
        match *self {
            EpsilonPolicy::Auto => {
                let base = if T::BITS <= 32 { F32_EPSILON_BASE } else { F64_EPSILON_BASE };
                base * scale()
            }
            EpsilonPolicy::Scaled { base } => base * scale(),
            EpsilonPolicy::Fixed { value } => value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerIterationConfig {
    pub max_iterations: usize,
    pub tol: f64,
    pub epsilon: EpsilonPolicy,
    /// Samples drawn from the training set for every gradient in one run.
    pub calibration_size: usize,
}

impl Default for PowerIterationConfig {
    fn default() -> Self {
        Self { max_iterations: 10, tol: 1e-6, epsilon: EpsilonPolicy::default(), calibration_size: 512 }
    }
}

impl PowerIterationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::InvalidArgument(format!("tol must lie in (0, 1), got {}", self.tol)));
        }
        if self.calibration_size == 0 {
            return Err(Error::InvalidArgument("calibration_size must be positive".into()));
        }
        if let EpsilonPolicy::Fixed { value: x } | EpsilonPolicy::Scaled { base: x } = self.epsilon {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::InvalidArgument(format!("epsilon must be positive, got {x}")));
            }
        }
        Ok(())
    }
}

/// State of a finished power-iteration run.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureProbe<T> {
    /// Unit-norm estimate of the dominant eigenvector.
    pub v: Vec<T>,
    /// `v^T H v` at exit.
    pub rayleigh: f64,
    pub iterations_run: usize,
    /// Whether the cosine tolerance was met before the iteration cap.
    pub converged: bool,
    /// Cosine between successive iterates.
    pub cosine_trace: Vec<f64>,
    /// `v_t^T H v_t` for each iterate fed to the operator.
    pub rayleigh_trace: Vec<f64>,
    pub epsilon: f64,
    pub seed: u64,
}

/// Seeded Rademacher vector scaled to unit norm.
pub fn rademacher_unit<T: Scalar>(dim: usize, seed: u64) -> Vec<T> {
    let mut rng = seeding::rng(seed, Stream::PowerIteration);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim)
        .map(|_| T::from_acc(if rng.random_bool(0.5) { scale } else { -scale }))
        .collect()
}

/// Power iteration on any linear operator.
///
/// Stops after `max_iterations` applications or once successive iterates
/// satisfy `|cos| >= 1 - tol`. The absolute value lets a dominant negative
/// eigenvalue, whose iterates alternate in sign, count as converged.
pub fn power_iteration_on<T: Scalar, Op: LinearOperator<T>>(
    op: &mut Op,
    max_iterations: usize,
    tol: f64,
    seed: u64,
) -> Result<CurvatureProbe<T>> {
    if max_iterations == 0 {
        return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::InvalidArgument(format!("tol must lie in (0, 1), got {tol}")));
    }
    let dim = op.dim();
    if dim == 0 {
        return Err(Error::InvalidArgument("operator has dimension 0".into()));
    }
    let mut v: Vec<T> = rademacher_unit(dim, seed);
    let mut cosine_trace = Vec::new();
    let mut rayleigh_trace = Vec::new();
    let mut iterations_run = 0;
    let mut converged = false;
    for iteration in 1..=max_iterations {
        let hv = op.apply(&v)?;
        let norm = norm2(&hv);
        if norm < DEGENERATE_NORM || !norm.is_finite() {
            return Err(Error::DegenerateCurvature { iteration, norm });
        }
        rayleigh_trace.push(dot(&v, &hv));
        let next: Vec<T> = hv.iter().map(|x| T::from_acc(x.to_acc() / norm)).collect();
        let cos = cosine(&next, &v);
        cosine_trace.push(cos);
        v = next;
        iterations_run = iteration;
        if cos.abs() >= 1.0 - tol {
            converged = true;
            break;
        }
    }
    let hv = op.apply(&v)?;
    let rayleigh = dot(&v, &hv);
    Ok(CurvatureProbe {
        v,
        rayleigh,
        iterations_run,
        converged,
        cosine_trace,
        rayleigh_trace,
        epsilon: 0.0,
        seed,
    })
}

/// Forward-difference Hessian-vector product of the mean loss on `calib`
/// with respect to the weights of `net`. `net` is left untouched.
pub fn hvp_fd<T: Scalar>(net: &Network<T>, calib: &Batch<T>, v: &[T], epsilon: f64) -> Result<Vec<T>> {
    let mut op = FiniteDifferenceHvp::new(NetworkObjective::new(net, calib), net.weights_flat(), epsilon)?;
    op.apply(v)
}

/// Dominant curvature direction of the loss on `calib`, with the default
/// epsilon policy.
pub fn power_iteration<T: Scalar>(
    net: &Network<T>,
    calib: &Batch<T>,
    max_iterations: usize,
    tol: f64,
    seed: u64,
) -> Result<CurvatureProbe<T>> {
    let config = PowerIterationConfig { max_iterations, tol, ..Default::default() };
    estimate_curvature(net, calib, &config, seed)
}

pub fn estimate_curvature<T: Scalar>(
    net: &Network<T>,
    calib: &Batch<T>,
    config: &PowerIterationConfig,
    seed: u64,
) -> Result<CurvatureProbe<T>> {
    config.validate()?;
    let weights = net.weights_flat();
    let epsilon = config.epsilon.resolve(&weights);
    let mut op = FiniteDifferenceHvp::new(NetworkObjective::new(net, calib), weights, epsilon)?;
    let mut probe = power_iteration_on(&mut op, config.max_iterations, config.tol, seed)?;
    probe.epsilon = epsilon;
    if !probe.converged {
        log::info!(
            "power iteration stopped at the {}-iteration cap before reaching tol {}; last cosine {:.6}",
            config.max_iterations,
            config.tol,
            probe.cosine_trace.last().copied().unwrap_or(0.0)
        );
    }
    Ok(probe)
}

/// Fixed seeded subset of at most `size` samples, in ascending index order.
pub fn calibration_batch<T: Scalar>(train: &Batch<T>, size: usize, seed: u64) -> Result<Batch<T>> {
    if size >= train.len() {
        return Ok(train.clone());
    }
    let mut rng = seeding::rng(seed, Stream::Calibration);
    let mut idx = sample(&mut rng, train.len(), size).into_vec();
    idx.sort_unstable();
    train.select(&idx)
}

/// Per-layer weight significance: `|v|` restricted to each weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceMap {
    pub layers: Vec<LayerSignificance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSignificance {
    pub layer: usize,
    pub values: Vec<f64>,
}

impl SignificanceMap {
    pub fn sum_of_squares(&self) -> f64 {
        self.layers.iter().flat_map(|l| &l.values).map(|s| s * s).sum()
    }
}

pub fn significance<T: Scalar>(probe: &CurvatureProbe<T>, net: &Network<T>) -> Result<SignificanceMap> {
    significance_from_vector(&probe.v, net)
}

pub fn significance_from_vector<T: Scalar>(v: &[T], net: &Network<T>) -> Result<SignificanceMap> {
    if v.len() != net.weight_count() {
        return Err(Error::Shape(format!(
            "curvature vector has length {}, network has {} weights",
            v.len(),
            net.weight_count()
        )));
    }
    let layers = net
        .weight_blocks()
        .into_iter()
        .map(|b| LayerSignificance {
            layer: b.layer,
            values: v[b.start..b.start + b.len].iter().map(|x| x.to_acc().abs()).collect(),
        })
        .collect();
    Ok(SignificanceMap { layers })
}

/// Debug dump of a probe run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDump {
    pub seed: u64,
    pub epsilon: f64,
    pub rayleigh: f64,
    pub iterations_run: usize,
    pub converged: bool,
    pub cosine_trace: Vec<f64>,
    pub layers: Vec<SignificanceSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceSummary {
    pub layer: usize,
    pub n: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl ProbeDump {
    pub fn new<T: Scalar>(probe: &CurvatureProbe<T>, sig: &SignificanceMap) -> Self {
        let layers = sig
            .layers
            .iter()
            .map(|l| SignificanceSummary {
                layer: l.layer,
                n: l.values.len(),
                min: l.values.iter().copied().fold(f64::INFINITY, f64::min),
                mean: l.values.iter().sum::<f64>() / l.values.len() as f64,
                max: l.values.iter().copied().fold(0.0, f64::max),
            })
            .collect();
        Self {
            seed: probe.seed,
            epsilon: probe.epsilon,
            rayleigh: probe.rayleigh,
            iterations_run: probe.iterations_run,
            converged: probe.converged,
            cosine_trace: probe.cosine_trace.clone(),
            layers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_policies() {
        let w = [0.5f64, -4.0];
        assert_eq!(EpsilonPolicy::Auto.resolve(&w), 4.0 * F64_EPSILON_BASE);
        assert_eq!(EpsilonPolicy::Auto.resolve(&[0.5f32]), F32_EPSILON_BASE);
        assert_eq!(EpsilonPolicy::Scaled { base: 1e-3 }.resolve(&w), 4e-3);
        assert_eq!(EpsilonPolicy::Fixed { value: 0.1 }.resolve(&w), 0.1);
        let json = serde_json::to_string(&EpsilonPolicy::Auto).unwrap();
        assert_eq!(json, r#"{"policy":"auto"}"#);
    }
    use crate::layer::Layer;
    use crate::tensor::Tensor;

    fn quad_hvp(diag: &[f64], base: Vec<f64>, eps: f64) -> FiniteDifferenceHvp<f64, Quadratic> {
        FiniteDifferenceHvp::new(Quadratic::diagonal(diag), base, eps).unwrap()
    }

    #[test]
    fn quadratic_hvp_is_exact() {
        for eps in [0.5, 2f64.powi(-10), 1e-3] {
            let mut op = quad_hvp(&[2.0, 1.0], vec![1.0, 1.0], eps);
            let hv = op.apply(&[1.0, 0.0]).unwrap();
            assert!((hv[0] - 2.0).abs() <= 1e-9 && hv[1].abs() <= 1e-9, "{eps}: {hv:?}");
        }
        let mut op = quad_hvp(&[2.0, 1.0], vec![1.0, 1.0], 0.5);
        assert_eq!(op.apply(&[1.0, 0.0]).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn near_zero_direction_is_rejected() {
        let mut op = quad_hvp(&[2.0, 1.0], vec![1.0, 1.0], 1e-3);
        assert!(matches!(op.apply(&[1e-13, 0.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn diagonal_power_iteration_recovers_top_axis() {
        let mut op = quad_hvp(&[3.0, 1.0, 0.5], vec![0.3, -0.2, 0.7], 1e-3);
        let probe = power_iteration_on(&mut op, 100, 1e-12, 9).unwrap();
        assert!(probe.v[0].abs() >= 0.999, "{:?}", probe.v);
        assert!((probe.rayleigh - 3.0).abs() <= 0.01, "{}", probe.rayleigh);
        assert!((norm2(&probe.v) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn identity_is_a_fixed_point() {
        let mut op = quad_hvp(&[1.0; 5], vec![0.0; 5], 1e-3);
        let probe = power_iteration_on(&mut op, 10, 1e-6, 4).unwrap();
        let start: Vec<f64> = rademacher_unit(5, 4);
        assert_eq!(probe.iterations_run, 1);
        assert!(probe.converged);
        let c = cosine(&probe.v, &start);
        assert!((c.abs() - 1.0).abs() < 1e-9);
        assert!((probe.rayleigh - 1.0).abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_trace() {
        let run = || {
            let mut op = quad_hvp(&[3.0, 2.5, 0.5, 0.1], vec![1.0; 4], 1e-3);
            power_iteration_on(&mut op, 8, 1e-12, 21).unwrap().cosine_trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_curvature_reports_iteration() {
        let mut op = quad_hvp(&[0.0, 0.0], vec![1.0, 1.0], 1e-3);
        let err = power_iteration_on(&mut op, 5, 1e-6, 1).unwrap_err();
        assert!(matches!(err, Error::DegenerateCurvature { iteration: 1, .. }), "{err}");
    }

    #[test]
    fn negative_dominant_eigenvalue_converges_by_magnitude() {
        let mut op = quad_hvp(&[-4.0, 1.0], vec![0.0, 0.0], 1e-3);
        let probe = power_iteration_on(&mut op, 200, 1e-10, 2).unwrap();
        assert!(probe.v[0].abs() > 0.999);
        assert!((probe.rayleigh + 4.0).abs() < 1e-6);
        assert!(probe.iterations_run < 200 && probe.converged);
    }

    #[test]
    fn significance_takes_magnitudes_per_layer() {
        let l0 = Layer::<f64>::dense(1, 3, &[0.0; 3], &[0.0; 3]).unwrap();
        let l1 = Layer::<f64>::dense(3, 2, &[0.0; 6], &[0.0; 2]).unwrap();
        let net = Network::new(vec![1], vec![l0, Layer::activation(crate::LayerSpec::Relu).unwrap(), l1]).unwrap();
        let mut v = vec![0.5, -0.8, 0.1];
        v.extend([0.0, 0.1, -0.2, 0.1, 0.0, 0.1]);
        let probe = CurvatureProbe { v: v.clone(), rayleigh: 0.0, iterations_run: 1, converged: true, cosine_trace: vec![], rayleigh_trace: vec![], epsilon: 0.0, seed: 0 };
        let sig = significance(&probe, &net).unwrap();
        assert_eq!(sig.layers[0].layer, 0);
        assert_eq!(sig.layers[0].values, vec![0.5, 0.8, 0.1]);
        assert_eq!(sig.layers[1].layer, 2);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(significance_from_vector(&neg, &net).unwrap(), sig);
        assert!(significance_from_vector(&v[1..], &net).is_err());
    }

    #[test]
    fn hvp_leaves_network_untouched() {
        let l0 = Layer::<f64>::dense(2, 2, &[0.3, -0.1, 0.8, 0.2], &[0.1, 0.0]).unwrap();
        let net = Network::new(vec![2], vec![l0]).unwrap();
        let before: Vec<u64> = net.flatten_params().iter().map(|x| x.to_bits()).collect();
        let batch = Batch::new(Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap(), vec![0, 1], 2).unwrap();
        let hv = hvp_fd(&net, &batch, &[1.0, 0.0, 0.0, 0.0], 1e-3).unwrap();
        assert_eq!(hv.len(), 4);
        let after: Vec<u64> = net.flatten_params().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
    }
}
