//! Signal evolution models and the noisy vertex-sampling observation.
//!
//! Evolution is expressed in the spectral domain: a step applies a (possibly
//! time-varying) operator to the spectral coefficients and adds white process
//! noise. The opinion dynamics used by the social scenario live in the vertex
//! domain and are provided as a standalone step function.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{SpectralBasis, WeightedGraph};

/// Gaussian prior on spectral coefficients with diagonal covariance.
#[derive(Debug, Clone)]
pub struct SignalPrior {
    mean: DVector<f64>,
    covariance_diag: DVector<f64>,
}

impl SignalPrior {
    pub fn new(mean: DVector<f64>, covariance_diag: DVector<f64>) -> Result<Self> {
        if mean.len() != covariance_diag.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: covariance_diag.len(),
                context: "prior mean vs covariance diagonal",
            });
        }
        if covariance_diag.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "prior variances must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            mean,
            covariance_diag,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance_diag(&self) -> &DVector<f64> {
        &self.covariance_diag
    }

    pub fn n(&self) -> usize {
        self.mean.len()
    }
}

/// A time-indexed linear evolution model on spectral coefficients:
/// `f̂_t = H̃_t f̂_{t-1} + noise`, with white process noise of variance
/// `process_noise_var` per coefficient.
pub trait EvolutionModel {
    fn dim(&self) -> usize;

    /// The operator `H̃_t` applied when stepping *into* time `t`.
    fn spectral_operator_at(&self, t: usize) -> DMatrix<f64>;

    fn process_noise_var(&self) -> f64;
}

/// Evolution with one fixed operator for every step.
#[derive(Debug, Clone)]
pub struct StaticEvolution {
    operator: DMatrix<f64>,
    process_noise_var: f64,
}

impl StaticEvolution {
    pub fn new(operator: DMatrix<f64>, process_noise_var: f64) -> Result<Self> {
        let (r, c) = operator.shape();
        if r != c {
            return Err(Error::DimensionMismatch {
                expected: r,
                got: c,
                context: "evolution operator must be square",
            });
        }
        validate_variance(process_noise_var)?;
        Ok(Self {
            operator,
            process_noise_var,
        })
    }

    pub fn identity(n: usize, process_noise_var: f64) -> Result<Self> {
        Self::new(DMatrix::identity(n, n), process_noise_var)
    }
}

impl EvolutionModel for StaticEvolution {
    fn dim(&self) -> usize {
        self.operator.nrows()
    }

    fn spectral_operator_at(&self, _t: usize) -> DMatrix<f64> {
        self.operator.clone()
    }

    fn process_noise_var(&self) -> f64 {
        self.process_noise_var
    }
}

/// Evolution by a scheduled sequence of diagonal spectral operators, one per
/// step. Built from a vertex trajectory: the operator entering step `t` is
/// `scale · diag(Vᵀ δ_{trajectory[t]})`.
///
/// Steps beyond the schedule reuse the final operator.
#[derive(Debug, Clone)]
pub struct TranslationEvolution {
    diagonals: Vec<DVector<f64>>,
    process_noise_var: f64,
}

impl TranslationEvolution {
    pub fn from_trajectory(
        basis: &SpectralBasis,
        trajectory: &[usize],
        scale: f64,
        process_noise_var: f64,
    ) -> Result<Self> {
        if trajectory.is_empty() {
            return Err(Error::InvalidParameter("empty trajectory".into()));
        }
        if !scale.is_finite() {
            return Err(Error::InvalidParameter("non-finite operator scale".into()));
        }
        validate_variance(process_noise_var)?;
        let diagonals = trajectory
            .iter()
            .map(|&center| {
                let op = translation_operator(basis, center)?;
                Ok(op.diagonal() * scale)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            diagonals,
            process_noise_var,
        })
    }
}

impl EvolutionModel for TranslationEvolution {
    fn dim(&self) -> usize {
        self.diagonals[0].len()
    }

    fn spectral_operator_at(&self, t: usize) -> DMatrix<f64> {
        let idx = t.min(self.diagonals.len() - 1);
        DMatrix::from_diagonal(&self.diagonals[idx])
    }

    fn process_noise_var(&self) -> f64 {
        self.process_noise_var
    }
}

/// White observation noise with per-vertex variance `obs_noise_var`.
///
/// The measurement update divides by the variance, so it must be strictly
/// positive there; a zero value is still accepted here because the plain
/// observation map is well defined without noise.
#[derive(Debug, Clone, Copy)]
pub struct ObservationNoise {
    obs_noise_var: f64,
}

impl ObservationNoise {
    pub fn new(obs_noise_var: f64) -> Result<Self> {
        validate_variance(obs_noise_var)?;
        Ok(Self { obs_noise_var })
    }

    pub fn var(&self) -> f64 {
        self.obs_noise_var
    }
}

fn validate_variance(var: f64) -> Result<()> {
    if var.is_nan() || var < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "variance must be nonnegative, got {var}"
        )));
    }
    Ok(())
}

/// Diagonal spectral translation operator `diag(Vᵀ δ_center)`: coefficient
/// `k` is scaled by the value of eigenvector `k` at the center vertex.
pub fn translation_operator(basis: &SpectralBasis, center: usize) -> Result<DMatrix<f64>> {
    let n = basis.n();
    if center >= n {
        return Err(Error::VertexOutOfRange { index: center, n });
    }
    let diag = DVector::from_fn(n, |k, _| basis.eigenvectors()[(center, k)]);
    Ok(DMatrix::from_diagonal(&diag))
}

/// One bounded-confidence opinion update: every vertex moves to the mean of
/// all opinions within distance `eps` of its own (itself always included).
pub fn kh_step(f: &DVector<f64>, eps: f64) -> DVector<f64> {
    assert!(eps >= 0.0, "confidence radius must be nonnegative");
    let n = f.len();
    DVector::from_fn(n, |i, _| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for j in 0..n {
            if (f[i] - f[j]).abs() <= eps {
                sum += f[j];
                count += 1;
            }
        }
        sum / count as f64
    })
}

/// Advances spectral coefficients one step: applies `H̃_t`, adds white
/// process noise, and (when requested) rescales the result to unit energy.
///
/// The noise stream always consumes exactly `n` draws, independently of the
/// noise variance, so runs with different variances stay aligned.
pub fn evolve<R: Rng + ?Sized>(
    fhat: &DVector<f64>,
    model: &dyn EvolutionModel,
    t: usize,
    normalize: bool,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = model.dim();
    if fhat.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: fhat.len(),
            context: "evolve input",
        });
    }
    let sigma = model.process_noise_var().sqrt();
    let mut next = model.spectral_operator_at(t) * fhat;
    for k in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        next[k] += sigma * z;
    }
    if normalize {
        let norm = next.norm();
        if norm > 0.0 {
            next /= norm;
        }
    }
    Ok(next)
}

/// Noisy samples of a vertex-domain signal at the given vertex set
/// (strictly increasing indices). Returns the sampled entries of `f + w`
/// with `w` white of variance `obs_noise_var`.
///
/// A full length-`n` noise vector is always drawn so the stream position
/// does not depend on which vertices are sampled.
pub fn observe<R: Rng + ?Sized>(
    f: &DVector<f64>,
    sample_set: &[usize],
    noise: &ObservationNoise,
    rng: &mut R,
) -> Result<DVector<f64>> {
    validate_sample_set(sample_set, f.len())?;
    if !noise.var().is_finite() {
        return Err(Error::InvalidParameter(
            "observation variance must be finite to draw samples".into(),
        ));
    }
    let sigma = noise.var().sqrt();
    let w: Vec<f64> = (0..f.len())
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sigma * z
        })
        .collect();
    Ok(DVector::from_iterator(
        sample_set.len(),
        sample_set.iter().map(|&i| f[i] + w[i]),
    ))
}

/// Validates that a sample set is strictly increasing with indices in
/// `[0, n)`.
pub fn validate_sample_set(sample_set: &[usize], n: usize) -> Result<()> {
    for (pos, &i) in sample_set.iter().enumerate() {
        if i >= n {
            return Err(Error::InvalidSampleSet {
                reason: format!("index {i} out of range for {n} vertices"),
            });
        }
        if pos > 0 && sample_set[pos - 1] >= i {
            return Err(Error::InvalidSampleSet {
                reason: format!(
                    "indices must be strictly increasing, got {} then {i}",
                    sample_set[pos - 1]
                ),
            });
        }
    }
    Ok(())
}

/// Uniform random walk of a point source over graph vertices: `steps`
/// transitions from `start`, each to a uniformly chosen neighbor (an
/// isolated vertex stays put). Returns the `steps + 1` visited vertices.
pub fn heat_source_trajectory<R: Rng + ?Sized>(
    g: &WeightedGraph,
    start: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if start >= g.n() {
        return Err(Error::VertexOutOfRange {
            index: start,
            n: g.n(),
        });
    }
    let mut path = Vec::with_capacity(steps + 1);
    let mut pos = start;
    path.push(pos);
    for _ in 0..steps {
        let neighbors = g.neighbors(pos);
        if !neighbors.is_empty() {
            pos = neighbors[rng.random_range(0..neighbors.len())];
        }
        path.push(pos);
    }
    Ok(path)
}
