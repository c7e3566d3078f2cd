//! Kalman filtering of spectral coefficients under partial vertex sampling.
//!
//! The state is the vector of spectral coefficients. Prediction applies the
//! evolution operator; the measurement update incorporates noisy samples of
//! the vertex-domain signal at a chosen vertex set. The posterior covariance
//! is computed in information form, which is also the quantity propagated by
//! the sampling optimizer.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{validate_sample_set, EvolutionModel, ObservationNoise, SignalPrior};
use crate::error::{Error, Result};
use crate::graph::SpectralBasis;
use crate::linalg::{spd_cholesky, spd_inverse, symmetrize, weighted_gram};

/// Filter posterior at a time step: mean and covariance of the spectral
/// coefficients given all observations up to `time`.
#[derive(Debug, Clone)]
pub struct FilterState {
    posterior_mean: DVector<f64>,
    posterior_cov: DMatrix<f64>,
    time: usize,
}

impl FilterState {
    pub fn new(posterior_mean: DVector<f64>, posterior_cov: DMatrix<f64>, time: usize) -> Result<Self> {
        let n = posterior_mean.len();
        if posterior_cov.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: posterior_cov.nrows(),
                context: "posterior covariance shape",
            });
        }
        Ok(Self {
            posterior_mean,
            posterior_cov,
            time,
        })
    }

    /// Initial state from a diagonal prior, at time 0.
    pub fn from_prior(prior: &SignalPrior) -> Self {
        Self {
            posterior_mean: prior.mean().clone(),
            posterior_cov: DMatrix::from_diagonal(prior.covariance_diag()),
            time: 0,
        }
    }

    pub fn posterior_mean(&self) -> &DVector<f64> {
        &self.posterior_mean
    }

    pub fn posterior_cov(&self) -> &DMatrix<f64> {
        &self.posterior_cov
    }

    pub fn time(&self) -> usize {
        self.time
    }
}

/// One-step-ahead prior produced by [`predict`].
#[derive(Debug, Clone)]
pub struct Prediction {
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    time: usize,
}

impl Prediction {
    pub fn new(prior_mean: DVector<f64>, prior_cov: DMatrix<f64>, time: usize) -> Result<Self> {
        let n = prior_mean.len();
        if prior_cov.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: prior_cov.nrows(),
                context: "prior covariance shape",
            });
        }
        Ok(Self {
            prior_mean,
            prior_cov,
            time,
        })
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn prior_cov(&self) -> &DMatrix<f64> {
        &self.prior_cov
    }

    pub fn time(&self) -> usize {
        self.time
    }
}

/// Time update into step `t`: mean `H̃_t f̂⁺`, covariance
/// `H̃_t P⁺ H̃_tᵀ + σ_v² I`.
///
/// `t` must be the step after the state's time.
pub fn predict(state: &FilterState, model: &dyn EvolutionModel, t: usize) -> Result<Prediction> {
    let n = state.posterior_mean.len();
    if model.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: model.dim(),
            context: "evolution model dimension",
        });
    }
    if t != state.time + 1 {
        return Err(Error::InvalidParameter(format!(
            "predict target step {t} must follow state time {}",
            state.time
        )));
    }
    let h = model.spectral_operator_at(t);
    let prior_mean = &h * &state.posterior_mean;
    let mut prior_cov = &h * &state.posterior_cov * h.transpose();
    let q = model.process_noise_var();
    for k in 0..n {
        prior_cov[(k, k)] += q;
    }
    Ok(Prediction {
        prior_mean,
        prior_cov: symmetrize(&prior_cov),
        time: t,
    })
}

/// Measurement update with noisy samples `y` taken at `sample_set`
/// (strictly increasing vertex indices).
///
/// The mean uses the standard gain; the covariance is computed in
/// information form, `((P⁻)⁻¹ + σ_w⁻² Vᵀ D V)⁻¹` with `D` the sampling
/// indicator, and symmetrized. An empty sample set returns the prior.
pub fn update(
    pred: &Prediction,
    y: &DVector<f64>,
    sample_set: &[usize],
    basis: &SpectralBasis,
    noise: &ObservationNoise,
) -> Result<FilterState> {
    let n = pred.prior_mean.len();
    if basis.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: basis.n(),
            context: "basis dimension in update",
        });
    }
    validate_sample_set(sample_set, n)?;
    let m = sample_set.len();
    if y.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: y.len(),
            context: "observation length vs sample set",
        });
    }
    if m == 0 {
        return FilterState::new(pred.prior_mean.clone(), symmetrize(&pred.prior_cov), pred.time);
    }
    let r = noise.var();
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidParameter(
            "measurement update requires a finite positive observation variance".into(),
        ));
    }

    let v = basis.eigenvectors();
    // Rows of V at the sampled vertices: the observation matrix Ψ V.
    let mut c = DMatrix::zeros(m, n);
    for (row, &i) in sample_set.iter().enumerate() {
        c.row_mut(row).copy_from(&v.row(i));
    }

    // Gain: K = P⁻ (ΨV)ᵀ (ΨV P⁻ (ΨV)ᵀ + σ_w² I)⁻¹.
    let pct = &pred.prior_cov * c.transpose();
    let mut s = &c * &pct;
    for k in 0..m {
        s[(k, k)] += r;
    }
    let chol_s = spd_cholesky(symmetrize(&s), "innovation covariance")
        .map_err(|_| Error::SingularInnovation)?;
    let gain = chol_s.solve(&pct.transpose()).transpose();

    let innovation = y - &c * &pred.prior_mean;
    let posterior_mean = &pred.prior_mean + &gain * innovation;

    // Information-form covariance.
    let prior_info = spd_inverse(&pred.prior_cov, "prior covariance in update")?;
    let mut indicator = DVector::zeros(n);
    for &i in sample_set {
        indicator[i] = 1.0;
    }
    let info = &prior_info + weighted_gram(v, &indicator) / r;
    let posterior_cov = symmetrize(&spd_inverse(&symmetrize(&info), "posterior information")?);

    FilterState::new(posterior_mean, posterior_cov, pred.time)
}

/// Instantaneous mean-squared estimation error: `tr(P⁺)`.
pub fn instant_mse(state: &FilterState) -> f64 {
    state.posterior_cov.trace()
}

/// Propagates prior information one step under a fractional sampling
/// weighting `d` applied at step `t`:
///
/// `(P⁻_{t+1})⁻¹ = [H̃_{t+1} (P_inv + σ_w⁻² Vᵀ diag(d) V)⁻¹ H̃_{t+1}ᵀ + σ_v² I]⁻¹`
///
/// `p_inv` is the prior information at step `t`; the result is the prior
/// information at step `t + 1`.
pub fn transition_information(
    p_inv: &DMatrix<f64>,
    d: &DVector<f64>,
    model: &dyn EvolutionModel,
    noise: &ObservationNoise,
    basis: &SpectralBasis,
    t: usize,
) -> Result<DMatrix<f64>> {
    let n = basis.n();
    if p_inv.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: p_inv.nrows(),
            context: "prior information shape",
        });
    }
    if d.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: d.len(),
            context: "sampling weights length",
        });
    }
    validate_fractional_weights(d)?;
    if !(noise.var() > 0.0) {
        return Err(Error::InvalidParameter(
            "information transition requires positive observation variance".into(),
        ));
    }
    let obs_precision = 1.0 / noise.var();

    let info = p_inv + weighted_gram(basis.eigenvectors(), d) * obs_precision;
    let posterior_cov = spd_inverse(&symmetrize(&info), "updated information")?;
    let h = model.spectral_operator_at(t + 1);
    let mut next_prior = &h * posterior_cov * h.transpose();
    let q = model.process_noise_var();
    for k in 0..n {
        next_prior[(k, k)] += q;
    }
    spd_inverse(&symmetrize(&next_prior), "next-step prior covariance")
}

pub(crate) fn validate_fractional_weights(d: &DVector<f64>) -> Result<()> {
    for (i, &w) in d.iter().enumerate() {
        if !w.is_finite() || !(-1e-9..=1.0 + 1e-9).contains(&w) {
            return Err(Error::InvalidParameter(format!(
                "sampling weight {w} at index {i} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::StaticEvolution;
    use crate::graph::{random_geometric_graph, SpectralBasis};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_spd(n: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal));
        &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5
    }

    fn basis_of(n: usize, seed: u64) -> SpectralBasis {
        let g = random_geometric_graph(n, 0.8, &mut rng(seed));
        SpectralBasis::from_graph(&g).unwrap()
    }

    #[test]
    fn predict_identity_noiseless_is_fixed_point() {
        let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.4, 0.6]));
        let state = FilterState::new(mean.clone(), cov.clone(), 0).unwrap();
        let model = StaticEvolution::identity(3, 0.0).unwrap();
        let pred = predict(&state, &model, 1).unwrap();
        assert_eq!(pred.prior_mean(), &mean);
        assert!((pred.prior_cov() - cov).norm() < 1e-14);
    }

    #[test]
    fn predict_identity_adds_process_noise() {
        let state = FilterState::new(DVector::zeros(4), DMatrix::identity(4, 4), 2).unwrap();
        let model = StaticEvolution::identity(4, 0.3).unwrap();
        let pred = predict(&state, &model, 3).unwrap();
        assert!((pred.prior_cov() - DMatrix::identity(4, 4) * 1.3).norm() < 1e-14);
        assert!(predict(&state, &model, 5).is_err());
    }

    #[test]
    fn predict_matches_direct_formula() {
        let mut r = rng(10);
        let n = 6;
        let h = DMatrix::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal) * 0.4);
        let cov = random_spd(n, &mut r);
        let mean = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
        let state = FilterState::new(mean.clone(), cov.clone(), 0).unwrap();
        let model = StaticEvolution::new(h.clone(), 0.07).unwrap();
        let pred = predict(&state, &model, 1).unwrap();

        let expect_mean = &h * &mean;
        let expect_cov = &h * &cov * h.transpose() + DMatrix::identity(n, n) * 0.07;
        assert!((pred.prior_mean() - expect_mean).norm() < 1e-12);
        assert!((pred.prior_cov() - expect_cov).norm() < 1e-12);
    }

    #[test]
    fn update_empty_set_returns_prior() {
        let basis = basis_of(5, 1);
        let mut r = rng(2);
        let cov = random_spd(5, &mut r);
        let state = FilterState::new(DVector::from_element(5, 0.3), cov, 0).unwrap();
        let model = StaticEvolution::identity(5, 0.01).unwrap();
        let pred = predict(&state, &model, 1).unwrap();
        let noise = ObservationNoise::new(0.1).unwrap();
        let post = update(&pred, &DVector::zeros(0), &[], &basis, &noise).unwrap();
        assert_eq!(post.posterior_mean(), pred.prior_mean());
        assert!((post.posterior_cov() - pred.prior_cov()).norm() < 1e-14);
        assert_eq!(post.time(), 1);
    }

    #[test]
    fn update_full_sampling_tiny_noise_recovers_signal() {
        let n = 8;
        let basis = basis_of(n, 3);
        let mut r = rng(4);
        let state = FilterState::new(DVector::zeros(n), DMatrix::identity(n, n), 0).unwrap();
        let model = StaticEvolution::identity(n, 1e-4).unwrap();
        let pred = predict(&state, &model, 1).unwrap();

        let f_vertex = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
        let set: Vec<usize> = (0..n).collect();
        let noise = ObservationNoise::new(1e-12).unwrap();
        let post = update(&pred, &f_vertex, &set, &basis, &noise).unwrap();
        let expected = basis.gft(&f_vertex).unwrap();
        let residual = (post.posterior_mean() - expected).norm();
        assert!(residual < 1e-4, "residual {residual}");
    }

    #[test]
    fn update_covariance_matches_joseph_form() {
        // The information-form posterior covariance must agree with the
        // numerically independent Joseph-form computation built from the gain.
        let n = 7;
        let basis = basis_of(n, 5);
        let mut r = rng(6);
        for trial in 0..20 {
            let prior_cov = random_spd(n, &mut r);
            let prior_mean = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
            let state = FilterState::new(prior_mean, prior_cov, 0).unwrap();
            let model = StaticEvolution::identity(n, 0.05).unwrap();
            let pred = predict(&state, &model, 1).unwrap();

            let mut set: Vec<usize> = (0..n).filter(|_| r.random::<f64>() < 0.5).collect();
            if set.is_empty() {
                set.push(r.random_range(0..n));
            }
            let var = 0.2;
            let noise = ObservationNoise::new(var).unwrap();
            let y = DVector::from_fn(set.len(), |_, _| r.sample::<f64, _>(StandardNormal));
            let post = update(&pred, &y, &set, &basis, &noise).unwrap();

            let m = set.len();
            let mut c = DMatrix::zeros(m, n);
            for (row, &i) in set.iter().enumerate() {
                c.row_mut(row).copy_from(&basis.eigenvectors().row(i));
            }
            let s = &c * pred.prior_cov() * c.transpose() + DMatrix::identity(m, m) * var;
            let k = pred.prior_cov() * c.transpose() * s.try_inverse().unwrap();
            let ikc = DMatrix::identity(n, n) - &k * &c;
            let joseph = &ikc * pred.prior_cov() * ikc.transpose() + &k * k.transpose() * var;

            let rel = (post.posterior_cov() - &joseph).norm() / joseph.norm();
            assert!(rel < 1e-8, "trial {trial}: relative gap {rel}");
        }
    }

    #[test]
    fn update_shrinks_trace_and_more_samples_shrink_further() {
        let n = 9;
        let basis = basis_of(n, 8);
        let mut r = rng(9);
        let prior_cov = random_spd(n, &mut r);
        let state = FilterState::new(DVector::zeros(n), prior_cov, 0).unwrap();
        let model = StaticEvolution::identity(n, 0.02).unwrap();
        let pred = predict(&state, &model, 1).unwrap();
        let noise = ObservationNoise::new(0.3).unwrap();

        let small = vec![1, 4];
        let large = vec![1, 3, 4, 7];
        let y_small = DVector::zeros(2);
        let y_large = DVector::zeros(4);
        let post_small = update(&pred, &y_small, &small, &basis, &noise).unwrap();
        let post_large = update(&pred, &y_large, &large, &basis, &noise).unwrap();

        let trace_prior = pred.prior_cov().trace();
        assert!(instant_mse(&post_small) <= trace_prior + 1e-12);
        assert!(instant_mse(&post_large) <= instant_mse(&post_small) + 1e-12);
    }

    #[test]
    fn instant_mse_of_diagonal_covariances() {
        let s = FilterState::new(DVector::zeros(5), DMatrix::identity(5, 5), 0).unwrap();
        assert!((instant_mse(&s) - 5.0).abs() < 1e-15);
        let d = FilterState::new(
            DVector::zeros(3),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])),
            0,
        )
        .unwrap();
        assert!((instant_mse(&d) - 6.0).abs() < 1e-15);
    }

    #[test]
    fn transition_information_identity_no_noise_is_identity_map() {
        let n = 5;
        let basis = basis_of(n, 11);
        let mut r = rng(12);
        let p_inv = random_spd(n, &mut r);
        let model = StaticEvolution::identity(n, 0.0).unwrap();
        let noise = ObservationNoise::new(0.5).unwrap();
        let out =
            transition_information(&p_inv, &DVector::zeros(n), &model, &noise, &basis, 0).unwrap();
        assert!((&out - &p_inv).norm() / p_inv.norm() < 1e-10);
    }

    #[test]
    fn transition_information_zero_weights_reduces_to_prediction() {
        let n = 6;
        let basis = basis_of(n, 13);
        let mut r = rng(14);
        let p_inv = random_spd(n, &mut r);
        let h = DMatrix::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal) * 0.5);
        let q = 0.04;
        let model = StaticEvolution::new(h.clone(), q).unwrap();
        let noise = ObservationNoise::new(0.1).unwrap();
        let out =
            transition_information(&p_inv, &DVector::zeros(n), &model, &noise, &basis, 3).unwrap();

        let p = p_inv.clone().try_inverse().unwrap();
        let next_prior = &h * p * h.transpose() + DMatrix::identity(n, n) * q;
        let expected = next_prior.try_inverse().unwrap();
        assert!((&out - &expected).norm() / expected.norm() < 1e-9);
    }

    #[test]
    fn transition_information_composes_update_then_predict() {
        // Fractional weights: the result must equal information-update
        // followed by covariance prediction, computed by hand.
        let n = 6;
        let basis = basis_of(n, 15);
        let mut r = rng(16);
        let p_inv = random_spd(n, &mut r);
        let h = DMatrix::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal) * 0.4);
        let q = 0.02;
        let var = 0.25;
        let model = StaticEvolution::new(h.clone(), q).unwrap();
        let noise = ObservationNoise::new(var).unwrap();
        let d = DVector::from_fn(n, |i, _| (i as f64) / (n as f64));
        let out = transition_information(&p_inv, &d, &model, &noise, &basis, 1).unwrap();

        let v = basis.eigenvectors();
        let mut vdv = DMatrix::zeros(n, n);
        for i in 0..n {
            let row = v.row(i).transpose();
            vdv += d[i] * &row * row.transpose();
        }
        let info = &p_inv + vdv / var;
        let post = info.try_inverse().unwrap();
        let next_prior = &h * post * h.transpose() + DMatrix::identity(n, n) * q;
        let expected = next_prior.try_inverse().unwrap();
        assert!((&out - &expected).norm() / expected.norm() < 1e-9);
    }

    #[test]
    fn more_sampling_weight_never_inflates_posterior() {
        let n = 7;
        let basis = basis_of(n, 17);
        let mut r = rng(18);
        for _ in 0..15 {
            let p_inv = random_spd(n, &mut r);
            let var = 0.3;
            let d1 = DVector::from_fn(n, |_, _| r.random::<f64>() * 0.5);
            let d2 = DVector::from_fn(n, |i, _| d1[i] + r.random::<f64>() * 0.5);
            let gram = |d: &DVector<f64>| {
                let v = basis.eigenvectors();
                let mut m = DMatrix::zeros(n, n);
                for i in 0..n {
                    let row = v.row(i).transpose();
                    m += d[i] * &row * row.transpose();
                }
                m
            };
            let cov1 = (&p_inv + gram(&d1) / var).try_inverse().unwrap();
            let cov2 = (&p_inv + gram(&d2) / var).try_inverse().unwrap();
            let diff = nalgebra::SymmetricEigen::new(cov1 - cov2);
            let min_eig = diff.eigenvalues.min();
            assert!(min_eig > -1e-9, "ordering violated: min eigenvalue {min_eig}");
        }
    }
}
