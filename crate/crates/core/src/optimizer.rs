//! The relaxed two-step sampling-design problem.
//!
//! Over a pair of fractional sampling weightings `(d_now, d_next)` the
//! objective is the current posterior error plus the discounted next-step
//! posterior error,
//!
//! ```text
//! J(d_now, d_next) = tr[(P_inv + σ_w⁻² Vᵀ diag(d_now) V)⁻¹]
//!                  + γ tr[(F(d_now) + σ_w⁻² Vᵀ diag(d_next) V)⁻¹]
//! ```
//!
//! where `F` is the one-step information transition (see
//! [`crate::kalman::transition_information`]). The feasible set couples the
//! two steps: entries in `[0, 1]`, per-step budget caps, and a shared total
//! of twice the average budget. The problem is smooth and convex; it is
//! solved by projected gradient descent with a backtracking line search.
//!
//! Internally everything is evaluated after conjugating by the orthonormal
//! basis `V`, which turns both sampling terms into diagonal updates and
//! leaves every trace unchanged.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{EvolutionModel, ObservationNoise};
use crate::error::{Error, Result};
use crate::graph::SpectralBasis;
use crate::kalman::validate_fractional_weights;
use crate::linalg::{spd_cholesky, symmetrize};

/// Budget description for one planning epoch: average per-step budget `M`,
/// per-step caps, and the discount on the second step's error.
#[derive(Debug, Clone, Copy)]
pub struct BudgetParams {
    avg_budget: usize,
    step_cap_now: usize,
    step_cap_next: usize,
    discount: f64,
}

impl BudgetParams {
    /// Equal caps on both steps (the usual configuration).
    pub fn new(avg_budget: usize, step_cap: usize, discount: f64) -> Result<Self> {
        Self::with_caps(avg_budget, step_cap, step_cap, discount)
    }

    pub fn with_caps(
        avg_budget: usize,
        step_cap_now: usize,
        step_cap_next: usize,
        discount: f64,
    ) -> Result<Self> {
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "discount must lie strictly inside (0, 1), got {discount}"
            )));
        }
        if avg_budget > step_cap_now {
            return Err(Error::InfeasibleBudget(format!(
                "average budget {avg_budget} exceeds current-step cap {step_cap_now}"
            )));
        }
        if 2 * avg_budget > step_cap_now + step_cap_next {
            return Err(Error::InfeasibleBudget(format!(
                "total budget {} exceeds combined caps {}",
                2 * avg_budget,
                step_cap_now + step_cap_next
            )));
        }
        Ok(Self {
            avg_budget,
            step_cap_now,
            step_cap_next,
            discount,
        })
    }

    pub fn avg_budget(&self) -> usize {
        self.avg_budget
    }

    pub fn step_cap_now(&self) -> usize {
        self.step_cap_now
    }

    pub fn step_cap_next(&self) -> usize {
        self.step_cap_next
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub(crate) fn total_budget(&self) -> f64 {
        2.0 * self.avg_budget as f64
    }

    fn check_dimension(&self, n: usize) -> Result<()> {
        if 2 * self.avg_budget > 2 * n {
            return Err(Error::InfeasibleBudget(format!(
                "total budget {} exceeds 2n = {}",
                2 * self.avg_budget,
                2 * n
            )));
        }
        Ok(())
    }
}

/// A feasible fractional sampling pair: entries in `[0, 1]`, per-step sums
/// within the caps, and total equal to twice the average budget.
#[derive(Debug, Clone)]
pub struct RelaxedDecision {
    d_now: DVector<f64>,
    d_next: DVector<f64>,
}

impl RelaxedDecision {
    /// Validates feasibility with respect to `params` (1e-7 on the sums;
    /// box violations up to 1e-6 are clamped).
    pub fn new(d_now: DVector<f64>, d_next: DVector<f64>, params: &BudgetParams) -> Result<Self> {
        if d_now.len() != d_next.len() {
            return Err(Error::DimensionMismatch {
                expected: d_now.len(),
                got: d_next.len(),
                context: "decision halves must have equal length",
            });
        }
        let clamp = |v: DVector<f64>| -> Result<DVector<f64>> {
            let mut out = v;
            for x in out.iter_mut() {
                if !x.is_finite() || *x < -1e-6 || *x > 1.0 + 1e-6 {
                    return Err(Error::InvalidParameter(format!(
                        "decision entry {x} outside [0, 1]"
                    )));
                }
                *x = x.clamp(0.0, 1.0);
            }
            Ok(out)
        };
        let d_now = clamp(d_now)?;
        let d_next = clamp(d_next)?;
        let (s_now, s_next) = (d_now.sum(), d_next.sum());
        if s_now > params.step_cap_now as f64 + 1e-7 {
            return Err(Error::InfeasibleBudget(format!(
                "current-step mass {s_now} exceeds cap {}",
                params.step_cap_now
            )));
        }
        if s_next > params.step_cap_next as f64 + 1e-7 {
            return Err(Error::InfeasibleBudget(format!(
                "next-step mass {s_next} exceeds cap {}",
                params.step_cap_next
            )));
        }
        if (s_now + s_next - params.total_budget()).abs() > 1e-7 {
            return Err(Error::InfeasibleBudget(format!(
                "total mass {} must equal {}",
                s_now + s_next,
                params.total_budget()
            )));
        }
        Ok(Self { d_now, d_next })
    }

    pub fn d_now(&self) -> &DVector<f64> {
        &self.d_now
    }

    pub fn d_next(&self) -> &DVector<f64> {
        &self.d_next
    }
}

/// Solver knobs. The defaults are the fixed reference configuration; they
/// can be overridden through the scenario configuration.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Iteration cap for projected gradient descent.
    pub max_iters: usize,
    /// Stop when the projected-gradient norm falls below this.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Line-search step shrink factor.
    pub backtrack: f64,
    /// Trial step for the first iteration (later trials are scaled by
    /// observed curvature).
    pub init_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            grad_tol: 1e-6,
            armijo_c: 1e-4,
            backtrack: 0.5,
            init_step: 1.0,
        }
    }
}

/// Convergence record returned alongside the solution.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

/// The two-step problem conjugated into the vertex domain, where both
/// sampling terms are diagonal updates.
struct TwoStepProblem {
    /// `V P_inv Vᵀ`.
    q: DMatrix<f64>,
    /// `V H̃_{t+1} Vᵀ`.
    h: DMatrix<f64>,
    obs_precision: f64,
    process_var: f64,
    discount: f64,
    n: usize,
}

struct Evaluation {
    objective: f64,
    gradient: Option<DVector<f64>>,
}

impl TwoStepProblem {
    fn new(
        p_inv: &DMatrix<f64>,
        model: &dyn EvolutionModel,
        noise: &ObservationNoise,
        basis: &SpectralBasis,
        discount: f64,
        t: usize,
    ) -> Result<Self> {
        let n = basis.n();
        if p_inv.shape() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: p_inv.nrows(),
                context: "prior information shape",
            });
        }
        if model.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: model.dim(),
                context: "evolution model dimension",
            });
        }
        if !(noise.var() > 0.0) {
            return Err(Error::InvalidParameter(
                "two-step design requires positive observation variance".into(),
            ));
        }
        let sym = symmetrize(p_inv);
        spd_cholesky(sym.clone(), "prior information must be SPD")?;
        let v = basis.eigenvectors();
        let q = symmetrize(&(v * sym * v.transpose()));
        let h = v * model.spectral_operator_at(t + 1) * v.transpose();
        Ok(Self {
            q,
            h,
            obs_precision: 1.0 / noise.var(),
            process_var: model.process_noise_var(),
            discount,
            n,
        })
    }

    /// Objective (and optionally its gradient) at a stacked point
    /// `(d_now, d_next)`.
    fn evaluate(&self, x: &DVector<f64>, with_gradient: bool) -> Result<Evaluation> {
        let n = self.n;
        let r = self.obs_precision;

        // First stage: posterior information A = Q + r diag(d_now).
        let mut a = self.q.clone();
        for i in 0..n {
            a[(i, i)] += r * x[i];
        }
        let a_inv = spd_cholesky(a, "first-stage information")?.inverse();
        let term1 = a_inv.trace();

        // Propagated prior covariance B = H A⁻¹ Hᵀ + σ_v² I.
        let mut b = &self.h * &a_inv * self.h.transpose();
        for i in 0..n {
            b[(i, i)] += self.process_var;
        }
        let b_inv = spd_cholesky(symmetrize(&b), "next-step prior covariance")?.inverse();

        // Second stage: G = B⁻¹ + r diag(d_next).
        let mut g = b_inv.clone();
        for i in 0..n {
            g[(i, i)] += r * x[n + i];
        }
        let g_inv = spd_cholesky(symmetrize(&g), "second-stage information")?.inverse();
        let term2 = g_inv.trace();

        let objective = term1 + self.discount * term2;
        if !objective.is_finite() {
            return Err(Error::InvalidParameter(
                "two-step objective is not finite".into(),
            ));
        }
        if !with_gradient {
            return Ok(Evaluation {
                objective,
                gradient: None,
            });
        }

        // d/d_now[i]  = -r (A⁻²)_ii - γ r ‖(G⁻¹ B⁻¹ H A⁻¹) e_i‖²
        // d/d_next[i] = -γ r (G⁻²)_ii
        let chain = &g_inv * &b_inv * &self.h * &a_inv;
        let mut grad = DVector::zeros(2 * n);
        for i in 0..n {
            let a_sq: f64 = (0..n).map(|j| a_inv[(i, j)] * a_inv[(i, j)]).sum();
            let chain_sq: f64 = (0..n).map(|j| chain[(j, i)] * chain[(j, i)]).sum();
            grad[i] = -r * (a_sq + self.discount * chain_sq);
            let g_sq: f64 = (0..n).map(|j| g_inv[(i, j)] * g_inv[(i, j)]).sum();
            grad[n + i] = -self.discount * r * g_sq;
        }
        Ok(Evaluation {
            objective,
            gradient: Some(grad),
        })
    }
}

fn stack(d_now: &DVector<f64>, d_next: &DVector<f64>) -> DVector<f64> {
    let n = d_now.len();
    DVector::from_fn(2 * n, |i, _| if i < n { d_now[i] } else { d_next[i - n] })
}

fn unstack(x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = x.len() / 2;
    (
        DVector::from_fn(n, |i, _| x[i]),
        DVector::from_fn(n, |i, _| x[n + i]),
    )
}

fn validate_pair(d_now: &DVector<f64>, d_next: &DVector<f64>) -> Result<()> {
    if d_now.len() != d_next.len() {
        return Err(Error::DimensionMismatch {
            expected: d_now.len(),
            got: d_next.len(),
            context: "decision halves must have equal length",
        });
    }
    validate_fractional_weights(d_now)?;
    validate_fractional_weights(d_next)
}

/// The two-step design objective at a fractional pair. Entries must lie in
/// `[0, 1]`; the budget sums are not required to be feasible for evaluation.
#[allow(clippy::too_many_arguments)]
pub fn two_step_objective(
    p_inv: &DMatrix<f64>,
    d_now: &DVector<f64>,
    d_next: &DVector<f64>,
    model: &dyn EvolutionModel,
    noise: &ObservationNoise,
    basis: &SpectralBasis,
    params: &BudgetParams,
    t: usize,
) -> Result<f64> {
    validate_pair(d_now, d_next)?;
    let problem = TwoStepProblem::new(p_inv, model, noise, basis, params.discount(), t)?;
    Ok(problem
        .evaluate(&stack(d_now, d_next), false)?
        .objective)
}

/// Analytic gradient of [`two_step_objective`] with respect to both halves.
#[allow(clippy::too_many_arguments)]
pub fn two_step_gradient(
    p_inv: &DMatrix<f64>,
    d_now: &DVector<f64>,
    d_next: &DVector<f64>,
    model: &dyn EvolutionModel,
    noise: &ObservationNoise,
    basis: &SpectralBasis,
    params: &BudgetParams,
    t: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    validate_pair(d_now, d_next)?;
    let problem = TwoStepProblem::new(p_inv, model, noise, basis, params.discount(), t)?;
    let eval = problem.evaluate(&stack(d_now, d_next), true)?;
    Ok(unstack(&eval.gradient.expect("gradient requested")))
}

/// Exact Euclidean projection onto the sum polyhedron
/// `{ sum(a) ≤ cap_a, sum(b) ≤ cap_b, sum(a) + sum(b) = total }`.
///
/// Only the sums are constrained, so the projection is a uniform shift of
/// each half; the three candidate active sets are checked in turn.
fn project_sum_polyhedron(x: &DVector<f64>, total: f64, cap_a: f64, cap_b: f64) -> DVector<f64> {
    let n = x.len() / 2;
    let (na, nb) = (n as f64, n as f64);
    let sa: f64 = (0..n).map(|i| x[i]).sum();
    let sb: f64 = (n..2 * n).map(|i| x[i]).sum();
    let eps = 1e-12;

    let apply = |shift_a: f64, shift_b: f64| -> DVector<f64> {
        DVector::from_fn(2 * n, |i, _| {
            if i < n {
                x[i] - shift_a
            } else {
                x[i] - shift_b
            }
        })
    };

    // Equality constraint only.
    let nu = (sa + sb - total) / (na + nb);
    if sa - na * nu <= cap_a + eps && sb - nb * nu <= cap_b + eps {
        return apply(nu, nu);
    }
    // Current-step cap active: sum(a) = cap_a, sum(b) = total - cap_a.
    let shift_a = (sa - cap_a) / na;
    let shift_b = (sb - (total - cap_a)) / nb;
    if shift_a >= shift_b - eps {
        return apply(shift_a, shift_b);
    }
    // Next-step cap active: sum(b) = cap_b, sum(a) = total - cap_b.
    let shift_b2 = (sb - cap_b) / nb;
    let shift_a2 = (sa - (total - cap_b)) / na;
    apply(shift_a2, shift_b2)
}

fn clamp_box(x: &DVector<f64>) -> DVector<f64> {
    x.map(|v| v.clamp(0.0, 1.0))
}

/// Dykstra's alternating projection between the unit box and the sum
/// polyhedron, run to well below the documented 1e-9 movement tolerance.
/// Returns the sum-stage iterate and whether the sweep converged; from very
/// distant starting points the increment drains only O(1/n) per sweep, so
/// the cap can be hit and the caller must fall back.
fn dykstra_project(x0: &DVector<f64>, params: &BudgetParams) -> (DVector<f64>, bool) {
    let total = params.total_budget();
    let cap_a = params.step_cap_now() as f64;
    let cap_b = params.step_cap_next() as f64;
    let mut x = x0.clone();
    let mut p = DVector::zeros(x0.len());
    let mut q = DVector::zeros(x0.len());
    let tol = 1e-11;
    let mut prev: Option<DVector<f64>> = None;
    for _ in 0..500 {
        let y = clamp_box(&(&x + &p));
        p = &x + &p - &y;
        let z = project_sum_polyhedron(&(&y + &q), total, cap_a, cap_b);
        q = &y + &q - &z;
        let gap = (&z - &y).amax();
        let moved = prev
            .as_ref()
            .map(|w: &DVector<f64>| (&z - w).amax())
            .unwrap_or(f64::INFINITY);
        x = z;
        if gap < tol && moved < tol {
            return (x, true);
        }
        prev = Some(x.clone());
    }
    (x, false)
}

/// The shift `τ` with `Σ_i clamp(v_i − τ, 0, 1) = target` over one block
/// (waterfilling). The mass is continuous and nonincreasing in `τ`, so
/// bisection pins the unique projected point even across plateaus.
fn solve_block_shift(v: &DVector<f64>, lo: usize, hi: usize, target: f64) -> f64 {
    let mut t_lo = f64::INFINITY;
    let mut t_hi = f64::NEG_INFINITY;
    for i in lo..hi {
        t_lo = t_lo.min(v[i] - 1.5);
        t_hi = t_hi.max(v[i] + 0.5);
    }
    let mass = |tau: f64| -> f64 { (lo..hi).map(|i| (v[i] - tau).clamp(0.0, 1.0)).sum() };
    for _ in 0..90 {
        let mid = 0.5 * (t_lo + t_hi);
        if mass(mid) > target {
            t_lo = mid;
        } else {
            t_hi = mid;
        }
    }
    0.5 * (t_lo + t_hi)
}

/// Exact Euclidean projection onto the full feasible set (box, per-step
/// caps, exact total) via the KKT structure: within each block every
/// coordinate shares one shift through the box clamp, so each candidate
/// active set reduces to one or two waterfilling problems.
fn exact_project(v: &DVector<f64>, params: &BudgetParams) -> DVector<f64> {
    let n = v.len() / 2;
    let nf = n as f64;
    let total = params.total_budget();
    let cap_a = params.step_cap_now() as f64;
    let cap_b = params.step_cap_next() as f64;
    let eps = 1e-12;

    let compose = |tau_a: f64, tau_b: f64| -> DVector<f64> {
        DVector::from_fn(2 * n, |i, _| {
            let tau = if i < n { tau_a } else { tau_b };
            (v[i] - tau).clamp(0.0, 1.0)
        })
    };

    // Equality constraint only: one common shift across both blocks.
    let tau = solve_block_shift(v, 0, 2 * n, total);
    let x = compose(tau, tau);
    let sa: f64 = (0..n).map(|i| x[i]).sum();
    let sb: f64 = (n..2 * n).map(|i| x[i]).sum();
    if sa <= cap_a + 1e-9 && sb <= cap_b + 1e-9 {
        return x;
    }
    // Current-step cap active.
    if cap_a <= nf && (0.0..=nf).contains(&(total - cap_a)) {
        let tau_a = solve_block_shift(v, 0, n, cap_a);
        let tau_b = solve_block_shift(v, n, 2 * n, total - cap_a);
        if tau_a >= tau_b - eps {
            return compose(tau_a, tau_b);
        }
    }
    // Next-step cap active.
    if cap_b <= nf && (0.0..=nf).contains(&(total - cap_b)) {
        let tau_b = solve_block_shift(v, n, 2 * n, cap_b);
        let tau_a = solve_block_shift(v, 0, n, total - cap_b);
        if tau_b >= tau_a - eps {
            return compose(tau_a, tau_b);
        }
    }
    x
}

/// Projects an arbitrary pair onto the feasible set (box, per-step caps,
/// exact total). Already-feasible points come back unchanged up to 1e-9.
///
/// Runs Dykstra's alternating projection; if the sweep cap is hit before
/// convergence (far inputs), falls back to the closed-form block
/// projection, which computes the same point exactly.
pub fn project_feasible(
    d_now: &DVector<f64>,
    d_next: &DVector<f64>,
    params: &BudgetParams,
) -> Result<RelaxedDecision> {
    if d_now.len() != d_next.len() {
        return Err(Error::DimensionMismatch {
            expected: d_now.len(),
            got: d_next.len(),
            context: "decision halves must have equal length",
        });
    }
    params.check_dimension(d_now.len())?;
    for v in d_now.iter().chain(d_next.iter()) {
        if !v.is_finite() {
            return Err(Error::InvalidParameter(
                "projection input must be finite".into(),
            ));
        }
    }
    let stacked = stack(d_now, d_next);
    let (x, converged) = dykstra_project(&stacked, params);
    let x = if converged {
        x
    } else {
        exact_project(&stacked, params)
    };
    let (a, b) = unstack(&x);
    RelaxedDecision::new(a, b, params)
}

/// Solves the relaxed two-step problem by projected gradient descent.
///
/// Initialization is the uniform pair `(M/n)·1`; each iteration takes a
/// projected step with an Armijo backtracking line search (sufficient
/// decrease 1e-4, shrink 0.5, first trial step 1.0, later trial steps from
/// the secant curvature estimate). Terminates when the unit-step projected
/// gradient norm drops below `grad_tol` or after `max_iters` iterations.
/// The accepted objective sequence is strictly nonincreasing.
#[allow(clippy::too_many_arguments)]
pub fn solve_relaxed(
    p_inv: &DMatrix<f64>,
    model: &dyn EvolutionModel,
    noise: &ObservationNoise,
    basis: &SpectralBasis,
    params: &BudgetParams,
    t: usize,
    options: &SolverOptions,
) -> Result<(RelaxedDecision, SolveDiagnostics)> {
    let n = basis.n();
    params.check_dimension(n)?;
    let problem = TwoStepProblem::new(p_inv, model, noise, basis, params.discount(), t)?;
    let uniform = params.avg_budget() as f64 / n as f64;
    let x0 = exact_project(&DVector::from_element(2 * n, uniform), params);
    descend(&problem, x0, params, options)
}

/// Solves the same relaxed problem, started from a caller-supplied
/// nonnegative importance profile instead of the uniform point. The profile
/// is replicated over both steps, scaled to the total budget, and projected
/// onto the feasible set before descent.
///
/// The relaxed objective can be nearly flat over large parts of the
/// feasible set (every fractional weight saturates once `σ_w⁻²·d` dominates
/// the prior information); descent then stops wherever it first reaches the
/// plateau, and which near-optimal point is returned materially changes how
/// well the subsequent integer rounding performs. Starting from an informed
/// profile keeps the returned point close to that guess at no cost in
/// objective value.
#[allow(clippy::too_many_arguments)]
pub fn solve_relaxed_weighted(
    p_inv: &DMatrix<f64>,
    model: &dyn EvolutionModel,
    noise: &ObservationNoise,
    basis: &SpectralBasis,
    params: &BudgetParams,
    t: usize,
    options: &SolverOptions,
    weights: &DVector<f64>,
) -> Result<(RelaxedDecision, SolveDiagnostics)> {
    let n = basis.n();
    params.check_dimension(n)?;
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: weights.len(),
            context: "initialization weights length",
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidParameter(
            "initialization weights must be finite and nonnegative".into(),
        ));
    }
    let problem = TwoStepProblem::new(p_inv, model, noise, basis, params.discount(), t)?;
    let sum: f64 = weights.sum();
    let x0 = if sum > 0.0 {
        let scale = params.total_budget() / (2.0 * sum);
        let mut stacked = DVector::zeros(2 * n);
        for j in 0..n {
            stacked[j] = weights[j] * scale;
            stacked[n + j] = weights[j] * scale;
        }
        exact_project(&stacked, params)
    } else {
        let uniform = params.avg_budget() as f64 / n as f64;
        exact_project(&DVector::from_element(2 * n, uniform), params)
    };
    descend(&problem, x0, params, options)
}

/// The shared projected-gradient loop; `x0` must already be feasible.
fn descend(
    problem: &TwoStepProblem,
    x0: DVector<f64>,
    params: &BudgetParams,
    options: &SolverOptions,
) -> Result<(RelaxedDecision, SolveDiagnostics)> {
    let mut x = x0;
    let eval = problem.evaluate(&x, true)?;
    let mut objective = eval.objective;
    let mut gradient = eval.gradient.expect("gradient requested");
    let mut trace = vec![objective];

    let project = |v: &DVector<f64>| exact_project(v, params);
    let mut converged = false;
    let mut grad_norm = (&x - project(&(&x - &gradient))).norm();
    let mut iterations = 0;
    let mut secant_step = options.init_step;

    for iter in 1..=options.max_iters {
        if grad_norm < options.grad_tol {
            converged = true;
            break;
        }
        iterations = iter;

        let mut step = secant_step.clamp(1e-8, 1e8);
        let mut accepted: Option<(DVector<f64>, f64)> = None;
        for _ in 0..80 {
            let candidate = project(&(&x - step * &gradient));
            let direction = &candidate - &x;
            if direction.amax() < 1e-15 {
                break;
            }
            let cand_obj = problem.evaluate(&candidate, false)?.objective;
            if cand_obj <= objective + options.armijo_c * gradient.dot(&direction) {
                accepted = Some((candidate, cand_obj));
                break;
            }
            step *= options.backtrack;
        }
        let Some((x_new, obj_new)) = accepted else {
            // No descent step available at machine precision: stop here.
            break;
        };

        let eval_new = problem.evaluate(&x_new, true)?;
        let grad_new = eval_new.gradient.expect("gradient requested");
        let s = &x_new - &x;
        let y = &grad_new - &gradient;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            secant_step = s.dot(&s) / sy;
        }

        x = x_new;
        objective = obj_new;
        gradient = grad_new;
        trace.push(objective);
        grad_norm = (&x - project(&(&x - &gradient))).norm();
    }
    if grad_norm < options.grad_tol {
        converged = true;
    }

    let (a, b) = unstack(&x);
    let decision = RelaxedDecision::new(a, b, params)?;
    Ok((
        decision,
        SolveDiagnostics {
            iterations,
            grad_norm,
            objective_trace: trace,
            converged,
        },
    ))
}

/// Which Loewner-order curvature a midpoint check should certify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureSense {
    Convex,
    Concave,
}

/// Result of a randomized curvature check: the worst (most negative)
/// slack eigenvalue across the tested combination weights.
#[derive(Debug, Clone, Copy)]
pub struct CurvatureCheck {
    pub holds: bool,
    pub worst_slack: f64,
}

/// Midpoint test of matrix convexity/concavity along the segment between
/// `x1` and `x2`: for each weight θ the combination inequality must hold in
/// the positive-semidefinite order, verified through the minimum eigenvalue
/// of the slack matrix.
pub fn check_matrix_convex_midpoint<F>(
    f: F,
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    thetas: &[f64],
    sense: CurvatureSense,
    tol: f64,
) -> CurvatureCheck
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let f1 = f(x1);
    let f2 = f(x2);
    let mut worst = f64::INFINITY;
    for &theta in thetas {
        let mid = x1 * theta + x2 * (1.0 - theta);
        let fm = f(&mid);
        let combo = &f1 * theta + &f2 * (1.0 - theta);
        let slack = match sense {
            CurvatureSense::Convex => combo - fm,
            CurvatureSense::Concave => fm - combo,
        };
        let eig = nalgebra::SymmetricEigen::new(symmetrize(&slack));
        worst = worst.min(eig.eigenvalues.min());
    }
    CurvatureCheck {
        holds: worst >= -tol,
        worst_slack: worst,
    }
}

/// Claimed direction for a matrix monotonicity check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonotoneSense {
    Nondecreasing,
    Nonincreasing,
}

/// Result of a monotonicity check between one ordered input pair.
#[derive(Debug, Clone, Copy)]
pub struct MonotoneCheck {
    pub holds: bool,
    pub slack: f64,
}

/// Verifies the claimed output ordering for inputs `x_hi ⪰ x_lo` (the
/// caller constructs the ordered pair, e.g. `x_hi = x_lo + PSD`): the
/// appropriate output difference must be positive semidefinite within `tol`.
pub fn check_matrix_monotone<F>(
    f: F,
    x_hi: &DMatrix<f64>,
    x_lo: &DMatrix<f64>,
    sense: MonotoneSense,
    tol: f64,
) -> MonotoneCheck
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let diff = match sense {
        MonotoneSense::Nondecreasing => f(x_hi) - f(x_lo),
        MonotoneSense::Nonincreasing => f(x_lo) - f(x_hi),
    };
    let eig = nalgebra::SymmetricEigen::new(symmetrize(&diff));
    let slack = eig.eigenvalues.min();
    MonotoneCheck {
        holds: slack >= -tol,
        slack,
    }
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

    struct Instance {
        p_inv: DMatrix<f64>,
        model: StaticEvolution,
        noise: ObservationNoise,
        basis: SpectralBasis,
        params: BudgetParams,
    }

    fn instance(n: usize, seed: u64) -> Instance {
        let mut r = rng(seed);
        let basis = basis_of(n, seed.wrapping_mul(31).wrapping_add(7));
        let h = DMatrix::from_fn(n, n, |_, _| r.sample::<f64, _>(StandardNormal) * 0.4);
        Instance {
            p_inv: random_spd(n, &mut r),
            model: StaticEvolution::new(h, 0.05).unwrap(),
            noise: ObservationNoise::new(0.2).unwrap(),
            basis,
            params: BudgetParams::new(2, 4, 0.8).unwrap(),
        }
    }

    /// Straight spectral-domain recomputation of the objective, structured
    /// independently of the vertex-domain implementation path.
    fn objective_oracle(inst: &Instance, d_now: &DVector<f64>, d_next: &DVector<f64>, t: usize) -> f64 {
        let n = inst.basis.n();
        let v = inst.basis.eigenvectors();
        let r = 1.0 / inst.noise.var();
        let gram = |d: &DVector<f64>| {
            let mut m = DMatrix::zeros(n, n);
            for i in 0..n {
                let row = v.row(i).transpose();
                m += d[i] * &row * row.transpose();
            }
            m
        };
        let first = (&inst.p_inv + gram(d_now) * r).try_inverse().unwrap();
        let term1 = first.trace();
        let h = inst.model.spectral_operator_at(t + 1);
        let next_prior =
            &h * &first * h.transpose() + DMatrix::identity(n, n) * inst.model.process_noise_var();
        let next_info = next_prior.try_inverse().unwrap();
        let second = (next_info + gram(d_next) * r).try_inverse().unwrap();
        term1 + inst.params.discount() * second.trace()
    }

    #[test]
    fn objective_matches_spectral_oracle() {
        let n = 7;
        let inst = instance(n, 42);
        let mut r = rng(1);
        for t in 0..3 {
            let d1 = DVector::from_fn(n, |_, _| r.random::<f64>());
            let d2 = DVector::from_fn(n, |_, _| r.random::<f64>());
            let fast = two_step_objective(
                &inst.p_inv, &d1, &d2, &inst.model, &inst.noise, &inst.basis, &inst.params, t,
            )
            .unwrap();
            let slow = objective_oracle(&inst, &d1, &d2, t);
            assert!(
                (fast - slow).abs() / slow.abs() < 1e-10,
                "t={t}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn objective_zero_weights_closed_form() {
        // With identity evolution and no sampling the objective is
        // tr(P⁻) + γ tr(P⁻ + σ_v² I).
        let n = 5;
        let basis = basis_of(n, 3);
        let mut r = rng(4);
        let p_inv = random_spd(n, &mut r);
        let q = 0.07;
        let model = StaticEvolution::identity(n, q).unwrap();
        let noise = ObservationNoise::new(0.5).unwrap();
        let params = BudgetParams::new(1, 2, 0.8).unwrap();
        let zero = DVector::zeros(n);
        let got = two_step_objective(&p_inv, &zero, &zero, &model, &noise, &basis, &params, 0)
            .unwrap();
        let prior = p_inv.clone().try_inverse().unwrap();
        let expected =
            prior.trace() + 0.8 * (prior + DMatrix::identity(n, n) * q).trace();
        assert!((got - expected).abs() / expected < 1e-10);
    }

    #[test]
    fn objective_full_sampling_tiny_noise_vanishes() {
        let n = 5;
        let inst = instance(n, 9);
        let noise = ObservationNoise::new(1e-12).unwrap();
        let ones = DVector::from_element(n, 1.0);
        let got = two_step_objective(
            &inst.p_inv, &ones, &ones, &inst.model, &noise, &inst.basis, &inst.params, 0,
        )
        .unwrap();
        assert!(got > 0.0 && got < 1e-10, "objective {got}");
    }

    #[test]
    fn gradient_is_nonpositive_and_vanishes_without_observability() {
        let n = 6;
        let inst = instance(n, 11);
        let mut r = rng(12);
        let d1 = DVector::from_fn(n, |_, _| r.random::<f64>());
        let d2 = DVector::from_fn(n, |_, _| r.random::<f64>());
        let (g1, g2) = two_step_gradient(
            &inst.p_inv, &d1, &d2, &inst.model, &inst.noise, &inst.basis, &inst.params, 0,
        )
        .unwrap();
        for i in 0..n {
            assert!(g1[i] <= 0.0 && g2[i] <= 0.0);
        }

        // Infinite observation variance: sampling carries no information,
        // so the gradient is identically zero.
        let blind = ObservationNoise::new(f64::INFINITY).unwrap();
        let (z1, z2) = two_step_gradient(
            &inst.p_inv, &d1, &d2, &inst.model, &blind, &inst.basis, &inst.params, 0,
        )
        .unwrap();
        assert_eq!(z1, DVector::zeros(n));
        assert_eq!(z2, DVector::zeros(n));
    }

    #[test]
    fn gradient_matches_central_differences_spot() {
        let n = 5;
        let inst = instance(n, 13);
        let mut r = rng(14);
        let d1 = DVector::from_fn(n, |_, _| 0.2 + 0.6 * r.random::<f64>());
        let d2 = DVector::from_fn(n, |_, _| 0.2 + 0.6 * r.random::<f64>());
        let (g1, g2) = two_step_gradient(
            &inst.p_inv, &d1, &d2, &inst.model, &inst.noise, &inst.basis, &inst.params, 0,
        )
        .unwrap();
        let h = 1e-5;
        let eval = |a: &DVector<f64>, b: &DVector<f64>| {
            two_step_objective(
                &inst.p_inv, a, b, &inst.model, &inst.noise, &inst.basis, &inst.params, 0,
            )
            .unwrap()
        };
        for i in 0..n {
            let mut up = d1.clone();
            let mut dn = d1.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (eval(&up, &d2) - eval(&dn, &d2)) / (2.0 * h);
            assert!(
                (fd - g1[i]).abs() / fd.abs().max(1e-9) < 1e-5,
                "now[{i}]: {fd} vs {}",
                g1[i]
            );
            let mut up2 = d2.clone();
            let mut dn2 = d2.clone();
            up2[i] += h;
            dn2[i] -= h;
            let fd2 = (eval(&d1, &up2) - eval(&d1, &dn2)) / (2.0 * h);
            assert!(
                (fd2 - g2[i]).abs() / fd2.abs().max(1e-9) < 1e-5,
                "next[{i}]: {fd2} vs {}",
                g2[i]
            );
        }
    }

    #[test]
    fn projection_fixes_nothing_when_feasible() {
        let params = BudgetParams::new(2, 3, 0.8).unwrap();
        let d1 = DVector::from_vec(vec![0.9, 0.6, 0.3, 0.2]);
        let d2 = DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        let proj = project_feasible(&d1, &d2, &params).unwrap();
        assert!((proj.d_now() - &d1).amax() < 1e-9);
        assert!((proj.d_next() - &d2).amax() < 1e-9);
    }

    #[test]
    fn projection_of_zero_is_uniform() {
        let n = 6;
        let params = BudgetParams::new(3, 6, 0.5).unwrap();
        let zero = DVector::zeros(n);
        let proj = project_feasible(&zero, &zero, &params).unwrap();
        for i in 0..n {
            assert!((proj.d_now()[i] - 0.5).abs() < 1e-9);
            assert!((proj.d_next()[i] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let n = 5;
        let params = BudgetParams::new(2, 3, 0.9).unwrap();
        let mut r = rng(20);
        for _ in 0..20 {
            let d1 = DVector::from_fn(n, |_, _| r.random::<f64>() * 2.0 - 0.5);
            let d2 = DVector::from_fn(n, |_, _| r.random::<f64>() * 2.0 - 0.5);
            let once = project_feasible(&d1, &d2, &params).unwrap();
            let twice = project_feasible(once.d_now(), once.d_next(), &params).unwrap();
            assert!((once.d_now() - twice.d_now()).amax() < 1e-9);
            assert!((once.d_next() - twice.d_next()).amax() < 1e-9);
            let total = once.d_now().sum() + once.d_next().sum();
            assert!((total - 4.0).abs() < 1e-7);
        }
    }

    #[test]
    fn projection_alternating_and_closed_form_agree() {
        let n = 5;
        let params = BudgetParams::new(2, 3, 0.8).unwrap();
        let mut r = rng(26);
        for _ in 0..25 {
            let raw = DVector::from_fn(2 * n, |_, _| r.random::<f64>() * 3.0 - 1.0);
            let (dykstra, converged) = dykstra_project(&raw, &params);
            assert!(converged);
            let direct = exact_project(&raw, &params);
            assert!(
                (&dykstra - &direct).amax() < 1e-8,
                "gap {}",
                (&dykstra - &direct).amax()
            );
        }
    }

    #[test]
    fn projection_handles_distant_points() {
        // Far inputs exceed the alternating sweep cap; the public operation
        // must still return the exact projection.
        let n = 6;
        let params = BudgetParams::new(3, 5, 0.8).unwrap();
        let mut r = rng(27);
        for _ in 0..10 {
            let raw_a = DVector::from_fn(n, |_, _| r.random::<f64>() * 2e4 - 1e4);
            let raw_b = DVector::from_fn(n, |_, _| r.random::<f64>() * 2e4 - 1e4);
            let proj = project_feasible(&raw_a, &raw_b, &params).unwrap();
            let direct = exact_project(&stack(&raw_a, &raw_b), &params);
            let (da, db) = unstack(&direct);
            assert!((proj.d_now() - da).amax() < 1e-9);
            assert!((proj.d_next() - db).amax() < 1e-9);
            let total = proj.d_now().sum() + proj.d_next().sum();
            assert!((total - 6.0).abs() < 1e-7);
        }
    }

    #[test]
    fn infeasible_budgets_rejected() {
        assert!(BudgetParams::new(5, 4, 0.8).is_err());
        assert!(BudgetParams::with_caps(5, 10, 0, 0.8).is_ok());
        assert!(BudgetParams::with_caps(6, 10, 1, 0.8).is_err());
        assert!(BudgetParams::new(2, 4, 1.0).is_err());
        assert!(BudgetParams::new(2, 4, 0.0).is_err());
        // Total budget above 2n is caught at projection time.
        let params = BudgetParams::new(4, 6, 0.8).unwrap();
        let z = DVector::zeros(3);
        assert!(matches!(
            project_feasible(&z, &z, &params),
            Err(Error::InfeasibleBudget(_))
        ));
    }

    #[test]
    fn solver_degenerate_budgets() {
        let inst = instance(1, 30);
        // n = 1 with M = M_t = 1 forces both weights to one.
        let params = BudgetParams::new(1, 1, 0.8).unwrap();
        let (dec, diag) = solve_relaxed(
            &inst.p_inv.view((0, 0), (1, 1)).into_owned(),
            &StaticEvolution::identity(1, 0.05).unwrap(),
            &inst.noise,
            &basis_of(1, 2),
            &params,
            0,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!((dec.d_now()[0] - 1.0).abs() < 1e-9);
        assert!((dec.d_next()[0] - 1.0).abs() < 1e-9);
        assert!(diag.converged);
    }

    #[test]
    fn solver_zero_budget_returns_zero() {
        let n = 4;
        let inst = instance(n, 31);
        // Zero average budget admits only the zero decision. The discount
        // and caps stay in their usual ranges.
        let params = BudgetParams::new(0, 2, 0.8).unwrap();
        let (dec, diag) = solve_relaxed(
            &inst.p_inv,
            &inst.model,
            &inst.noise,
            &inst.basis,
            &params,
            0,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(dec.d_now().amax() < 1e-12);
        assert!(dec.d_next().amax() < 1e-12);
        assert!(diag.converged);
    }

    #[test]
    fn solver_descends_and_respects_feasibility() {
        let n = 8;
        let inst = instance(n, 33);
        let (dec, diag) = solve_relaxed(
            &inst.p_inv,
            &inst.model,
            &inst.noise,
            &inst.basis,
            &inst.params,
            0,
            &SolverOptions::default(),
        )
        .unwrap();
        for w in diag.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective increased: {w:?}");
        }
        let total = dec.d_now().sum() + dec.d_next().sum();
        assert!((total - inst.params.total_budget()).abs() < 1e-7);
        assert!(dec.d_now().sum() <= inst.params.step_cap_now() as f64 + 1e-7);
        assert!(diag.converged, "grad norm {}", diag.grad_norm);
    }

    #[test]
    fn curvature_checker_classifies_reference_maps() {
        let mut r = rng(40);
        let thetas = [0.25, 0.5, 0.75];
        for _ in 0..20 {
            let x1 = random_spd(5, &mut r);
            let x2 = random_spd(5, &mut r);
            // Linear maps are both convex and concave.
            let linear = |x: &DMatrix<f64>| x * 2.0;
            assert!(check_matrix_convex_midpoint(linear, &x1, &x2, &thetas, CurvatureSense::Convex, 1e-9).holds);
            assert!(check_matrix_convex_midpoint(linear, &x1, &x2, &thetas, CurvatureSense::Concave, 1e-9).holds);
            // The matrix inverse is convex on the SPD cone.
            let inv = |x: &DMatrix<f64>| x.clone().try_inverse().unwrap();
            assert!(check_matrix_convex_midpoint(inv, &x1, &x2, &thetas, CurvatureSense::Convex, 1e-9).holds);
            // ... and strictly so away from commuting pairs, so the concave
            // claim must fail for generic inputs.
            let concave_claim =
                check_matrix_convex_midpoint(inv, &x1, &x2, &thetas, CurvatureSense::Concave, 1e-9);
            assert!(!concave_claim.holds);
        }
    }

    #[test]
    fn monotone_checker_classifies_reference_maps() {
        let mut r = rng(41);
        for _ in 0..20 {
            let x_lo = random_spd(5, &mut r);
            let bump = random_spd(5, &mut r);
            let x_hi = &x_lo + bump;
            let ident = |x: &DMatrix<f64>| x.clone();
            assert!(check_matrix_monotone(ident, &x_hi, &x_lo, MonotoneSense::Nondecreasing, 1e-9).holds);
            let trace_inv = |x: &DMatrix<f64>| {
                DMatrix::from_element(1, 1, x.clone().try_inverse().unwrap().trace())
            };
            assert!(check_matrix_monotone(trace_inv, &x_hi, &x_lo, MonotoneSense::Nonincreasing, 1e-9).holds);
            assert!(!check_matrix_monotone(trace_inv, &x_hi, &x_lo, MonotoneSense::Nondecreasing, 1e-9).holds);
        }
    }
}
