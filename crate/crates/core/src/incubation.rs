//! Conditional incubation-period model: a Weibull law whose scale is a
//! quadratic in age, `λ(x) = γ₀ + γ₁(x−o) + γ₂(x−o)²`, fitted by maximum
//! likelihood on ceiled (integer-day) or exact incubation times.
//!
//! The optimizer works in `θ = (ln α, β)` where `β` are the coefficients on a
//! standardized age basis; estimates and standard errors are mapped back to
//! `(α, γ)`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::AgeSupport;
use crate::distributions::{ContinuousLaw, WeibullParams};
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

pub const PARAMETER_NAMES: [&str; 4] = ["shape", "gamma_intercept", "gamma_linear", "gamma_quadratic"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalIncubationModel {
    pub shape: f64,
    /// Scale coefficients on `(1, x − age_origin, (x − age_origin)²)`.
    pub gamma: [f64; 3],
    #[serde(default)]
    pub age_origin: f64,
    pub age_support: AgeSupport,
}

impl ConditionalIncubationModel {
    pub fn new(shape: f64, gamma: [f64; 3], age_support: AgeSupport) -> Result<Self> {
        Self::with_origin(shape, gamma, 0.0, age_support)
    }

    pub fn with_origin(shape: f64, gamma: [f64; 3], age_origin: f64, age_support: AgeSupport) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::InvalidParameter(format!("shape must be positive, got {shape}")));
        }
        let model = ConditionalIncubationModel { shape, gamma, age_origin, age_support };
        for age in age_support.ages() {
            model.checked_scale(age as f64)?;
        }
        Ok(model)
    }

    /// `γᵀv(age)` without validation.
    pub fn scale(&self, age: f64) -> f64 {
        let t = age - self.age_origin;
        self.gamma[0] + self.gamma[1] * t + self.gamma[2] * t * t
    }

    pub fn checked_scale(&self, age: f64) -> Result<f64> {
        let scale = self.scale(age);
        if scale > 0.0 && scale.is_finite() {
            Ok(scale)
        } else {
            Err(Error::NonPositiveScale { age, scale })
        }
    }

    pub fn weibull_at(&self, age: f64) -> Result<WeibullParams> {
        WeibullParams::new(self.shape, self.checked_scale(age)?)
    }

    fn check_age(&self, age: f64) -> Result<()> {
        if age < self.age_support.min as f64 || age > self.age_support.max as f64 {
            return Err(Error::Domain { what: "age", value: age });
        }
        Ok(())
    }

    pub fn conditional_pdf(&self, age: f64, y: f64) -> Result<f64> {
        self.check_age(age)?;
        crate::distributions::weibull_pdf(y, &self.weibull_at(age)?)
    }

    pub fn conditional_cdf(&self, age: f64, y: f64) -> Result<f64> {
        self.check_age(age)?;
        crate::distributions::weibull_cdf(y, &self.weibull_at(age)?)
    }

    pub fn conditional_quantile(&self, age: f64, p: f64) -> Result<f64> {
        self.check_age(age)?;
        crate::distributions::weibull_quantile(p, &self.weibull_at(age)?)
    }

    /// `P(Z = z | age)` for the ceiled incubation `Z = ⌈Y⌉`.
    pub fn interval_probability(&self, age: f64, z: u32) -> Result<f64> {
        let w = self.weibull_at(age)?;
        Ok(w.sf(z as f64 - 1.0) - w.sf(z as f64))
    }

    pub fn sample<R: Rng + ?Sized>(&self, age: f64, rng: &mut R) -> Result<f64> {
        Ok(self.weibull_at(age)?.sample(rng))
    }

    /// Same predictions expressed around a different age origin.
    pub fn recentered(&self, new_origin: f64) -> ConditionalIncubationModel {
        let shift = new_origin - self.age_origin;
        let [g0, g1, g2] = self.gamma;
        ConditionalIncubationModel {
            gamma: [g0 + g1 * shift + g2 * shift * shift, g1 + 2.0 * g2 * shift, g2],
            age_origin: new_origin,
            ..*self
        }
    }

    fn params(&self) -> [f64; 4] {
        [self.shape, self.gamma[0], self.gamma[1], self.gamma[2]]
    }
}

/// One infected individual's age and incubation time (`Z` for the ceiled
/// likelihood, exact `Y` for the continuous one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub age: f64,
    pub incubation: f64,
}

impl Observation {
    pub fn new(age: f64, incubation: f64) -> Self {
        Observation { age, incubation }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    /// Interval likelihood for `Z = ⌈Y⌉`.
    #[default]
    Ceiled,
    /// Exact-time density likelihood.
    Continuous,
}

/// `(log term, ∂/∂α, ∂/∂λ)` for one record.
fn record_term(likelihood: Likelihood, shape: f64, scale: f64, value: f64) -> (f64, f64, f64) {
    match likelihood {
        Likelihood::Ceiled => {
            let power = |t: f64| -> (f64, f64, f64) {
                if t <= 0.0 {
                    (0.0, 0.0, 0.0)
                } else {
                    let r = t / scale;
                    let u = r.powf(shape);
                    (u, u * r.ln(), -shape * u / scale)
                }
            };
            let (u1, u1_a, u1_l) = power(value - 1.0);
            let (u2, u2_a, u2_l) = power(value);
            let gap = u2 - u1;
            let em1 = gap.exp_m1();
            let log_p = -u1 + (-(-gap).exp_m1()).ln();
            (log_p, -u1_a + (u2_a - u1_a) / em1, -u1_l + (u2_l - u1_l) / em1)
        }
        Likelihood::Continuous => {
            let log_r = (value / scale).ln();
            let u = (shape * log_r).exp();
            let log_f = shape.ln() - scale.ln() + (shape - 1.0) * log_r - u;
            (log_f, 1.0 / shape + log_r - u * log_r, shape / scale * (u - 1.0))
        }
    }
}

fn validate_observations(likelihood: Likelihood, obs: &[Observation]) -> Result<()> {
    if obs.is_empty() {
        return Err(Error::Empty("incubation observations"));
    }
    for o in obs {
        let ok = match likelihood {
            Likelihood::Ceiled => o.incubation >= 1.0 && o.incubation.fract() == 0.0,
            Likelihood::Continuous => o.incubation > 0.0 && o.incubation.is_finite(),
        };
        if !ok {
            return Err(Error::Domain { what: "incubation time", value: o.incubation });
        }
    }
    Ok(())
}

/// Mean log-likelihood and its gradient on the basis `basis(age)`.
fn loglik_with_basis(
    likelihood: Likelihood,
    shape: f64,
    coef: &[f64; 3],
    basis: impl Fn(f64) -> [f64; 3],
    obs: &[Observation],
) -> Option<(f64, [f64; 4])> {
    let mut value = CompensatedSum::default();
    let mut grad = [CompensatedSum::default(); 4];
    for o in obs {
        let v = basis(o.age);
        let scale = coef[0] * v[0] + coef[1] * v[1] + coef[2] * v[2];
        if !(scale > 0.0) {
            return None;
        }
        let (lp, d_shape, d_scale) = record_term(likelihood, shape, scale, o.incubation);
        value.add(lp);
        grad[0].add(d_shape);
        for k in 0..3 {
            grad[k + 1].add(d_scale * v[k]);
        }
    }
    let n = obs.len() as f64;
    Some((value.value() / n, grad.map(|g| g.value() / n)))
}

fn natural_basis(origin: f64) -> impl Fn(f64) -> [f64; 3] {
    move |age| {
        let t = age - origin;
        [1.0, t, t * t]
    }
}

pub fn loglik(model: &ConditionalIncubationModel, likelihood: Likelihood, obs: &[Observation]) -> Result<f64> {
    loglik_and_gradient(model, likelihood, obs).map(|(v, _)| v)
}

/// Mean log-likelihood and its analytic gradient in `(α, γ₀, γ₁, γ₂)`.
pub fn loglik_and_gradient(
    model: &ConditionalIncubationModel,
    likelihood: Likelihood,
    obs: &[Observation],
) -> Result<(f64, [f64; 4])> {
    validate_observations(likelihood, obs)?;
    for o in obs {
        model.checked_scale(o.age)?;
    }
    Ok(loglik_with_basis(likelihood, model.shape, &model.gamma, natural_basis(model.age_origin), obs)
        .expect("scales checked positive"))
}

/// `(1/n) Σ log{exp[−((Z−1)/λ)^α] − exp[−(Z/λ)^α]}`.
pub fn ceiled_loglik(model: &ConditionalIncubationModel, obs: &[Observation]) -> Result<f64> {
    loglik(model, Likelihood::Ceiled, obs)
}

pub fn ceiled_loglik_gradient(model: &ConditionalIncubationModel, obs: &[Observation]) -> Result<[f64; 4]> {
    loglik_and_gradient(model, Likelihood::Ceiled, obs).map(|(_, g)| g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub likelihood: Likelihood,
    pub age_support: AgeSupport,
    pub age_origin: f64,
    /// Starting `(α, γ)`; defaults to `α = 1.5, γ = (mean incubation, 0, 0)`.
    pub init: Option<(f64, [f64; 3])>,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            likelihood: Likelihood::Ceiled,
            age_support: AgeSupport::default(),
            age_origin: 0.0,
            init: None,
            max_iter: 500,
            rel_tol: 1e-10,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub estimate: f64,
    pub standard_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: ConditionalIncubationModel,
    pub parameters: Vec<ParameterEstimate>,
    /// Standard errors of `(α, γ₀, γ₁, γ₂)` from the inverse observed
    /// information; absent when the information is not positive definite.
    pub standard_errors: Option<[f64; 4]>,
    /// Mean log-likelihood at the estimate.
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub n_observations: usize,
    pub likelihood: Likelihood,
}

/// Maps between natural coefficients and the standardized basis
/// `w(x) = (1, s, s²)`, `s = (x − centre)/half_width`.
struct BasisMap {
    /// `v_o(x) = A w(x)`.
    a: Matrix3<f64>,
    centre: f64,
    half_width: f64,
}

impl BasisMap {
    fn new(support: AgeSupport, origin: f64) -> Self {
        let centre = 0.5 * (support.min as f64 + support.max as f64);
        let half_width = (0.5 * (support.max as f64 - support.min as f64)).max(1.0);
        let c = centre - origin;
        let d = half_width;
        let a = Matrix3::new(1.0, 0.0, 0.0, c, d, 0.0, c * c, 2.0 * c * d, d * d);
        BasisMap { a, centre, half_width }
    }

    fn basis(&self) -> impl Fn(f64) -> [f64; 3] + '_ {
        move |age| {
            let s = (age - self.centre) / self.half_width;
            [1.0, s, s * s]
        }
    }

    fn to_standard(&self, gamma: &[f64; 3]) -> [f64; 3] {
        let b = self.a.transpose() * Vector3::from_column_slice(gamma);
        [b[0], b[1], b[2]]
    }

    /// `γ = A⁻ᵀ β`.
    fn inverse_transpose(&self) -> Matrix3<f64> {
        self.a.transpose().try_inverse().expect("basis map is triangular with nonzero diagonal")
    }

    fn to_natural(&self, beta: &[f64; 3]) -> [f64; 3] {
        let g = self.inverse_transpose() * Vector3::from_column_slice(beta);
        [g[0], g[1], g[2]]
    }
}

struct Objective<'a> {
    obs: &'a [Observation],
    likelihood: Likelihood,
    map: BasisMap,
    origin: f64,
    support: AgeSupport,
    /// Ages at which the scale must stay positive: the support and every record.
    check_ages: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn new(obs: &'a [Observation], options: &FitOptions) -> Self {
        let mut check_ages: Vec<f64> = options.age_support.ages().map(|a| a as f64).collect();
        check_ages.extend(obs.iter().map(|o| o.age));
        check_ages.sort_by(f64::total_cmp);
        check_ages.dedup();
        Objective {
            obs,
            likelihood: options.likelihood,
            map: BasisMap::new(options.age_support, options.age_origin),
            origin: options.age_origin,
            support: options.age_support,
            check_ages,
        }
    }

    fn feasible(&self, theta: &Vector4<f64>) -> bool {
        let basis = self.map.basis();
        theta.iter().all(|v| v.is_finite())
            && self.check_ages.iter().all(|&age| {
                let w = basis(age);
                theta[1] * w[0] + theta[2] * w[1] + theta[3] * w[2] > 0.0
            })
    }

    /// Negative mean log-likelihood and its gradient in θ.
    fn eval(&self, theta: &Vector4<f64>) -> Option<(f64, Vector4<f64>)> {
        if !self.feasible(theta) {
            return None;
        }
        let shape = theta[0].exp();
        let beta = [theta[1], theta[2], theta[3]];
        let (v, g) = loglik_with_basis(self.likelihood, shape, &beta, self.map.basis(), self.obs)?;
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return None;
        }
        Some((-v, Vector4::new(-g[0] * shape, -g[1], -g[2], -g[3])))
    }

    /// Central differences of the analytic gradient.
    fn hessian(&self, theta: &Vector4<f64>) -> Option<Matrix4<f64>> {
        let mut h = Matrix4::zeros();
        for k in 0..4 {
            let step = 1e-5 * theta[k].abs().max(1.0);
            let mut plus = *theta;
            let mut minus = *theta;
            plus[k] += step;
            minus[k] -= step;
            let (_, gp) = self.eval(&plus)?;
            let (_, gm) = self.eval(&minus)?;
            h.set_column(k, &((gp - gm) / (2.0 * step)));
        }
        Some(0.5 * (h + h.transpose()))
    }

    fn model(&self, theta: &Vector4<f64>) -> ConditionalIncubationModel {
        ConditionalIncubationModel {
            shape: theta[0].exp(),
            gamma: self.map.to_natural(&[theta[1], theta[2], theta[3]]),
            age_origin: self.origin,
            age_support: self.support,
        }
    }

    fn natural_gradient_norm(&self, theta: &Vector4<f64>) -> f64 {
        let m = self.model(theta);
        match loglik_with_basis(self.likelihood, m.shape, &m.gamma, natural_basis(m.age_origin), self.obs) {
            Some((_, g)) => g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            None => f64::NAN,
        }
    }

    /// Inverse observed information in θ mapped to `(α, γ)`.
    fn standard_errors(&self, theta: &Vector4<f64>) -> Option<[f64; 4]> {
        let info = self.hessian(theta)? * self.obs.len() as f64;
        let cov_theta = info.cholesky()?.inverse();
        let mut jac = Matrix4::zeros();
        jac[(0, 0)] = theta[0].exp();
        jac.fixed_view_mut::<3, 3>(1, 1).copy_from(&self.map.inverse_transpose());
        let cov = jac * cov_theta * jac.transpose();
        let se = [0, 1, 2, 3].map(|k| cov[(k, k)].max(0.0).sqrt());
        se.iter().all(|v| v.is_finite()).then_some(se)
    }
}

fn check_design(obs: &[Observation]) -> Result<()> {
    let mut ages: Vec<f64> = obs.iter().map(|o| o.age).collect();
    ages.sort_by(f64::total_cmp);
    ages.dedup();
    if ages.len() < 3 {
        return Err(Error::SingularInformation(format!(
            "{} distinct age(s) cannot identify a quadratic scale in age",
            ages.len()
        )));
    }
    if obs.len() < 20 || ages.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "need at least 20 records over 5 distinct ages, got {} records over {}",
            obs.len(),
            ages.len()
        )));
    }
    Ok(())
}

/// Maximum-likelihood fit of the conditional Weibull model.
///
/// BFGS with a backtracking line search that keeps the scale positive at
/// every support age and record age, followed by a few Newton steps on the
/// finite-difference Hessian. Running out of iterations is not an error: the
/// last iterate is returned with `converged = false`.
pub fn fit_incubation_model(obs: &[Observation], options: &FitOptions) -> Result<FitReport> {
    validate_observations(options.likelihood, obs)?;
    check_design(obs)?;
    for o in obs {
        if !options.age_support.contains(o.age.round() as u32) || o.age.fract() != 0.0 {
            return Err(Error::Domain { what: "record age", value: o.age });
        }
    }
    let objective = Objective::new(obs, options);
    let (shape0, gamma0) = options.init.unwrap_or_else(|| {
        let mean = obs.iter().map(|o| o.incubation).sum::<f64>() / obs.len() as f64;
        (1.5, [mean, 0.0, 0.0])
    });
    if !(shape0 > 0.0) {
        return Err(Error::InvalidParameter(format!("initial shape must be positive, got {shape0}")));
    }
    let b0 = objective.map.to_standard(&gamma0);
    let mut theta = Vector4::new(shape0.ln(), b0[0], b0[1], b0[2]);
    let (mut f, mut g) = objective
        .eval(&theta)
        .ok_or_else(|| Error::InvalidParameter("initial values give a nonpositive scale".into()))?;

    let mut h_inv = Matrix4::<f64>::identity();
    let mut iterations = 0;
    let mut converged = false;
    let mut first_update = true;
    while iterations < options.max_iter {
        iterations += 1;
        let mut dir = -(h_inv * g);
        if g.dot(&dir) >= 0.0 {
            h_inv = Matrix4::identity();
            dir = -g;
        }
        let slope = g.dot(&dir);
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-20 {
            let cand = theta + dir * step;
            if let Some((fc, gc)) = objective.eval(&cand) {
                if fc <= f + 1e-4 * step * slope {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((next, f_next, g_next)) = accepted else {
            break;
        };
        let s = next - theta;
        let y = g_next - g;
        let sy = s.dot(&y);
        if sy > 1e-14 {
            if first_update {
                h_inv *= sy / y.dot(&y);
                first_update = false;
            }
            let rho = 1.0 / sy;
            let id = Matrix4::<f64>::identity();
            h_inv = (id - rho * s * y.transpose()) * h_inv * (id - rho * y * s.transpose()) + rho * s * s.transpose();
        }
        let rel_change = (f_next - f).abs() / f.abs().max(1e-300);
        theta = next;
        f = f_next;
        g = g_next;
        if rel_change < options.rel_tol || g.norm() < options.grad_tol {
            converged = true;
            break;
        }
    }

    for _ in 0..10 {
        let Some(hess) = objective.hessian(&theta) else { break };
        let Some(chol) = hess.cholesky() else { break };
        let cand = theta - chol.solve(&g);
        match objective.eval(&cand) {
            Some((fc, gc)) if fc <= f + 1e-12 * f.abs() && gc.norm() < g.norm() => {
                theta = cand;
                f = fc;
                g = gc;
            }
            _ => break,
        }
    }

    let gradient_norm = objective.natural_gradient_norm(&theta);
    converged = converged || gradient_norm < options.grad_tol;
    let model = objective.model(&theta);
    let standard_errors = objective.standard_errors(&theta);
    if standard_errors.is_none() {
        log::warn!("observed information is not positive definite; standard errors omitted");
    }
    if !converged {
        log::warn!("incubation fit stopped after {iterations} iterations without converging");
    }
    let parameters = PARAMETER_NAMES
        .iter()
        .zip(model.params())
        .enumerate()
        .map(|(k, (name, estimate))| ParameterEstimate {
            name: name.to_string(),
            estimate,
            standard_error: standard_errors.map(|se| se[k]),
        })
        .collect();
    Ok(FitReport {
        model,
        parameters,
        standard_errors,
        log_likelihood: -f,
        converged,
        iterations,
        gradient_norm,
        n_observations: obs.len(),
        likelihood: options.likelihood,
    })
}

/// Observed against fitted frequencies of each ceiled incubation value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalFitRow {
    pub incubation_days: u32,
    pub observed: f64,
    pub fitted: f64,
}

pub fn interval_fit_table(model: &ConditionalIncubationModel, obs: &[Observation]) -> Result<Vec<IntervalFitRow>> {
    validate_observations(Likelihood::Ceiled, obs)?;
    let z_max = obs.iter().map(|o| o.incubation as u32).max().unwrap_or(0);
    let n = obs.len() as f64;
    let mut observed = vec![0.0; z_max as usize + 1];
    let mut fitted = vec![CompensatedSum::default(); z_max as usize + 1];
    for o in obs {
        observed[o.incubation as usize] += 1.0 / n;
        let w = model.weibull_at(o.age)?;
        for z in 1..=z_max {
            fitted[z as usize].add((w.sf(z as f64 - 1.0) - w.sf(z as f64)) / n);
        }
    }
    Ok((1..=z_max)
        .map(|z| IntervalFitRow { incubation_days: z, observed: observed[z as usize], fitted: fitted[z as usize].value() })
        .collect())
}
