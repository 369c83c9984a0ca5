//! Closed-form densities, distribution functions, quantiles and samplers for
//! the incubation-period and feature laws: Weibull, lognormal, truncated
//! normal and a two-component Weibull mixture.
//!
//! All samplers use inversion of the distribution function on a single
//! uniform draw, so a seeded generator reproduces the same stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{normal_cdf, normal_pdf, normal_quantile, normal_sf};

/// Default cap on "infinite" integration limits, in days.
pub const DEFAULT_Y_MAX: f64 = 60.0;

/// Common interface over the continuous laws.
///
/// `pdf` and `cdf` are total: negative arguments give zero. The checked
/// free functions below reject them instead.
pub trait ContinuousLaw {
    fn pdf(&self, y: f64) -> f64;
    fn cdf(&self, y: f64) -> f64;

    /// `1 - cdf(y)`, overridden where a cancellation-free form exists.
    fn sf(&self, y: f64) -> f64 {
        1.0 - self.cdf(y)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64;
}

fn check_positive(what: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be positive and finite, got {value}")))
    }
}

fn check_nonnegative_arg(y: f64) -> Result<()> {
    if y >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain { what: "duration", value: y })
    }
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain { what: "probability", value: p })
    }
}

/// Uniform draw on the open interval (0, 1).
fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    pub shape: f64,
    pub scale: f64,
}

impl WeibullParams {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        check_positive("Weibull shape", shape)?;
        check_positive("Weibull scale", scale)?;
        Ok(WeibullParams { shape, scale })
    }

    pub fn quantile(&self, p: f64) -> f64 {
        self.scale * (-(-p).ln_1p()).powf(1.0 / self.shape)
    }

    /// Inverse of the survival function; keeps full precision in the tail.
    pub fn inverse_sf(&self, s: f64) -> f64 {
        self.scale * (-s.ln()).powf(1.0 / self.shape)
    }

    /// Location of the density maximum; zero when the density is monotone.
    pub fn mode(&self) -> f64 {
        if self.shape > 1.0 {
            self.scale * ((self.shape - 1.0) / self.shape).powf(1.0 / self.shape)
        } else {
            0.0
        }
    }
}

impl ContinuousLaw for WeibullParams {
    fn pdf(&self, y: f64) -> f64 {
        if y < 0.0 {
            return 0.0;
        }
        let (k, lambda) = (self.shape, self.scale);
        if y == 0.0 {
            return match k.partial_cmp(&1.0) {
                Some(std::cmp::Ordering::Greater) => 0.0,
                Some(std::cmp::Ordering::Equal) => 1.0 / lambda,
                _ => f64::INFINITY,
            };
        }
        let r = y / lambda;
        let rk = r.powf(k);
        k / lambda * rk / r * (-rk).exp()
    }

    fn cdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            0.0
        } else {
            -(-(y / self.scale).powf(self.shape)).exp_m1()
        }
    }

    fn sf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            1.0
        } else {
            (-(y / self.scale).powf(self.shape)).exp()
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u = open_uniform(rng);
        self.scale * (-u.ln()).powf(1.0 / self.shape)
    }
}

pub fn weibull_pdf(y: f64, params: &WeibullParams) -> Result<f64> {
    check_nonnegative_arg(y)?;
    Ok(params.pdf(y))
}

pub fn weibull_cdf(y: f64, params: &WeibullParams) -> Result<f64> {
    check_nonnegative_arg(y)?;
    Ok(params.cdf(y))
}

pub fn weibull_quantile(p: f64, params: &WeibullParams) -> Result<f64> {
    check_probability(p)?;
    Ok(params.quantile(p))
}

/// Lognormal law of `Y` with `ln Y ~ N(log_mean, log_sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalParams {
    pub log_mean: f64,
    pub log_sd: f64,
}

impl LognormalParams {
    pub fn new(log_mean: f64, log_sd: f64) -> Result<Self> {
        if !log_mean.is_finite() {
            return Err(Error::InvalidParameter(format!("lognormal log-mean must be finite, got {log_mean}")));
        }
        check_positive("lognormal log-sd", log_sd)?;
        Ok(LognormalParams { log_mean, log_sd })
    }

    pub fn quantile(&self, p: f64) -> f64 {
        (self.log_mean + self.log_sd * normal_quantile(p)).exp()
    }

    /// Inverse of the survival function; keeps full precision in the tail.
    pub fn inverse_sf(&self, s: f64) -> f64 {
        (self.log_mean - self.log_sd * normal_quantile(s)).exp()
    }
}

impl ContinuousLaw for LognormalParams {
    fn pdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let z = (y.ln() - self.log_mean) / self.log_sd;
        normal_pdf(z) / (y * self.log_sd)
    }

    fn cdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            0.0
        } else {
            normal_cdf((y.ln() - self.log_mean) / self.log_sd)
        }
    }

    fn sf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            1.0
        } else {
            normal_sf((y.ln() - self.log_mean) / self.log_sd)
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(open_uniform(rng))
    }
}

pub fn lognormal_pdf(y: f64, params: &LognormalParams) -> Result<f64> {
    check_nonnegative_arg(y)?;
    Ok(params.pdf(y))
}

pub fn lognormal_cdf(y: f64, params: &LognormalParams) -> Result<f64> {
    check_nonnegative_arg(y)?;
    Ok(params.cdf(y))
}

pub fn lognormal_quantile(p: f64, params: &LognormalParams) -> Result<f64> {
    check_probability(p)?;
    Ok(params.quantile(p))
}

/// Normal law with the given mean and variance restricted to `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncNormalParams {
    pub mean: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
}

impl TruncNormalParams {
    pub fn new(mean: f64, variance: f64, lower: f64, upper: f64) -> Result<Self> {
        check_positive("truncated-normal variance", variance)?;
        if !(lower < upper) || !mean.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "truncated normal needs finite mean and lower < upper, got mean {mean}, [{lower}, {upper}]"
            )));
        }
        let params = TruncNormalParams { mean, variance, lower, upper };
        if !(params.mass() > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "truncation interval [{lower}, {upper}] carries no normal mass"
            )));
        }
        Ok(params)
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    fn standardized(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd()
    }

    /// True when both bounds sit above the mean, where the upper-tail form
    /// keeps precision.
    fn use_upper_tail(&self) -> bool {
        self.standardized(self.lower) > 0.0
    }

    /// Untruncated normal probability of `[lower, upper]`.
    pub fn mass(&self) -> f64 {
        let (a, b) = (self.standardized(self.lower), self.standardized(self.upper));
        if a > 0.0 {
            normal_sf(a) - normal_sf(b)
        } else {
            normal_cdf(b) - normal_cdf(a)
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.lower || x > self.upper {
            return 0.0;
        }
        normal_pdf(self.standardized(x)) / (self.sd() * self.mass())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lower {
            return 0.0;
        }
        if x >= self.upper {
            return 1.0;
        }
        let (a, z) = (self.standardized(self.lower), self.standardized(x));
        let num = if self.use_upper_tail() {
            normal_sf(a) - normal_sf(z)
        } else {
            normal_cdf(z) - normal_cdf(a)
        };
        (num / self.mass()).clamp(0.0, 1.0)
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let (a, b) = (self.standardized(self.lower), self.standardized(self.upper));
        let z = if self.use_upper_tail() {
            let (sa, sb) = (normal_sf(a), normal_sf(b));
            -normal_quantile(sa - p * (sa - sb))
        } else {
            let (ca, cb) = (normal_cdf(a), normal_cdf(b));
            normal_quantile(ca + p * (cb - ca))
        };
        (self.mean + self.sd() * z).clamp(self.lower, self.upper)
    }

    /// Analytic mean of the truncated law.
    pub fn truncated_mean(&self) -> f64 {
        let (a, b) = (self.standardized(self.lower), self.standardized(self.upper));
        let pdf_a = if a.is_finite() { normal_pdf(a) } else { 0.0 };
        let pdf_b = if b.is_finite() { normal_pdf(b) } else { 0.0 };
        self.mean + self.sd() * (pdf_a - pdf_b) / self.mass()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(open_uniform(rng))
    }
}

pub fn truncnormal_sample<R: Rng + ?Sized>(params: &TruncNormalParams, rng: &mut R) -> f64 {
    params.sample(rng)
}

/// `weight · component_a + (1 − weight) · component_b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weight: f64,
    pub component_a: WeibullParams,
    pub component_b: WeibullParams,
}

impl MixtureParams {
    pub fn new(weight: f64, component_a: WeibullParams, component_b: WeibullParams) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::InvalidParameter(format!("mixture weight must lie in [0, 1], got {weight}")));
        }
        Ok(MixtureParams { weight, component_a, component_b })
    }
}

impl ContinuousLaw for MixtureParams {
    fn pdf(&self, y: f64) -> f64 {
        self.weight * self.component_a.pdf(y) + (1.0 - self.weight) * self.component_b.pdf(y)
    }

    fn cdf(&self, y: f64) -> f64 {
        self.weight * self.component_a.cdf(y) + (1.0 - self.weight) * self.component_b.cdf(y)
    }

    fn sf(&self, y: f64) -> f64 {
        self.weight * self.component_a.sf(y) + (1.0 - self.weight) * self.component_b.sf(y)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let pick: f64 = rng.random();
        if pick < self.weight {
            self.component_a.sample(rng)
        } else {
            self.component_b.sample(rng)
        }
    }
}

pub fn mixture_pdf(y: f64, params: &MixtureParams) -> Result<f64> {
    check_nonnegative_arg(y)?;
    Ok(params.pdf(y))
}

pub fn mixture_cdf(y: f64, params: &MixtureParams) -> Result<f64> {
    check_nonnegative_arg(y)?;
    Ok(params.cdf(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn w(shape: f64, scale: f64) -> WeibullParams {
        WeibullParams::new(shape, scale).unwrap()
    }

    /// Composite Simpson on a fine grid; independent of the library quadrature.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn weibull_pdf_examples() {
        assert_eq!(weibull_pdf(0.0, &w(1.5, 4.5)).unwrap(), 0.0);
        for lambda in [0.5, 2.0, 7.0] {
            let v = weibull_pdf(lambda, &w(1.0, lambda)).unwrap();
            assert!((v - (-1f64).exp() / lambda).abs() < 1e-15);
        }
        assert!(weibull_pdf(-0.1, &w(1.5, 4.5)).is_err());
    }

    #[test]
    fn weibull_mode_matches_grid_search() {
        let p = w(1.5, 4.5);
        let (mut best_y, mut best) = (0.0, f64::MIN);
        let mut y = 1e-4;
        while y <= 60.0 {
            let v = p.pdf(y);
            if v > best {
                best = v;
                best_y = y;
            }
            y += 1e-4;
        }
        assert!((best_y - 2.163).abs() < 1e-3);
        assert!((p.mode() - best_y).abs() < 2e-4);
    }

    #[test]
    fn weibull_cdf_and_quantile_examples() {
        let p = w(1.5, 4.5);
        assert_eq!(weibull_cdf(0.0, &p).unwrap(), 0.0);
        assert!((weibull_cdf(4.5, &p).unwrap() - (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert!((weibull_cdf(9.352, &p).unwrap() - 0.95).abs() < 1e-4);

        let q = weibull_quantile(0.95, &p).unwrap();
        // closed form λ(−ln 0.05)^{1/α}, frozen from a 50-digit evaluation
        assert!((q - 9.351_497_868_905_506).abs() < 1e-12);
        let by_bisection = crate::numeric::bisect_boundary(0.0, 60.0, |y| p.cdf(y) <= 0.95, 1e-13, 200);
        assert!((q - by_bisection).abs() < 1e-9);

        assert!((weibull_quantile(1.0 - (-1f64).exp(), &p).unwrap() - 4.5).abs() < 1e-12);
        assert!((weibull_quantile(0.5, &w(1.0, 1.0)).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(weibull_quantile(0.0, &p).is_err());
        assert!(weibull_quantile(1.0, &p).is_err());
    }

    #[test]
    fn lognormal_examples() {
        let p = LognormalParams::new(1.5, 0.6).unwrap();
        assert!((lognormal_cdf(1.5f64.exp(), &p).unwrap() - 0.5).abs() < 1e-15);
        assert!(lognormal_pdf(1e-12, &p).unwrap() < 1e-100);
        assert_eq!(lognormal_pdf(0.0, &p).unwrap(), 0.0);
        // e^{1.5 + 0.6 z_0.95} with z_0.95 from mpmath
        assert!((lognormal_quantile(0.95, &p).unwrap() - 12.024_090_465_552_127).abs() < 1e-10);
    }

    #[test]
    fn densities_integrate_to_one() {
        let laws: Vec<Box<dyn Fn(f64) -> f64>> = vec![
            Box::new(|y| w(1.5, 4.5).pdf(y)),
            Box::new(|y| w(4.0, 10.0).pdf(y)),
            Box::new(|y| LognormalParams::new(1.5, 0.6).unwrap().pdf(y)),
            Box::new(|y| {
                MixtureParams::new(0.5, w(1.5, 6.0), w(4.0, 10.0)).unwrap().pdf(y)
            }),
        ];
        for f in &laws {
            let total = crate::numeric::adaptive_simpson(f, 0.0, 200.0, 1e-10, 50);
            assert!((total - 1.0).abs() < 1e-6, "mass {total}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        let p = w(1.57, 7.09);
        let ln = LognormalParams::new(1.5, 0.8).unwrap();
        // the cdf form is exact while 1 − cdf keeps enough digits; the
        // survival form covers the whole of (0, 60]
        let mut y = 0.05;
        while y <= 60.0 {
            let c = p.cdf(y);
            if c < 1.0 - 1e-6 {
                assert!((p.quantile(c) - y).abs() < 1e-8 * y.max(1.0), "weibull y={y}");
            }
            assert!((p.inverse_sf(p.sf(y)) - y).abs() < 1e-8 * y.max(1.0), "weibull sf y={y}");
            let c = ln.cdf(y);
            if c < 1.0 - 1e-6 {
                assert!((ln.quantile(c) - y).abs() < 1e-8 * y.max(1.0), "lognormal y={y}");
            }
            assert!((ln.inverse_sf(ln.sf(y)) - y).abs() < 1e-8 * y.max(1.0), "lognormal sf y={y}");
            y += 0.05;
        }
    }

    #[test]
    fn truncnormal_support_and_untruncated_limit() {
        let tn = TruncNormalParams::new(55.0, 625.0, 10.0, 80.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1_000_000 {
            let x = truncnormal_sample(&tn, &mut rng);
            assert!((10.0..=80.0).contains(&x));
        }

        let wide = TruncNormalParams::new(0.0, 1.0, -1e6, 1e6).unwrap();
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| wide.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn truncnormal_mean_matches_quadrature() {
        let tn = TruncNormalParams::new(25.0, 400.0, 10.0, 80.0).unwrap();
        let oracle = simpson(|x| x * tn.pdf(x), 10.0, 80.0, 20_000);
        // scipy.stats.truncnorm reports 32.581686580222865
        assert!((oracle - 32.581_686_580_222_87).abs() < 1e-8);
        assert!((tn.truncated_mean() - oracle).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mean = (0..n).map(|_| tn.sample(&mut rng)).sum::<f64>() / n as f64;
        // three significant digits
        assert!((mean - oracle).abs() < 0.05, "sample mean {mean}");
    }

    #[test]
    fn truncnormal_upper_tail_branch() {
        let tn = TruncNormalParams::new(0.0, 1.0, 6.0, 8.0).unwrap();
        assert!(tn.mass() > 0.0);
        let q = tn.quantile(0.5);
        assert!(q > 6.0 && q < 6.5);
        assert!((tn.cdf(q) - 0.5).abs() < 1e-8);
        assert!(TruncNormalParams::new(0.0, 1.0, 60.0, 80.0).is_err());
        assert!(TruncNormalParams::new(0.0, 1.0, 3.0, 2.0).is_err());
    }

    #[test]
    fn mixture_examples() {
        let a = w(1.5, 4.5);
        let b = w(4.0, 10.0);
        let only_a = MixtureParams::new(1.0, a, b).unwrap();
        for y in [0.5, 3.0, 12.0] {
            assert_eq!(mixture_pdf(y, &only_a).unwrap(), a.pdf(y));
        }
        // components cross somewhere in (5, 12): locate and check the common value
        let y_eq = crate::numeric::bisect_boundary(5.0, 12.0, |y| a.pdf(y) >= b.pdf(y), 1e-14, 200);
        let half = MixtureParams::new(0.5, a, b).unwrap();
        assert!((half.pdf(y_eq) - a.pdf(y_eq)).abs() < 1e-12);
        assert!((mixture_cdf(1e4, &half).unwrap() - 1.0).abs() < 1e-8);
        assert!(mixture_cdf(-1.0, &half).is_err());
        assert!(MixtureParams::new(1.5, a, b).is_err());
    }

    /// Kolmogorov–Smirnov statistic of a sample against `cdf`.
    fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn samplers_pass_ks_at_one_in_a_thousand() {
        let n = 100_000;
        // asymptotic Kolmogorov critical value at α = 0.001
        let critical = 1.949_48 / (n as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);

        let wb = w(1.5, 4.5);
        let xs: Vec<f64> = (0..n).map(|_| wb.sample(&mut rng)).collect();
        assert!(ks_statistic(xs, |y| wb.cdf(y)) < critical);

        let ln = LognormalParams::new(1.5, 0.6).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| ln.sample(&mut rng)).collect();
        assert!(ks_statistic(xs, |y| ln.cdf(y)) < critical);

        let mix = MixtureParams::new(0.5, w(1.5, 6.0), w(4.0, 10.0)).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| mix.sample(&mut rng)).collect();
        assert!(ks_statistic(xs, |y| mix.cdf(y)) < critical);

        let tn = TruncNormalParams::new(25.0, 400.0, 10.0, 80.0).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| tn.sample(&mut rng)).collect();
        assert!(ks_statistic(xs, |x| tn.cdf(x)) < critical);
    }
}
