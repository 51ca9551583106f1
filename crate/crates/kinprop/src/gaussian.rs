//! Scalar and planar Gaussians, mixture components, densities and the
//! negative log-likelihood objective.
//!
//! These are the primitives every other module builds on: positions are
//! absolute planar coordinates in meters, kinematic variables are housed in
//! [`Gaussian1D`] with `sigma = 0` denoting a deterministic value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Correlation coefficients are clamped to this magnitude at construction so
/// the covariance never becomes singular inside the NLL.
pub const RHO_MAX: f64 = 0.999;

/// Densities are clamped here before taking logs, keeping the training loss
/// finite without silent NaNs.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Mixture probabilities must sum to 1 within this tolerance.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Number of car-following parameters carried per mixture component
/// (desired speed, time headway, minimum gap, max acceleration,
/// comfortable deceleration — see the `cfm` module for the ordering).
pub const CFM_PARAM_COUNT: usize = 5;

/// Mean and standard deviation of one scalar random variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian1D<T = f64> {
    pub mu: T,
    pub sigma: T,
}

impl<T: Scalar> Gaussian1D<T> {
    pub fn new(mu: T, sigma: T) -> Self {
        debug_assert!(sigma.value() >= 0.0, "sigma must be non-negative");
        Gaussian1D { mu, sigma }
    }
}

impl Gaussian1D<f64> {
    /// A deterministic value (sigma = 0).
    pub fn deterministic(mu: f64) -> Self {
        Gaussian1D { mu, sigma: 0.0 }
    }

    pub fn checked(mu: f64, sigma: f64) -> Result<Self> {
        if !(mu.is_finite() && sigma.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        if sigma < 0.0 {
            return Err(Error::DegenerateGaussian { sigma });
        }
        Ok(Gaussian1D { mu, sigma })
    }
}

/// Bivariate Gaussian over planar position, parameterized by per-axis mean
/// and standard deviation plus a correlation coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2D<T = f64> {
    pub mu_x: T,
    pub mu_y: T,
    pub sigma_x: T,
    pub sigma_y: T,
    pub rho: T,
}

impl Gaussian2D<f64> {
    /// Validates sigmas and clamps `rho` into `[-RHO_MAX, RHO_MAX]`.
    pub fn new(mu_x: f64, mu_y: f64, sigma_x: f64, sigma_y: f64, rho: f64) -> Result<Self> {
        Self::new_flagged(mu_x, mu_y, sigma_x, sigma_y, rho).map(|(g, _)| g)
    }

    /// As [`Gaussian2D::new`], also reporting whether `rho` was clamped.
    pub fn new_flagged(
        mu_x: f64,
        mu_y: f64,
        sigma_x: f64,
        sigma_y: f64,
        rho: f64,
    ) -> Result<(Self, bool)> {
        if ![mu_x, mu_y, sigma_x, sigma_y, rho]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFiniteInput);
        }
        if sigma_x < 0.0 {
            return Err(Error::DegenerateGaussian { sigma: sigma_x });
        }
        if sigma_y < 0.0 {
            return Err(Error::DegenerateGaussian { sigma: sigma_y });
        }
        let clamped = rho.abs() > RHO_MAX;
        Ok((
            Gaussian2D {
                mu_x,
                mu_y,
                sigma_x,
                sigma_y,
                rho: rho.clamp(-RHO_MAX, RHO_MAX),
            },
            clamped,
        ))
    }

    /// A point mass at `(mu_x, mu_y)`.
    pub fn point(mu_x: f64, mu_y: f64) -> Self {
        Gaussian2D {
            mu_x,
            mu_y,
            sigma_x: 0.0,
            sigma_y: 0.0,
            rho: 0.0,
        }
    }

    /// Axis-aligned with equal sigmas.
    pub fn isotropic(mu_x: f64, mu_y: f64, sigma: f64) -> Self {
        Gaussian2D {
            mu_x,
            mu_y,
            sigma_x: sigma,
            sigma_y: sigma,
            rho: 0.0,
        }
    }
}

impl<T: Scalar> Gaussian2D<T> {
    pub fn mean(&self) -> (f64, f64) {
        (self.mu_x.value(), self.mu_y.value())
    }
}

/// One component of a position mixture: a weight, a position Gaussian, and
/// per-car-following-parameter Gaussians.
#[derive(Debug, Clone)]
pub struct MixtureComponent<T = f64> {
    pub prob: T,
    pub pos: Gaussian2D<T>,
    pub cfm: [Gaussian1D<T>; CFM_PARAM_COUNT],
}

impl<T: Scalar> MixtureComponent<T> {
    /// Component with no car-following information (zero-valued entries).
    pub fn position_only(prob: T, pos: Gaussian2D<T>) -> Self {
        let zero = prob.lift(0.0);
        let entry = Gaussian1D {
            mu: zero.clone(),
            sigma: zero,
        };
        MixtureComponent {
            prob,
            pos,
            cfm: [
                entry.clone(),
                entry.clone(),
                entry.clone(),
                entry.clone(),
                entry,
            ],
        }
    }
}

/// Bivariate normal pdf of `g` at the observed point `o`.
///
/// Requires strictly positive sigmas and |rho| < 1.
pub fn gaussian2d_density<T: Scalar>(g: &Gaussian2D<T>, o: (f64, f64)) -> Result<T> {
    let sx = g.sigma_x.value();
    let sy = g.sigma_y.value();
    if sx <= 0.0 {
        return Err(Error::DegenerateGaussian { sigma: sx });
    }
    if sy <= 0.0 {
        return Err(Error::DegenerateGaussian { sigma: sy });
    }
    let rho = g.rho.value();
    if rho.abs() >= 1.0 {
        return Err(Error::InvalidCorrelation { rho });
    }

    let one = g.mu_x.lift(1.0);
    let dx = (g.mu_x.lift(o.0) - g.mu_x.clone()) / g.sigma_x.clone();
    let dy = (g.mu_y.lift(o.1) - g.mu_y.clone()) / g.sigma_y.clone();
    let omr2 = one.clone() - g.rho.sq();
    let quad = dx.sq() - g.rho.lift(2.0) * g.rho.clone() * dx * dy.clone() + dy.sq();
    let norm = g.mu_x.lift(2.0 * std::f64::consts::PI)
        * g.sigma_x.clone()
        * g.sigma_y.clone()
        * omr2.sqrt();
    Ok((-quad / (omr2 * g.mu_x.lift(2.0))).exp() / norm)
}

/// Density of a K-component mixture at `o`: sum of p_k * N_k(o).
///
/// Probabilities must sum to 1 within [`PROB_SUM_TOL`].
pub fn mixture_density<T: Scalar>(components: &[MixtureComponent<T>], o: (f64, f64)) -> Result<T> {
    if components.is_empty() {
        return Err(Error::EmptyMixture);
    }
    let sum: f64 = components.iter().map(|c| c.prob.value()).sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::UnnormalizedMixture {
            sum,
            tol: PROB_SUM_TOL,
        });
    }
    let mut total = components[0].prob.lift(0.0);
    for c in components {
        total = total + c.prob.clone() * gaussian2d_density(&c.pos, o)?;
    }
    Ok(total)
}

/// Negative log-likelihood of one component at a ground-truth point,
/// with the underflow clamp recorded in `clamped`.
#[derive(Debug, Clone)]
pub struct Nll<T = f64> {
    pub value: T,
    pub clamped: bool,
}

/// `-log p - log N(truth)` for a single mixture component.
///
/// The density (and the probability, which shares the floor) is clamped at
/// [`DENSITY_FLOOR`] before the log; `clamped` flags that the floor fired.
pub fn nll_loss<T: Scalar>(component: &MixtureComponent<T>, truth: (f64, f64)) -> Result<Nll<T>> {
    if !(truth.0.is_finite() && truth.1.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let density = gaussian2d_density(&component.pos, truth)?;
    let clamped = density.value() < DENSITY_FLOOR || component.prob.value() < DENSITY_FLOOR;
    let d = density.clamp_range(DENSITY_FLOOR, f64::INFINITY);
    let p = component.prob.clamp_range(DENSITY_FLOOR, f64::INFINITY);
    Ok(Nll {
        value: -p.ln() - d.ln(),
        clamped,
    })
}

/// Midpoint-rule mass of a mixture over a box spanning ±`span_sigmas`
/// combined sigmas around the component means. A quadrature cross-check of
/// normalization, independent of the closed-form constant.
pub fn mixture_grid_mass(
    components: &[MixtureComponent<f64>],
    cells: usize,
    span_sigmas: f64,
) -> Result<f64> {
    if components.is_empty() {
        return Err(Error::EmptyMixture);
    }
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for c in components {
        x_lo = x_lo.min(c.pos.mu_x - span_sigmas * c.pos.sigma_x);
        x_hi = x_hi.max(c.pos.mu_x + span_sigmas * c.pos.sigma_x);
        y_lo = y_lo.min(c.pos.mu_y - span_sigmas * c.pos.sigma_y);
        y_hi = y_hi.max(c.pos.mu_y + span_sigmas * c.pos.sigma_y);
    }
    let hx = (x_hi - x_lo) / cells as f64;
    let hy = (y_hi - y_lo) / cells as f64;
    let mut mass = 0.0;
    for i in 0..cells {
        let x = x_lo + (i as f64 + 0.5) * hx;
        for j in 0..cells {
            let y = y_lo + (j as f64 + 0.5) * hy;
            mass += mixture_density(components, (x, y))?;
        }
    }
    Ok(mass * hx * hy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const INV_TWO_PI: f64 = 1.0 / (2.0 * PI);

    fn comp(prob: f64, pos: Gaussian2D) -> MixtureComponent {
        MixtureComponent::position_only(prob, pos)
    }

    #[test]
    fn standard_normal_at_mean() {
        let g = Gaussian2D::isotropic(0.0, 0.0, 1.0);
        let d = gaussian2d_density(&g, (0.0, 0.0)).unwrap();
        assert!((d - INV_TWO_PI).abs() < 1e-15);
    }

    #[test]
    fn density_is_translation_invariant() {
        let g = Gaussian2D::isotropic(3.0, -2.0, 1.0);
        let d = gaussian2d_density(&g, (3.0, -2.0)).unwrap();
        assert!((d - INV_TWO_PI).abs() < 1e-15);
    }

    #[test]
    fn density_matches_arbitrary_precision_oracle() {
        // mpmath (50 digits): N((1,1); mu=(0,0), sigma=(2,0.5), rho=0.3)
        let g = Gaussian2D::new(0.0, 0.0, 2.0, 0.5, 0.3).unwrap();
        let d = gaussian2d_density(&g, (1.0, 1.0)).unwrap();
        assert!((d - 0.022455578005296257).abs() < 1e-15, "got {d}");
    }

    #[test]
    fn degenerate_sigma_rejected() {
        let g = Gaussian2D {
            mu_x: 0.0,
            mu_y: 0.0,
            sigma_x: 0.0,
            sigma_y: 1.0,
            rho: 0.0,
        };
        assert!(matches!(
            gaussian2d_density(&g, (0.0, 0.0)),
            Err(Error::DegenerateGaussian { .. })
        ));
    }

    #[test]
    fn out_of_range_rho_rejected_by_density() {
        let g = Gaussian2D {
            mu_x: 0.0,
            mu_y: 0.0,
            sigma_x: 1.0,
            sigma_y: 1.0,
            rho: 1.0,
        };
        assert!(matches!(
            gaussian2d_density(&g, (0.0, 0.0)),
            Err(Error::InvalidCorrelation { .. })
        ));
    }

    #[test]
    fn constructor_clamps_rho_with_flag() {
        let (g, clamped) = Gaussian2D::new_flagged(0.0, 0.0, 1.0, 1.0, 0.99995).unwrap();
        assert!(clamped);
        assert_eq!(g.rho, RHO_MAX);
        let (_, not_clamped) = Gaussian2D::new_flagged(0.0, 0.0, 1.0, 1.0, 0.5).unwrap();
        assert!(!not_clamped);
    }

    #[test]
    fn mixture_of_identical_components() {
        let g = Gaussian2D::isotropic(1.0, 2.0, 0.7);
        let mix = vec![comp(0.5, g), comp(0.5, g)];
        let d = mixture_density(&mix, (1.0, 2.0)).unwrap();
        let single = gaussian2d_density(&g, (1.0, 2.0)).unwrap();
        assert!((d - single).abs() < 1e-15);
    }

    #[test]
    fn single_component_mixture_equals_density() {
        let g = Gaussian2D::new(0.5, -0.5, 1.5, 0.8, -0.2).unwrap();
        let mix = vec![comp(1.0, g)];
        let o = (0.9, 0.1);
        let d = mixture_density(&mix, o).unwrap();
        assert_eq!(d, gaussian2d_density(&g, o).unwrap());
    }

    #[test]
    fn empty_and_unnormalized_mixtures_rejected() {
        let empty: Vec<MixtureComponent> = vec![];
        assert!(matches!(
            mixture_density(&empty, (0.0, 0.0)),
            Err(Error::EmptyMixture)
        ));
        let g = Gaussian2D::isotropic(0.0, 0.0, 1.0);
        let mix = vec![comp(0.6, g), comp(0.6, g)];
        assert!(matches!(
            mixture_density(&mix, (0.0, 0.0)),
            Err(Error::UnnormalizedMixture { .. })
        ));
    }

    #[test]
    fn three_component_mixture_integrates_to_one() {
        let mix = vec![
            comp(0.2, Gaussian2D::new(-1.0, 0.5, 0.8, 1.2, 0.4).unwrap()),
            comp(0.5, Gaussian2D::new(2.0, -1.0, 1.5, 0.6, -0.3).unwrap()),
            comp(0.3, Gaussian2D::new(0.0, 2.0, 0.5, 0.5, 0.0).unwrap()),
        ];
        let mass = mixture_grid_mass(&mix, 200, 10.0).unwrap();
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn nll_of_standard_gaussian_at_mean() {
        let c = comp(1.0, Gaussian2D::isotropic(0.0, 0.0, 1.0));
        let nll = nll_loss(&c, (0.0, 0.0)).unwrap();
        assert!((nll.value - (2.0 * PI).ln()).abs() < 1e-14);
        assert!(!nll.clamped);
    }

    #[test]
    fn nll_prob_term_is_additive() {
        let c = comp(0.5, Gaussian2D::isotropic(0.0, 0.0, 1.0));
        let nll = nll_loss(&c, (0.0, 0.0)).unwrap();
        assert!((nll.value - ((2.0 * PI).ln() + 2f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn nll_matches_arbitrary_precision_oracle() {
        // mpmath: prob 0.25, sigma (2,3), rho 0.5, truth one sigma off-mean
        // per axis.
        let c = comp(0.25, Gaussian2D::new(0.0, 0.0, 2.0, 3.0, 0.5).unwrap());
        let nll = nll_loss(&c, (2.0, 3.0)).unwrap();
        assert!((nll.value - 5.538756527198067).abs() < 1e-12, "{}", nll.value);
    }

    #[test]
    fn nll_clamps_underflowed_density() {
        let c = comp(1.0, Gaussian2D::isotropic(0.0, 0.0, 1e-3));
        let nll = nll_loss(&c, (1e6, 1e6)).unwrap();
        assert!(nll.clamped);
        assert!(nll.value.is_finite());
        assert!((nll.value - (-DENSITY_FLOOR.ln())).abs() < 1e-6);
    }

    #[test]
    fn nll_decreases_toward_the_mean_along_a_ray() {
        let c = comp(0.7, Gaussian2D::new(1.0, -2.0, 1.3, 0.9, 0.25).unwrap());
        let dir = (0.6, -0.8);
        let mut last = f64::INFINITY;
        for k in (1..=10).rev() {
            let t = k as f64 * 0.5;
            let o = (1.0 + dir.0 * t, -2.0 + dir.1 * t);
            let nll = nll_loss(&c, o).unwrap().value;
            assert!(nll < last, "nll must strictly decrease toward the mean");
            last = nll;
        }
    }

    #[test]
    fn density_is_maximized_at_the_mean() {
        let g = Gaussian2D::new(0.5, 1.5, 1.2, 0.4, 0.6).unwrap();
        let at_mean = gaussian2d_density(&g, (0.5, 1.5)).unwrap();
        for i in 0..40 {
            for j in 0..40 {
                let o = (
                    0.5 + (i as f64 - 19.5) * 0.2,
                    1.5 + (j as f64 - 19.5) * 0.2,
                );
                let d = gaussian2d_density(&g, o).unwrap();
                assert!(d <= at_mean + 1e-15);
            }
        }
    }

    proptest! {
        /// Pointwise linearity: merging two mixtures with weights (w, 1-w)
        /// equals the weighted sum of their densities.
        #[test]
        fn mixture_density_linear_in_probabilities(
            w in 0.05f64..0.95,
            mx in -3.0f64..3.0,
            my in -3.0f64..3.0,
            sx in 0.3f64..2.0,
            sy in 0.3f64..2.0,
            rho in -0.9f64..0.9,
            ox in -4.0f64..4.0,
            oy in -4.0f64..4.0,
        ) {
            let a = Gaussian2D::new(mx, my, sx, sy, rho).unwrap();
            let b = Gaussian2D::new(-mx, my * 0.5, sy, sx, -rho).unwrap();
            let merged = vec![comp(w, a), comp(1.0 - w, b)];
            let da = gaussian2d_density(&a, (ox, oy)).unwrap();
            let db = gaussian2d_density(&b, (ox, oy)).unwrap();
            let dm = mixture_density(&merged, (ox, oy)).unwrap();
            prop_assert!((dm - (w * da + (1.0 - w) * db)).abs() < 1e-12);
        }
    }
}
