//! Rays, conical-frustum Gaussians, the unbounded-scene contraction, and
//! both positional encodings.
//!
//! A camera ray is cut into intervals; each interval's conical frustum is
//! summarized by a Gaussian (mu, sigma). The contraction maps the whole of
//! space into the open ball of radius 2, identity inside the unit ball and
//! proportional to disparity outside; Gaussians are pushed through it with
//! the Jacobian at the mean. The background field consumes the integrated
//! positional encoding of the contracted Gaussian, the human field the plain
//! encoding of a point.

use thiserror::Error;

use crate::linalg::{Mat3, Vec3};
use crate::num::{Real, Scalar};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("ray direction must have nonzero length")]
    DegenerateDirection,
    #[error("radius scale must be positive, got {0}")]
    NonPositiveRadiusScale(f64),
    #[error("invalid ray interval [{t0}, {t1}): need 0 < t0 < t1")]
    InvalidInterval { t0: f64, t1: f64 },
    #[error("encoding must have at least one level")]
    NoEncodingLevels,
}

/// A camera ray with the pixel footprint it subtends.
///
/// `radius_scale` is the cross-section radius of the pixel cone per unit
/// depth; it sizes the frustum Gaussians of the background samples.
#[derive(Clone, Copy, Debug)]
pub struct Ray<R: Real> {
    origin: Vec3<R>,
    direction: Vec3<R>,
    radius_scale: R,
}

impl<R: Real> Ray<R> {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3<R>, direction: Vec3<R>, radius_scale: R) -> Result<Self, GeometryError> {
        let n = direction.norm();
        if !(n > R::of(1e-12)) {
            return Err(GeometryError::DegenerateDirection);
        }
        if !(radius_scale > R::of(0.0)) {
            return Err(GeometryError::NonPositiveRadiusScale(radius_scale.to_f64()));
        }
        Ok(Self {
            origin,
            direction: direction / n,
            radius_scale,
        })
    }

    pub fn origin(&self) -> Vec3<R> {
        self.origin
    }

    pub fn direction(&self) -> Vec3<R> {
        self.direction
    }

    pub fn radius_scale(&self) -> R {
        self.radius_scale
    }

    pub fn at(&self, t: R) -> Vec3<R> {
        self.origin + self.direction * t
    }
}

/// Mean and covariance of one conical ray segment.
#[derive(Clone, Copy, Debug)]
pub struct FrustumGaussian<R: Real> {
    pub mu: Vec3<R>,
    pub sigma: Mat3<R>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodingKind {
    Plain,
    Integrated,
}

/// Frequency-encoding configuration: levels 0..L-1 at frequencies 2^l.
#[derive(Clone, Copy, Debug)]
pub struct EncodingConfig {
    pub levels: usize,
    pub kind: EncodingKind,
}

impl EncodingConfig {
    pub fn new(levels: usize, kind: EncodingKind) -> Result<Self, GeometryError> {
        if levels == 0 {
            return Err(GeometryError::NoEncodingLevels);
        }
        Ok(Self { levels, kind })
    }

    /// sin and cos per axis per level.
    pub fn output_len(&self) -> usize {
        6 * self.levels
    }
}

/// Shortest interval width; narrower intervals are widened to keep the
/// moment formulas away from their zero-variance singularities.
const MIN_INTERVAL: f64 = 1e-8;

/// Gaussian moments of the conical frustum over `[t0, t1)` of `ray`.
///
/// Uses the standard cone-to-Gaussian moment approximation: mean and
/// variance of the uniform distribution over the frustum volume, expressed
/// along and perpendicular to the axis in the numerically stable form.
pub fn frustum_gaussian<R: Real>(
    ray: &Ray<R>,
    t0: R,
    t1: R,
) -> Result<FrustumGaussian<R>, GeometryError> {
    if !(t0 > R::of(0.0) && t1 > t0) {
        return Err(GeometryError::InvalidInterval {
            t0: t0.to_f64(),
            t1: t1.to_f64(),
        });
    }
    let t1 = if t1 - t0 < R::of(MIN_INTERVAL) {
        t0 + R::of(MIN_INTERVAL)
    } else {
        t1
    };

    let half = R::of(0.5);
    let t_mu = (t0 + t1) * half;
    let t_d = (t1 - t0) * half;
    let t_mu2 = t_mu * t_mu;
    let t_d2 = t_d * t_d;
    let denom = R::of(3.0) * t_mu2 + t_d2;

    let mu_t = t_mu + (R::of(2.0) * t_mu * t_d2) / denom;
    let var_t = t_d2 / R::of(3.0)
        - (R::of(4.0) * t_d2 * t_d2 * (R::of(12.0) * t_mu2 - t_d2))
            / (R::of(15.0) * denom * denom);
    let r2 = ray.radius_scale * ray.radius_scale;
    let var_r = r2
        * (t_mu2 / R::of(4.0) + R::of(5.0) / R::of(12.0) * t_d2
            - R::of(4.0) / R::of(15.0) * t_d2 * t_d2 / denom);

    let d = ray.direction;
    let dd = Mat3::outer(d, d);
    let sigma = dd
        .scale(var_t)
        .add_mat(&Mat3::identity().add_mat(&dd.scale(-R::of(1.0))).scale(var_r));

    Ok(FrustumGaussian {
        mu: ray.at(mu_t),
        sigma: sigma.symmetrized(),
    })
}

/// Scene contraction: identity on the unit ball, `(2 - 1/|x|) x/|x|`
/// outside. Maps all of space into the open ball of radius 2.
pub fn contract<R: Real>(x: Vec3<R>) -> Vec3<R> {
    let n = x.norm();
    if n <= R::of(1.0) {
        x
    } else {
        x * ((R::of(2.0) - n.recip()) / n)
    }
}

/// Analytic Jacobian of [`contract`]; identity inside the unit ball.
pub fn contract_jacobian<R: Real>(x: Vec3<R>) -> Mat3<R> {
    let n = x.norm();
    if n <= R::of(1.0) {
        return Mat3::identity();
    }
    // f(x) = (2/n - 1/n^2) x  =>  J = (2/n - 1/n^2) I + (2/n^4 - 2/n^3) x x^T
    let n2 = n * n;
    let n3 = n2 * n;
    let n4 = n2 * n2;
    let iso = R::of(2.0) / n - n2.recip();
    let rad = R::of(2.0) / n4 - R::of(2.0) / n3;
    Mat3::identity().scale(iso).add_mat(&Mat3::outer(x, x).scale(rad))
}

/// Pushes a Gaussian through the contraction: `(f(mu), J Sigma J^T)`.
pub fn contract_gaussian<R: Real>(g: &FrustumGaussian<R>) -> FrustumGaussian<R> {
    let j = contract_jacobian(g.mu);
    let sigma = j.mul_mat(&g.sigma).mul_mat(&j.transpose());
    FrustumGaussian {
        mu: contract(g.mu),
        sigma: sigma.symmetrized(),
    }
}

/// Plain positional encoding: per level l, `sin(2^l x)` then `cos(2^l x)`
/// componentwise. Generic over the scalar so encoded points stay
/// differentiable through the deformation residual.
pub fn positional_encoding<S: Scalar>(x: Vec3<S>, cfg: &EncodingConfig) -> Vec<S> {
    let mut out = Vec::with_capacity(cfg.output_len());
    for level in 0..cfg.levels {
        let freq = x.x.lift(S::R::of((1u64 << level) as f64));
        let sx = x.map(|c| c * freq);
        out.push(sx.x.sin());
        out.push(sx.y.sin());
        out.push(sx.z.sin());
        out.push(sx.x.cos());
        out.push(sx.y.cos());
        out.push(sx.z.cos());
    }
    out
}

/// Integrated positional encoding of a Gaussian region: the plain encoding
/// of the mean attenuated per axis by `exp(-2^(2l-1) diag(Sigma))`.
pub fn integrated_positional_encoding<R: Real>(
    g: &FrustumGaussian<R>,
    cfg: &EncodingConfig,
) -> Vec<R> {
    let diag = g.sigma.diag();
    let mut out = Vec::with_capacity(cfg.output_len());
    for level in 0..cfg.levels {
        let freq = R::of((1u64 << level) as f64);
        // 2^(2l - 1) = 4^l / 2
        let damp_scale = R::of(0.5) * freq * freq;
        let m = g.mu * freq;
        let damp = diag.map(|v| (-damp_scale * v).exp());
        out.push(m.x.sin() * damp.x);
        out.push(m.y.sin() * damp.y);
        out.push(m.z.sin() * damp.z);
        out.push(m.x.cos() * damp.x);
        out.push(m.y.cos() * damp.y);
        out.push(m.z.cos() * damp.z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut StdRng, scale: f64) -> Vec3<f64> {
        Vec3::of(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    #[test]
    fn contract_identity_inside_unit_ball() {
        let x: Vec3<f64> = Vec3::of(0.5, 0.0, 0.0);
        assert_eq!(contract(x), x);
        assert_eq!(contract(Vec3::<f64>::zero()), Vec3::zero());
    }

    #[test]
    fn contract_outside_matches_disparity_form() {
        let y: Vec3<f64> = contract(Vec3::of(2.0, 0.0, 0.0));
        assert!((y.x - 1.5).abs() < 1e-15 && y.y == 0.0 && y.z == 0.0);
    }

    #[test]
    fn contract_bounded_and_continuous_at_boundary() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = rand_vec(&mut rng, 50.0);
            assert!(contract(x).norm() < 2.0);
        }
        for _ in 0..1000 {
            let dir = rand_vec(&mut rng, 1.0).normalized();
            let inner = contract(dir * (1.0 - 1e-8));
            let outer = contract(dir * (1.0 + 1e-8));
            assert!((inner - outer).norm() < 1e-7);
        }
    }

    #[test]
    fn jacobian_identity_inside() {
        let j = contract_jacobian(Vec3::of(0.3, 0.1, 0.0));
        assert_eq!(j, Mat3::<f64>::identity());
    }

    #[test]
    fn jacobian_reduced_along_axis_entry() {
        // Radial map r -> 2 - 1/r differentiates to 1/r^2 = 0.25 at r = 2.
        let j: Mat3<f64> = contract_jacobian(Vec3::of(2.0, 0.0, 0.0));
        assert!((j.m[0][0] - 0.25).abs() < 1e-12);
        assert!((j.m[1][1] - 0.75).abs() < 1e-12);
        assert!((j.m[2][2] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..300 {
            let mut x = rand_vec(&mut rng, 4.0);
            // Stay off the unit-sphere kink shell.
            let n = x.norm();
            if (n - 1.0).abs() < 1e-3 {
                x = x * 1.1;
            }
            let j = contract_jacobian(x);
            for col in 0..3 {
                let mut xp = x;
                let mut xm = x;
                match col {
                    0 => {
                        xp.x += h;
                        xm.x -= h;
                    }
                    1 => {
                        xp.y += h;
                        xm.y -= h;
                    }
                    _ => {
                        xp.z += h;
                        xm.z -= h;
                    }
                }
                let d = (contract(xp) - contract(xm)) / (2.0 * h);
                let fd = d.to_array();
                for row in 0..3 {
                    let a = j.m[row][col];
                    let b = fd[row];
                    let err = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
                    assert!(err < 1e-5, "J[{row}][{col}] {a} vs fd {b}");
                }
            }
        }
    }

    #[test]
    fn contract_gaussian_inside_is_identity() {
        let g = FrustumGaussian {
            mu: Vec3::of(0.2, -0.3, 0.1),
            sigma: Mat3::from_rows([0.01, 0.0, 0.0], [0.0, 0.02, 0.0], [0.0, 0.0, 0.03]),
        };
        let c = contract_gaussian(&g);
        assert_eq!(c.mu, g.mu);
        assert_eq!(c.sigma, g.sigma);
    }

    #[test]
    fn contract_gaussian_zero_sigma_stays_zero() {
        let g: FrustumGaussian<f64> = FrustumGaussian {
            mu: Vec3::of(3.0, 1.0, -2.0),
            sigma: Mat3::zero(),
        };
        let c = contract_gaussian(&g);
        assert_eq!(c.sigma, Mat3::zero());
    }

    #[test]
    fn contract_gaussian_keeps_sigma_symmetric_psd() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..500 {
            let ray = Ray::new(
                rand_vec(&mut rng, 2.0),
                rand_vec(&mut rng, 1.0) + Vec3::of(0.1, 0.2, 1.0),
                rng.random_range(0.001..0.05),
            )
            .unwrap();
            let t0 = rng.random_range(0.1..10.0);
            let t1 = t0 + rng.random_range(0.01..5.0);
            let g = frustum_gaussian(&ray, t0, t1).unwrap();
            let c = contract_gaussian(&g);
            assert!(c.sigma.max_abs_asymmetry() < 1e-9);
            let m = nalgebra::Matrix3::from_fn(|i, j| c.sigma.m[i][j]);
            let eig = m.symmetric_eigenvalues();
            for e in eig.iter() {
                assert!(*e >= -1e-9, "eigenvalue {e}");
            }
        }
    }

    #[test]
    fn frustum_point_limit() {
        let ray = Ray::new(Vec3::zero(), Vec3::of(1.0, 0.0, 0.0), 1e-12).unwrap();
        let g = frustum_gaussian(&ray, 1.0, 1.0 + 1e-9).unwrap();
        assert!((g.mu - Vec3::of(1.0, 0.0, 0.0)).norm() < 1e-6);
        for i in 0..3 {
            for j in 0..3 {
                assert!(g.sigma.m[i][j].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frustum_rejects_bad_intervals() {
        let ray = Ray::new(Vec3::zero(), Vec3::of(1.0, 0.0, 0.0), 0.01).unwrap();
        assert!(matches!(
            frustum_gaussian(&ray, -1.0, 1.0),
            Err(GeometryError::InvalidInterval { .. })
        ));
        assert!(matches!(
            frustum_gaussian(&ray, 2.0, 1.0),
            Err(GeometryError::InvalidInterval { .. })
        ));
        assert!(matches!(
            frustum_gaussian(&ray, 0.0, 1.0),
            Err(GeometryError::InvalidInterval { .. })
        ));
    }

    #[test]
    fn frustum_sigma_symmetric_and_mu_on_ray() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..1000 {
            let origin = rand_vec(&mut rng, 3.0);
            let ray = Ray::new(
                origin,
                rand_vec(&mut rng, 1.0) + Vec3::of(0.05, 0.0, 1.0),
                rng.random_range(0.001..0.1),
            )
            .unwrap();
            let t0 = rng.random_range(0.05..20.0);
            let t1 = t0 + rng.random_range(1e-4..8.0);
            let g = frustum_gaussian(&ray, t0, t1).unwrap();
            assert!(g.sigma.max_abs_asymmetry() < 1e-9);
            let proj = (g.mu - origin).dot(ray.direction());
            assert!(proj > t0 && proj < t1, "proj {proj} outside ({t0}, {t1})");
            // Off-axis deviation should vanish.
            let off = (g.mu - origin) - ray.direction() * proj;
            assert!(off.norm() < 1e-9);
        }
    }

    /// Monte-Carlo check of the closed-form moments: draw points uniformly
    /// from the frustum volume and compare empirical mean/covariance.
    #[test]
    fn frustum_moments_match_monte_carlo() {
        let mut rng = StdRng::seed_from_u64(21);
        let ray = Ray::new(
            Vec3::of(0.3, -0.2, 0.1),
            Vec3::of(0.2, 0.9, 0.4),
            0.05,
        )
        .unwrap();
        let (t0, t1) = (1.5f64, 3.0f64);
        let g = frustum_gaussian(&ray, t0, t1).unwrap();

        // Orthonormal frame around the axis.
        let d = ray.direction();
        let helper = if d.x.abs() < 0.9 {
            Vec3::of(1.0, 0.0, 0.0)
        } else {
            Vec3::of(0.0, 1.0, 0.0)
        };
        let e1 = d.cross(helper).normalized();
        let e2 = d.cross(e1);

        let n = 100_000usize;
        let mut mean = Vec3::<f64>::zero();
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            // depth density ~ t^2 (cross-section area grows quadratically)
            let u: f64 = rng.random();
            let t = (t0.powi(3) + u * (t1.powi(3) - t0.powi(3))).cbrt();
            let rad = ray.radius_scale() * t * rng.random::<f64>().sqrt();
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let p = ray.at(t) + e1 * (rad * ang.cos()) + e2 * (rad * ang.sin());
            mean = mean + p;
            pts.push(p);
        }
        mean = mean / n as f64;
        let mut cov = Mat3::<f64>::zero();
        for p in &pts {
            let c = *p - mean;
            cov = cov.add_mat(&Mat3::outer(c, c));
        }
        cov = cov.scale(1.0 / n as f64);

        assert!((mean - g.mu).norm() < 5e-3, "mean {mean:?} vs {:?}", g.mu);
        for i in 0..3 {
            for j in 0..3 {
                let a = cov.m[i][j];
                let b = g.sigma.m[i][j];
                let err = (a - b).abs() / a.abs().max(b.abs()).max(1e-5);
                assert!(err < 5e-2, "cov[{i}][{j}] {a} vs {b}");
            }
        }
    }

    #[test]
    fn plain_encoding_at_origin() {
        let cfg = EncodingConfig::new(2, EncodingKind::Plain).unwrap();
        let e = positional_encoding(Vec3::<f64>::zero(), &cfg);
        assert_eq!(e.len(), 12);
        for level in 0..2 {
            for i in 0..3 {
                assert_eq!(e[level * 6 + i], 0.0); // sin
                assert_eq!(e[level * 6 + 3 + i], 1.0); // cos
            }
        }
    }

    #[test]
    fn encoding_length_is_6l() {
        for l in 1..=8 {
            let cfg = EncodingConfig::new(l, EncodingKind::Plain).unwrap();
            let e = positional_encoding(Vec3::<f64>::of(0.4, -0.7, 2.0), &cfg);
            assert_eq!(e.len(), 6 * l);
        }
        assert!(EncodingConfig::new(0, EncodingKind::Plain).is_err());
    }

    #[test]
    fn ipe_with_zero_covariance_equals_plain_encoding() {
        let mut rng = StdRng::seed_from_u64(31);
        let cfg_i = EncodingConfig::new(8, EncodingKind::Integrated).unwrap();
        let cfg_p = EncodingConfig::new(8, EncodingKind::Plain).unwrap();
        for _ in 0..200 {
            let mu = rand_vec(&mut rng, 3.0);
            let g = FrustumGaussian { mu, sigma: Mat3::zero() };
            let ipe = integrated_positional_encoding(&g, &cfg_i);
            let pe = positional_encoding(mu, &cfg_p);
            for (a, b) in ipe.iter().zip(&pe) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn ipe_vanishes_for_huge_variance() {
        let cfg = EncodingConfig::new(4, EncodingKind::Integrated).unwrap();
        let g = FrustumGaussian {
            mu: Vec3::of(1.0, 2.0, 3.0),
            sigma: Mat3::identity().scale(1e6),
        };
        for v in integrated_positional_encoding(&g, &cfg) {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn ipe_magnitude_monotone_in_variance() {
        let cfg = EncodingConfig::new(4, EncodingKind::Integrated).unwrap();
        let mu = Vec3::of(0.7, -0.4, 1.2);
        let mut prev: Option<Vec<f64>> = None;
        for k in 0..30 {
            let var = 1e-4 * 1.6f64.powi(k);
            let g = FrustumGaussian {
                mu,
                sigma: Mat3::identity().scale(var),
            };
            let e: Vec<f64> = integrated_positional_encoding(&g, &cfg)
                .iter()
                .map(|v| v.abs())
                .collect();
            if let Some(p) = &prev {
                for (cur, last) in e.iter().zip(p) {
                    assert!(cur <= &(last + 1e-15));
                }
            }
            prev = Some(e);
        }
    }
}
