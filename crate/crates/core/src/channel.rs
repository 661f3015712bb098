//! Hybrid near/far-field multipath channel synthesis.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{distance, ArraySpec, SPEED_OF_LIGHT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParameter {
    pub gain: Complex64,
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub delay: f64,
    pub is_los: bool,
}

/// Random path-draw settings. Angles in radians, distances in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioConfig {
    pub num_paths: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub los_gain: f64,
    pub nlos_gain_min: f64,
    pub nlos_gain_max: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            num_paths: 5,
            r_min: 0.05,
            r_max: 0.55,
            theta_min: 0.0,
            theta_max: PI / 2.0,
            los_gain: 1.0,
            nlos_gain_min: 0.1,
            nlos_gain_max: 0.5,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_paths == 0 {
            return Err(Error::config("scenario.L", "need at least one path"));
        }
        if !(self.r_min > 0.0) {
            return Err(Error::config("scenario.r_min", "minimum distance must be positive"));
        }
        if !(self.r_max >= self.r_min) {
            return Err(Error::config("scenario.r_max", "must be >= scenario.r_min"));
        }
        if !(0.0 <= self.theta_min && self.theta_min <= self.theta_max && self.theta_max <= PI) {
            return Err(Error::config("scenario.theta_max", "need 0 <= theta_min <= theta_max <= pi"));
        }
        if !(self.nlos_gain_min >= 0.0 && self.nlos_gain_max >= self.nlos_gain_min) {
            return Err(Error::config("scenario.nlos_gain_max", "need 0 <= min <= max"));
        }
        if self.nlos_gain_max > self.los_gain {
            return Err(Error::config("scenario.los_gain", "LoS gain must dominate NLoS gains"));
        }
        Ok(())
    }

    /// Probability that a single drawn distance falls below `rayleigh`.
    pub fn near_field_probability(&self, rayleigh: f64) -> f64 {
        if self.r_max <= self.r_min {
            return if self.r_min < rayleigh { 1.0 } else { 0.0 };
        }
        ((rayleigh - self.r_min) / (self.r_max - self.r_min)).clamp(0.0, 1.0)
    }

    /// Scale making `E ||h||^2 = M`: random independent phases remove the
    /// cross terms, so the expectation is `M * sum_l E|beta_l|^2`.
    fn gain_normalization(&self) -> f64 {
        let (a, b) = (self.nlos_gain_min, self.nlos_gain_max);
        let second_moment = if b > a {
            (b.powi(3) - a.powi(3)) / (3.0 * (b - a))
        } else {
            a * a
        };
        let total = self.los_gain.powi(2) + (self.num_paths - 1) as f64 * second_moment;
        1.0 / total.sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub paths: Vec<PathParameter>,
    pub h_spatial: DVector<Complex64>,
    pub h_angular: DVector<Complex64>,
    pub h_real: DVector<f64>,
}

/// Unit vector of arrival `(sin t cos p, sin t sin p, cos t)`.
pub fn direction_vector(azimuth: f64, elevation: f64) -> [f64; 3] {
    let (st, ct) = elevation.sin_cos();
    let (sp, cp) = azimuth.sin_cos();
    [st * cp, st * sp, ct]
}

fn phase(turns: f64) -> Complex64 {
    Complex64::from_polar(1.0, -2.0 * PI * turns)
}

/// Spherical-wavefront response for a source at `distance * x(azimuth, elevation)`.
pub fn near_field_response(
    spec: &ArraySpec,
    azimuth: f64,
    elevation: f64,
    distance_m: f64,
) -> Result<DVector<Complex64>> {
    if !(distance_m > 0.0) {
        return Err(Error::input(format!("distance must be positive, got {distance_m}")));
    }
    let x = direction_vector(azimuth, elevation);
    let source = [distance_m * x[0], distance_m * x[1], distance_m * x[2]];
    let lambda = spec.wavelength();
    Ok(DVector::from_iterator(
        spec.num_elements(),
        spec.positions()
            .iter()
            .map(|p| phase(distance(p, &source) / lambda)),
    ))
}

/// Planar-wavefront response `exp(+j 2 pi p.x / lambda)`: the large-range
/// limit of [`near_field_response`] once its common phase `exp(-j 2 pi r / lambda)`
/// is removed.
pub fn far_field_response(spec: &ArraySpec, azimuth: f64, elevation: f64) -> DVector<Complex64> {
    let x = direction_vector(azimuth, elevation);
    let lambda = spec.wavelength();
    DVector::from_iterator(
        spec.num_elements(),
        spec.positions()
            .iter()
            .map(|p| phase(-(p[0] * x[0] + p[1] * x[1] + p[2] * x[2]) / lambda)),
    )
}

/// Response for one path with the regime chosen by `distance < rayleigh`.
pub fn path_response(spec: &ArraySpec, path: &PathParameter, rayleigh: f64) -> Result<DVector<Complex64>> {
    if path.distance < rayleigh {
        near_field_response(spec, path.azimuth, path.elevation, path.distance)
    } else {
        Ok(far_field_response(spec, path.azimuth, path.elevation))
    }
}

/// Spatial channel `sum_l beta_l a(phi_l, theta_l, r_l) exp(-j 2 pi f_c tau_l)`.
pub fn synthesize_channel(
    spec: &ArraySpec,
    paths: &[PathParameter],
    rayleigh: f64,
) -> Result<DVector<Complex64>> {
    if paths.is_empty() {
        return Err(Error::input("empty path list"));
    }
    let mut h = DVector::<Complex64>::zeros(spec.num_elements());
    for path in paths {
        let coeff = path.gain * phase(spec.carrier_frequency * path.delay);
        h.axpy(coeff, &path_response(spec, path, rayleigh)?, Complex64::new(1.0, 0.0));
    }
    Ok(h)
}

/// Draw one LoS path followed by `L - 1` NLoS paths.
pub fn sample_paths<R: Rng + ?Sized>(rng: &mut R, scenario: &ScenarioConfig) -> Result<Vec<PathParameter>> {
    if !(scenario.r_min > 0.0) {
        return Err(Error::input("scenario.r_min must be positive"));
    }
    scenario.validate()?;
    let norm = scenario.gain_normalization();
    let paths = (0..scenario.num_paths)
        .map(|l| {
            let azimuth = rng.random_range(0.0..2.0 * PI);
            let elevation = if scenario.theta_max > scenario.theta_min {
                rng.random_range(scenario.theta_min..=scenario.theta_max)
            } else {
                scenario.theta_min
            };
            let distance = if scenario.r_max > scenario.r_min {
                rng.random_range(scenario.r_min..=scenario.r_max)
            } else {
                scenario.r_min
            };
            let magnitude = if l == 0 {
                scenario.los_gain
            } else if scenario.nlos_gain_max > scenario.nlos_gain_min {
                rng.random_range(scenario.nlos_gain_min..=scenario.nlos_gain_max)
            } else {
                scenario.nlos_gain_min
            };
            let psi = rng.random_range(0.0..2.0 * PI);
            PathParameter {
                gain: Complex64::from_polar(norm * magnitude, psi),
                azimuth,
                elevation,
                distance,
                delay: distance / SPEED_OF_LIGHT,
                is_los: l == 0,
            }
        })
        .collect();
    Ok(paths)
}

/// `x` concatenated as `[Re(x); Im(x)]`.
pub fn realify(x: &DVector<Complex64>) -> DVector<f64> {
    let n = x.len();
    DVector::from_fn(2 * n, |i, _| if i < n { x[i].re } else { x[i - n].im })
}

/// Inverse of [`realify`].
pub fn complexify(x: &DVector<f64>) -> Result<DVector<Complex64>> {
    if !x.len().is_multiple_of(2) {
        return Err(Error::input("real vector length must be even"));
    }
    let n = x.len() / 2;
    Ok(DVector::from_fn(n, |i, _| Complex64::new(x[i], x[i + n])))
}

impl ChannelRealization {
    /// Build all three channel representations given the angular transform `E`.
    pub fn from_paths(
        spec: &ArraySpec,
        paths: Vec<PathParameter>,
        dft: &nalgebra::DMatrix<Complex64>,
    ) -> Result<Self> {
        let h_spatial = synthesize_channel(spec, &paths, spec.rayleigh_distance())?;
        let h_angular = dft * &h_spatial;
        let h_real = realify(&h_angular);
        Ok(ChannelRealization {
            paths,
            h_spatial,
            h_angular,
            h_real,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_element() -> ArraySpec {
        ArraySpec {
            num_subarrays: 1,
            elements_per_subarray: 1,
            ..ArraySpec::desk()
        }
    }

    #[test]
    fn direction_vector_cardinal_axes() {
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(direction_vector(0.0, 0.0), [0.0, 0.0, 1.0]));
        assert!(close(direction_vector(0.0, PI / 2.0), [1.0, 0.0, 0.0]));
        assert!(close(direction_vector(PI / 2.0, PI / 2.0), [0.0, 1.0, 0.0]));
    }

    #[test]
    fn near_field_single_element_at_one_wavelength() {
        let s = single_element();
        let a = near_field_response(&s, 0.3, 1.1, s.wavelength()).unwrap();
        assert!((a[0] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn near_field_rejects_nonpositive_distance() {
        let s = ArraySpec::desk();
        assert!(near_field_response(&s, 0.0, 0.0, 0.0).is_err());
        assert!(near_field_response(&s, 0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn responses_are_unit_modulus() {
        let s = ArraySpec::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (p, t, r) = (rng.random_range(0.0..6.0), rng.random_range(0.0..3.0), rng.random_range(0.01..2.0));
            for v in near_field_response(&s, p, t, r).unwrap().iter().chain(far_field_response(&s, p, t).iter()) {
                assert!((v.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn far_field_boresight_and_origin() {
        let s = ArraySpec::desk();
        let a = far_field_response(&s, 0.7, 0.0);
        assert!(a.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
        let b = far_field_response(&s, 1.3, 0.9);
        assert_eq!(b[0], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn far_field_negated_direction_is_conjugate() {
        // x(phi + pi, pi - theta) = -x(phi, theta) up to the z component, which
        // does not matter for a planar array; (phi + pi, theta) negates x and y.
        let s = ArraySpec::desk();
        let a = far_field_response(&s, 0.4, 1.0);
        let b = far_field_response(&s, 0.4 + PI, 1.0);
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u.conj() - v).norm() < 1e-9);
        }
    }

    #[test]
    fn single_far_path_equals_far_response() {
        let s = ArraySpec::desk();
        let path = PathParameter {
            gain: Complex64::new(1.0, 0.0),
            azimuth: 0.5,
            elevation: 0.8,
            distance: 10.0,
            delay: 0.0,
            is_los: true,
        };
        let h = synthesize_channel(&s, &[path], s.rayleigh_distance()).unwrap();
        assert_eq!(h, far_field_response(&s, 0.5, 0.8));
    }

    #[test]
    fn opposite_gains_cancel() {
        let s = ArraySpec::desk();
        let p = PathParameter {
            gain: Complex64::new(0.3, -0.2),
            azimuth: 1.0,
            elevation: 0.4,
            distance: 0.1,
            delay: 1e-10,
            is_los: true,
        };
        let q = PathParameter { gain: -p.gain, is_los: false, ..p };
        let h = synthesize_channel(&s, &[p, q], s.rayleigh_distance()).unwrap();
        assert!(h.norm() < 1e-14);
        assert!(synthesize_channel(&s, &[], 1.0).is_err());
    }

    #[test]
    fn boundary_distance_uses_far_field() {
        let s = ArraySpec::desk();
        let r = s.rayleigh_distance();
        let p = PathParameter {
            gain: Complex64::new(1.0, 0.0),
            azimuth: 0.2,
            elevation: 0.6,
            distance: r,
            delay: 0.0,
            is_los: true,
        };
        assert_eq!(path_response(&s, &p, r).unwrap(), far_field_response(&s, 0.2, 0.6));
        let near = PathParameter { distance: r * 0.999, ..p };
        assert_eq!(
            path_response(&s, &near, r).unwrap(),
            near_field_response(&s, 0.2, 0.6, r * 0.999).unwrap()
        );
    }

    #[test]
    fn sampling_is_deterministic_and_los_dominates() {
        let sc = ScenarioConfig::default();
        let a = sample_paths(&mut ChaCha8Rng::seed_from_u64(11), &sc).unwrap();
        let b = sample_paths(&mut ChaCha8Rng::seed_from_u64(11), &sc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|p| p.is_los).count(), 1);
        assert!(a[0].is_los);
        for p in &a[1..] {
            assert!(p.gain.norm() <= a[0].gain.norm());
        }
        for p in &a {
            assert!(p.distance > 0.0 && (0.0..=PI).contains(&p.elevation));
            assert!((0.0..2.0 * PI).contains(&p.azimuth));
            assert!((p.delay - p.distance / SPEED_OF_LIGHT).abs() < 1e-24);
        }
    }

    #[test]
    fn short_range_scenario_is_all_near_field() {
        let s = ArraySpec::desk();
        let sc = ScenarioConfig {
            r_min: 0.01,
            r_max: 0.9 * s.rayleigh_distance(),
            ..ScenarioConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let paths = sample_paths(&mut rng, &sc).unwrap();
            assert!(paths.iter().all(|p| p.distance < s.rayleigh_distance()));
        }
    }

    #[test]
    fn invalid_scenario_rejected() {
        let sc = ScenarioConfig {
            r_min: 0.0,
            ..ScenarioConfig::default()
        };
        assert!(sample_paths(&mut ChaCha8Rng::seed_from_u64(0), &sc).is_err());
    }

    #[test]
    fn realify_complexify_round_trip() {
        let x = DVector::from_vec(vec![Complex64::new(1.0, 2.0), Complex64::new(-3.0, 0.5)]);
        let r = realify(&x);
        assert_eq!(r.as_slice(), &[1.0, -3.0, 2.0, 0.5]);
        assert_eq!(complexify(&r).unwrap(), x);
        assert!((r.norm() - x.norm()).abs() < 1e-15);
    }
}
