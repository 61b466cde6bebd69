//! Kinetic primitives: 3-vectors, counter-based random streams, Maxwellian
//! and sphere sampling, and the binary collision rule shared by every other
//! module.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `‖ω‖ − 1` accepted by [`collide`].
pub const UNIT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KineticsError {
    #[error("collision direction is not a unit vector (norm {0})")]
    NonUnitDirection(f64),
    #[error("temperature must be finite and non-negative, got {0}")]
    InvalidTemperature(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Unit vector along coordinate `axis` (0, 1 or 2).
    pub fn axis(axis: usize) -> Self {
        let mut v = [0.0; 3];
        v[axis] = 1.0;
        Self::from(v)
    }

    #[inline]
    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    #[inline]
    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm2().sqrt()
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn component(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("axis {axis} out of range"),
        }
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    #[inline]
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    #[inline]
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Temperature in energy units (variance of each velocity component).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(value: f64) -> Result<Self, KineticsError> {
        if value.is_finite() && value >= 0.0 {
            Ok(Self(value))
        } else {
            Err(KineticsError::InvalidTemperature(value))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Counter-based random stream.
///
/// The keystream is ChaCha8 keyed by `seed` with the 64-bit stream selector
/// set to `stream_id`; the counter is the keystream word position. Equal
/// `(seed, stream_id, counter)` triples always yield the same draws, so a
/// replica can be replayed without knowing how other replicas were scheduled.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    /// Reconstruct a source positioned at an earlier observed `counter`.
    pub fn at(seed: u64, stream_id: u64, counter: u128) -> Self {
        let mut src = Self::new(seed, stream_id);
        src.rng.set_word_pos(counter);
        src
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit keystream words consumed so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform index in `0..n`.
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Exponential holding time with the given rate.
    #[inline]
    pub fn exponential(&mut self, rate: f64) -> f64 {
        let e: f64 = Exp1.sample(&mut self.rng);
        e / rate
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Uniform draw on S² obtained by normalizing a standard Gaussian vector.
pub fn sample_unit_sphere(rng: &mut RandomSource) -> Vec3 {
    loop {
        let g = Vec3::new(rng.normal(), rng.normal(), rng.normal());
        let n = g.norm();
        if n > 1e-300 {
            return g * (1.0 / n);
        }
    }
}

/// One draw from the Maxwellian Γ_T: independent centered normals of variance T.
pub fn sample_maxwellian(t: Temperature, rng: &mut RandomSource) -> Vec3 {
    let s = t.value().sqrt();
    Vec3::new(s * rng.normal(), s * rng.normal(), s * rng.normal())
}

/// Binary collision with impact direction `omega`.
///
/// Returns `(v − ((v−w)·ω)ω, w − ((w−v)·ω)ω)`. `omega` must be a unit vector
/// within [`UNIT_TOLERANCE`]; it is renormalized before use.
pub fn collide(v: Vec3, w: Vec3, omega: Vec3) -> Result<(Vec3, Vec3), KineticsError> {
    let n = omega.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(KineticsError::NonUnitDirection(n));
    }
    Ok(collide_unit(v, w, omega * (1.0 / n)))
}

/// [`collide`] without validation; `omega` must already be unit.
#[inline]
pub(crate) fn collide_unit(v: Vec3, w: Vec3, omega: Vec3) -> (Vec3, Vec3) {
    let exchange = omega * (v - w).dot(omega);
    (v - exchange, w + exchange)
}

/// Collision of `v` with a virtual particle drawn from Γ_T, the virtual
/// particle being discarded afterwards.
pub fn thermostat_collide(v: Vec3, t: Temperature, rng: &mut RandomSource) -> Vec3 {
    let w = sample_maxwellian(t, rng);
    let omega = sample_unit_sphere(rng);
    collide_unit(v, w, omega).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::ks_two_sample;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn sphere_draws_are_unit() {
        let mut rng = RandomSource::new(1, 0);
        for _ in 0..1000 {
            assert!((sample_unit_sphere(&mut rng).norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn sphere_moments() {
        let mut rng = RandomSource::new(2, 0);
        let n = 100_000;
        let mut mean = Vec3::ZERO;
        let mut second = [[0.0; 3]; 3];
        let sigma = Vec3::new(1.0, 2.0, -2.0) * (1.0 / 3.0);
        let mut proj = 0.0;
        for _ in 0..n {
            let w = sample_unit_sphere(&mut rng);
            mean += w;
            let a = w.to_array();
            for i in 0..3 {
                for j in 0..3 {
                    second[i][j] += a[i] * a[j];
                }
            }
            proj += sigma.dot(w).powi(2);
        }
        let nf = n as f64;
        for c in (mean * (1.0 / nf)).to_array() {
            assert!(c.abs() < 4.0 / nf.sqrt());
        }
        for (i, row) in second.iter().enumerate() {
            for (j, s) in row.iter().enumerate() {
                let expect = if i == j { 1.0 / 3.0 } else { 0.0 };
                assert!((s / nf - expect).abs() < 0.01);
            }
        }
        assert!((proj / nf - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn maxwellian_zero_temperature_is_point_mass() {
        let mut rng = RandomSource::new(3, 0);
        let t = Temperature::new(0.0).unwrap();
        assert_eq!(sample_maxwellian(t, &mut rng), Vec3::ZERO);
    }

    #[test]
    fn maxwellian_moments() {
        let mut rng = RandomSource::new(4, 0);
        let n = 100_000;
        let t1 = Temperature::new(1.0).unwrap();
        let e: f64 = (0..n).map(|_| sample_maxwellian(t1, &mut rng).norm2()).sum::<f64>() / n as f64;
        assert!((e - 3.0).abs() < 0.05, "{e}");
        let t2 = Temperature::new(2.0).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| sample_maxwellian(t2, &mut rng).x).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((var - 2.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn negative_temperature_rejected() {
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
    }

    #[test]
    fn collide_examples() {
        let (a, b) = collide(Vec3::new(1.0, 0.0, 0.0), Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(close(a, Vec3::ZERO, 0.0));
        assert!(close(b, Vec3::new(1.0, 0.0, 0.0), 0.0));

        let v = Vec3::new(1.0, 2.0, 3.0);
        let w = Vec3::new(-1.0, 0.0, 1.0);
        let (a, b) = collide(v, w, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(a, Vec3::new(1.0, 2.0, 1.0));
        assert_eq!(b, Vec3::new(-1.0, 0.0, 3.0));

        // ω ⟂ (v − w): nothing happens
        let (a, b) = collide(v, w, Vec3::new(1.0, -1.0, 0.0) * (1.0 / 2f64.sqrt())).unwrap();
        assert!(close(a, v, 1e-15) && close(b, w, 1e-15));
    }

    #[test]
    fn collide_rejects_non_unit() {
        let err = collide(Vec3::ZERO, Vec3::ZERO, Vec3::new(1.0, 1.0, 0.0)).unwrap_err();
        assert!(matches!(err, KineticsError::NonUnitDirection(_)));
        // within tolerance is accepted
        assert!(collide(Vec3::ZERO, Vec3::ZERO, Vec3::new(1.0 + 1e-11, 0.0, 0.0)).is_ok());
    }

    #[test]
    fn thermostat_cold_bath_removes_a_third() {
        let mut rng = RandomSource::new(5, 0);
        let t = Temperature::new(0.0).unwrap();
        let n = 100_000;
        let e: f64 = (0..n)
            .map(|_| thermostat_collide(Vec3::new(1.0, 0.0, 0.0), t, &mut rng).norm2())
            .sum::<f64>()
            / n as f64;
        assert!((e - 2.0 / 3.0).abs() < 0.02, "{e}");
    }

    #[test]
    fn thermostat_preserves_its_maxwellian() {
        let t = Temperature::new(1.5).unwrap();
        let mut rng = RandomSource::new(6, 0);
        let mut reference = RandomSource::new(6, 1);
        let n = 100_000;
        let out: Vec<f64> = (0..n)
            .map(|_| {
                let v = sample_maxwellian(t, &mut rng);
                thermostat_collide(v, t, &mut rng).norm2()
            })
            .collect();
        let fresh: Vec<f64> = (0..n).map(|_| sample_maxwellian(t, &mut reference).norm2()).collect();
        let ks = ks_two_sample(&out, &fresh);
        assert!(ks.p_value > 0.01, "{ks:?}");
    }

    #[test]
    fn replay_from_counter() {
        let mut a = RandomSource::new(9, 4);
        for _ in 0..17 {
            a.normal();
        }
        let counter = a.counter();
        let t = Temperature::new(1.0).unwrap();
        let x = thermostat_collide(Vec3::new(0.3, 0.1, -0.2), t, &mut a);
        let mut b = RandomSource::at(9, 4, counter);
        let y = thermostat_collide(Vec3::new(0.3, 0.1, -0.2), t, &mut b);
        assert_eq!(x, y);
    }

    #[test]
    fn streams_differ() {
        let mut a = RandomSource::new(9, 0);
        let mut b = RandomSource::new(9, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec3() -> impl Strategy<Value = Vec3> {
            (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
        }

        proptest! {
            #[test]
            fn collision_conserves(v in vec3(), w in vec3(), seed in any::<u64>()) {
                let mut rng = RandomSource::new(seed, 0);
                let omega = sample_unit_sphere(&mut rng);
                let (a, b) = collide(v, w, omega).unwrap();
                let p0 = v + w;
                let scale = (v.norm2() + w.norm2()).max(1e-300);
                prop_assert!((a + b - p0).norm() <= 1e-12 * scale.sqrt().max(1.0));
                let e0 = v.norm2() + w.norm2();
                prop_assert!((a.norm2() + b.norm2() - e0).abs() <= 1e-12 * scale);
            }
        }
    }
}
