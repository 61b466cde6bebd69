//! Fixed-momentum rotational average and steady-state distance checks.
//!
//! Configurations in `ℝ^{3P}` are split into the span of
//! `E_a = (e_a, …, e_a)` and its `(3P−3)`-dimensional complement, which is
//! parametrized by Helmert coordinates (per velocity component, the
//! orthonormal contrasts of the particle values). Rotations act on the
//! complement only, so total momentum and kinetic energy are preserved.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::d2::{d2_estimate, empirical_cf, flatten, marginal, CfInput, CharFunGrid, D2Error, D2Estimate};
use crate::jump::{run_ensemble, Block, EnsembleRequest, GeneratorSpec, JumpError, SystemSampler, Topology};
use crate::kinetics::{sample_maxwellian, RandomSource, Temperature, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum SteadyError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    D2(#[from] D2Error),
    #[error(transparent)]
    Jump(#[from] JumpError),
}

/// Helmert contrasts of `x ∈ ℝ^P`: `c_k = (x₀ + … + x_{k−1} − k·x_k)/√(k(k+1))`.
fn helmert_forward(x: &[f64], out: &mut [f64]) {
    let mut prefix = 0.0;
    for k in 1..x.len() {
        prefix += x[k - 1];
        let kf = k as f64;
        out[k - 1] = (prefix - kf * x[k]) / (kf * (kf + 1.0)).sqrt();
    }
}

/// Adjoint of [`helmert_forward`]; maps contrasts back to a mean-zero vector.
fn helmert_back(c: &[f64], out: &mut [f64]) {
    let p = out.len();
    let mut suffix = 0.0;
    for i in (0..p).rev() {
        let own = if i >= 1 {
            let kf = i as f64;
            -kf * c[i - 1] / (kf * (kf + 1.0)).sqrt()
        } else {
            0.0
        };
        out[i] = suffix + own;
        if i >= 1 {
            let kf = i as f64;
            suffix += c[i - 1] / (kf * (kf + 1.0)).sqrt();
        }
    }
}

/// Orthogonal map of `ℝ^{3P}` equal to the identity on `span{E₁, E₂, E₃}`
/// and to `q` on the complement (in Helmert coordinates, component-major).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumFixingRotation {
    pub particles: usize,
    pub q: DMatrix<f64>,
}

impl MomentumFixingRotation {
    pub fn identity(particles: usize) -> Self {
        let d = 3 * particles.saturating_sub(1);
        Self { particles, q: DMatrix::identity(d, d) }
    }

    pub fn complement_dim(&self) -> usize {
        self.q.nrows()
    }

    fn coords(&self, v: &[Vec3]) -> Vec<f64> {
        let p = self.particles;
        let mut y = vec![0.0; 3 * (p - 1)];
        let mut comp = vec![0.0; p];
        for a in 0..3 {
            for (i, c) in comp.iter_mut().enumerate() {
                *c = v[i].component(a);
            }
            helmert_forward(&comp, &mut y[a * (p - 1)..(a + 1) * (p - 1)]);
        }
        y
    }

    fn transform(&self, v: &[Vec3], transpose: bool) -> Vec<Vec3> {
        assert_eq!(v.len(), self.particles, "configuration has the wrong number of particles");
        let p = self.particles;
        if p < 2 {
            return v.to_vec();
        }
        let y = nalgebra::DVector::from_vec(self.coords(v));
        let z = if transpose { self.q.tr_mul(&y) } else { &self.q * &y };
        let delta = z - y;
        let mut out = v.to_vec();
        let mut back = vec![0.0; p];
        for a in 0..3 {
            helmert_back(&delta.as_slice()[a * (p - 1)..(a + 1) * (p - 1)], &mut back);
            for (o, b) in out.iter_mut().zip(&back) {
                match a {
                    0 => o.x += b,
                    1 => o.y += b,
                    _ => o.z += b,
                }
            }
        }
        out
    }

    pub fn apply(&self, v: &[Vec3]) -> Vec<Vec3> {
        self.transform(v, false)
    }

    pub fn apply_transpose(&self, v: &[Vec3]) -> Vec<Vec3> {
        self.transform(v, true)
    }

    /// The full `3P × 3P` matrix, in particle-major coordinates `3i + a`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = 3 * self.particles;
        let mut m = DMatrix::zeros(n, n);
        for col in 0..n {
            let mut e = vec![Vec3::ZERO; self.particles];
            let c = &mut e[col / 3];
            match col % 3 {
                0 => c.x = 1.0,
                1 => c.y = 1.0,
                _ => c.z = 1.0,
            }
            for (i, v) in self.apply(&e).iter().enumerate() {
                for a in 0..3 {
                    m[(3 * i + a, col)] = v.component(a);
                }
            }
        }
        m
    }
}

/// Haar-distributed orthogonal transform on the complement: QR of a
/// Gaussian matrix with the column signs fixed by `diag(R) > 0`.
pub fn sample_fixed_momentum_rotation(particles: usize, rng: &mut RandomSource) -> MomentumFixingRotation {
    let d = 3 * particles.saturating_sub(1);
    if d == 0 {
        return MomentumFixingRotation::identity(particles);
    }
    let g = DMatrix::from_fn(d, d, |_, _| rng.normal());
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    MomentumFixingRotation { particles, q }
}

/// Realize `ℛ[F]` in distribution: sample `i` is paired with `n_rotations`
/// independent rotation draws from stream `i`, and each `Oᵀv` is emitted.
pub fn rot_average_samples(samples: &[Vec<Vec3>], seed: u64, n_rotations: usize) -> Result<Vec<Vec<Vec3>>, SteadyError> {
    if n_rotations == 0 {
        return Err(SteadyError::InvalidRequest("n_rotations must be at least 1".into()));
    }
    let p = samples.first().map_or(0, Vec::len);
    if samples.iter().any(|s| s.len() != p) {
        return Err(SteadyError::InvalidRequest("samples have different particle counts".into()));
    }
    Ok(samples
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, v)| {
            let mut rng = RandomSource::new(seed, i as u64);
            (0..n_rotations)
                .map(|_| sample_fixed_momentum_rotation(p, &mut rng).apply_transpose(v))
                .collect::<Vec<_>>()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotaReport {
    pub k: usize,
    pub n: usize,
    pub temperature: f64,
    pub samples: usize,
    pub bound: f64,
    /// `d₂(ℛ[f Γ_T^{N−k}], Γ_T^N)`.
    pub averaged: D2Estimate,
    /// `d₂(f, Γ_T^k)`.
    pub reference: D2Estimate,
    pub ratio: Option<f64>,
    pub ratio_stderr: Option<f64>,
    /// Set when `d₂(f, Γ_T^k)` is not resolved from zero.
    pub vacuous: bool,
    pub trusted: bool,
    pub pass: bool,
}

impl RotaReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}

/// Measure `d₂(ℛ[fΓ_T^{N−k}], Γ_T^N) / d₂(f, Γ_T^k)` against `k/N`.
///
/// Both distances compare symmetrized empirical characteristic functions
/// with the exact Gaussian one. The ratio error uses the delta method; the
/// check passes when `ratio ≤ k/N + 3·stderr`, and vacuously when the
/// denominator is below three standard errors or untrusted.
pub fn verify_rota_bound(
    f0: &dyn SystemSampler,
    k: usize,
    n: usize,
    t: Temperature,
    samples: usize,
    seed: u64,
) -> Result<RotaReport, SteadyError> {
    if k == 0 || k >= n {
        return Err(SteadyError::InvalidRequest(format!("need 1 <= k < N, got k={k}, N={n}")));
    }
    if samples < 2 {
        return Err(SteadyError::InvalidRequest("need at least two samples".into()));
    }
    let draws: Vec<(Vec<Vec3>, Vec<Vec3>)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = RandomSource::new(seed, i as u64);
            let head = f0.sample(k, &mut rng);
            let mut full = head.clone();
            full.extend((k..n).map(|_| sample_maxwellian(t, &mut rng)));
            (head, full)
        })
        .collect();
    let (heads, fulls): (Vec<_>, Vec<_>) = draws.into_iter().unzip();
    let rotated = rot_average_samples(&fulls, seed ^ 0x5eed_0f0f, 1)?;

    let grid_k = CharFunGrid::structured(3 * k)?;
    let grid_n = CharFunGrid::structured(3 * n)?;
    let reference = d2_estimate(
        CfInput::Empirical(&empirical_cf(&flatten(&heads), &grid_k, true)?),
        CfInput::Gaussian(t),
        &grid_k,
    )?;
    let averaged = d2_estimate(
        CfInput::Empirical(&empirical_cf(&flatten(&rotated), &grid_n, true)?),
        CfInput::Gaussian(t),
        &grid_n,
    )?;
    let bound = k as f64 / n as f64;
    let vacuous = !reference.trusted || reference.value < 3.0 * reference.stderr;
    let (ratio, ratio_stderr, pass) = if vacuous {
        (None, None, true)
    } else {
        let r = averaged.value / reference.value;
        let rel = ((averaged.stderr / averaged.value.max(f64::MIN_POSITIVE)).powi(2)
            + (reference.stderr / reference.value).powi(2))
        .sqrt();
        let se = r * rel;
        (Some(r), Some(se), r <= bound + 3.0 * se)
    };
    Ok(RotaReport {
        k,
        n,
        temperature: t.value(),
        samples,
        bound,
        trusted: averaged.trusted && reference.trusted,
        averaged,
        reference,
        ratio,
        ratio_stderr,
        vacuous,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffTReport {
    pub time: f64,
    pub replicas: usize,
    pub to_plus: D2Estimate,
    pub to_minus: D2Estimate,
    pub bound: f64,
    pub pass: bool,
}

/// Distance of the one-particle marginal of a two-thermostat run at time
/// `t_end` to each thermostat Maxwellian, against `(T₊ − T₋)/2`.
pub fn diff_t_check(
    spec: &GeneratorSpec,
    f0: &dyn SystemSampler,
    replicas: usize,
    t_end: f64,
    seed: u64,
) -> Result<DiffTReport, SteadyError> {
    if spec.topology != Topology::TwoThermostats {
        return Err(SteadyError::InvalidRequest("the gap check needs the two_thermostats topology".into()));
    }
    let req = EnsembleRequest::new(replicas, vec![t_end], vec![], seed).with_snapshots(vec![t_end], vec![Block::System]);
    let run = run_ensemble(spec, f0, &req)?;
    let one = marginal(&run.snapshots[0].replicas, &[0])?;
    let grid = CharFunGrid::structured(3)?;
    let cf = empirical_cf(&flatten(&one), &grid, true)?;
    let to_plus = d2_estimate(CfInput::Empirical(&cf), CfInput::Gaussian(spec.t_plus), &grid)?;
    let to_minus = d2_estimate(CfInput::Empirical(&cf), CfInput::Gaussian(spec.t_minus), &grid)?;
    let bound = (spec.t_plus.value() - spec.t_minus.value()) / 2.0;
    let pass = to_plus.value <= bound + 3.0 * to_plus.stderr && to_minus.value <= bound + 3.0 * to_minus.stderr;
    Ok(DiffTReport { time: t_end, replicas, to_plus, to_minus, bound, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jump::ProductMaxwellian;
    use crate::stats::ks_two_sample;

    fn temp(x: f64) -> Temperature {
        Temperature::new(x).unwrap()
    }

    fn random_config(p: usize, rng: &mut RandomSource) -> Vec<Vec3> {
        (0..p).map(|_| Vec3::new(rng.normal() + 0.3, 2.0 * rng.normal(), rng.normal() - 1.0)).collect()
    }

    #[test]
    fn helmert_round_trip() {
        let x = [0.3, -1.2, 2.0, 0.7, 5.0];
        let mean = x.iter().sum::<f64>() / 5.0;
        let mut c = [0.0; 4];
        helmert_forward(&x, &mut c);
        let mut back = [0.0; 5];
        helmert_back(&c, &mut back);
        for (b, v) in back.iter().zip(&x) {
            assert!((b - (v - mean)).abs() < 1e-14);
        }
    }

    #[test]
    fn single_particle_is_identity() {
        let mut rng = RandomSource::new(1, 0);
        let o = sample_fixed_momentum_rotation(1, &mut rng);
        assert_eq!(o.complement_dim(), 0);
        let v = vec![Vec3::new(1.0, 2.0, 3.0)];
        assert_eq!(o.apply(&v), v);
    }

    #[test]
    fn rotation_is_orthogonal_and_fixes_momentum_directions() {
        let mut rng = RandomSource::new(2, 0);
        for p in [2, 3, 5] {
            let o = sample_fixed_momentum_rotation(p, &mut rng);
            let m = o.matrix();
            let err = (m.transpose() * &m - DMatrix::identity(3 * p, 3 * p)).abs().max();
            assert!(err < 1e-12, "{err}");
            for a in 0..3 {
                let e: Vec<Vec3> = vec![Vec3::axis(a); p];
                let oe = o.apply(&e);
                let dev: f64 = oe.iter().zip(&e).map(|(x, y)| (*x - *y).norm2()).sum::<f64>().sqrt();
                assert!(dev < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_preserves_energy_and_momentum() {
        let mut rng = RandomSource::new(3, 0);
        let v = random_config(6, &mut rng);
        let out = rot_average_samples(std::slice::from_ref(&v), 9, 4).unwrap();
        let mom = |s: &[Vec3]| s.iter().fold(Vec3::ZERO, |a, b| a + *b);
        let en = |s: &[Vec3]| s.iter().map(|x| x.norm2()).sum::<f64>();
        for w in &out {
            assert!((mom(w) - mom(&v)).norm() < 1e-12);
            assert!((en(w) - en(&v)).abs() < 1e-12 * en(&v));
        }
    }

    #[test]
    fn transpose_inverts() {
        let mut rng = RandomSource::new(4, 0);
        let o = sample_fixed_momentum_rotation(4, &mut rng);
        let v = random_config(4, &mut rng);
        let back = o.apply_transpose(&o.apply(&v));
        for (a, b) in back.iter().zip(&v) {
            assert!((*a - *b).norm() < 1e-12);
        }
    }

    #[test]
    fn direction_uniform_on_momentum_slice() {
        // P = 2: the complement is ℝ³, so the projection of the rotated
        // relative part on a fixed unit vector is uniform on [−1, 1]
        let v = vec![Vec3::new(1.0, -0.5, 2.0), Vec3::new(0.2, 0.3, -1.0)];
        let out = rot_average_samples(&vec![v.clone(); 20_000], 5, 1).unwrap();
        let rel = |s: &[Vec3]| (s[0] - s[1]) * std::f64::consts::FRAC_1_SQRT_2;
        let r0 = rel(&v).norm();
        let proj: Vec<f64> = out.iter().map(|s| rel(s).x / r0).collect();
        let uniform: Vec<f64> = (0..20_000).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / 20_000.0).collect();
        assert!(ks_two_sample(&proj, &uniform).p_value > 0.01);
    }

    #[test]
    fn gaussian_input_is_invariant() {
        let mut rng = RandomSource::new(6, 0);
        let s: Vec<Vec<Vec3>> = (0..20_000).map(|_| (0..3).map(|_| sample_maxwellian(temp(1.0), &mut rng)).collect()).collect();
        let out = rot_average_samples(&s, 7, 1).unwrap();
        let a: Vec<f64> = s.iter().map(|c| c[0].x).collect();
        let b: Vec<f64> = out.iter().map(|c| c[0].x).collect();
        assert!(ks_two_sample(&a, &b).p_value > 0.01);
    }

    #[test]
    fn one_or_many_rotations_same_law() {
        let mut rng = RandomSource::new(8, 0);
        let s: Vec<Vec<Vec3>> = (0..16_000).map(|_| random_config(3, &mut rng)).collect();
        let many = rot_average_samples(&s[..2000], 1, 8).unwrap();
        let once = rot_average_samples(&s[2000..], 2, 1).unwrap();
        let a: Vec<f64> = many.iter().map(|c| c[1].y).collect();
        let b: Vec<f64> = once.iter().map(|c| c[1].y).collect();
        assert!(ks_two_sample(&a, &b).p_value > 0.01);
    }

    #[test]
    fn matching_temperature_is_vacuous() {
        let rep = verify_rota_bound(&ProductMaxwellian(temp(1.0)), 1, 4, temp(1.0), 20_000, 3).unwrap();
        assert!(rep.vacuous && rep.pass, "{rep:?}");
    }

    #[test]
    fn rejects_bad_k() {
        assert!(verify_rota_bound(&ProductMaxwellian(temp(1.0)), 4, 4, temp(1.0), 100, 3).is_err());
    }
}
