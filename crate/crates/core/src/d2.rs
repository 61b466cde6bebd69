//! Fourier-based `d₂` distance between laws on `ℝ^d`, from samples or from
//! analytic characteristic functions, on a structured grid of frequencies.
//!
//! Convention: `f̂(ξ) = E e^{iξ·v}`, so that
//! `d₂(Γ_{T₁}, Γ_{T₂}) = |T₁ − T₂| / 2`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetics::{RandomSource, Temperature, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum D2Error {
    #[error("sample dimension {got} does not match grid dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no samples")]
    EmptySamples,
    #[error("empty index set")]
    EmptyIndexSet,
    #[error("particle index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("characteristic functions live on different grids")]
    GridMismatch,
}

/// Frequencies `ξ = r·u` for every radius `r` and unit direction `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharFunGrid {
    pub dim: usize,
    pub radii: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
}

pub const GRID_RADII: usize = 64;
pub const GRID_EXTRA_DIRECTIONS: usize = 32;

impl CharFunGrid {
    pub fn new(dim: usize, radii: Vec<f64>, directions: Vec<Vec<f64>>) -> Result<Self, D2Error> {
        if dim == 0 || !dim.is_multiple_of(3) {
            return Err(D2Error::InvalidGrid(format!("dimension {dim} is not a positive multiple of 3")));
        }
        if radii.is_empty() || radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(D2Error::InvalidGrid("radii must be finite and positive".into()));
        }
        if radii.windows(2).any(|w| w[0] >= w[1]) {
            return Err(D2Error::InvalidGrid("radii must be strictly increasing".into()));
        }
        if directions.is_empty() {
            return Err(D2Error::InvalidGrid("no directions".into()));
        }
        for u in &directions {
            if u.len() != dim {
                return Err(D2Error::DimensionMismatch { expected: dim, got: u.len() });
            }
            let n: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-12 {
                return Err(D2Error::InvalidGrid(format!("direction with norm {n}")));
            }
        }
        Ok(Self { dim, radii, directions })
    }

    /// Coordinate axes, the diagonal and 32 quasi-random directions, times
    /// 64 log-spaced radii in `[1e−2, 1e2]`.
    pub fn structured(dim: usize) -> Result<Self, D2Error> {
        let mut directions = Vec::with_capacity(dim + 1 + GRID_EXTRA_DIRECTIONS);
        for a in 0..dim {
            let mut u = vec![0.0; dim];
            u[a] = 1.0;
            directions.push(u);
        }
        directions.push(vec![1.0 / (dim as f64).sqrt(); dim]);
        directions.extend(halton_directions(dim, GRID_EXTRA_DIRECTIONS));
        Self::new(dim, log_radii(1e-2, 1e2, GRID_RADII), directions)
    }

    /// Same directions with a different radius list.
    pub fn with_radii(&self, radii: Vec<f64>) -> Result<Self, D2Error> {
        Self::new(self.dim, radii, self.directions.clone())
    }

    /// Radii multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, D2Error> {
        self.with_radii(self.radii.iter().map(|r| r * factor).collect())
    }

    pub fn len(&self) -> usize {
        self.radii.len() * self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of `(direction, radius)`.
    pub fn index(&self, direction: usize, radius: usize) -> usize {
        direction * self.radii.len() + radius
    }

    pub fn point(&self, direction: usize, radius: usize) -> Vec<f64> {
        self.directions[direction].iter().map(|u| u * self.radii[radius]).collect()
    }
}

pub fn log_radii(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp()).collect()
}

fn primes(count: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut n = 2u64;
    while out.len() < count {
        if out.iter().take_while(|&&p| p * p <= n).all(|&p| !n.is_multiple_of(p)) {
            out.push(n);
        }
        n += 1;
    }
    out
}

fn radical_inverse(mut k: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut x = 0.0;
    while k > 0 {
        x += (k % base) as f64 * inv;
        k /= base;
        inv /= base as f64;
    }
    x
}

/// Unit vectors from Halton points pushed through Box–Muller and normalized.
fn halton_directions(dim: usize, count: usize) -> Vec<Vec<f64>> {
    let pairs = dim.div_ceil(2);
    let bases = primes(2 * pairs);
    (0..count as u64)
        .map(|k| {
            let idx = k + 17;
            let mut g = Vec::with_capacity(2 * pairs);
            for p in 0..pairs {
                let u1 = radical_inverse(idx, bases[2 * p]).max(1e-12);
                let u2 = radical_inverse(idx, bases[2 * p + 1]);
                let r = (-2.0 * u1.ln()).sqrt();
                let th = std::f64::consts::TAU * u2;
                g.push(r * th.cos());
                g.push(r * th.sin());
            }
            g.truncate(dim);
            let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            g.iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Sample characteristic function on a grid, with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCF {
    pub grid: CharFunGrid,
    /// Indexed by [`CharFunGrid::index`].
    pub values: Vec<Complex64>,
    pub stderr: Vec<f64>,
    /// Mean of `(u·v)²` per direction.
    pub second_moment: Vec<f64>,
    pub count: usize,
    pub symmetrized: bool,
}

/// Concatenate the particle velocities of each sample into one vector.
pub fn flatten(samples: &[Vec<Vec3>]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| s.iter().flat_map(|v| v.to_array()).collect()).collect()
}

/// Keep the listed particles of every sample.
pub fn marginal(samples: &[Vec<Vec3>], indices: &[usize]) -> Result<Vec<Vec<Vec3>>, D2Error> {
    if indices.is_empty() {
        return Err(D2Error::EmptyIndexSet);
    }
    let m = samples.first().map(Vec::len).unwrap_or(0);
    if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
        return Err(D2Error::IndexOutOfRange(bad));
    }
    Ok(samples.iter().map(|s| indices.iter().map(|&i| s[i]).collect()).collect())
}

fn projections(samples: &[Vec<f64>], u: &[f64]) -> Vec<f64> {
    samples.iter().map(|v| v.iter().zip(u).map(|(a, b)| a * b).sum()).collect()
}

fn check_samples(samples: &[Vec<f64>], dim: usize) -> Result<(), D2Error> {
    if samples.is_empty() {
        return Err(D2Error::EmptySamples);
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(D2Error::DimensionMismatch { expected: dim, got: bad.len() });
    }
    Ok(())
}

struct Accum {
    re: f64,
    im: f64,
    re2: f64,
    im2: f64,
}

fn standard_error(sum2: f64, sum: f64, n: f64) -> f64 {
    if n < 2.0 {
        return f64::NAN;
    }
    // s/√n, which equals the delete-one jackknife error of a sample mean
    let var = ((sum2 - sum * sum / n) / (n - 1.0)).max(0.0);
    (var / n).sqrt()
}

/// Sample mean of `e^{iξ·v}` at every grid point.
///
/// With `symmetrize`, the law is assumed invariant under `v → −v` and the
/// estimator averages `cos(ξ·v)`, whose imaginary part is exactly zero and
/// whose variance vanishes like `‖ξ‖⁴` at small frequencies.
pub fn empirical_cf(samples: &[Vec<f64>], grid: &CharFunGrid, symmetrize: bool) -> Result<EmpiricalCF, D2Error> {
    check_samples(samples, grid.dim)?;
    let n = samples.len() as f64;
    let per_direction: Vec<(Vec<Complex64>, Vec<f64>, f64)> = grid
        .directions
        .par_iter()
        .map(|u| {
            let p = projections(samples, u);
            let m2 = p.iter().map(|x| x * x).sum::<f64>() / n;
            let mut values = Vec::with_capacity(grid.radii.len());
            let mut errs = Vec::with_capacity(grid.radii.len());
            for &r in &grid.radii {
                let mut acc = Accum { re: 0.0, im: 0.0, re2: 0.0, im2: 0.0 };
                for &x in &p {
                    let (s, c) = (r * x).sin_cos();
                    acc.re += c;
                    acc.re2 += c * c;
                    if !symmetrize {
                        acc.im += s;
                        acc.im2 += s * s;
                    }
                }
                values.push(Complex64::new(acc.re / n, acc.im / n));
                let se_re = standard_error(acc.re2, acc.re, n);
                let se_im = if symmetrize { 0.0 } else { standard_error(acc.im2, acc.im, n) };
                errs.push((se_re * se_re + se_im * se_im).sqrt());
            }
            (values, errs, m2)
        })
        .collect();
    let mut values = Vec::with_capacity(grid.len());
    let mut stderr = Vec::with_capacity(grid.len());
    let mut second_moment = Vec::with_capacity(grid.directions.len());
    for (v, e, m2) in per_direction {
        values.extend(v);
        stderr.extend(e);
        second_moment.push(m2);
    }
    Ok(EmpiricalCF { grid: grid.clone(), values, stderr, second_moment, count: samples.len(), symmetrized: symmetrize })
}

/// `e^{−T‖ξ‖²/2}`.
pub fn gaussian_cf(t: Temperature, xi: &[f64]) -> Complex64 {
    let r2: f64 = xi.iter().map(|x| x * x).sum();
    Complex64::new((-t.value() * r2 / 2.0).exp(), 0.0)
}

/// One side of a `d₂` comparison.
#[derive(Clone, Copy)]
pub enum CfInput<'a> {
    Empirical(&'a EmpiricalCF),
    /// Product Maxwellian at temperature `T` in every coordinate.
    Gaussian(Temperature),
    Analytic(&'a (dyn Fn(&[f64]) -> Complex64 + Sync)),
}

impl CfInput<'_> {
    fn at(&self, grid: &CharFunGrid, d: usize, r: usize) -> (Complex64, f64) {
        match self {
            CfInput::Empirical(cf) => {
                let k = grid.index(d, r);
                (cf.values[k], cf.stderr[k])
            }
            CfInput::Gaussian(t) => (gaussian_cf(*t, &grid.point(d, r)), 0.0),
            CfInput::Analytic(f) => (f(&grid.point(d, r)), 0.0),
        }
    }

    fn second_moment(&self, d: usize) -> Option<f64> {
        match self {
            CfInput::Empirical(cf) => Some(cf.second_moment[d]),
            CfInput::Gaussian(t) => Some(t.value()),
            CfInput::Analytic(_) => None,
        }
    }

    fn count(&self) -> Option<usize> {
        match self {
            CfInput::Empirical(cf) => Some(cf.count),
            _ => None,
        }
    }

    fn grid(&self) -> Option<&CharFunGrid> {
        match self {
            CfInput::Empirical(cf) => Some(&cf.grid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct D2Estimate {
    pub value: f64,
    pub argmax_radius: f64,
    pub argmax_direction_index: usize,
    pub stderr: f64,
    pub noise_floor_radius: f64,
    /// False when the maximum sits on the noise floor above the smallest
    /// radius, i.e. it may be driven by noise.
    pub trusted: bool,
    /// `max_u |E(u·v)²_A − E(u·v)²_B| / 2`, the small-frequency limit.
    pub surrogate: Option<f64>,
    /// `max (|Δ| + 3·se)/‖ξ‖²` over the whole grid: a conservative upper
    /// value, usable when the estimate is not resolved from noise.
    pub upper_bound: f64,
    pub sample_counts: [Option<usize>; 2],
}

impl D2Estimate {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}

/// Ratio `|Δ|/‖ξ‖²` and its error at every grid point, then the noise-floor
/// rule and the maximum.
fn reduce_ratios(grid: &CharFunGrid, diff: &[f64], se: &[f64]) -> (usize, usize, f64, f64, usize) {
    let nr = grid.radii.len();
    let nd = grid.directions.len();
    // running maximum over radii ≥ r
    let mut tail_max = vec![f64::NEG_INFINITY; nr + 1];
    let mut tail_arg = vec![(0usize, 0usize); nr + 1];
    for r in (0..nr).rev() {
        let r2 = grid.radii[r] * grid.radii[r];
        tail_max[r] = tail_max[r + 1];
        tail_arg[r] = tail_arg[r + 1];
        for d in 0..nd {
            let v = diff[grid.index(d, r)] / r2;
            if v > tail_max[r] {
                tail_max[r] = v;
                tail_arg[r] = (d, r);
            }
        }
    }
    let noise = |r: usize| {
        let r2 = grid.radii[r] * grid.radii[r];
        (0..nd).map(|d| se[grid.index(d, r)] / r2).fold(0.0f64, f64::max)
    };
    let floor = (0..nr).find(|&r| noise(r) <= 0.25 * tail_max[r]).unwrap_or(nr - 1);
    let (d, r) = tail_arg[floor];
    (d, r, tail_max[floor], se[grid.index(d, r)] / (grid.radii[r] * grid.radii[r]), floor)
}

/// `sup |f̂_A − f̂_B| / ‖ξ‖²` over the trusted part of the grid.
///
/// Trusted radii are those from the smallest `r` with
/// `max_u se(r·u)/r² ≤ ¼·max_{r'≥r} |Δ(r'·u)|/r'²` upwards.
pub fn d2_estimate(a: CfInput<'_>, b: CfInput<'_>, grid: &CharFunGrid) -> Result<D2Estimate, D2Error> {
    for g in [a.grid(), b.grid()].into_iter().flatten() {
        if g != grid {
            return Err(D2Error::GridMismatch);
        }
    }
    let mut diff = vec![0.0; grid.len()];
    let mut se = vec![0.0; grid.len()];
    for d in 0..grid.directions.len() {
        for r in 0..grid.radii.len() {
            let (va, ea) = a.at(grid, d, r);
            let (vb, eb) = b.at(grid, d, r);
            let k = grid.index(d, r);
            diff[k] = (va - vb).norm();
            se[k] = (ea * ea + eb * eb).sqrt();
        }
    }
    let surrogate = (0..grid.directions.len())
        .map(|d| Some((a.second_moment(d)? - b.second_moment(d)?).abs() / 2.0))
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.into_iter().fold(0.0, f64::max));
    Ok(finish(grid, &diff, &se, surrogate, [a.count(), b.count()]))
}

fn finish(grid: &CharFunGrid, diff: &[f64], se: &[f64], surrogate: Option<f64>, counts: [Option<usize>; 2]) -> D2Estimate {
    let (d, r, value, stderr, floor) = reduce_ratios(grid, diff, se);
    let mut upper_bound: f64 = 0.0;
    for dir in 0..grid.directions.len() {
        for (ri, rad) in grid.radii.iter().enumerate() {
            let k = grid.index(dir, ri);
            upper_bound = upper_bound.max((diff[k] + 3.0 * se[k]) / (rad * rad));
        }
    }
    D2Estimate {
        value,
        argmax_radius: grid.radii[r],
        argmax_direction_index: d,
        stderr,
        noise_floor_radius: grid.radii[floor],
        trusted: !(r == floor && floor > 0),
        surrogate,
        upper_bound,
        sample_counts: counts,
    }
}

/// `d₂` between two laws sampled on a common probability space:
/// `a[k]` and `b[k]` are paired draws, and the CF difference is estimated
/// by the mean of the per-pair differences.
pub fn paired_d2(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    grid: &CharFunGrid,
    symmetrize: bool,
) -> Result<D2Estimate, D2Error> {
    paired_d2_grouped(a, b, 1, grid, symmetrize)
}

/// [`paired_d2`] where consecutive runs of `group` pairs are transformed
/// copies of one replica (see [`symmetry_copies`]). Differences are averaged
/// within each group first, so standard errors are computed across
/// replicas.
pub fn paired_d2_grouped(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    group: usize,
    grid: &CharFunGrid,
    symmetrize: bool,
) -> Result<D2Estimate, D2Error> {
    check_samples(a, grid.dim)?;
    check_samples(b, grid.dim)?;
    if a.len() != b.len() {
        return Err(D2Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if group == 0 || !a.len().is_multiple_of(group) {
        return Err(D2Error::InvalidGrid(format!("{} pairs do not split into groups of {group}", a.len())));
    }
    let n = (a.len() / group) as f64;
    let g = group as f64;
    let per_direction: Vec<(Vec<f64>, Vec<f64>, f64)> = grid
        .directions
        .par_iter()
        .map(|u| {
            let pa = projections(a, u);
            let pb = projections(b, u);
            let m2 = pa.iter().zip(&pb).map(|(x, y)| x * x - y * y).sum::<f64>() / (n * g);
            let mut diffs = Vec::with_capacity(grid.radii.len());
            let mut errs = Vec::with_capacity(grid.radii.len());
            for &r in &grid.radii {
                let mut acc = Accum { re: 0.0, im: 0.0, re2: 0.0, im2: 0.0 };
                for (ga, gb) in pa.chunks(group).zip(pb.chunks(group)) {
                    let (mut dc, mut ds) = (0.0, 0.0);
                    for (&x, &y) in ga.iter().zip(gb) {
                        if x == y {
                            continue;
                        }
                        let (sx, cx) = (r * x).sin_cos();
                        let (sy, cy) = (r * y).sin_cos();
                        dc += cx - cy;
                        ds += sx - sy;
                    }
                    let (dc, ds) = (dc / g, ds / g);
                    acc.re += dc;
                    acc.re2 += dc * dc;
                    if !symmetrize {
                        acc.im += ds;
                        acc.im2 += ds * ds;
                    }
                }
                diffs.push(Complex64::new(acc.re / n, acc.im / n).norm());
                let se_re = standard_error(acc.re2, acc.re, n);
                let se_im = if symmetrize { 0.0 } else { standard_error(acc.im2, acc.im, n) };
                errs.push((se_re * se_re + se_im * se_im).sqrt());
            }
            (diffs, errs, m2.abs() / 2.0)
        })
        .collect();
    let mut diff = Vec::with_capacity(grid.len());
    let mut se = Vec::with_capacity(grid.len());
    let mut surrogate: f64 = 0.0;
    for (d, e, s) in per_direction {
        diff.extend(d);
        se.extend(e);
        surrogate = surrogate.max(s);
    }
    let count = Some(a.len() / group);
    Ok(finish(grid, &diff, &se, Some(surrogate), [count, count]))
}

/// Haar rotation of `ℝ³` from a normalized Gaussian quaternion.
pub fn random_rotation(rng: &mut RandomSource) -> [[f64; 3]; 3] {
    let q = loop {
        let q = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            break q.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(r: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    Vec3::new(
        r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
        r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
        r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
    )
}

/// For laws invariant under a common rotation of all velocities and under
/// particle permutations: replace every pair `(a[k], b[k])` by `copies`
/// images under one random rotation and one random permutation each
/// (the same for both members), drawn from stream `k`. The output is
/// grouped for [`paired_d2_grouped`].
pub fn symmetry_copies(
    a: &[Vec<Vec3>],
    b: &[Vec<Vec3>],
    copies: usize,
    seed: u64,
) -> (Vec<Vec<Vec3>>, Vec<Vec<Vec3>>) {
    let pairs: Vec<(Vec<Vec<Vec3>>, Vec<Vec<Vec3>>)> = a
        .par_iter()
        .zip(b.par_iter())
        .enumerate()
        .map(|(k, (x, y))| {
            let mut rng = RandomSource::new(seed, k as u64);
            let mut ox = Vec::with_capacity(copies);
            let mut oy = Vec::with_capacity(copies);
            let mut perm: Vec<usize> = (0..x.len()).collect();
            for _ in 0..copies {
                let r = random_rotation(&mut rng);
                for i in (1..perm.len()).rev() {
                    perm.swap(i, rng.index(i + 1));
                }
                ox.push(perm.iter().map(|&i| rotate(&r, x[i])).collect());
                oy.push(perm.iter().map(|&i| rotate(&r, y[i])).collect());
            }
            (ox, oy)
        })
        .collect();
    let mut out_a = Vec::with_capacity(a.len() * copies);
    let mut out_b = Vec::with_capacity(a.len() * copies);
    for (x, y) in pairs {
        out_a.extend(x);
        out_b.extend(y);
    }
    (out_a, out_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{sample_maxwellian, RandomSource};
    use crate::stats::ks_two_sample;

    fn t(x: f64) -> Temperature {
        Temperature::new(x).unwrap()
    }

    fn gaussian_samples(temp: f64, count: usize, particles: usize, seed: u64) -> Vec<Vec<Vec3>> {
        let mut rng = RandomSource::new(seed, 0);
        (0..count).map(|_| (0..particles).map(|_| sample_maxwellian(t(temp), &mut rng)).collect()).collect()
    }

    #[test]
    fn structured_grid_shape() {
        let g = CharFunGrid::structured(6).unwrap();
        assert_eq!(g.directions.len(), 6 + 1 + 32);
        assert_eq!(g.radii.len(), 64);
        assert!((g.radii[0] - 1e-2).abs() < 1e-15 && (g.radii[63] - 1e2).abs() < 1e-10);
        assert!(CharFunGrid::structured(4).is_err());
        assert!(CharFunGrid::new(3, vec![1.0, 0.5], vec![vec![1.0, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn point_mass_cf_is_one() {
        let g = CharFunGrid::structured(3).unwrap();
        let cf = empirical_cf(&vec![vec![0.0; 3]; 5], &g, false).unwrap();
        assert!(cf.values.iter().all(|z| *z == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn gaussian_cf_examples() {
        assert_eq!(gaussian_cf(t(3.0), &[0.0, 0.0, 0.0]).re, 1.0);
        assert_eq!(gaussian_cf(t(0.0), &[5.0, 1.0, 2.0]).re, 1.0);
        assert!((gaussian_cf(t(2.0), &[0.0, 1.0, 0.0]).re - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn sampled_gaussian_cf_matches() {
        let k = 20_000;
        let g = CharFunGrid::structured(3).unwrap();
        let samples = flatten(&gaussian_samples(1.5, k, 1, 1));
        let cf = empirical_cf(&samples, &g, false).unwrap();
        for d in 0..g.directions.len() {
            for r in 0..g.radii.len() {
                let exact = gaussian_cf(t(1.5), &g.point(d, r));
                assert!((cf.values[g.index(d, r)] - exact).norm() <= 4.0 / (k as f64).sqrt());
            }
        }
    }

    #[test]
    fn antithetic_samples_have_real_cf() {
        let g = CharFunGrid::structured(3).unwrap();
        let base = flatten(&gaussian_samples(1.0, 100, 1, 2));
        let paired: Vec<Vec<f64>> =
            base.iter().flat_map(|v| [v.clone(), v.iter().map(|x| -x).collect()]).collect();
        let cf = empirical_cf(&paired, &g, false).unwrap();
        for d in 0..g.directions.len() {
            assert_eq!(cf.values[g.index(d, 0)].im, 0.0);
        }
    }

    #[test]
    fn analytic_gaussians() {
        let g = CharFunGrid::structured(3).unwrap();
        let same = d2_estimate(CfInput::Gaussian(t(1.0)), CfInput::Gaussian(t(1.0)), &g).unwrap();
        assert_eq!(same.value, 0.0);
        for (t1, t2) in [(1.0, 2.0), (0.5, 3.0), (2.0, 1.0)] {
            let e = d2_estimate(CfInput::Gaussian(t(t1)), CfInput::Gaussian(t(t2)), &g).unwrap();
            let want = (t1 - t2).abs() / 2.0;
            // sup is the r → 0 limit; the smallest radius 1e−2 is within 1e−4 relative
            assert!((e.value - want).abs() <= 1e-4 * want, "{} vs {want}", e.value);
            assert_eq!(e.argmax_radius, g.radii[0]);
            assert_eq!(e.surrogate, Some(want));
        }
    }

    #[test]
    fn sampled_gaussians_half_apart() {
        let g = CharFunGrid::structured(3).unwrap();
        let a = empirical_cf(&flatten(&gaussian_samples(1.0, 100_000, 1, 3)), &g, true).unwrap();
        let b = empirical_cf(&flatten(&gaussian_samples(2.0, 100_000, 1, 4)), &g, true).unwrap();
        let e = d2_estimate(CfInput::Empirical(&a), CfInput::Empirical(&b), &g).unwrap();
        assert!((e.value - 0.5).abs() <= 0.05, "{e:?}");
        assert!(e.trusted);
    }

    #[test]
    fn triangle_inequality() {
        let g = CharFunGrid::structured(3).unwrap();
        let cfs: Vec<EmpiricalCF> = [(1.0, 5), (1.6, 6), (2.5, 7)]
            .iter()
            .map(|&(temp, seed)| empirical_cf(&flatten(&gaussian_samples(temp, 20_000, 1, seed)), &g, true).unwrap())
            .collect();
        let d = |i: usize, j: usize| d2_estimate(CfInput::Empirical(&cfs[i]), CfInput::Empirical(&cfs[j]), &g).unwrap();
        let (ac, ab, bc) = (d(0, 2), d(0, 1), d(1, 2));
        let se = (ac.stderr.powi(2) + ab.stderr.powi(2) + bc.stderr.powi(2)).sqrt();
        assert!(ac.value <= ab.value + bc.value + 3.0 * se);
    }

    #[test]
    fn scale_covariance() {
        let g = CharFunGrid::structured(3).unwrap();
        let a = flatten(&gaussian_samples(1.0, 5_000, 1, 8));
        let b = flatten(&gaussian_samples(1.7, 5_000, 1, 9));
        let base = {
            let ca = empirical_cf(&a, &g, true).unwrap();
            let cb = empirical_cf(&b, &g, true).unwrap();
            d2_estimate(CfInput::Empirical(&ca), CfInput::Empirical(&cb), &g).unwrap()
        };
        let c = 3.0;
        let gs = g.scaled(1.0 / c).unwrap();
        let scale = |s: &[Vec<f64>]| -> Vec<Vec<f64>> { s.iter().map(|v| v.iter().map(|x| x * c).collect()).collect() };
        let ca = empirical_cf(&scale(&a), &gs, true).unwrap();
        let cb = empirical_cf(&scale(&b), &gs, true).unwrap();
        let scaled = d2_estimate(CfInput::Empirical(&ca), CfInput::Empirical(&cb), &gs).unwrap();
        assert!((scaled.value - c * c * base.value).abs() <= 1e-9 * scaled.value);
    }

    #[test]
    fn marginals() {
        let s = gaussian_samples(1.0, 4, 3, 10);
        assert_eq!(marginal(&s, &[0, 1, 2]).unwrap(), s);
        assert_eq!(marginal(&s, &[]), Err(D2Error::EmptyIndexSet));
        assert_eq!(marginal(&s, &[3]), Err(D2Error::IndexOutOfRange(3)));
        let big = gaussian_samples(1.0, 20_000, 3, 11);
        let norm = |s: Vec<Vec<Vec3>>| -> Vec<f64> { s.iter().map(|v| v[0].norm2()).collect() };
        let p = ks_two_sample(&norm(marginal(&big, &[0]).unwrap()), &norm(marginal(&big, &[2]).unwrap())).p_value;
        assert!(p > 0.01);
    }

    #[test]
    fn dimension_checks() {
        let g = CharFunGrid::structured(6).unwrap();
        assert!(matches!(empirical_cf(&[vec![0.0; 3]], &g, false), Err(D2Error::DimensionMismatch { .. })));
        assert_eq!(empirical_cf(&[], &g, false), Err(D2Error::EmptySamples));
    }

    #[test]
    fn paired_identical_samples_give_zero() {
        let g = CharFunGrid::structured(3).unwrap();
        let a = flatten(&gaussian_samples(1.0, 1000, 1, 12));
        let e = paired_d2(&a, &a, &g, true).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn json_line_roundtrip() {
        let g = CharFunGrid::structured(3).unwrap();
        let e = d2_estimate(CfInput::Gaussian(t(1.0)), CfInput::Gaussian(t(2.0)), &g).unwrap();
        let back: D2Estimate = serde_json::from_str(&e.to_json_line()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn rotations_are_proper_orthogonal() {
        let mut rng = RandomSource::new(3, 0);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                    assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-12);
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotations_spread_a_fixed_vector_uniformly() {
        let mut rng = RandomSource::new(4, 0);
        let e = Vec3::new(0.0, 0.0, 1.0);
        // the rotated axis is uniform on the sphere, so its z-coordinate is uniform on [−1, 1]
        let zs: Vec<f64> = (0..20_000).map(|_| rotate(&random_rotation(&mut rng), e).z).collect();
        let mut rng = RandomSource::new(5, 0);
        let uniform: Vec<f64> = (0..20_000).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        assert!(ks_two_sample(&zs, &uniform).p_value > 0.001);
    }

    #[test]
    fn single_groups_match_plain_pairing() {
        let g = CharFunGrid::structured(6).unwrap();
        let a = flatten(&gaussian_samples(1.0, 500, 2, 11));
        let b = flatten(&gaussian_samples(1.3, 500, 2, 12));
        assert_eq!(paired_d2(&a, &b, &g, true).unwrap(), paired_d2_grouped(&a, &b, 1, &g, true).unwrap());
        assert!(paired_d2_grouped(&a, &b, 3, &g, true).is_err());
    }

    #[test]
    fn grouping_averages_before_the_error() {
        // two identical copies per group halve nothing: the mean is unchanged
        // and the count is the number of groups
        let g = CharFunGrid::structured(3).unwrap();
        let a = gaussian_samples(1.0, 400, 1, 13);
        let b = gaussian_samples(2.0, 400, 1, 14);
        let twice = |s: &[Vec<Vec3>]| s.iter().flat_map(|x| [x.clone(), x.clone()]).collect::<Vec<_>>();
        let plain = paired_d2(&flatten(&a), &flatten(&b), &g, true).unwrap();
        let grouped = paired_d2_grouped(&flatten(&twice(&a)), &flatten(&twice(&b)), 2, &g, true).unwrap();
        assert!((plain.value - grouped.value).abs() <= 1e-12 * plain.value);
        assert!((plain.stderr - grouped.stderr).abs() <= 1e-9 * plain.stderr);
        assert_eq!(grouped.sample_counts, [Some(400), Some(400)]);
    }

    #[test]
    fn symmetry_copies_keep_pairs_aligned() {
        let a = gaussian_samples(1.0, 20, 3, 15);
        let (ca, cb) = symmetry_copies(&a, &a, 4, 9);
        assert_eq!(ca.len(), 80);
        assert_eq!(ca, cb);
        let b = gaussian_samples(2.0, 20, 3, 16);
        let (xa, xb) = symmetry_copies(&a, &b, 4, 9);
        for k in 0..80 {
            let orig = k / 4;
            // a common orthogonal map preserves the inner products between the members
            let inner = |x: &[Vec3], y: &[Vec3]| x.iter().zip(y).map(|(u, v)| u.dot(*v)).sum::<f64>();
            assert!((inner(&xa[k], &xb[k]) - inner(&a[orig], &b[orig])).abs() < 1e-10);
            let energy = |x: &[Vec3]| x.iter().map(|u| u.norm2()).sum::<f64>();
            assert!((energy(&xa[k]) - energy(&a[orig])).abs() < 1e-10);
        }
        assert_eq!(symmetry_copies(&a, &b, 4, 9), (xa, xb));
    }

    #[test]
    fn upper_bound_dominates_the_estimate() {
        let g = CharFunGrid::structured(3).unwrap();
        let a = flatten(&gaussian_samples(1.0, 2000, 1, 17));
        let b = flatten(&gaussian_samples(1.1, 2000, 1, 18));
        let e = paired_d2(&a, &b, &g, true).unwrap();
        assert!(e.upper_bound >= e.value);
    }
}
