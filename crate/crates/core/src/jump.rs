//! Exact event-driven simulation of the Kac jump processes: the system alone,
//! the system coupled to one or two finite reservoirs, and the system coupled
//! to one or two Maxwellian thermostats.
//!
//! The generator is bounded, so trajectories are generated exactly: an
//! exponential holding time at the total rate, then an event category chosen
//! proportionally to its rate, then a uniformly chosen pair inside the
//! category. Time is measured in units of the system mean free flight.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetics::{
    collide_unit, sample_maxwellian, sample_unit_sphere, thermostat_collide, RandomSource, Temperature, Vec3,
};
use crate::stats::mean_stderr;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JumpError {
    #[error("invalid generator: {0}")]
    InvalidSpec(String),
    #[error("cannot step a configuration whose total jump rate is zero")]
    ZeroRate,
    #[error("state does not match the generator: {0}")]
    ShapeMismatch(String),
    #[error("invalid ensemble request: {0}")]
    InvalidRequest(String),
    #[error("snapshot file: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    SystemOnly,
    OneReservoir,
    TwoReservoirs,
    OneThermostat,
    TwoThermostats,
}

impl Topology {
    pub fn name(self) -> &'static str {
        match self {
            Topology::SystemOnly => "system_only",
            Topology::OneReservoir => "one_reservoir",
            Topology::TwoReservoirs => "two_reservoirs",
            Topology::OneThermostat => "one_thermostat",
            Topology::TwoThermostats => "two_thermostats",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Topology::SystemOnly,
            Topology::OneReservoir,
            Topology::TwoReservoirs,
            Topology::OneThermostat,
            Topology::TwoThermostats,
        ]
        .into_iter()
        .find(|t| t.name() == s)
    }

    pub fn reservoirs(self) -> usize {
        match self {
            Topology::OneReservoir => 1,
            Topology::TwoReservoirs => 2,
            _ => 0,
        }
    }

    pub fn thermostats(self) -> usize {
        match self {
            Topology::OneThermostat => 1,
            Topology::TwoThermostats => 2,
            _ => 0,
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which generator runs, with its rates and bath temperatures.
///
/// The system collision rate λ_S is fixed to one. One-sided topologies use
/// `t_plus` only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub m: usize,
    pub topology: Topology,
    pub n: usize,
    pub lambda_r: f64,
    pub mu: f64,
    pub t_plus: Temperature,
    pub t_minus: Temperature,
}

impl GeneratorSpec {
    pub fn new(
        m: usize,
        topology: Topology,
        n: usize,
        lambda_r: f64,
        mu: f64,
        t_plus: f64,
        t_minus: f64,
    ) -> Result<Self, JumpError> {
        let temp = |v: f64| Temperature::new(v).map_err(|e| JumpError::InvalidSpec(e.to_string()));
        let spec = Self { m, topology, n, lambda_r, mu, t_plus: temp(t_plus)?, t_minus: temp(t_minus)? };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), JumpError> {
        let bad = |msg: String| Err(JumpError::InvalidSpec(msg));
        if self.m < 1 {
            return bad("system needs at least one particle".into());
        }
        if self.topology.reservoirs() > 0 && self.n < 2 {
            return bad(format!("reservoir size must be at least 2, got {}", self.n));
        }
        if !(self.lambda_r.is_finite() && self.lambda_r >= 0.0) {
            return bad(format!("reservoir rate must be non-negative, got {}", self.lambda_r));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return bad(format!("interaction rate must be non-negative, got {}", self.mu));
        }
        let two_sided = matches!(self.topology, Topology::TwoReservoirs | Topology::TwoThermostats);
        if two_sided && self.t_plus < self.t_minus {
            return bad(format!(
                "expected T+ >= T-, got {} < {}",
                self.t_plus.value(),
                self.t_minus.value()
            ));
        }
        Ok(())
    }

    /// Rate of every event category present in this topology.
    pub fn event_rates(&self) -> Vec<(EventKind, f64)> {
        let m = self.m as f64;
        let n = self.n as f64;
        let system = if self.m >= 2 { m / 2.0 } else { 0.0 };
        let mut out = vec![(EventKind::System, system)];
        let reservoir = self.lambda_r * n / 2.0;
        match self.topology {
            Topology::SystemOnly => {}
            Topology::OneReservoir => {
                out.push((EventKind::ReservoirPlus, reservoir));
                out.push((EventKind::InteractionPlus, self.mu * m));
            }
            Topology::TwoReservoirs => {
                out.push((EventKind::ReservoirPlus, reservoir));
                out.push((EventKind::ReservoirMinus, reservoir));
                out.push((EventKind::InteractionPlus, self.mu * m));
                out.push((EventKind::InteractionMinus, self.mu * m));
            }
            Topology::OneThermostat => out.push((EventKind::ThermostatPlus, self.mu * m)),
            Topology::TwoThermostats => {
                out.push((EventKind::ThermostatPlus, self.mu * m));
                out.push((EventKind::ThermostatMinus, self.mu * m));
            }
        }
        out
    }

    /// Total jump intensity of the generator.
    pub fn total_rate(&self) -> f64 {
        self.event_rates().iter().map(|(_, r)| r).sum()
    }

    /// Same rates with the reservoirs replaced by thermostats at their
    /// initial temperatures.
    pub fn thermostat_counterpart(&self) -> Self {
        let topology = match self.topology {
            Topology::OneReservoir => Topology::OneThermostat,
            Topology::TwoReservoirs => Topology::TwoThermostats,
            t => t,
        };
        Self { topology, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    System,
    ReservoirPlus,
    ReservoirMinus,
    InteractionPlus,
    InteractionMinus,
    ThermostatPlus,
    ThermostatMinus,
}

/// Cumulative category weights for inverse-CDF selection.
#[derive(Debug, Clone)]
struct EventTable {
    kinds: Vec<EventKind>,
    cumulative: Vec<f64>,
    total: f64,
}

impl EventTable {
    fn new(spec: &GeneratorSpec) -> Self {
        let mut kinds = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (kind, rate) in spec.event_rates() {
            if rate > 0.0 {
                acc += rate;
                kinds.push(kind);
                cumulative.push(acc);
            }
        }
        Self { kinds, cumulative, total: acc }
    }

    fn pick(&self, rng: &mut RandomSource) -> EventKind {
        let u = rng.uniform() * self.total;
        let idx = self.cumulative.iter().position(|&c| u < c).unwrap_or(self.kinds.len() - 1);
        self.kinds[idx]
    }
}

/// The full microstate; absent reservoirs are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityBlock {
    pub system: Vec<Vec3>,
    pub reservoir_plus: Vec<Vec3>,
    pub reservoir_minus: Vec<Vec3>,
    pub time: f64,
}

impl VelocityBlock {
    /// Initial state `Γ₊ f₀ Γ₋`: the given system velocities with the
    /// topology's reservoirs drawn from their Maxwellians.
    pub fn initial(spec: &GeneratorSpec, system: Vec<Vec3>, rng: &mut RandomSource) -> Self {
        let draw = |t: Temperature, rng: &mut RandomSource| (0..spec.n).map(|_| sample_maxwellian(t, rng)).collect();
        let reservoir_plus = if spec.topology.reservoirs() >= 1 { draw(spec.t_plus, rng) } else { Vec::new() };
        let reservoir_minus = if spec.topology.reservoirs() >= 2 { draw(spec.t_minus, rng) } else { Vec::new() };
        Self { system, reservoir_plus, reservoir_minus, time: 0.0 }
    }

    pub fn check_shape(&self, spec: &GeneratorSpec) -> Result<(), JumpError> {
        let want = |len: usize, expect: usize, what: &str| {
            if len == expect {
                Ok(())
            } else {
                Err(JumpError::ShapeMismatch(format!("{what} has {len} particles, expected {expect}")))
            }
        };
        want(self.system.len(), spec.m, "system")?;
        let r = spec.topology.reservoirs();
        want(self.reservoir_plus.len(), if r >= 1 { spec.n } else { 0 }, "reservoir_plus")?;
        want(self.reservoir_minus.len(), if r >= 2 { spec.n } else { 0 }, "reservoir_minus")
    }

    fn all(&self) -> impl Iterator<Item = &Vec3> {
        self.system.iter().chain(&self.reservoir_plus).chain(&self.reservoir_minus)
    }

    pub fn total_momentum(&self) -> Vec3 {
        self.all().fold(Vec3::ZERO, |acc, v| acc + *v)
    }

    pub fn total_energy(&self) -> f64 {
        self.all().map(|v| v.norm2()).sum()
    }

    pub fn block(&self, block: Block) -> &[Vec3] {
        match block {
            Block::System => &self.system,
            Block::ReservoirPlus => &self.reservoir_plus,
            Block::ReservoirMinus => &self.reservoir_minus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    System,
    ReservoirPlus,
    ReservoirMinus,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::System => "system",
            Block::ReservoirPlus => "plus",
            Block::ReservoirMinus => "minus",
        }
    }
}

#[inline]
fn distinct_pair(len: usize, rng: &mut RandomSource) -> (usize, usize) {
    let i = rng.index(len);
    let mut j = rng.index(len - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

#[inline]
fn collide_within(block: &mut [Vec3], rng: &mut RandomSource) {
    let (i, j) = distinct_pair(block.len(), rng);
    let omega = sample_unit_sphere(rng);
    let (a, b) = collide_unit(block[i], block[j], omega);
    block[i] = a;
    block[j] = b;
}

#[inline]
fn collide_across(system: &mut [Vec3], reservoir: &mut [Vec3], rng: &mut RandomSource) {
    let r = rng.index(reservoir.len());
    let s = rng.index(system.len());
    let omega = sample_unit_sphere(rng);
    let (a, b) = collide_unit(system[s], reservoir[r], omega);
    system[s] = a;
    reservoir[r] = b;
}

fn apply_event(state: &mut VelocityBlock, spec: &GeneratorSpec, kind: EventKind, rng: &mut RandomSource) {
    match kind {
        EventKind::System => collide_within(&mut state.system, rng),
        EventKind::ReservoirPlus => collide_within(&mut state.reservoir_plus, rng),
        EventKind::ReservoirMinus => collide_within(&mut state.reservoir_minus, rng),
        EventKind::InteractionPlus => collide_across(&mut state.system, &mut state.reservoir_plus, rng),
        EventKind::InteractionMinus => collide_across(&mut state.system, &mut state.reservoir_minus, rng),
        EventKind::ThermostatPlus | EventKind::ThermostatMinus => {
            let t = if kind == EventKind::ThermostatPlus { spec.t_plus } else { spec.t_minus };
            let s = rng.index(state.system.len());
            state.system[s] = thermostat_collide(state.system[s], t, rng);
        }
    }
}

/// Advance by one jump: exponential holding time, then one collision event.
pub fn step(state: &mut VelocityBlock, spec: &GeneratorSpec, rng: &mut RandomSource) -> Result<EventKind, JumpError> {
    let table = EventTable::new(spec);
    if table.total <= 0.0 {
        return Err(JumpError::ZeroRate);
    }
    state.time += rng.exponential(table.total);
    let kind = table.pick(rng);
    apply_event(state, spec, kind, rng);
    Ok(kind)
}

/// Run the process up to `t_end`, returning the number of events.
///
/// The final time is set to `t_end`; the last drawn holding time that would
/// overshoot is discarded, which is exact by memorylessness.
pub fn evolve(
    state: &mut VelocityBlock,
    spec: &GeneratorSpec,
    t_end: f64,
    rng: &mut RandomSource,
) -> Result<u64, JumpError> {
    if t_end < state.time {
        return Err(JumpError::InvalidRequest(format!(
            "t_end {t_end} is before the current time {}",
            state.time
        )));
    }
    let table = EventTable::new(spec);
    let mut events = 0u64;
    if table.total > 0.0 {
        loop {
            let dt = rng.exponential(table.total);
            if state.time + dt > t_end {
                break;
            }
            state.time += dt;
            let kind = table.pick(rng);
            apply_event(state, spec, kind, rng);
            events += 1;
        }
    }
    state.time = t_end;
    Ok(events)
}

/// Source of i.i.d. initial system configurations f₀.
pub trait SystemSampler: Sync {
    fn sample(&self, m: usize, rng: &mut RandomSource) -> Vec<Vec3>;
    fn describe(&self) -> String;
}

/// Product Maxwellian Γ_T^M.
#[derive(Debug, Clone, Copy)]
pub struct ProductMaxwellian(pub Temperature);

impl SystemSampler for ProductMaxwellian {
    fn sample(&self, m: usize, rng: &mut RandomSource) -> Vec<Vec3> {
        (0..m).map(|_| sample_maxwellian(self.0, rng)).collect()
    }

    fn describe(&self) -> String {
        format!("product_maxwellian(T={})", self.0.value())
    }
}

/// Each particle independently drawn from `p·Γ_hot + (1−p)·Γ_cold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoTemperatureMixture {
    pub cold: Temperature,
    pub hot: Temperature,
    pub hot_fraction: f64,
}

impl SystemSampler for TwoTemperatureMixture {
    fn sample(&self, m: usize, rng: &mut RandomSource) -> Vec<Vec3> {
        (0..m)
            .map(|_| {
                let t = if rng.uniform() < self.hot_fraction { self.hot } else { self.cold };
                sample_maxwellian(t, rng)
            })
            .collect()
    }

    fn describe(&self) -> String {
        format!(
            "mixture(cold={}, hot={}, p_hot={})",
            self.cold.value(),
            self.hot.value(),
            self.hot_fraction
        )
    }
}

/// Every coordinate independently `±amplitude` with probability ½.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPointProduct {
    pub amplitude: f64,
}

impl SystemSampler for TwoPointProduct {
    fn sample(&self, m: usize, rng: &mut RandomSource) -> Vec<Vec3> {
        let mut sign = || if rng.uniform() < 0.5 { -self.amplitude } else { self.amplitude };
        (0..m).map(|_| Vec3::new(sign(), sign(), sign())).collect()
    }

    fn describe(&self) -> String {
        format!("two_point(a={})", self.amplitude)
    }
}

/// Scalar channels recorded along trajectories. Energies are per degree of
/// freedom, so a block in equilibrium at temperature T reads T.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Observable {
    EnergySystem,
    EnergyPlus,
    EnergyMinus,
    EnergyTotal,
    /// Mean pure fourth moment of the system coordinates, `(1/3M) Σ v_{i,a}⁴`.
    FourthMomentSystem,
    MomentumSystemX,
}

impl Observable {
    pub fn name(self) -> &'static str {
        match self {
            Observable::EnergySystem => "e_S",
            Observable::EnergyPlus => "e_plus",
            Observable::EnergyMinus => "e_minus",
            Observable::EnergyTotal => "e_total",
            Observable::FourthMomentSystem => "m4_S",
            Observable::MomentumSystemX => "p_S_x",
        }
    }

    pub fn evaluate(self, state: &VelocityBlock) -> f64 {
        let energy = |b: &[Vec3]| {
            if b.is_empty() {
                f64::NAN
            } else {
                b.iter().map(|v| v.norm2()).sum::<f64>() / (3.0 * b.len() as f64)
            }
        };
        match self {
            Observable::EnergySystem => energy(&state.system),
            Observable::EnergyPlus => energy(&state.reservoir_plus),
            Observable::EnergyMinus => energy(&state.reservoir_minus),
            Observable::EnergyTotal => {
                let count = state.system.len() + state.reservoir_plus.len() + state.reservoir_minus.len();
                state.total_energy() / (3.0 * count as f64)
            }
            Observable::FourthMomentSystem => {
                state.system.iter().map(|v| v.x.powi(4) + v.y.powi(4) + v.z.powi(4)).sum::<f64>()
                    / (3.0 * state.system.len() as f64)
            }
            Observable::MomentumSystemX => state.system.iter().map(|v| v.x).sum(),
        }
    }
}

/// Ensemble averages of the requested channels at the observation times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub channels: Vec<String>,
    /// `mean[channel][time]`
    pub mean: Vec<Vec<f64>>,
    /// `stderr[channel][time]`; `None` when only one replica ran.
    pub stderr: Vec<Vec<Option<f64>>>,
    pub event_count: u64,
    pub replicas: usize,
}

impl TrajectoryRecord {
    pub fn channel(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }
}

/// Per-replica velocities of one block at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub block: Block,
    /// `replicas[r][particle]`
    pub replicas: Vec<Vec<Vec3>>,
}

#[derive(Debug, Clone)]
pub struct EnsembleRequest {
    pub replicas: usize,
    pub times: Vec<f64>,
    pub observables: Vec<Observable>,
    pub seed: u64,
    /// Times (a subset of `times`) at which raw velocities are kept.
    pub snapshot_times: Vec<f64>,
    pub snapshot_blocks: Vec<Block>,
}

impl EnsembleRequest {
    pub fn new(replicas: usize, times: Vec<f64>, observables: Vec<Observable>, seed: u64) -> Self {
        Self { replicas, times, observables, seed, snapshot_times: Vec::new(), snapshot_blocks: vec![Block::System] }
    }

    pub fn with_snapshots(mut self, times: Vec<f64>, blocks: Vec<Block>) -> Self {
        self.snapshot_times = times;
        self.snapshot_blocks = blocks;
        self
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub record: TrajectoryRecord,
    pub snapshots: Vec<Snapshot>,
}

struct ReplicaOutput {
    values: Vec<Vec<f64>>,
    snapshots: Vec<Vec<Vec3>>,
    events: u64,
}

/// Run independent replicas (replica `r` uses stream `r`) and average the
/// observables. The reduction runs in replica order, so results do not
/// depend on the number of worker threads.
pub fn run_ensemble(
    spec: &GeneratorSpec,
    sampler: &dyn SystemSampler,
    request: &EnsembleRequest,
) -> Result<EnsembleResult, JumpError> {
    spec.validate()?;
    if request.replicas == 0 {
        return Err(JumpError::InvalidRequest("at least one replica is required".into()));
    }
    if request.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(JumpError::InvalidRequest("observation times must be finite and non-negative".into()));
    }
    if request.times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(JumpError::InvalidRequest("observation times must be strictly increasing".into()));
    }
    let snap_idx: Vec<usize> = request
        .snapshot_times
        .iter()
        .map(|t| {
            request
                .times
                .iter()
                .position(|x| x == t)
                .ok_or_else(|| JumpError::InvalidRequest(format!("snapshot time {t} is not an observation time")))
        })
        .collect::<Result<_, _>>()?;

    let outputs: Vec<ReplicaOutput> = (0..request.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = RandomSource::new(request.seed, r as u64);
            let system = sampler.sample(spec.m, &mut rng);
            let mut state = VelocityBlock::initial(spec, system, &mut rng);
            let mut values = vec![Vec::with_capacity(request.times.len()); request.observables.len()];
            let mut snapshots = Vec::new();
            let mut events = 0;
            for (ti, &t) in request.times.iter().enumerate() {
                events += evolve(&mut state, spec, t, &mut rng).expect("validated horizon");
                for (ci, obs) in request.observables.iter().enumerate() {
                    values[ci].push(obs.evaluate(&state));
                }
                if snap_idx.contains(&ti) {
                    for &b in &request.snapshot_blocks {
                        snapshots.push(state.block(b).to_vec());
                    }
                }
            }
            ReplicaOutput { values, snapshots, events }
        })
        .collect();

    let nt = request.times.len();
    let mut mean = Vec::with_capacity(request.observables.len());
    let mut stderr = Vec::with_capacity(request.observables.len());
    let mut column = vec![0.0; outputs.len()];
    for ci in 0..request.observables.len() {
        let mut m_row = Vec::with_capacity(nt);
        let mut s_row = Vec::with_capacity(nt);
        for ti in 0..nt {
            for (r, out) in outputs.iter().enumerate() {
                column[r] = out.values[ci][ti];
            }
            let (m, s) = mean_stderr(&column);
            m_row.push(m);
            s_row.push(s);
        }
        mean.push(m_row);
        stderr.push(s_row);
    }

    let nb = request.snapshot_blocks.len();
    let mut snapshots = Vec::new();
    for (si, &ti) in snap_idx.iter().enumerate() {
        for (bi, &block) in request.snapshot_blocks.iter().enumerate() {
            let replicas = outputs.iter().map(|o| o.snapshots[si * nb + bi].clone()).collect();
            snapshots.push(Snapshot { time: request.times[ti], block, replicas });
        }
    }

    let record = TrajectoryRecord {
        times: request.times.clone(),
        channels: request.observables.iter().map(|o| o.name().to_string()).collect(),
        mean,
        stderr,
        event_count: outputs.iter().map(|o| o.events).sum(),
        replicas: request.replicas,
    };
    Ok(EnsembleResult { record, snapshots })
}

/// System blocks of a reservoir run and of its thermostat counterpart,
/// generated on a common probability space.
#[derive(Debug, Clone)]
pub struct CoupledSystems {
    pub time: f64,
    pub reservoir: Vec<Vec<Vec3>>,
    pub thermostat: Vec<Vec<Vec3>>,
    /// Fraction of replicas in which the two system blocks differ at `time`.
    pub decoupled_fraction: f64,
}

/// Simulate a reservoir topology together with its thermostat counterpart.
///
/// Both runs share the event clock, pair choices and impact directions. A
/// reservoir particle that has never collided with anything outside the
/// set of untouched reservoir particles is still an independent draw from
/// its Maxwellian (collisions among such particles are orthogonal maps of a
/// product Gaussian), so when the reservoir run picks one for an interaction
/// the thermostat run uses the same velocity as its virtual particle; if the
/// particle is tainted the thermostat draws a fresh Maxwellian instead. Each
/// run has exactly its own law; only their joint law is coupled.
pub fn run_coupled_systems(
    spec: &GeneratorSpec,
    sampler: &dyn SystemSampler,
    replicas: usize,
    t_end: f64,
    seed: u64,
) -> Result<CoupledSystems, JumpError> {
    spec.validate()?;
    if spec.topology.reservoirs() == 0 {
        return Err(JumpError::InvalidSpec("coupled runs need a reservoir topology".into()));
    }
    if replicas == 0 || !(t_end.is_finite() && t_end >= 0.0) {
        return Err(JumpError::InvalidRequest("need replicas >= 1 and a finite t_end >= 0".into()));
    }
    let table = EventTable::new(spec);
    let pairs: Vec<(Vec<Vec3>, Vec<Vec3>)> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = RandomSource::new(seed, r as u64);
            let system = sampler.sample(spec.m, &mut rng);
            let mut state = VelocityBlock::initial(spec, system, &mut rng);
            let mut shadow = state.system.clone();
            let mut pristine_plus = vec![true; state.reservoir_plus.len()];
            let mut pristine_minus = vec![true; state.reservoir_minus.len()];
            let mut time = 0.0;
            loop {
                time += rng.exponential(table.total);
                if time > t_end {
                    break;
                }
                match table.pick(&mut rng) {
                    EventKind::System => {
                        let (i, j) = distinct_pair(spec.m, &mut rng);
                        let omega = sample_unit_sphere(&mut rng);
                        let (a, b) = collide_unit(state.system[i], state.system[j], omega);
                        state.system[i] = a;
                        state.system[j] = b;
                        let (a, b) = collide_unit(shadow[i], shadow[j], omega);
                        shadow[i] = a;
                        shadow[j] = b;
                    }
                    kind @ (EventKind::ReservoirPlus | EventKind::ReservoirMinus) => {
                        let (block, pristine) = if kind == EventKind::ReservoirPlus {
                            (&mut state.reservoir_plus, &mut pristine_plus)
                        } else {
                            (&mut state.reservoir_minus, &mut pristine_minus)
                        };
                        let (i, j) = distinct_pair(block.len(), &mut rng);
                        let omega = sample_unit_sphere(&mut rng);
                        let (a, b) = collide_unit(block[i], block[j], omega);
                        block[i] = a;
                        block[j] = b;
                        let both = pristine[i] && pristine[j];
                        pristine[i] = both;
                        pristine[j] = both;
                    }
                    kind @ (EventKind::InteractionPlus | EventKind::InteractionMinus) => {
                        let (block, pristine, t) = if kind == EventKind::InteractionPlus {
                            (&mut state.reservoir_plus, &mut pristine_plus, spec.t_plus)
                        } else {
                            (&mut state.reservoir_minus, &mut pristine_minus, spec.t_minus)
                        };
                        let ri = rng.index(block.len());
                        let s = rng.index(spec.m);
                        let omega = sample_unit_sphere(&mut rng);
                        let virtual_particle =
                            if pristine[ri] { block[ri] } else { sample_maxwellian(t, &mut rng) };
                        let (a, b) = collide_unit(state.system[s], block[ri], omega);
                        state.system[s] = a;
                        block[ri] = b;
                        shadow[s] = collide_unit(shadow[s], virtual_particle, omega).0;
                        pristine[ri] = false;
                    }
                    EventKind::ThermostatPlus | EventKind::ThermostatMinus => unreachable!("reservoir topology"),
                }
            }
            (state.system, shadow)
        })
        .collect();
    let differing = pairs.iter().filter(|(a, b)| a != b).count();
    let (reservoir, thermostat) = pairs.into_iter().unzip();
    Ok(CoupledSystems { time: t_end, reservoir, thermostat, decoupled_fraction: differing as f64 / replicas as f64 })
}

pub const SNAPSHOT_HEADER: &str = "replica_index,particle_index,vx,vy,vz";

/// Write one block per replica as CSV rows
/// `replica_index,particle_index,vx,vy,vz`, 17 significant digits.
pub fn write_snapshot_csv(path: &std::path::Path, replicas: &[Vec<Vec3>]) -> Result<(), JumpError> {
    use std::io::Write;
    let io = |e: std::io::Error| JumpError::Snapshot(format!("{}: {e}", path.display()));
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "{SNAPSHOT_HEADER}").map_err(io)?;
    for (r, block) in replicas.iter().enumerate() {
        for (i, v) in block.iter().enumerate() {
            writeln!(out, "{r},{i},{:.16e},{:.16e},{:.16e}", v.x, v.y, v.z).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Inverse of [`write_snapshot_csv`]. Rows must be grouped by replica with
/// consecutive particle indices.
pub fn read_snapshot_csv(path: &std::path::Path) -> Result<Vec<Vec<Vec3>>, JumpError> {
    let text = std::fs::read_to_string(path).map_err(|e| JumpError::Snapshot(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SNAPSHOT_HEADER) {
        return Err(JumpError::Snapshot("missing or wrong header".into()));
    }
    let mut out: Vec<Vec<Vec3>> = Vec::new();
    for (ln, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| JumpError::Snapshot(format!("line {}: {what}", ln + 2));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let r: usize = fields[0].parse().map_err(|_| bad("bad replica index"))?;
        let i: usize = fields[1].parse().map_err(|_| bad("bad particle index"))?;
        let mut c = [0.0; 3];
        for (k, f) in fields[2..].iter().enumerate() {
            c[k] = f.parse().map_err(|_| bad("bad velocity component"))?;
        }
        if r == out.len() {
            out.push(Vec::new());
        }
        if r + 1 != out.len() || i != out[r].len() {
            return Err(bad("rows out of order"));
        }
        out[r].push(Vec3::from(c));
    }
    Ok(out)
}
