//! Monte-Carlo model of the electrically pulsed quantum-dot pair source.
//!
//! Each clock cycle may fire one biexciton cascade. The XX photon is emitted
//! after the excitation pulse and an exponential biexciton lifetime; the X
//! photon follows after the exciton lifetime. The pair is left in
//! `(|HH⟩ + e^{iφ}|VV⟩)/√2` where `φ` grows linearly with the XX–X delay at a
//! rate set by the fine structure splitting.
//!
//! Randomness is keyed per block of [`BLOCK_CYCLES`] cycles, so any cycle
//! range regenerates identically whether it is produced alone, as part of a
//! longer run, or block-parallel.

use std::f64::consts::SQRT_2;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polarization::{JonesMatrix, JonesVector, PolarizationTransform};
use crate::rng::stream_rng;
use crate::timetag::ClockFrame;

/// Reduced Planck constant in eV·s.
pub const HBAR_EV_S: f64 = 6.582_119_569e-16;
/// Planck constant in eV·s.
pub const PLANCK_EV_S: f64 = 4.135_667_696e-15;
/// Ratio between a Gaussian's FWHM and its standard deviation.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

pub const BLOCK_CYCLES: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceParams {
    /// Filled from the experiment-level clock.
    #[serde(skip)]
    pub clock: ClockFrame,
    pub pair_probability: f64,
    pub tau_xx_ps: f64,
    pub tau_x_ps: f64,
    pub reinit_width_ps: f64,
    #[serde(rename = "fss_ueV")]
    pub fss_uev: f64,
    pub multi_photon_probability: f64,
    /// Uncorrelated photon rate, applied independently to each arm.
    pub background_rate_cps: f64,
}

impl Default for SourceParams {
    fn default() -> Self {
        SourceParams {
            clock: ClockFrame::GHZ,
            pair_probability: 0.5,
            tau_xx_ps: 200.0,
            tau_x_ps: 300.0,
            reinit_width_ps: 130.0,
            fss_uev: 6.0,
            multi_photon_probability: 0.0,
            background_rate_cps: 0.0,
        }
    }
}

impl SourceParams {
    pub fn validate(&self) -> Result<()> {
        self.clock.validate()?;
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::param(format!("source.{name}"), format!("{p} is not a probability")))
            }
        };
        prob("pair_probability", self.pair_probability)?;
        prob("multi_photon_probability", self.multi_photon_probability)?;
        for (name, v) in [("tau_xx_ps", self.tau_xx_ps), ("tau_x_ps", self.tau_x_ps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(format!("source.{name}"), "lifetime must be > 0"));
            }
        }
        if !(self.reinit_width_ps >= 0.0 && self.reinit_width_ps.is_finite()) {
            return Err(Error::param("source.reinit_width_ps", "must be >= 0"));
        }
        if !(self.fss_uev >= 0.0 && self.fss_uev.is_finite()) {
            return Err(Error::param("source.fss_ueV", "must be >= 0"));
        }
        if !(self.background_rate_cps >= 0.0 && self.background_rate_cps.is_finite()) {
            return Err(Error::param("source.background_rate_cps", "must be >= 0"));
        }
        Ok(())
    }

    /// Mean number of background photons per arm per cycle.
    pub fn background_per_cycle(&self) -> f64 {
        self.background_rate_cps * self.clock.period_ps as f64 * 1e-12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Xx,
    X,
}

/// Which PBS port a photon left by: `P` is the first state of the basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    P,
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolarizationBasis {
    HV,
    DA,
    RL,
}

impl PolarizationBasis {
    pub const ALL: [PolarizationBasis; 3] = [PolarizationBasis::HV, PolarizationBasis::DA, PolarizationBasis::RL];

    pub fn states(&self) -> (JonesVector, JonesVector) {
        match self {
            PolarizationBasis::HV => (JonesVector::h(), JonesVector::v()),
            PolarizationBasis::DA => (JonesVector::d(), JonesVector::a()),
            PolarizationBasis::RL => (JonesVector::r(), JonesVector::l()),
        }
    }

    pub fn state(&self, outcome: Outcome) -> JonesVector {
        let (p, q) = self.states();
        match outcome {
            Outcome::P => p,
            Outcome::Q => q,
        }
    }

    /// Ideal analyzer setting: maps P onto the transmitted (H) port of the
    /// beam splitter and Q onto the reflected (V) port.
    pub fn analyzer(&self) -> JonesMatrix {
        let (p, q) = self.states();
        JonesMatrix::from_bras(&p, &q)
    }

    pub fn label(&self) -> &'static str {
        match self {
            PolarizationBasis::HV => "HV",
            PolarizationBasis::DA => "DA",
            PolarizationBasis::RL => "RL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEmission {
    pub cycle_start_ps: u64,
    pub t_xx_ps: u64,
    pub t_x_ps: u64,
    pub phase_rad: f64,
    /// Accumulated polarization transform of each photon since emission.
    pub xx_transform: PolarizationTransform,
    pub x_transform: PolarizationTransform,
}

/// A photon with no polarization partner (background, multi-photon or a
/// pair member whose partner was clipped or lost).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SinglePhoton {
    pub arm: Arm,
    pub t_ps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Emission {
    Pair(PairEmission),
    Single(SinglePhoton),
}

impl Emission {
    /// Sort key: XX time for pairs.
    pub fn time_ps(&self) -> u64 {
        match self {
            Emission::Pair(p) => p.t_xx_ps,
            Emission::Single(s) => s.t_ps,
        }
    }
}

/// Angular frequency of the two-photon phase in rad/ps.
pub fn phase_rate_rad_per_ps(fss_uev: f64) -> f64 {
    fss_uev * 1e-6 / HBAR_EV_S * 1e-12
}

pub fn phase_of_delay(delay_ps: f64, fss_uev: f64) -> f64 {
    phase_rate_rad_per_ps(fss_uev) * delay_ps
}

/// Delay `h/S` after which the phase completes a full turn.
pub fn fss_period_ps(fss_uev: f64) -> f64 {
    PLANCK_EV_S / (fss_uev * 1e-6) * 1e12
}

/// Joint outcome probabilities `[xx][x]` for a pair in
/// `(|HH⟩ + e^{iφ}|VV⟩)/√2` after each photon passes `xx` / `x`, with
/// outcome P on the H port and Q on the V port.
pub fn pair_outcome_probabilities(phase_rad: f64, xx: &JonesMatrix, x: &JonesMatrix) -> [[f64; 2]; 2] {
    let e = num_complex::Complex64::from_polar(1.0, phase_rad);
    let mut out = [[0.0; 2]; 2];
    for (a, row) in out.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            let amp = xx.0[a][0] * x.0[b][0] + e * xx.0[a][1] * x.0[b][1];
            *cell = amp.norm_sqr() * 0.5;
        }
    }
    out
}

pub fn projection_probability(basis: PolarizationBasis, xx: Outcome, x: Outcome, phase_rad: f64) -> f64 {
    let m = basis.analyzer();
    let probs = pair_outcome_probabilities(phase_rad, &m, &m);
    probs[outcome_index(xx)][outcome_index(x)]
}

fn outcome_index(o: Outcome) -> usize {
    match o {
        Outcome::P => 0,
        Outcome::Q => 1,
    }
}

fn sample_pair(params: &SourceParams, start: u64, end: u64, rng: &mut ChaCha8Rng) -> Option<Emission> {
    let sigma = params.reinit_width_ps / FWHM_PER_SIGMA;
    let n: f64 = rng.sample(StandardNormal);
    let jitter = (n * sigma).abs();
    let e1: f64 = rng.sample(Exp1);
    let e2: f64 = rng.sample(Exp1);
    let t_xx_f = start as f64 + jitter + params.tau_xx_ps * e1;
    let t_xx = t_xx_f.round() as u64;
    if t_xx >= end {
        return None;
    }
    let delay = ((params.tau_x_ps * e2).round() as u64).max(1);
    let t_x = t_xx + delay;
    if t_x >= end {
        return Some(Emission::Single(SinglePhoton {
            arm: Arm::Xx,
            t_ps: t_xx,
        }));
    }
    Some(Emission::Pair(PairEmission {
        cycle_start_ps: start,
        t_xx_ps: t_xx,
        t_x_ps: t_x,
        phase_rad: phase_of_delay(delay as f64, params.fss_uev),
        xx_transform: PolarizationTransform::identity(),
        x_transform: PolarizationTransform::identity(),
    }))
}

fn poisson_count(lambda: f64, rng: &mut ChaCha8Rng) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    if lambda > 30.0 {
        return Poisson::new(lambda).expect("lambda > 0").sample(rng) as u64;
    }
    // inverse transform, one uniform per cycle in the common case
    let u: f64 = rng.random();
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let mut k = 0u64;
    while u >= cdf && p > 0.0 {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k
}

/// Samples the emissions of one clock cycle, sorted by time.
///
/// Everything emitted at or after the next cycle start is discarded, which
/// models the clean reinitialisation of the dot by the following pulse.
pub fn sample_cycle(params: &SourceParams, cycle_index: u64, rng: &mut ChaCha8Rng) -> Vec<Emission> {
    let period = params.clock.period_ps;
    let start = cycle_index * period;
    let end = start + period;
    let mut events = Vec::new();
    if rng.random::<f64>() < params.pair_probability {
        if let Some(e) = sample_pair(params, start, end, rng) {
            events.push(e);
        }
    }
    if rng.random::<f64>() < params.multi_photon_probability {
        events.push(Emission::Single(SinglePhoton {
            arm: Arm::X,
            t_ps: start + rng.random_range(0..period),
        }));
    }
    let lambda = params.background_per_cycle();
    for arm in [Arm::Xx, Arm::X] {
        for _ in 0..poisson_count(lambda, rng) {
            events.push(Emission::Single(SinglePhoton {
                arm,
                t_ps: start + rng.random_range(0..period),
            }));
        }
    }
    if events.len() > 1 {
        events.sort_by_key(Emission::time_ps);
    }
    events
}

fn sample_block(params: &SourceParams, block: u64, seed: u64, cycles: &Range<u64>) -> Vec<Emission> {
    let mut rng = stream_rng(seed, "emission", block);
    let first = block * BLOCK_CYCLES;
    let mut out = Vec::new();
    for k in first..first + BLOCK_CYCLES {
        // draw every cycle of the block so partial ranges reuse the same stream
        let events = sample_cycle(params, k, &mut rng);
        if cycles.contains(&k) {
            out.extend(events);
        }
    }
    out
}

/// Emissions for a cycle range, ordered by time.
pub fn simulate_emissions(params: &SourceParams, cycles: Range<u64>, seed: u64) -> Result<Vec<Emission>> {
    params.validate()?;
    if cycles.is_empty() {
        return Ok(Vec::new());
    }
    let first_block = cycles.start / BLOCK_CYCLES;
    let last_block = (cycles.end - 1) / BLOCK_CYCLES;
    let blocks: Vec<Vec<Emission>> = (first_block..=last_block)
        .into_par_iter()
        .map(|b| sample_block(params, b, seed, &cycles))
        .collect();
    Ok(blocks.concat())
}

/// Piecewise-constant analyzer setting for one arm, keyed by start time.
#[derive(Debug, Clone)]
pub struct ArmAnalyzer {
    segments: Vec<(u64, JonesMatrix)>,
}

impl ArmAnalyzer {
    pub fn fixed(m: JonesMatrix) -> Self {
        ArmAnalyzer {
            segments: vec![(0, m)],
        }
    }

    pub fn basis(b: PolarizationBasis) -> Self {
        Self::fixed(b.analyzer())
    }

    /// Segments must start at 0 and be sorted by start time.
    pub fn schedule(segments: Vec<(u64, JonesMatrix)>) -> Result<Self> {
        if segments.first().map(|s| s.0) != Some(0) {
            return Err(Error::param("analyzer", "schedule must start at t = 0"));
        }
        if segments.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(Error::param("analyzer", "schedule must be sorted"));
        }
        Ok(ArmAnalyzer { segments })
    }

    pub fn at(&self, t_ps: u64) -> &JonesMatrix {
        let i = self.segments.partition_point(|s| s.0 <= t_ps);
        &self.segments[i.saturating_sub(1)].1
    }
}

/// Photon times split by analyzer output port.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArmStreams {
    pub xx_p: Vec<u64>,
    pub xx_q: Vec<u64>,
    pub x_p: Vec<u64>,
    pub x_q: Vec<u64>,
}

impl ArmStreams {
    pub fn get(&self, arm: Arm, outcome: Outcome) -> &Vec<u64> {
        match (arm, outcome) {
            (Arm::Xx, Outcome::P) => &self.xx_p,
            (Arm::Xx, Outcome::Q) => &self.xx_q,
            (Arm::X, Outcome::P) => &self.x_p,
            (Arm::X, Outcome::Q) => &self.x_q,
        }
    }

    fn get_mut(&mut self, arm: Arm, outcome: Outcome) -> &mut Vec<u64> {
        match (arm, outcome) {
            (Arm::Xx, Outcome::P) => &mut self.xx_p,
            (Arm::Xx, Outcome::Q) => &mut self.xx_q,
            (Arm::X, Outcome::P) => &mut self.x_p,
            (Arm::X, Outcome::Q) => &mut self.x_q,
        }
    }

    pub fn len(&self) -> usize {
        self.xx_p.len() + self.xx_q.len() + self.x_p.len() + self.x_q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sends every photon through its arm's analyzer and records which port it
/// leaves by. Pair outcomes are drawn jointly from the two-photon state;
/// single photons are unpolarized.
pub fn project(
    events: &[Emission],
    xx: &ArmAnalyzer,
    x: &ArmAnalyzer,
    seed: u64,
    stream_index: u64,
) -> ArmStreams {
    let mut rng = stream_rng(seed, "projection", stream_index);
    let mut out = ArmStreams::default();
    for ev in events {
        match ev {
            Emission::Pair(p) => {
                let mut a = *xx.at(p.t_xx_ps);
                if !p.xx_transform.is_identity() {
                    a = a * p.xx_transform.matrix();
                }
                let mut b = *x.at(p.t_x_ps);
                if !p.x_transform.is_identity() {
                    b = b * p.x_transform.matrix();
                }
                let probs = pair_outcome_probabilities(p.phase_rad, &a, &b);
                let u: f64 = rng.random::<f64>() * (probs[0][0] + probs[0][1] + probs[1][0] + probs[1][1]);
                let (oa, ob) = if u < probs[0][0] {
                    (Outcome::P, Outcome::P)
                } else if u < probs[0][0] + probs[0][1] {
                    (Outcome::P, Outcome::Q)
                } else if u < probs[0][0] + probs[0][1] + probs[1][0] {
                    (Outcome::Q, Outcome::P)
                } else {
                    (Outcome::Q, Outcome::Q)
                };
                out.get_mut(Arm::Xx, oa).push(p.t_xx_ps);
                out.get_mut(Arm::X, ob).push(p.t_x_ps);
            }
            Emission::Single(s) => {
                let o = if rng.random::<bool>() { Outcome::P } else { Outcome::Q };
                out.get_mut(s.arm, o).push(s.t_ps);
            }
        }
    }
    for v in [&mut out.xx_p, &mut out.xx_q, &mut out.x_p, &mut out.x_q] {
        v.sort_unstable();
    }
    out
}

/// Emission times measured in one basis with ideal analyzers on both arms.
pub fn simulate_source(params: &SourceParams, n_cycles: u64, seed: u64, basis: PolarizationBasis) -> Result<ArmStreams> {
    if n_cycles == 0 {
        return Err(Error::param("n_cycles", "must be >= 1"));
    }
    let events = simulate_emissions(params, 0..n_cycles, seed)?;
    let a = ArmAnalyzer::basis(basis);
    Ok(project(&events, &a, &a, seed, 0))
}

/// Times of every photon arriving in one arm, sorted.
pub fn arm_times(events: &[Emission], arm: Arm) -> Vec<u64> {
    let mut out: Vec<u64> = events
        .iter()
        .filter_map(|e| match (e, arm) {
            (Emission::Pair(p), Arm::Xx) => Some(p.t_xx_ps),
            (Emission::Pair(p), Arm::X) => Some(p.t_x_ps),
            (Emission::Single(s), _) if s.arm == arm => Some(s.t_ps),
            _ => None,
        })
        .collect();
    out.sort_unstable();
    out
}

/// 50:50 beam splitter: each photon exits either port with equal probability.
pub fn split_beam(times: &[u64], seed: u64, stream_index: u64) -> (Vec<u64>, Vec<u64>) {
    let mut rng = stream_rng(seed, "beam-splitter", stream_index);
    let mut a = Vec::with_capacity(times.len() / 2 + 1);
    let mut b = Vec::with_capacity(times.len() / 2 + 1);
    for &t in times {
        if rng.random::<bool>() {
            a.push(t);
        } else {
            b.push(t);
        }
    }
    (a, b)
}

/// Probability that a cascade's X photon is emitted before the next pulse.
pub fn x_emission_within_cycle(params: &SourceParams) -> f64 {
    let period = params.clock.period_ps as f64;
    let (t1, t2) = (params.tau_xx_ps, params.tau_x_ps);
    let cdf = |s: f64| -> f64 {
        if s <= 0.0 {
            0.0
        } else if (t1 - t2).abs() < 1e-9 * t1.max(t2) {
            1.0 - (-s / t1).exp() * (1.0 + s / t1)
        } else {
            1.0 - (t1 * (-s / t1).exp() - t2 * (-s / t2).exp()) / (t1 - t2)
        }
    };
    let sigma = params.reinit_width_ps / FWHM_PER_SIGMA;
    if sigma == 0.0 {
        return cdf(period);
    }
    // Simpson over the half-normal excitation jitter
    let upper = period.min(10.0 * sigma);
    let n = 4000;
    let h = upper / n as f64;
    let norm = (2.0 / std::f64::consts::PI).sqrt() / sigma;
    let f = |j: f64| norm * (-0.5 * (j / sigma).powi(2)).exp() * cdf(period - j);
    let mut acc = f(0.0) + f(upper);
    for i in 1..n {
        acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Probability that detector jitter moves a photon into a neighbouring
/// cycle, for a cascade X photon and for a photon uniform over the cycle.
pub fn cycle_crossing_probabilities(params: &SourceParams, jitter_fwhm_ps: f64) -> (f64, f64) {
    let sd = jitter_fwhm_ps / FWHM_PER_SIGMA;
    if sd <= 0.0 {
        return (0.0, 0.0);
    }
    let period = params.clock.period_ps as f64;
    let n = 2000usize;
    let h = period / n as f64;
    let grid: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
    let crossing = |x: f64| 0.5 * (libm::erfc(x / (sd * SQRT_2)) + libm::erfc((period - x) / (sd * SQRT_2)));
    let uniform = grid.iter().map(|&x| crossing(x)).sum::<f64>() / n as f64;

    // X emission phase: half-normal pulse delay plus two exponential lifetimes
    let (t1, t2) = (params.tau_xx_ps, params.tau_x_ps);
    let lifetimes = |s: f64| -> f64 {
        if (t1 - t2).abs() < 1e-9 * t1.max(t2) {
            s / (t1 * t1) * (-s / t1).exp()
        } else {
            ((-s / t1).exp() - (-s / t2).exp()) / (t1 - t2)
        }
    };
    let ps = params.reinit_width_ps / FWHM_PER_SIGMA;
    let pulse: Vec<f64> = grid
        .iter()
        .map(|&x| if ps > 0.0 { (-0.5 * (x / ps).powi(2)).exp() } else { 0.0 })
        .collect();
    let mut weight = 0.0;
    let mut crossed = 0.0;
    for (i, &x) in grid.iter().enumerate() {
        let density = if ps > 0.0 {
            (0..=i).map(|j| pulse[j] * lifetimes(x - grid[j] + 0.5 * h)).sum::<f64>()
        } else {
            lifetimes(x)
        };
        weight += density;
        crossed += density * crossing(x);
    }
    let cascade = if weight > 0.0 { crossed / weight } else { 0.0 };
    (cascade, uniform)
}

/// Same-cycle g²(0) expected behind a 50:50 splitter with two identical
/// detectors of efficiency `efficiency`, dark rate `dark_rate_cps` and
/// timing jitter `jitter_fwhm_ps`.
///
/// Per cycle the X arm carries a Bernoulli pair photon, a Bernoulli extra
/// photon and a Poisson background; the result is
/// `⟨n1 n2⟩ / (⟨n1⟩⟨n2⟩)` for the two detectors, where jitter moves a small
/// fraction of photons into the neighbouring cycle.
pub fn predicted_g2_zero(params: &SourceParams, efficiency: f64, dark_rate_cps: f64, jitter_fwhm_ps: f64) -> f64 {
    let (qa, qu) = cycle_crossing_probabilities(params, jitter_fwhm_ps);
    g2_with_crossing(params, efficiency, dark_rate_cps, qa, qu)
}

fn g2_with_crossing(params: &SourceParams, efficiency: f64, dark_rate_cps: f64, qa: f64, qu: f64) -> f64 {
    let a = params.pair_probability * x_emission_within_cycle(params);
    let m = params.multi_photon_probability;
    let lambda = params.background_per_cycle();
    let eta = efficiency / 2.0;
    let delta = dark_rate_cps * params.clock.period_ps as f64 * 1e-12;
    let single = eta * (a + m + lambda) + delta;
    let moved = eta * (a * qa + (m + lambda) * qu);
    let photons = 2.0 * a * (m + lambda) * (1.0 - qa - qu) + (2.0 * lambda * m + lambda * lambda) * (1.0 - 2.0 * qu);
    let cross = eta * eta * photons
        + 2.0 * delta * eta * (a * (1.0 - qa) + (m + lambda) * (1.0 - qu))
        + delta * delta
        + 2.0 * single * moved;
    cross / (single * single)
}

/// Bisects the multi-photon probability that yields `target` same-cycle g².
pub fn tune_multi_photon(
    params: &SourceParams,
    target: f64,
    efficiency: f64,
    dark_rate_cps: f64,
    jitter_fwhm_ps: f64,
) -> Result<f64> {
    let (qa, qu) = cycle_crossing_probabilities(params, jitter_fwhm_ps);
    let g = |m: f64| {
        let mut p = params.clone();
        p.multi_photon_probability = m;
        g2_with_crossing(&p, efficiency, dark_rate_cps, qa, qu)
    };
    let (mut lo, mut hi) = (0.0, params.pair_probability.max(1e-12));
    if !(g(lo) <= target && g(hi) >= target) {
        return Err(Error::param(
            "source.multi_photon_probability",
            format!("target g2 {target} is not bracketed by [{}, {}]", g(lo), g(hi)),
        ));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Expected X-arm detection rate summed over both detectors behind a
/// splitter or PBS.
pub fn expected_x_rate_cps(params: &SourceParams, efficiency: f64, dark_rate_cps: f64) -> f64 {
    let per_cycle = params.pair_probability * x_emission_within_cycle(params)
        + params.multi_photon_probability
        + params.background_per_cycle();
    per_cycle * efficiency * 1e12 / params.clock.period_ps as f64 + 2.0 * dark_rate_cps
}

/// Pair probability giving the requested combined X-arm rate.
pub fn pair_probability_for_rate(params: &SourceParams, efficiency: f64, dark_rate_cps: f64, target_cps: f64) -> Result<f64> {
    let mut p = params.clone();
    p.pair_probability = 0.0;
    let floor = expected_x_rate_cps(&p, efficiency, dark_rate_cps);
    p.pair_probability = 1.0;
    let ceil = expected_x_rate_cps(&p, efficiency, dark_rate_cps);
    if !(floor..=ceil).contains(&target_cps) {
        return Err(Error::param(
            "source.pair_probability",
            format!("target rate {target_cps} cps outside reachable [{floor}, {ceil}]"),
        ));
    }
    Ok((target_cps - floor) / (ceil - floor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{PI, TAU};

    #[test]
    fn phase_examples() {
        assert_eq!(phase_of_delay(0.0, 6.0), 0.0);
        // unit check: 6 µeV / ħ in rad/s, times 689 ps
        let omega = 6.0e-6 / 6.582_119_569e-16;
        assert!((omega * 689e-12 / TAU - 1.0).abs() < 0.005);
        assert!((phase_of_delay(689.0, 6.0) / TAU - 1.0).abs() < 0.005);
        assert!((phase_of_delay(344.6, 6.0) / PI - 1.0).abs() < 0.005);
        assert!((fss_period_ps(6.0) - 689.3).abs() < 0.5);
    }

    #[test]
    fn projection_examples() {
        use Outcome::*;
        use PolarizationBasis::*;
        for phi in [0.0, 1.0, 2.5] {
            assert!((projection_probability(HV, P, P, phi) - 0.5).abs() < 1e-12);
            assert!(projection_probability(HV, P, Q, phi).abs() < 1e-12);
        }
        assert!((projection_probability(DA, P, P, 0.0) - 0.5).abs() < 1e-12);
        assert!(projection_probability(RL, P, P, 0.0).abs() < 1e-12);
        assert!((projection_probability(DA, P, Q, PI) - 0.5).abs() < 1e-12);
    }

    fn correlation(basis: PolarizationBasis, phi: f64) -> f64 {
        use Outcome::*;
        let co = projection_probability(basis, P, P, phi) + projection_probability(basis, Q, Q, phi);
        let cross = projection_probability(basis, P, Q, phi) + projection_probability(basis, Q, P, phi);
        (co - cross) / (co + cross)
    }

    #[test]
    fn ideal_state_has_unit_fidelity() {
        let (hv, da, rl) = (
            correlation(PolarizationBasis::HV, 0.0),
            correlation(PolarizationBasis::DA, 0.0),
            correlation(PolarizationBasis::RL, 0.0),
        );
        assert!((hv - 1.0).abs() < 1e-12 && (da - 1.0).abs() < 1e-12 && (rl + 1.0).abs() < 1e-12);
        assert!(((1.0 + hv + da - rl) / 4.0 - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn probabilities_normalized_and_correlations_follow_cos(phi in -20.0f64..20.0) {
            use Outcome::*;
            for basis in PolarizationBasis::ALL {
                let total: f64 = [(P, P), (P, Q), (Q, P), (Q, Q)]
                    .iter()
                    .map(|&(a, b)| projection_probability(basis, a, b, phi))
                    .sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
            prop_assert!((correlation(PolarizationBasis::HV, phi) - 1.0).abs() < 1e-12);
            prop_assert!((correlation(PolarizationBasis::DA, phi) - phi.cos()).abs() < 1e-12);
            prop_assert!((correlation(PolarizationBasis::RL, phi) + phi.cos()).abs() < 1e-12);
        }

        #[test]
        fn unitary_analyzers_keep_normalization(phi in -10.0f64..10.0, a in [-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0]) {
            let m = PolarizationTransform::from_angles(a).matrix();
            let p = pair_outcome_probabilities(phi, &m, &PolarizationBasis::DA.analyzer());
            let total: f64 = p.iter().flatten().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_params_rejected_before_sampling() {
        let mut p = SourceParams::default();
        p.pair_probability = 1.5;
        assert!(simulate_emissions(&p, 0..10, 1).is_err());
        let mut p = SourceParams::default();
        p.tau_x_ps = 0.0;
        assert!(p.validate().is_err());
        let mut p = SourceParams::default();
        p.fss_uev = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn emissions_respect_cascade_order_and_cycle_bounds() {
        let mut p = SourceParams::default();
        p.multi_photon_probability = 0.1;
        p.background_rate_cps = 5e7;
        let events = simulate_emissions(&p, 0..50_000, 3).unwrap();
        let omega = phase_rate_rad_per_ps(p.fss_uev);
        let mut pairs = 0;
        for e in &events {
            match e {
                Emission::Pair(pe) => {
                    pairs += 1;
                    assert!(pe.t_x_ps > pe.t_xx_ps && pe.t_xx_ps >= pe.cycle_start_ps);
                    assert!(pe.t_x_ps < pe.cycle_start_ps + 1000);
                    let expect = omega * (pe.t_x_ps - pe.t_xx_ps) as f64;
                    assert!((pe.phase_rad - expect).abs() <= 1e-9 * expect.abs());
                }
                Emission::Single(s) => assert!(s.t_ps < 50_000 * 1000),
            }
        }
        assert!(events.windows(2).all(|w| w[0].time_ps() <= w[1].time_ps()));
        // clipping matches the analytic in-cycle probability
        let expect = 0.5 * 50_000.0 * x_emission_within_cycle(&p);
        assert!((pairs as f64 - expect).abs() < 4.0 * expect.sqrt(), "{pairs} vs {expect}");
    }

    #[test]
    fn sub_ranges_match_full_run() {
        let p = SourceParams::default();
        let full = simulate_emissions(&p, 0..20_000, 9).unwrap();
        let a = simulate_emissions(&p, 0..7_777, 9).unwrap();
        let b = simulate_emissions(&p, 7_777..20_000, 9).unwrap();
        assert_eq!([a, b].concat(), full);
    }

    #[test]
    fn determinism() {
        let p = SourceParams::default();
        let a = simulate_source(&p, 100_000, 5, PolarizationBasis::DA).unwrap();
        let b = simulate_source(&p, 100_000, 5, PolarizationBasis::DA).unwrap();
        assert_eq!(a, b);
        let c = simulate_source(&p, 100_000, 6, PolarizationBasis::DA).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn hv_basis_has_no_cross_polarized_same_cycle_pairs() {
        let p = SourceParams::default();
        let events = simulate_emissions(&p, 0..1_000_000, 11).unwrap();
        let a = ArmAnalyzer::basis(PolarizationBasis::HV);
        let s = project(&events, &a, &a, 11, 0);
        let cycle = |t: &u64| t / 1000;
        let xp: std::collections::HashSet<u64> = s.x_p.iter().map(cycle).collect();
        let xq: std::collections::HashSet<u64> = s.x_q.iter().map(cycle).collect();
        assert!(s.xx_p.iter().all(|t| !xq.contains(&cycle(t))));
        assert!(s.xx_q.iter().all(|t| !xp.contains(&cycle(t))));
        assert!(s.xx_p.len() > 100_000 && s.xx_q.len() > 100_000);
    }

    #[test]
    fn sample_cycle_rates() {
        let mut p = SourceParams::default();
        p.pair_probability = 0.0;
        p.multi_photon_probability = 0.2;
        p.background_rate_cps = 1e8; // 0.1 per cycle per arm
        let mut rng = stream_rng(1, "t", 0);
        let n = 200_000u64;
        let (mut x, mut xx) = (0usize, 0usize);
        for k in 0..n {
            for e in sample_cycle(&p, k, &mut rng) {
                match e {
                    Emission::Single(s) if s.arm == Arm::X => x += 1,
                    Emission::Single(_) => xx += 1,
                    Emission::Pair(_) => panic!("no pairs expected"),
                }
            }
        }
        let ex = n as f64 * 0.3;
        let exx = n as f64 * 0.1;
        assert!((x as f64 - ex).abs() < 4.0 * ex.sqrt());
        assert!((xx as f64 - exx).abs() < 4.0 * exx.sqrt());
    }

    #[test]
    fn g2_prediction_limits() {
        let mut p = SourceParams::default();
        p.pair_probability = 0.0;
        p.background_rate_cps = 1e8;
        assert!((predicted_g2_zero(&p, 0.5, 0.0, 0.0) - 1.0).abs() < 1e-12);
        let mut p = SourceParams::default();
        p.multi_photon_probability = 0.0;
        assert_eq!(predicted_g2_zero(&p, 0.5, 0.0, 0.0), 0.0);
        let m = tune_multi_photon(&SourceParams::default(), 0.097, 0.6, 0.0, 0.0).unwrap();
        let mut p = SourceParams::default();
        p.multi_photon_probability = m;
        assert!((predicted_g2_zero(&p, 0.6, 0.0, 0.0) - 0.097).abs() < 1e-9);
    }

    #[test]
    fn jitter_crossing_matches_uniform_edge_integral() {
        let p = SourceParams::default();
        let (cascade, uniform) = cycle_crossing_probabilities(&p, 70.0);
        let sd = 70.0 / FWHM_PER_SIGMA;
        let expected = 2.0 * sd / (2.0 * std::f64::consts::PI).sqrt() / 1000.0;
        assert!((uniform - expected).abs() < 1e-4 * expected.max(1.0), "{uniform} vs {expected}");
        assert!(cascade > 0.0 && cascade < uniform);
        assert_eq!(cycle_crossing_probabilities(&p, 0.0), (0.0, 0.0));
    }

    #[test]
    fn jitter_keeps_poisson_light_at_unity() {
        let mut p = SourceParams::default();
        p.pair_probability = 0.0;
        p.background_rate_cps = 3e8;
        assert!((predicted_g2_zero(&p, 0.6, 1e4, 70.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jitter_raises_the_predicted_floor() {
        let mut p = SourceParams::default();
        p.multi_photon_probability = 0.02;
        assert!(predicted_g2_zero(&p, 0.6, 0.0, 70.0) > predicted_g2_zero(&p, 0.6, 0.0, 0.0));
    }

    #[test]
    fn rate_calibration_inverts_expected_rate() {
        let p = SourceParams::default();
        let q = pair_probability_for_rate(&p, 0.1, 100.0, 190_000.0).unwrap();
        let mut p2 = p.clone();
        p2.pair_probability = q;
        assert!((expected_x_rate_cps(&p2, 0.1, 100.0) - 190_000.0).abs() < 1e-6);
    }
}
