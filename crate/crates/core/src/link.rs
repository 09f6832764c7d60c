//! Everything between emission and a recorded time tag: fiber loss, delay and
//! polarization drift, detector efficiency, jitter, dead time, dark counts,
//! gating, and recording against a divided clock.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

pub use crate::polarization::PolarizationTransform;

use crate::cascade::{Arm, Emission, SinglePhoton, FWHM_PER_SIGMA};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, hashed_normal, splitmix64, stream_rng};
use crate::timetag::{ClockFrame, TimeTag};

/// Random walk of the three rotation-vector components of the fiber's
/// polarization transform, piecewise constant over `step_interval_ps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftProcess {
    pub step_interval_ps: u64,
    pub angular_step_std_rad: f64,
}

impl Default for DriftProcess {
    fn default() -> Self {
        DriftProcess {
            step_interval_ps: 1_000_000_000_000,
            angular_step_std_rad: 0.0,
        }
    }
}

impl DriftProcess {
    pub fn validate(&self) -> Result<()> {
        if self.step_interval_ps == 0 {
            return Err(Error::param("fiber.drift.step_interval_ps", "must be > 0"));
        }
        if !(self.angular_step_std_rad >= 0.0 && self.angular_step_std_rad.is_finite()) {
            return Err(Error::param("fiber.drift.angular_step_std_rad", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiberParams {
    pub length_km: f64,
    pub loss_db: f64,
    pub propagation_delay_ps: u64,
    pub drift: DriftProcess,
}

impl Default for FiberParams {
    fn default() -> Self {
        FiberParams {
            length_km: 15.0,
            loss_db: 6.0,
            // group index ~1.468
            propagation_delay_ps: 73_400_000,
            drift: DriftProcess::default(),
        }
    }
}

impl FiberParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.loss_db >= 0.0) {
            return Err(Error::param("fiber.loss_db", "must be >= 0"));
        }
        if !(self.length_km >= 0.0 && self.length_km.is_finite()) {
            return Err(Error::param("fiber.length_km", "must be >= 0"));
        }
        self.drift.validate()
    }

    pub fn survival_probability(&self) -> f64 {
        10f64.powf(-self.loss_db / 10.0)
    }
}

const CHUNK_BITS: u32 = 32;

/// Value after `n` unit-variance steps of a Gaussian random walk keyed by
/// `key`. Built top-down as a Brownian bridge over chunks of 2³² steps, so
/// any step index is reachable in O(32) hashed draws and every prefix of the
/// path is consistent.
fn random_walk(key: u64, n: u64) -> f64 {
    let chunk = n >> CHUNK_BITS;
    let r = n & ((1u64 << CHUNK_BITS) - 1);
    let chunk_scale = (1u64 << (CHUNK_BITS / 2)) as f64;
    let node = |c: u64, m: u64| splitmix64(key ^ splitmix64(c.wrapping_mul(0x9E37_79B9) ^ (m << 1 | 1)));
    let mut base = 0.0;
    for c in 0..chunk {
        base += hashed_normal(node(c, 0) ^ 0xA5A5) * chunk_scale;
    }
    let end = base + hashed_normal(node(chunk, 0) ^ 0xA5A5) * chunk_scale;
    let (mut lo, mut hi, mut w_lo, mut w_hi) = (0u64, 1u64 << CHUNK_BITS, base, end);
    while hi - lo > 1 {
        if r == lo {
            return w_lo;
        }
        let mid = lo + (hi - lo) / 2;
        let w_mid = 0.5 * (w_lo + w_hi) + ((hi - lo) as f64 / 4.0).sqrt() * hashed_normal(node(chunk, mid));
        if r < mid {
            hi = mid;
            w_hi = w_mid;
        } else {
            lo = mid;
            w_lo = w_mid;
        }
    }
    w_lo
}

/// Rotation-vector components of the drift at `t_ps`.
pub fn drift_angles(t_ps: u64, process: &DriftProcess, seed: u64) -> [f64; 3] {
    let steps = t_ps / process.step_interval_ps.max(1);
    if steps == 0 || process.angular_step_std_rad == 0.0 {
        return [0.0; 3];
    }
    let mut out = [0.0; 3];
    for (axis, a) in out.iter_mut().enumerate() {
        let key = derive_seed(seed, "drift", axis as u64);
        *a = process.angular_step_std_rad * random_walk(key, steps);
    }
    out
}

pub fn drift_at(t_ps: u64, process: &DriftProcess, seed: u64) -> PolarizationTransform {
    PolarizationTransform::from_angles(drift_angles(t_ps, process, seed))
}

/// Memoizes the drift of the current step for time-ordered lookups.
pub struct DriftCursor<'a> {
    process: &'a DriftProcess,
    seed: u64,
    step: Option<u64>,
    value: PolarizationTransform,
}

impl<'a> DriftCursor<'a> {
    pub fn new(process: &'a DriftProcess, seed: u64) -> Self {
        DriftCursor {
            process,
            seed,
            step: None,
            value: PolarizationTransform::identity(),
        }
    }

    pub fn at(&mut self, t_ps: u64) -> PolarizationTransform {
        let step = t_ps / self.process.step_interval_ps.max(1);
        if self.step != Some(step) {
            self.value = drift_at(t_ps, self.process, self.seed);
            self.step = Some(step);
        }
        self.value
    }
}

/// Sends the photons of `arm` through the fiber.
///
/// Each photon survives with probability `10^(-loss/10)`; survivors are
/// delayed and pick up the drift transform at their launch time. A pair
/// whose photon is lost leaves its partner as a single photon.
pub fn transmit(
    events: &[Emission],
    arm: Arm,
    fiber: &FiberParams,
    drift_seed: u64,
    seed: u64,
    stream_index: u64,
) -> Vec<Emission> {
    let survive = fiber.survival_probability();
    let delay = fiber.propagation_delay_ps;
    let mut rng = stream_rng(seed, "fiber", stream_index);
    let mut drift = DriftCursor::new(&fiber.drift, drift_seed);
    let mut out = Vec::with_capacity(events.len());
    for ev in events {
        match *ev {
            Emission::Pair(mut p) => {
                let alive = rng.random::<f64>() < survive;
                let (t, other, other_t) = match arm {
                    Arm::Xx => (p.t_xx_ps, Arm::X, p.t_x_ps),
                    Arm::X => (p.t_x_ps, Arm::Xx, p.t_xx_ps),
                };
                if !alive {
                    out.push(Emission::Single(SinglePhoton {
                        arm: other,
                        t_ps: other_t,
                    }));
                    continue;
                }
                let d = drift.at(t);
                match arm {
                    Arm::Xx => {
                        p.xx_transform = d.compose(&p.xx_transform);
                        p.t_xx_ps += delay;
                    }
                    Arm::X => {
                        p.x_transform = d.compose(&p.x_transform);
                        p.t_x_ps += delay;
                    }
                }
                out.push(Emission::Pair(p));
            }
            Emission::Single(s) if s.arm == arm => {
                if rng.random::<f64>() < survive {
                    out.push(Emission::Single(SinglePhoton {
                        arm,
                        t_ps: s.t_ps + delay,
                    }));
                }
            }
            other => out.push(other),
        }
    }
    out.sort_by_key(Emission::time_ps);
    out
}

/// Rectangular acceptance window repeated every clock cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleGate {
    pub offset_ps: u64,
    pub width_ps: u64,
}

impl CycleGate {
    pub fn validate(&self, clock: &ClockFrame) -> Result<()> {
        if self.width_ps == 0 || self.offset_ps + self.width_ps > clock.period_ps {
            return Err(Error::param(
                "gate",
                format!(
                    "window [{}, {}) does not fit in the {} ps cycle",
                    self.offset_ps,
                    self.offset_ps + self.width_ps,
                    clock.period_ps
                ),
            ));
        }
        Ok(())
    }

    pub fn contains_phase(&self, phase_ps: u64) -> bool {
        phase_ps >= self.offset_ps && phase_ps < self.offset_ps + self.width_ps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    pub efficiency: f64,
    pub jitter_fwhm_ps: f64,
    pub dead_time_ps: u64,
    pub dark_rate_cps: f64,
    pub gate: Option<CycleGate>,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self::snspd()
    }
}

impl DetectorParams {
    /// Superconducting nanowire detector as used at the source site.
    pub fn snspd() -> Self {
        DetectorParams {
            efficiency: 0.6,
            jitter_fwhm_ps: 70.0,
            dead_time_ps: 0,
            dark_rate_cps: 100.0,
            gate: None,
        }
    }

    /// Avalanche photodiode as used in the deployed receiver.
    pub fn apd() -> Self {
        DetectorParams {
            efficiency: 0.25,
            jitter_fwhm_ps: 75.0,
            dead_time_ps: 100_000,
            dark_rate_cps: 1000.0,
            gate: None,
        }
    }

    pub fn ideal() -> Self {
        DetectorParams {
            efficiency: 1.0,
            jitter_fwhm_ps: 0.0,
            dead_time_ps: 0,
            dark_rate_cps: 0.0,
            gate: None,
        }
    }

    pub fn validate(&self, clock: &ClockFrame) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::param("detector.efficiency", "must be in [0, 1]"));
        }
        if !(self.jitter_fwhm_ps >= 0.0 && self.jitter_fwhm_ps.is_finite()) {
            return Err(Error::param("detector.jitter_fwhm_ps", "must be >= 0"));
        }
        if !(self.dark_rate_cps >= 0.0 && self.dark_rate_cps.is_finite()) {
            return Err(Error::param("detector.dark_rate_cps", "must be >= 0"));
        }
        if let Some(g) = &self.gate {
            g.validate(clock)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectedTag {
    pub tag: TimeTag,
    pub dark: bool,
}

/// Efficiency, jitter and dark counts for photons arriving within `span`.
/// Output is unsorted; [`finalize_detection`] applies ordering, dead time and
/// the gate.
pub fn detect_raw(
    times: &[u64],
    channel: u8,
    det: &DetectorParams,
    span: Range<u64>,
    seed: u64,
    stream_index: u64,
) -> Vec<DetectedTag> {
    let mut rng = stream_rng(seed, "detector", (u64::from(channel) << 48) ^ stream_index);
    let sigma = det.jitter_fwhm_ps / FWHM_PER_SIGMA;
    let mut out = Vec::with_capacity((times.len() as f64 * det.efficiency) as usize + 8);
    for &t in times {
        if rng.random::<f64>() >= det.efficiency {
            continue;
        }
        let t = if sigma > 0.0 {
            let n: f64 = rng.sample(StandardNormal);
            (t as f64 + (n * sigma).round()).max(0.0) as u64
        } else {
            t
        };
        out.push(DetectedTag {
            tag: TimeTag::new(channel, t),
            dark: false,
        });
    }
    let len = span.end.saturating_sub(span.start);
    let mean = det.dark_rate_cps * len as f64 * 1e-12;
    if mean > 0.0 {
        let n = Poisson::new(mean).expect("mean > 0").sample(&mut rng) as u64;
        for _ in 0..n {
            out.push(DetectedTag {
                tag: TimeTag::new(channel, rng.random_range(span.clone())),
                dark: true,
            });
        }
    }
    out
}

/// Sorts, enforces dead time against the previous accepted tag and drops
/// tags outside the cycle gate.
pub fn finalize_detection(mut tags: Vec<DetectedTag>, det: &DetectorParams, clock: &ClockFrame) -> Vec<DetectedTag> {
    tags.sort_by_key(|d| (d.tag.timestamp_ps, d.dark));
    let mut out = Vec::with_capacity(tags.len());
    let mut last: Option<u64> = None;
    for d in tags {
        let t = d.tag.timestamp_ps;
        if let Some(prev) = last {
            if det.dead_time_ps > 0 && t < prev + det.dead_time_ps {
                continue;
            }
        }
        last = Some(t);
        if let Some(g) = &det.gate {
            if !g.contains_phase(t % clock.period_ps) {
                continue;
            }
        }
        out.push(d);
    }
    out
}

pub fn detect_with_origin(
    times: &[u64],
    channel: u8,
    det: &DetectorParams,
    clock: &ClockFrame,
    span: Range<u64>,
    seed: u64,
) -> Result<Vec<DetectedTag>> {
    det.validate(clock)?;
    if times.windows(2).any(|w| w[1] < w[0]) {
        let position = times.windows(2).position(|w| w[1] < w[0]).unwrap_or(0) + 1;
        return Err(Error::Unsorted { position });
    }
    let raw = detect_raw(times, channel, det, span, seed, 0);
    Ok(finalize_detection(raw, det, clock))
}

pub fn detect(
    times: &[u64],
    channel: u8,
    det: &DetectorParams,
    clock: &ClockFrame,
    span: Range<u64>,
    seed: u64,
) -> Result<Vec<TimeTag>> {
    Ok(detect_with_origin(times, channel, det, clock, span, seed)?
        .into_iter()
        .map(|d| d.tag)
        .collect())
}

/// A tag recorded against a divided reference clock: the frame counter of
/// the divided clock and the offset inside that frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramedTag {
    pub channel: u8,
    pub frame_index: u64,
    pub offset_ps: u64,
}

impl FramedTag {
    pub fn to_time_tag(&self, frame_period_ps: u64) -> TimeTag {
        TimeTag::new(self.channel, self.frame_index * frame_period_ps + self.offset_ps)
    }
}

pub fn divide_clock(tags: &[TimeTag], base: &ClockFrame, divisor: u64) -> Result<Vec<FramedTag>> {
    if divisor == 0 {
        return Err(Error::param("divisor", "must be >= 1"));
    }
    let frame = base.period_ps * divisor;
    Ok(tags
        .iter()
        .map(|t| FramedTag {
            channel: t.channel,
            frame_index: t.timestamp_ps / frame,
            offset_ps: t.timestamp_ps % frame,
        })
        .collect())
}

/// Records remote tags against the divided reference clock, which reaches
/// the remote site over a fiber of the same delay, and re-expresses each
/// frame/offset pair on the source time axis.
pub fn align_to_reference(tags: &mut [DetectedTag], delay_ps: u64, clock: &ClockFrame) {
    let frame = clock.frame_period_ps();
    for d in tags {
        let local = d.tag.timestamp_ps.saturating_sub(delay_ps);
        let framed = FramedTag {
            channel: d.tag.channel,
            frame_index: local / frame,
            offset_ps: local % frame,
        };
        d.tag = framed.to_time_tag(frame);
    }
}
