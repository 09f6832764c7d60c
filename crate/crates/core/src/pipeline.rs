//! End-to-end runs: simulate an acquisition from a config, record it as
//! stream files with a manifest, read it back and analyse it.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{arm_times, project, simulate_emissions, split_beam, Arm, ArmAnalyzer, PolarizationBasis};
use crate::config::{hex, AnalysisConfig, ExperimentConfig, Mode};
use crate::correlator::{build_grid, g2_histogram, g2_zero, CoincidenceGrid, G2Histogram, GridGeometry, GridSpec};
use crate::error::{Error, Result};
use crate::fidelity::{
    delay_curve, fidelity_map, stability_series, window_peak, BasisGrids, BasisPair, DelayCurve, DelayPoint,
    FidelityMap, GateSpec, SlicePeak, WindowPeak,
};
use crate::link::{align_to_reference, detect_raw, finalize_detection, transmit, CycleGate, DetectedTag};
use crate::polarization::JonesMatrix;
use crate::polcontrol::compensate_before_measurement;
use crate::rng::derive_seed;
use crate::timetag::{decode_stream, encode_stream, ClockFrame, StreamHeader, TimeTag};

pub const XX_P: u8 = 0;
pub const XX_Q: u8 = 1;
pub const X_P: u8 = 2;
pub const X_Q: u8 = 3;
pub const X_A: u8 = 0;
pub const X_B: u8 = 1;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

const CHUNK_CYCLES: u64 = 1 << 18;

pub fn channel_roles(mode: Mode) -> BTreeMap<u8, String> {
    let names: &[(u8, &str)] = match mode {
        Mode::Entanglement => &[(XX_P, "XX-P"), (XX_Q, "XX-Q"), (X_P, "X-P"), (X_Q, "X-Q")],
        Mode::Autocorrelation => &[(X_A, "X-A"), (X_B, "X-B")],
    };
    names.iter().map(|(c, n)| (*c, n.to_string())).collect()
}

/// One measurement set: a run of cycles analysed in a single basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRecord {
    pub index: usize,
    pub basis: PolarizationBasis,
    pub start_ps: u64,
    pub end_ps: u64,
    /// Compensation voltages held during the set, if a link is present.
    pub voltages: Option<Vec<f64>>,
    pub leakage: Option<f64>,
}

impl SetRecord {
    fn cycles(&self, clock: &ClockFrame) -> Range<u64> {
        self.start_ps / clock.period_ps..self.end_ps / clock.period_ps
    }
}

/// Sets of `set_cycles` cycles rotating through HV, DA and RL.
pub fn measurement_schedule(cfg: &ExperimentConfig) -> Vec<SetRecord> {
    let period = cfg.clock.period_ps;
    let mut out = Vec::new();
    let mut start = 0u64;
    while start < cfg.n_cycles {
        let end = (start + cfg.set_cycles).min(cfg.n_cycles);
        let index = out.len();
        out.push(SetRecord {
            index,
            basis: PolarizationBasis::ALL[index % 3],
            start_ps: start * period,
            end_ps: end * period,
            voltages: None,
            leakage: None,
        });
        start = end;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub mode: Mode,
    pub clock: ClockFrame,
    pub span_ps: u64,
    pub schedule: Vec<SetRecord>,
    pub roles: BTreeMap<u8, String>,
    /// Indexed by channel number.
    pub channels: Vec<Vec<DetectedTag>>,
}

impl Acquisition {
    pub fn streams(&self) -> Vec<Vec<TimeTag>> {
        self.channels
            .iter()
            .map(|c| c.iter().map(|d| d.tag).collect())
            .collect()
    }
}

fn chunk_ranges(schedule: &[SetRecord], clock: &ClockFrame) -> Vec<(usize, Range<u64>)> {
    let mut out = Vec::new();
    for set in schedule {
        let r = set.cycles(clock);
        let mut s = r.start;
        while s < r.end {
            let e = (s + CHUNK_CYCLES).min(r.end);
            out.push((set.index, s..e));
            s = e;
        }
    }
    out
}

/// Runs the source, link and detectors for the whole configured span.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Acquisition> {
    cfg.validate()?;
    let clock = cfg.clock;
    let period = clock.period_ps;
    let seed = cfg.seed;
    let drift_seed = derive_seed(seed, "fiber-drift", 0);
    let mut schedule = measurement_schedule(cfg);

    let mut compensation: Vec<JonesMatrix> = vec![JonesMatrix::identity(); schedule.len()];
    if let (Mode::Entanglement, Some(fiber)) = (cfg.mode, &cfg.fiber) {
        let starts: Vec<u64> = schedule.iter().map(|s| s.start_ps).collect();
        let comp = &cfg.compensation;
        let sets = compensate_before_measurement(
            &fiber.drift,
            drift_seed,
            &starts,
            &comp.stack,
            &comp.calibration,
            comp.enabled,
        )?;
        for ((rec, c), m) in schedule.iter_mut().zip(&sets).zip(compensation.iter_mut()) {
            *m = c.matrix(&comp.stack)?;
            rec.voltages = Some(c.voltages.clone());
            rec.leakage = Some(c.leakage);
        }
    }

    let n_channels = match cfg.mode {
        Mode::Entanglement => 4,
        Mode::Autocorrelation => 2,
    };
    let delay = cfg.fiber.map_or(0, |f| f.propagation_delay_ps);
    let chunks = chunk_ranges(&schedule, &clock);
    let per_chunk: Vec<Vec<Vec<DetectedTag>>> = chunks
        .par_iter()
        .map(|(set, range)| -> Result<Vec<Vec<DetectedTag>>> {
            let key = range.start;
            let span = range.start * period..range.end * period;
            let events = simulate_emissions(&cfg.source, range.clone(), seed)?;
            match cfg.mode {
                Mode::Entanglement => {
                    let (events, xx_span) = match &cfg.fiber {
                        Some(f) => (
                            transmit(&events, Arm::Xx, f, drift_seed, seed, key),
                            span.start + delay..span.end + delay,
                        ),
                        None => (events, span.clone()),
                    };
                    let basis = schedule[*set].basis.analyzer();
                    let xx = ArmAnalyzer::fixed(basis * compensation[*set]);
                    let x = ArmAnalyzer::fixed(basis);
                    let s = project(&events, &xx, &x, seed, key);
                    let d = &cfg.detectors;
                    Ok(vec![
                        detect_raw(&s.xx_p, XX_P, &d.xx, xx_span.clone(), seed, key),
                        detect_raw(&s.xx_q, XX_Q, &d.xx, xx_span, seed, key),
                        detect_raw(&s.x_p, X_P, &d.x, span.clone(), seed, key),
                        detect_raw(&s.x_q, X_Q, &d.x, span, seed, key),
                    ])
                }
                Mode::Autocorrelation => {
                    let (a, b) = split_beam(&arm_times(&events, Arm::X), seed, key);
                    let d = &cfg.detectors.x;
                    Ok(vec![
                        detect_raw(&a, X_A, d, span.clone(), seed, key),
                        detect_raw(&b, X_B, d, span, seed, key),
                    ])
                }
            }
        })
        .collect::<Result<_>>()?;

    let mut raw: Vec<Vec<DetectedTag>> = vec![Vec::new(); n_channels];
    for chunk in per_chunk {
        for (acc, part) in raw.iter_mut().zip(chunk) {
            acc.extend(part);
        }
    }
    let channels: Vec<Vec<DetectedTag>> = raw
        .into_par_iter()
        .enumerate()
        .map(|(ch, mut tags)| {
            let remote = cfg.mode == Mode::Entanglement && (ch as u8 == XX_P || ch as u8 == XX_Q);
            let det = if remote { &cfg.detectors.xx } else { &cfg.detectors.x };
            if remote && delay > 0 {
                align_to_reference(&mut tags, delay, &clock);
            }
            finalize_detection(tags, det, &clock)
        })
        .collect();

    Ok(Acquisition {
        mode: cfg.mode,
        clock,
        span_ps: cfg.span_ps(),
        schedule,
        roles: channel_roles(cfg.mode),
        channels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub channel: u8,
    pub role: String,
    pub path: String,
    pub sha256: String,
    pub n_tags: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub mode: Mode,
    pub n_cycles: u64,
    pub span_ps: u64,
    pub clock: ClockFrame,
    pub acquisition_start_ns: i64,
    pub schedule: Vec<SetRecord>,
    pub files: Vec<ManifestFile>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes one stream file per channel and the manifest into `dir`.
pub fn write_acquisition(acq: &Acquisition, cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (ch, tags) in acq.channels.iter().enumerate() {
        let ch = ch as u8;
        let role = acq.roles.get(&ch).cloned().unwrap_or_else(|| format!("ch{ch}"));
        let mut header = StreamHeader::new(acq.clock, BTreeMap::from([(ch, role.clone())]));
        header.acquisition_start_ns = cfg.acquisition_start_ns;
        let plain: Vec<TimeTag> = tags.iter().map(|d| d.tag).collect();
        let bytes = encode_stream(&header, &plain)?;
        let name = format!("ch{ch}_{}.etag", role.to_lowercase());
        fs::write(dir.join(&name), &bytes)?;
        files.push(ManifestFile {
            channel: ch,
            role,
            path: name,
            sha256: sha256_hex(&bytes),
            n_tags: plain.len() as u64,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        mode: acq.mode,
        n_cycles: cfg.n_cycles,
        span_ps: acq.span_ps,
        clock: acq.clock,
        acquisition_start_ns: cfg.acquisition_start_ns,
        schedule: acq.schedule.clone(),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_NAME), text + "\n")?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRun {
    pub manifest: Manifest,
    /// Indexed by channel number.
    pub streams: Vec<Vec<TimeTag>>,
}

/// Reads a recorded run. The manifest's config hash must match `cfg`
/// unless `allow_mismatch` is set; file hashes are always checked.
pub fn read_acquisition(dir: &Path, cfg: &ExperimentConfig, allow_mismatch: bool) -> Result<RecordedRun> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("unsupported manifest version {}", manifest.version)));
    }
    if !allow_mismatch && manifest.config_sha256 != cfg.hash() {
        return Err(Error::Manifest(format!(
            "streams were produced by config {} but {} was supplied",
            manifest.config_sha256,
            cfg.hash()
        )));
    }
    let n = manifest.files.iter().map(|f| f.channel as usize + 1).max().unwrap_or(0);
    let mut streams = vec![Vec::new(); n];
    for f in &manifest.files {
        let bytes = fs::read(dir.join(&f.path))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(Error::Manifest(format!("{} does not match its recorded hash", f.path)));
        }
        let (header, tags) = decode_stream(&bytes)?;
        if header.clock != manifest.clock {
            return Err(Error::Format(format!("{} was recorded with a different clock", f.path)));
        }
        if tags.iter().any(|t| t.channel != f.channel) {
            return Err(Error::Format(format!("{} holds tags of another channel", f.path)));
        }
        streams[f.channel as usize] = tags;
    }
    Ok(RecordedRun { manifest, streams })
}

fn window<'a>(tags: &'a [TimeTag], range: &Range<u64>) -> &'a [TimeTag] {
    let lo = tags.partition_point(|t| t.timestamp_ps < range.start);
    let hi = tags.partition_point(|t| t.timestamp_ps < range.end);
    &tags[lo..hi]
}

fn gather(stream: &[TimeTag], sets: &[&SetRecord]) -> Vec<TimeTag> {
    sets.iter()
        .flat_map(|s| window(stream, &(s.start_ps..s.end_ps)).iter().copied())
        .collect()
}

fn channel(streams: &[Vec<TimeTag>], ch: u8) -> Result<&[TimeTag]> {
    streams
        .get(ch as usize)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Format(format!("channel {ch} missing")))
}

/// Co- and cross-polarized grids of every basis, using each set's tags only.
///
/// Sets of one basis are never adjacent, so concatenating their tags adds no
/// pair across sets as long as the coincidence window is shorter than a set.
pub fn basis_grids(streams: &[Vec<TimeTag>], sets: &[&SetRecord], spec: &GridSpec) -> Result<BasisGrids> {
    let geo = spec.geometry()?;
    let pairs: Vec<BasisPair> = PolarizationBasis::ALL
        .iter()
        .map(|b| -> Result<BasisPair> {
            let chosen: Vec<&SetRecord> = sets.iter().copied().filter(|s| s.basis == *b).collect();
            if chosen.is_empty() {
                return Err(Error::Degenerate(format!("no measurement set in the {} basis", b.label())));
            }
            let g = |ch: u8| -> Result<Vec<TimeTag>> { Ok(gather(channel(streams, ch)?, &chosen)) };
            let (xxp, xxq, xp, xq) = (g(XX_P)?, g(XX_Q)?, g(X_P)?, g(X_Q)?);
            let co = build_grid(&xxp, &xp, spec)?.merged(&build_grid(&xxq, &xq, spec)?)?;
            let cross = build_grid(&xxp, &xq, spec)?.merged(&build_grid(&xxq, &xp, spec)?)?;
            Ok(BasisPair { co, cross })
        })
        .collect::<Result<_>>()?;
    let [hv, da, rl]: [BasisPair; 3] = pairs.try_into().expect("three bases");
    let grids = BasisGrids::new(hv, da, rl)?;
    debug_assert_eq!(grids.geometry(), geo);
    Ok(grids)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub version: u32,
    pub geometry: GridGeometry,
    pub gate: GateSpec,
    pub ungated_peak: DelayPoint,
    pub gated_peak: DelayPoint,
    pub window: WindowPeak,
    /// Co and cross totals per basis before gating, HV, DA, RL.
    pub totals: [[u64; 2]; 3],
    pub curve: DelayCurve,
    pub ungated_curve: DelayCurve,
    pub map: FidelityMap,
}

pub fn analyze_fidelity(
    streams: &[Vec<TimeTag>],
    schedule: &[SetRecord],
    clock: &ClockFrame,
    analysis: &AnalysisConfig,
) -> Result<FidelityReport> {
    analysis.validate(clock)?;
    let sets: Vec<&SetRecord> = schedule.iter().collect();
    let (coarse, fine) = rayon::join(
        || basis_grids(streams, &sets, &analysis.grid_spec(clock)),
        || basis_grids(streams, &sets, &analysis.fine_grid_spec(clock)),
    );
    let coarse = coarse?;
    let fine = fine?;
    let ungated_curve = delay_curve(&fidelity_map(&coarse)?)?;
    let map = fidelity_map(&coarse.apply_gate(&analysis.gate)?)?;
    let curve = delay_curve(&map)?;
    let window = window_peak(&fine, analysis.window_ps, analysis.window_step_ps, analysis.window_min_fraction)?;
    let totals = coarse.bases.each_ref().map(|p| [p.co.total(), p.cross.total()]);
    Ok(FidelityReport {
        version: REPORT_VERSION,
        geometry: coarse.geometry(),
        gate: analysis.gate,
        ungated_peak: ungated_curve.peak,
        gated_peak: curve.peak,
        window,
        totals,
        curve,
        ungated_curve,
        map,
    })
}

/// Peak gated fidelity per wall-time slice; a set belongs to the slice its
/// start falls in.
pub fn analyze_stability(
    streams: &[Vec<TimeTag>],
    schedule: &[SetRecord],
    clock: &ClockFrame,
    analysis: &AnalysisConfig,
) -> Result<Vec<SlicePeak>> {
    analysis.validate(clock)?;
    let mut slices: BTreeMap<u64, Vec<&SetRecord>> = BTreeMap::new();
    for s in schedule {
        slices.entry(s.start_ps / analysis.slice_duration_ps).or_default().push(s);
    }
    let spec = analysis.grid_spec(clock);
    let grids: Vec<BasisGrids> = slices
        .values()
        .map(|sets| basis_grids(streams, sets, &spec))
        .collect::<Result<_>>()?;
    stability_series(&grids, &analysis.gate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct G2Report {
    pub version: u32,
    pub ungated: G2Histogram,
    pub g2_zero: f64,
    pub g2_zero_sigma: f64,
    pub gate: CycleGate,
    pub gated: G2Histogram,
    pub gated_g2_zero: f64,
    pub gated_g2_zero_sigma: f64,
}

/// Window of `width_ps` holding the most tags of the given streams.
pub fn brightest_window(streams: &[&[TimeTag]], clock: &ClockFrame, width_ps: u64) -> Result<CycleGate> {
    let period = clock.period_ps;
    if width_ps == 0 || width_ps > period {
        return Err(Error::param("window_ps", format!("{width_ps} ps does not fit the cycle")));
    }
    let mut prefix = vec![0u64; period as usize + 1];
    for t in streams.iter().flat_map(|s| s.iter()) {
        prefix[(t.timestamp_ps % period) as usize + 1] += 1;
    }
    for i in 1..prefix.len() {
        prefix[i] += prefix[i - 1];
    }
    let w = width_ps as usize;
    let best = (0..=period as usize - w)
        .max_by_key(|&o| (prefix[o + w] - prefix[o], std::cmp::Reverse(o)))
        .unwrap_or(0);
    Ok(CycleGate {
        offset_ps: best as u64,
        width_ps,
    })
}

pub fn analyze_g2(streams: &[Vec<TimeTag>], clock: &ClockFrame, analysis: &AnalysisConfig) -> Result<G2Report> {
    analysis.validate(clock)?;
    let a = channel(streams, X_A)?;
    let b = channel(streams, X_B)?;
    let config = analysis.g2_config();
    let ungated = g2_histogram(a, b, clock, &config)?;
    let gate = brightest_window(&[a, b], clock, analysis.g2_window_ps)?;
    let gated_config = crate::correlator::G2Config {
        gate: Some(gate),
        ..config
    };
    let gated = g2_histogram(a, b, clock, &gated_config)?;
    let (g, gs) = g2_zero(&ungated);
    let (h, hs) = g2_zero(&gated);
    Ok(G2Report {
        version: REPORT_VERSION,
        ungated,
        g2_zero: g,
        g2_zero_sigma: gs,
        gate,
        gated,
        gated_g2_zero: h,
        gated_g2_zero_sigma: hs,
    })
}

/// Grid of one channel pair over the whole run, for inspection.
pub fn channel_pair_grid(streams: &[Vec<TimeTag>], a: u8, b: u8, spec: &GridSpec) -> Result<CoincidenceGrid> {
    build_grid(channel(streams, a)?, channel(streams, b)?, spec)
}
