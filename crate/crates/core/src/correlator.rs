//! Coincidence counting on the clock-phase grid and g² histograms.
//!
//! A [`CoincidenceGrid`] counts pairs of tags from two channels by where each
//! tag falls within a frame of `n_cycles` consecutive clock cycles. Bins are
//! anchored at the cycle start; when the bin width does not divide the period
//! the last bin of every cycle is shorter and is reported as truncated.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::CycleGate;
use crate::timetag::{fold_timestamp, ClockFrame, TimeTag};

pub const BRUTE_FORCE_LIMIT: usize = 100_000;
pub const GRID_FORMAT_VERSION: u32 = 1;

const PAR_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub period_ps: u64,
    pub bin_ps: u64,
    pub n_cycles: u64,
}

impl GridGeometry {
    pub fn new(period_ps: u64, bin_ps: u64, n_cycles: u64) -> Result<Self> {
        if bin_ps == 0 || bin_ps > period_ps {
            return Err(Error::param(
                "bin_ps",
                format!("{bin_ps} ps is not a usable bin width for a {period_ps} ps cycle"),
            ));
        }
        if n_cycles == 0 {
            return Err(Error::param("n_cycles", "must be >= 1"));
        }
        Ok(GridGeometry {
            period_ps,
            bin_ps,
            n_cycles,
        })
    }

    pub fn bins_per_cycle(&self) -> usize {
        self.period_ps.div_ceil(self.bin_ps) as usize
    }

    pub fn axis_len(&self) -> usize {
        self.bins_per_cycle() * self.n_cycles as usize
    }

    pub fn has_truncated_bin(&self) -> bool {
        self.period_ps % self.bin_ps != 0
    }

    /// Whether axis position `i` is the short final bin of its cycle.
    pub fn is_truncated(&self, i: usize) -> bool {
        self.has_truncated_bin() && i % self.bins_per_cycle() == self.bins_per_cycle() - 1
    }

    /// `[start, end)` of axis position `i` as a phase within its cycle.
    pub fn bin_phase_range(&self, i: usize) -> (u64, u64) {
        let b = (i % self.bins_per_cycle()) as u64;
        let start = b * self.bin_ps;
        (start, (start + self.bin_ps).min(self.period_ps))
    }

    fn position(&self, cycle: u64, phase_ps: u64) -> usize {
        let bpc = self.bins_per_cycle();
        let b = ((phase_ps / self.bin_ps) as usize).min(bpc - 1);
        (cycle % self.n_cycles) as usize * bpc + b
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoincidenceGrid {
    pub geometry: GridGeometry,
    pub coincidence_window_ps: u64,
    /// Row-major, rows indexed by the first stream's position.
    pub counts: Vec<u64>,
    pub singles_a: u64,
    pub singles_b: u64,
    pub acquisition_span_ps: u64,
}

impl CoincidenceGrid {
    pub fn zeros(geometry: GridGeometry, coincidence_window_ps: u64) -> Self {
        let n = geometry.axis_len();
        CoincidenceGrid {
            geometry,
            coincidence_window_ps,
            counts: vec![0; n * n],
            singles_a: 0,
            singles_b: 0,
            acquisition_span_ps: 0,
        }
    }

    pub fn axis_len(&self) -> usize {
        self.geometry.axis_len()
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.axis_len() + j]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn check_compatible(&self, other: &CoincidenceGrid) -> Result<()> {
        if self.geometry != other.geometry || self.coincidence_window_ps != other.coincidence_window_ps {
            return Err(Error::GeometryMismatch(format!(
                "{:?} / {} ps window vs {:?} / {} ps window",
                self.geometry, self.coincidence_window_ps, other.geometry, other.coincidence_window_ps
            )));
        }
        Ok(())
    }

    /// Element-wise sum. Grids form a monoid under this operation.
    pub fn merge(&mut self, other: &CoincidenceGrid) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.singles_a += other.singles_a;
        self.singles_b += other.singles_b;
        self.acquisition_span_ps += other.acquisition_span_ps;
        Ok(())
    }

    pub fn merged(mut self, other: &CoincidenceGrid) -> Result<Self> {
        self.merge(other)?;
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let n = self.axis_len();
        let mut counts = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                counts[j * n + i] = self.counts[i * n + j];
            }
        }
        CoincidenceGrid {
            counts,
            singles_a: self.singles_b,
            singles_b: self.singles_a,
            ..self.clone()
        }
    }

    /// The grid as a CSV matrix, one row per first-stream bin.
    pub fn to_csv(&self) -> String {
        let n = self.axis_len();
        let mut out = String::with_capacity(n * n * 3);
        for i in 0..n {
            for j in 0..n {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", self.get(i, j));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub clock: ClockFrame,
    pub bin_ps: u64,
    pub n_cycles: u64,
    pub coincidence_window_ps: u64,
}

impl GridSpec {
    pub fn geometry(&self) -> Result<GridGeometry> {
        self.clock.validate()?;
        GridGeometry::new(self.clock.period_ps, self.bin_ps, self.n_cycles)
    }
}

#[derive(Clone, Copy)]
struct Placed {
    t: u64,
    cycle: u64,
    pos: usize,
}

fn place(tags: &[TimeTag], clock: &ClockFrame, geo: &GridGeometry) -> Vec<Placed> {
    tags.iter()
        .map(|t| {
            let f = fold_timestamp(t.timestamp_ps, clock);
            let cycle = f.absolute_cycle(clock);
            Placed {
                t: t.timestamp_ps,
                cycle,
                pos: geo.position(cycle, f.phase_ps),
            }
        })
        .collect()
}

fn check_stream(tags: &[TimeTag]) -> Result<()> {
    match tags.windows(2).position(|w| w[1].timestamp_ps < w[0].timestamp_ps) {
        Some(p) => Err(Error::Unsorted { position: p + 1 }),
        None => Ok(()),
    }
}

fn span_of(a: &[TimeTag], b: &[TimeTag]) -> u64 {
    let first = a.first().into_iter().chain(b.first()).map(|t| t.timestamp_ps).min();
    let last = a.last().into_iter().chain(b.last()).map(|t| t.timestamp_ps).max();
    match (first, last) {
        (Some(f), Some(l)) => l - f,
        _ => 0,
    }
}

#[inline]
fn qualifies(a: &Placed, b: &Placed, window: u64, n_cycles: u64) -> bool {
    a.t.abs_diff(b.t) < window && a.cycle.abs_diff(b.cycle) < n_cycles
}

fn count_chunk(a: &[Placed], b: &[Placed], window: u64, geo: &GridGeometry) -> Vec<u64> {
    let n = geo.axis_len();
    let mut counts = vec![0u64; n * n];
    if window == 0 || a.is_empty() {
        return counts;
    }
    let mut lo = b.partition_point(|p| p.t + window <= a[0].t);
    for pa in a {
        while lo < b.len() && b[lo].t + window <= pa.t {
            lo += 1;
        }
        for pb in &b[lo..] {
            if pb.t >= pa.t + window {
                break;
            }
            if qualifies(pa, pb, window, geo.n_cycles) {
                counts[pa.pos * n + pb.pos] += 1;
            }
        }
    }
    counts
}

/// Counts every pair `(a, b)` with `|t_b - t_a| < window` whose cycles are
/// fewer than `n_cycles` apart, at `(position(a), position(b))`.
///
/// Streams must be sorted by time. Work is linear in tags plus qualifying
/// pairs; the first stream is split into chunks counted in parallel.
pub fn build_grid(stream_a: &[TimeTag], stream_b: &[TimeTag], spec: &GridSpec) -> Result<CoincidenceGrid> {
    let geo = spec.geometry()?;
    check_stream(stream_a)?;
    check_stream(stream_b)?;
    let a = place(stream_a, &spec.clock, &geo);
    let b = place(stream_b, &spec.clock, &geo);
    let window = spec.coincidence_window_ps;
    let n2 = geo.axis_len() * geo.axis_len();
    let counts = a
        .par_chunks(PAR_CHUNK)
        .map(|chunk| count_chunk(chunk, &b, window, &geo))
        .reduce(
            || vec![0u64; n2],
            |mut x, y| {
                for (p, q) in x.iter_mut().zip(&y) {
                    *p += q;
                }
                x
            },
        );
    Ok(CoincidenceGrid {
        geometry: geo,
        coincidence_window_ps: window,
        counts,
        singles_a: stream_a.len() as u64,
        singles_b: stream_b.len() as u64,
        acquisition_span_ps: span_of(stream_a, stream_b),
    })
}

/// All-pairs reference for [`build_grid`].
pub fn brute_force_coincidences(
    stream_a: &[TimeTag],
    stream_b: &[TimeTag],
    spec: &GridSpec,
) -> Result<CoincidenceGrid> {
    let size = stream_a.len() + stream_b.len();
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::GuardExceeded {
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let geo = spec.geometry()?;
    let a = place(stream_a, &spec.clock, &geo);
    let b = place(stream_b, &spec.clock, &geo);
    let mut grid = CoincidenceGrid::zeros(geo, spec.coincidence_window_ps);
    let n = geo.axis_len();
    for pa in &a {
        for pb in &b {
            if qualifies(pa, pb, spec.coincidence_window_ps, geo.n_cycles) {
                grid.counts[pa.pos * n + pb.pos] += 1;
            }
        }
    }
    grid.singles_a = stream_a.len() as u64;
    grid.singles_b = stream_b.len() as u64;
    grid.acquisition_span_ps = span_of(stream_a, stream_b);
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct G2Config {
    pub n_delays: usize,
    /// Smallest and largest |Δcycle| used as the uncorrelated reference.
    pub norm_min_cycles: u64,
    pub norm_max_cycles: u64,
    pub gate: Option<CycleGate>,
}

impl Default for G2Config {
    fn default() -> Self {
        G2Config {
            n_delays: 21,
            norm_min_cycles: 5,
            norm_max_cycles: 10,
            gate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct G2Histogram {
    pub version: u32,
    pub period_ps: u64,
    /// Cycle offset of the second stream relative to the first, per bin.
    pub delays: Vec<i64>,
    pub raw: Vec<u64>,
    pub normalized: Vec<f64>,
    pub reference_mean: f64,
    pub reference_total: u64,
    pub gate: Option<CycleGate>,
}

impl G2Histogram {
    pub fn center_index(&self) -> usize {
        self.delays.len() / 2
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("delay_ns,raw,normalized\n");
        for ((d, r), v) in self.delays.iter().zip(&self.raw).zip(&self.normalized) {
            let ns = *d as f64 * self.period_ps as f64 / 1000.0;
            let _ = writeln!(out, "{ns},{r},{v}");
        }
        out
    }
}

/// Histogram of coincidences between two detectors behind a beam splitter,
/// in clock-cycle-wide delay bins, normalised by the mean of the bins with
/// `norm_min_cycles ≤ |Δcycle| ≤ norm_max_cycles`.
pub fn g2_histogram(
    stream_1: &[TimeTag],
    stream_2: &[TimeTag],
    clock: &ClockFrame,
    config: &G2Config,
) -> Result<G2Histogram> {
    clock.validate()?;
    check_stream(stream_1)?;
    check_stream(stream_2)?;
    if config.n_delays == 0 || config.n_delays % 2 == 0 {
        return Err(Error::param("g2.n_delays", "must be odd"));
    }
    if let Some(g) = &config.gate {
        g.validate(clock)?;
    }
    let half = (config.n_delays / 2) as u64;
    let reference: Vec<i64> = (-(half as i64)..=half as i64)
        .filter(|d| (config.norm_min_cycles..=config.norm_max_cycles).contains(&d.unsigned_abs()))
        .collect();
    if reference.is_empty() {
        return Err(Error::param(
            "g2.norm_cycles",
            format!(
                "{}..={} selects no delay bin of a {}-bin histogram",
                config.norm_min_cycles, config.norm_max_cycles, config.n_delays
            ),
        ));
    }
    let gated = |t: &TimeTag| {
        config
            .gate
            .is_none_or(|g| g.contains_phase(t.timestamp_ps % clock.period_ps))
    };
    let s1: Vec<u64> = stream_1.iter().filter(|t| gated(t)).map(|t| t.timestamp_ps / clock.period_ps).collect();
    let s2: Vec<u64> = stream_2.iter().filter(|t| gated(t)).map(|t| t.timestamp_ps / clock.period_ps).collect();

    let mut raw = vec![0u64; config.n_delays];
    let mut lo = 0usize;
    for &k in &s1 {
        while lo < s2.len() && s2[lo] + half < k {
            lo += 1;
        }
        for &k2 in &s2[lo..] {
            if k2 > k + half {
                break;
            }
            raw[(k2 as i64 - k as i64 + half as i64) as usize] += 1;
        }
    }
    let reference_total: u64 = reference.iter().map(|d| raw[(d + half as i64) as usize]).sum();
    if reference_total == 0 {
        return Err(Error::Degenerate("no coincidences in the normalization bins".into()));
    }
    let reference_mean = reference_total as f64 / reference.len() as f64;
    Ok(G2Histogram {
        version: GRID_FORMAT_VERSION,
        period_ps: clock.period_ps,
        delays: (-(half as i64)..=half as i64).collect(),
        normalized: raw.iter().map(|&c| c as f64 / reference_mean).collect(),
        raw,
        reference_mean,
        reference_total,
        gate: config.gate,
    })
}

/// Normalised zero-delay value with its Poisson uncertainty.
pub fn g2_zero(hist: &G2Histogram) -> (f64, f64) {
    let c = hist.raw[hist.center_index()] as f64;
    let value = c / hist.reference_mean;
    let sigma = if c > 0.0 {
        value * (1.0 / c + 1.0 / hist.reference_total as f64).sqrt()
    } else {
        1.0 / hist.reference_mean
    };
    (value, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(bin: u64, n: u64, window: u64) -> GridSpec {
        GridSpec {
            clock: ClockFrame::GHZ,
            bin_ps: bin,
            n_cycles: n,
            coincidence_window_ps: window,
        }
    }

    fn tags(ch: u8, ts: &[u64]) -> Vec<TimeTag> {
        ts.iter().map(|&t| TimeTag::new(ch, t)).collect()
    }

    fn random_stream(rng: &mut ChaCha8Rng, n: usize, span: u64) -> Vec<TimeTag> {
        let mut v: Vec<u64> = (0..n).map(|_| rng.random_range(0..span)).collect();
        v.sort_unstable();
        tags(0, &v)
    }

    #[test]
    fn geometry_of_72ps_bins() {
        let g = GridGeometry::new(1000, 72, 3).unwrap();
        assert_eq!(g.bins_per_cycle(), 14);
        assert_eq!(g.axis_len(), 42);
        assert!(g.is_truncated(13) && g.is_truncated(41) && !g.is_truncated(12));
        assert_eq!(g.bin_phase_range(13), (936, 1000));
        assert!(GridGeometry::new(1000, 0, 3).is_err());
        assert!(GridGeometry::new(1000, 1001, 3).is_err());
        assert!(!GridGeometry::new(1000, 125, 1).unwrap().has_truncated_bin());
    }

    #[test]
    fn empty_streams_give_zero_grid() {
        let g = build_grid(&[], &[], &spec(72, 3, 2000)).unwrap();
        assert_eq!(g.total(), 0);
        assert_eq!(g.counts.len(), 42 * 42);
        assert_eq!(g, brute_force_coincidences(&[], &[], &spec(72, 3, 2000)).unwrap());
    }

    #[test]
    fn single_pair_lands_at_floor_bins() {
        let a = tags(0, &[300]);
        let b = tags(1, &[500]);
        let g = build_grid(&a, &b, &spec(72, 3, 2000)).unwrap();
        assert_eq!(g.total(), 1);
        assert_eq!(g.get(4, 6), 1);
        assert_eq!(g, brute_force_coincidences(&a, &b, &spec(72, 3, 2000)).unwrap());
    }

    #[test]
    fn all_pairs_semantics() {
        let a = tags(0, &[1000]);
        let b = tags(1, &[1100, 1200, 5000]);
        let g = brute_force_coincidences(&a, &b, &spec(72, 3, 2000)).unwrap();
        assert_eq!(g.total(), 2);
        assert_eq!(build_grid(&a, &b, &spec(72, 3, 2000)).unwrap(), g);
        assert_eq!(brute_force_coincidences(&a, &b, &spec(72, 3, 0)).unwrap().total(), 0);
        assert_eq!(build_grid(&a, &b, &spec(72, 3, 0)).unwrap().total(), 0);
    }

    #[test]
    fn pairs_further_apart_than_the_frame_are_dropped() {
        // cycles 0 and 3 fold onto the same row on a 3-cycle frame
        let a = tags(0, &[100]);
        let b = tags(1, &[3100]);
        assert_eq!(build_grid(&a, &b, &spec(72, 3, 10_000)).unwrap().total(), 0);
        let b = tags(1, &[2100]);
        let g = build_grid(&a, &b, &spec(72, 3, 10_000)).unwrap();
        assert_eq!(g.get(1, 28 + 1), 1);
    }

    #[test]
    fn matches_oracle_on_seeded_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_stream(&mut rng, 10_000, 5_000_000);
        let b = random_stream(&mut rng, 10_000, 5_000_000);
        let s = spec(72, 3, 2000);
        let fast = build_grid(&a, &b, &s).unwrap();
        assert!(fast.total() > 0);
        assert_eq!(fast, brute_force_coincidences(&a, &b, &s).unwrap());
    }

    #[test]
    fn guard_and_ordering_errors() {
        let big = tags(0, &vec![0; 60_000]);
        assert!(matches!(
            brute_force_coincidences(&big, &big, &spec(72, 3, 10)),
            Err(Error::GuardExceeded { .. })
        ));
        let unsorted = tags(0, &[5, 3]);
        assert!(matches!(build_grid(&unsorted, &[], &spec(72, 1, 10)), Err(Error::Unsorted { position: 1 })));
    }

    #[test]
    fn merge_requires_matching_geometry() {
        let a = build_grid(&tags(0, &[300]), &tags(1, &[500]), &spec(72, 3, 2000)).unwrap();
        let b = build_grid(&tags(0, &[300]), &tags(1, &[500]), &spec(72, 1, 2000)).unwrap();
        assert!(matches!(a.clone().merged(&b), Err(Error::GeometryMismatch(_))));
        let m = a.clone().merged(&a).unwrap();
        assert_eq!(m.total(), 2);
        assert_eq!(m.singles_a, 2);
    }

    #[test]
    fn thinning_preserves_normalized_g2() {
        let clock = ClockFrame::GHZ;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // antibunched toy source: at most one photon per cycle, split 50:50
        let (mut s1, mut s2) = (Vec::new(), Vec::new());
        for k in 0..2_000_000u64 {
            if rng.random::<f64>() < 0.3 {
                let t = k * 1000 + rng.random_range(0..1000);
                if rng.random::<bool>() {
                    s1.push(TimeTag::new(0, t));
                } else {
                    s2.push(TimeTag::new(1, t));
                }
            }
            if rng.random::<f64>() < 0.02 {
                s1.push(TimeTag::new(0, k * 1000 + rng.random_range(0..1000)));
            }
        }
        s1.sort_by_key(TimeTag::sort_key);
        let full = g2_zero(&g2_histogram(&s1, &s2, &clock, &G2Config::default()).unwrap());
        let thin = |s: &[TimeTag], r: &mut ChaCha8Rng| -> Vec<TimeTag> {
            s.iter().copied().filter(|_| r.random::<f64>() < 0.5).collect()
        };
        let t1 = thin(&s1, &mut rng);
        let t2 = thin(&s2, &mut rng);
        let half = g2_zero(&g2_histogram(&t1, &t2, &clock, &G2Config::default()).unwrap());
        let tol = 3.0 * (full.1.powi(2) + half.1.powi(2)).sqrt();
        assert!((full.0 - half.0).abs() < tol, "{full:?} {half:?}");
    }

    #[test]
    fn single_photon_source_has_empty_center() {
        let clock = ClockFrame::GHZ;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut s1, mut s2) = (Vec::new(), Vec::new());
        for k in 0..200_000u64 {
            if rng.random::<f64>() < 0.5 {
                let t = TimeTag::new(0, k * 1000 + 400);
                if rng.random::<bool>() {
                    s1.push(t);
                } else {
                    s2.push(TimeTag::new(1, t.timestamp_ps));
                }
            }
        }
        let h = g2_histogram(&s1, &s2, &clock, &G2Config::default()).unwrap();
        assert_eq!(h.raw[10], 0);
        let (v, s) = g2_zero(&h);
        assert_eq!(v, 0.0);
        assert!(s > 0.0);
        assert_eq!(h.delays.len(), 21);
        assert_eq!(h.delays[0], -10);
    }

    #[test]
    fn g2_errors() {
        let clock = ClockFrame::GHZ;
        let s = tags(0, &[0, 1000, 2000]);
        assert!(matches!(
            g2_histogram(&s, &s, &clock, &G2Config::default()),
            Err(Error::Degenerate(_))
        ));
        let cfg = G2Config {
            norm_min_cycles: 11,
            norm_max_cycles: 20,
            ..G2Config::default()
        };
        assert!(matches!(g2_histogram(&s, &s, &clock, &cfg), Err(Error::InvalidParameter { .. })));
        let cfg = G2Config {
            gate: Some(CycleGate {
                offset_ps: 0,
                width_ps: 1001,
            }),
            ..G2Config::default()
        };
        assert!(g2_histogram(&s, &s, &clock, &cfg).is_err());
    }

    fn stream_strategy() -> impl Strategy<Value = Vec<u64>> {
        proptest::collection::vec(0u64..40_000, 0..300).prop_map(|mut v| {
            v.sort_unstable();
            v
        })
    }

    proptest! {
        #[test]
        fn build_grid_equals_oracle(
            a in stream_strategy(),
            b in stream_strategy(),
            bin in 1u64..400,
            n in 1u64..4,
            window in 0u64..4000,
        ) {
            let s = spec(bin, n, window);
            let (a, b) = (tags(0, &a), tags(1, &b));
            let fast = build_grid(&a, &b, &s).unwrap();
            let slow = brute_force_coincidences(&a, &b, &s).unwrap();
            prop_assert_eq!(&fast, &slow);
        }

        #[test]
        fn swapping_streams_transposes(a in stream_strategy(), b in stream_strategy(), window in 0u64..3000) {
            let s = spec(72, 3, window);
            let (a, b) = (tags(0, &a), tags(1, &b));
            let ab = build_grid(&a, &b, &s).unwrap();
            let ba = build_grid(&b, &a, &s).unwrap();
            prop_assert_eq!(ab.transpose(), ba);
        }

        #[test]
        fn total_equals_qualifying_pairs(a in stream_strategy(), b in stream_strategy(), window in 0u64..3000) {
            let s = spec(72, 2, window);
            let (ta, tb) = (tags(0, &a), tags(1, &b));
            let expected = a
                .iter()
                .flat_map(|x| b.iter().map(move |y| (*x, *y)))
                .filter(|(x, y)| x.abs_diff(*y) < window && (x / 1000).abs_diff(y / 1000) < 2)
                .count() as u64;
            prop_assert_eq!(build_grid(&ta, &tb, &s).unwrap().total(), expected);
        }
    }
}
