//! Bell-state fidelity from co- and cross-polarized coincidence grids in the
//! HV, DA and RL bases.
//!
//! Per bin, the degree of correlation in a basis is
//! `C = (c_co - c_cross) / (c_co + c_cross)` and the fidelity to φ⁺ is
//! `f = (1 + C_HV + C_DA - C_RL) / 4`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::PolarizationBasis;
use crate::correlator::{CoincidenceGrid, GridGeometry};
use crate::error::{Error, Result};

pub const FIDELITY_FORMAT_VERSION: u32 = 1;
pub const CLASSICAL_LIMIT: f64 = 0.5;

/// Temporal post-selection applied to both photons' phase within the cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum GateSpec {
    None,
    Central { width_ps: u64 },
    Window { offset_ps: u64, width_ps: u64 },
}

impl Default for GateSpec {
    fn default() -> Self {
        GateSpec::Central { width_ps: 864 }
    }
}

impl GateSpec {
    /// Accepted phases `[start, end)`, or `None` for no gate.
    pub fn phase_interval(&self, period_ps: u64) -> Result<Option<(u64, u64)>> {
        match *self {
            GateSpec::None => Ok(None),
            GateSpec::Central { width_ps } => {
                if width_ps == 0 || width_ps > period_ps {
                    return Err(Error::param("gate", format!("central width {width_ps} ps exceeds the {period_ps} ps cycle")));
                }
                let start = (period_ps - width_ps) / 2;
                Ok(Some((start, start + width_ps)))
            }
            GateSpec::Window { offset_ps, width_ps } => {
                if width_ps == 0 || offset_ps + width_ps > period_ps {
                    return Err(Error::param(
                        "gate",
                        format!("window [{offset_ps}, {}) outside the {period_ps} ps cycle", offset_ps + width_ps),
                    ));
                }
                Ok(Some((offset_ps, offset_ps + width_ps)))
            }
        }
    }

    pub fn validate(&self, period_ps: u64) -> Result<()> {
        self.phase_interval(period_ps).map(|_| ())
    }
}

impl fmt::Display for GateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateSpec::None => write!(f, "none"),
            GateSpec::Central { width_ps } => write!(f, "central:{width_ps}"),
            GateSpec::Window { offset_ps, width_ps } => write!(f, "window:{offset_ps}:{width_ps}"),
        }
    }
}

impl FromStr for GateSpec {
    type Err = Error;

    /// `none`, `central:<width>` or `window:<offset>:<width>`, in ps.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::param("gate", format!("`{p}` is not a whole number of ps")))
        };
        match parts.as_slice() {
            ["none"] => Ok(GateSpec::None),
            ["central", w] => Ok(GateSpec::Central { width_ps: num(w)? }),
            ["window", o, w] => Ok(GateSpec::Window {
                offset_ps: num(o)?,
                width_ps: num(w)?,
            }),
            _ => Err(Error::param("gate", format!("cannot parse `{s}`"))),
        }
    }
}

/// Which axis positions a gate keeps: a bin is kept when its centre lies in
/// the gate. Truncated bins are dropped by every gate other than `None`.
pub fn gate_mask(geometry: &GridGeometry, gate: &GateSpec) -> Result<Vec<bool>> {
    let n = geometry.axis_len();
    let Some((lo, hi)) = gate.phase_interval(geometry.period_ps)? else {
        return Ok(vec![true; n]);
    };
    Ok((0..n)
        .map(|i| {
            let (s, e) = geometry.bin_phase_range(i);
            // compare doubled centre to stay in integers
            let c2 = s + e;
            !geometry.is_truncated(i) && c2 >= 2 * lo && c2 < 2 * hi
        })
        .collect())
}

fn mask_grid(grid: &CoincidenceGrid, mask: &[bool]) -> CoincidenceGrid {
    let n = grid.axis_len();
    let mut out = grid.clone();
    for i in 0..n {
        for j in 0..n {
            if !(mask[i] && mask[j]) {
                out.counts[i * n + j] = 0;
            }
        }
    }
    out
}

/// Zeroes every bin whose row or column falls outside the gate.
pub fn apply_gate(grid: &CoincidenceGrid, gate: &GateSpec) -> Result<CoincidenceGrid> {
    let mask = gate_mask(&grid.geometry, gate)?;
    Ok(mask_grid(grid, &mask))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisPair {
    pub co: CoincidenceGrid,
    pub cross: CoincidenceGrid,
}

/// Co- and cross-polarized grids for HV, DA and RL, in that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisGrids {
    pub bases: [BasisPair; 3],
    pub gates: Vec<GateSpec>,
}

impl BasisGrids {
    pub fn new(hv: BasisPair, da: BasisPair, rl: BasisPair) -> Result<Self> {
        let g = BasisGrids {
            bases: [hv, da, rl],
            gates: Vec::new(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let first = &self.bases[0].co;
        for b in &self.bases {
            first.check_compatible(&b.co)?;
            first.check_compatible(&b.cross)?;
        }
        Ok(())
    }

    pub fn geometry(&self) -> GridGeometry {
        self.bases[0].co.geometry
    }

    pub fn basis(&self, b: PolarizationBasis) -> &BasisPair {
        match b {
            PolarizationBasis::HV => &self.bases[0],
            PolarizationBasis::DA => &self.bases[1],
            PolarizationBasis::RL => &self.bases[2],
        }
    }

    pub fn merge(&mut self, other: &BasisGrids) -> Result<()> {
        for (a, b) in self.bases.iter_mut().zip(&other.bases) {
            a.co.merge(&b.co)?;
            a.cross.merge(&b.cross)?;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.bases.iter().map(|b| b.co.total() + b.cross.total()).sum()
    }

    pub fn apply_gate(&self, gate: &GateSpec) -> Result<BasisGrids> {
        self.validate()?;
        let mask = gate_mask(&self.geometry(), gate)?;
        let pair = |p: &BasisPair| BasisPair {
            co: mask_grid(&p.co, &mask),
            cross: mask_grid(&p.cross, &mask),
        };
        let mut gates = self.gates.clone();
        if *gate != GateSpec::None {
            gates.push(*gate);
        }
        Ok(BasisGrids {
            bases: [pair(&self.bases[0]), pair(&self.bases[1]), pair(&self.bases[2])],
            gates,
        })
    }
}

/// Degree of correlation from one pair of counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub value: f64,
    /// First-order Poisson standard error.
    pub sigma: f64,
    /// Standard error from add-two smoothing, finite even when one count is 0.
    pub sigma_floor: f64,
    /// One of the two counts is zero, so `sigma` vanishes at first order.
    pub degenerate: bool,
    pub total: u64,
}

impl CorrelationEstimate {
    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    pub fn floored_variance(&self) -> f64 {
        self.variance().max(self.sigma_floor * self.sigma_floor)
    }
}

/// `C` with its uncertainty; `None` when both counts are zero.
pub fn propagate_uncertainty(co: u64, cross: u64) -> Option<CorrelationEstimate> {
    let n = co + cross;
    if n == 0 {
        return None;
    }
    let (c, x, nf) = (co as f64, cross as f64, n as f64);
    let var = 4.0 * c * x / nf.powi(3);
    let q = (c + 1.0) / (nf + 2.0);
    let var_floor = 4.0 * q * (1.0 - q) / (nf + 2.0);
    Some(CorrelationEstimate {
        value: (c - x) / nf,
        sigma: var.sqrt(),
        sigma_floor: var_floor.sqrt(),
        degenerate: co == 0 || cross == 0,
        total: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMap {
    pub geometry: GridGeometry,
    pub cells: Vec<Option<CorrelationEstimate>>,
}

pub fn degree_of_correlation(co: &CoincidenceGrid, cross: &CoincidenceGrid) -> Result<CorrelationMap> {
    co.check_compatible(cross)?;
    Ok(CorrelationMap {
        geometry: co.geometry,
        cells: co
            .counts
            .iter()
            .zip(&cross.counts)
            .map(|(&a, &b)| propagate_uncertainty(a, b))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityEstimate {
    pub fidelity: f64,
    pub sigma: f64,
    pub sigma_floor: f64,
    pub degenerate: bool,
    /// Coincidences over all six grids.
    pub counts: u64,
}

/// `f = (1 + C_HV + C_DA - C_RL) / 4` with errors added in quadrature.
pub fn combine_bases(hv: &CorrelationEstimate, da: &CorrelationEstimate, rl: &CorrelationEstimate) -> FidelityEstimate {
    let all = [hv, da, rl];
    FidelityEstimate {
        fidelity: (1.0 + hv.value + da.value - rl.value) / 4.0,
        sigma: all.iter().map(|c| c.variance()).sum::<f64>().sqrt() / 4.0,
        sigma_floor: all.iter().map(|c| c.floored_variance()).sum::<f64>().sqrt() / 4.0,
        degenerate: all.iter().any(|c| c.degenerate),
        counts: all.iter().map(|c| c.total).sum(),
    }
}

/// Fidelity from summed co/cross counts per basis, `[[co, cross]; 3]`.
pub fn fidelity_from_counts(counts: [[u64; 2]; 3]) -> Option<FidelityEstimate> {
    let hv = propagate_uncertainty(counts[0][0], counts[0][1])?;
    let da = propagate_uncertainty(counts[1][0], counts[1][1])?;
    let rl = propagate_uncertainty(counts[2][0], counts[2][1])?;
    Some(combine_bases(&hv, &da, &rl))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityMap {
    pub version: u32,
    pub geometry: GridGeometry,
    pub gates: Vec<GateSpec>,
    /// Row-major over (XX position, X position); `None` where any basis has
    /// no counts.
    pub cells: Vec<Option<FidelityEstimate>>,
}

impl FidelityMap {
    pub fn axis_len(&self) -> usize {
        self.geometry.axis_len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&FidelityEstimate> {
        self.cells[i * self.axis_len() + j].as_ref()
    }

    /// Fidelity matrix as CSV with empty fields for undefined bins.
    pub fn to_csv(&self) -> String {
        let n = self.axis_len();
        let mut out = String::new();
        for i in 0..n {
            for j in 0..n {
                if j > 0 {
                    out.push(',');
                }
                if let Some(c) = self.get(i, j) {
                    let _ = write!(out, "{:.6}", c.fidelity);
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn fidelity_map(bases: &BasisGrids) -> Result<FidelityMap> {
    bases.validate()?;
    let maps: Vec<CorrelationMap> = bases
        .bases
        .iter()
        .map(|p| degree_of_correlation(&p.co, &p.cross))
        .collect::<Result<_>>()?;
    let cells = (0..maps[0].cells.len())
        .map(|k| match (&maps[0].cells[k], &maps[1].cells[k], &maps[2].cells[k]) {
            (Some(hv), Some(da), Some(rl)) => Some(combine_bases(hv, da, rl)),
            _ => None,
        })
        .collect();
    Ok(FidelityMap {
        version: FIDELITY_FORMAT_VERSION,
        geometry: bases.geometry(),
        gates: bases.gates.clone(),
        cells,
    })
}

/// Anti-diagonal re-indexing of an `n × n` row-major layout: column `d`
/// holds `(row, value)` for every cell `(i, j)` with `j - i = d`.
pub fn rotate_to_delay<T: Clone>(n: usize, values: &[T]) -> BTreeMap<i64, Vec<(usize, T)>> {
    let mut out: BTreeMap<i64, Vec<(usize, T)>> = BTreeMap::new();
    for i in 0..n {
        for j in 0..n {
            out.entry(j as i64 - i as i64)
                .or_default()
                .push((i, values[i * n + j].clone()));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayPoint {
    pub delay_index: i64,
    pub tau_ps: i64,
    pub fidelity: f64,
    pub sigma: f64,
    pub counts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayCurve {
    pub points: Vec<DelayPoint>,
    pub peak: DelayPoint,
}

impl DelayCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau_ps,fidelity,sigma\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{:.6},{:.6}", p.tau_ps, p.fidelity, p.sigma);
        }
        out
    }

    pub fn at_tau(&self, tau_ps: i64) -> Option<&DelayPoint> {
        self.points.iter().find(|p| p.tau_ps == tau_ps)
    }
}

/// Count-weighted average of each relative-delay column of the map.
/// Undefined bins are skipped; columns with no defined bin are left out.
/// The peak is the highest column with positive delay, the earliest one on
/// ties.
pub fn delay_curve(map: &FidelityMap) -> Result<DelayCurve> {
    let n = map.axis_len();
    let bin = map.geometry.bin_ps as i64;
    let mut points = Vec::new();
    for (d, column) in rotate_to_delay(n, &map.cells) {
        let defined: Vec<FidelityEstimate> = column.into_iter().filter_map(|(_, c)| c).collect();
        let weight: u64 = defined.iter().map(|c| c.counts).sum();
        if weight == 0 {
            continue;
        }
        let w = weight as f64;
        let fidelity = defined.iter().map(|c| c.counts as f64 * c.fidelity).sum::<f64>() / w;
        let var = defined.iter().map(|c| (c.counts as f64).powi(2) * c.sigma_floor.powi(2)).sum::<f64>() / (w * w);
        points.push(DelayPoint {
            delay_index: d,
            tau_ps: d * bin,
            fidelity,
            sigma: var.sqrt(),
            counts: weight,
        });
    }
    if points.is_empty() {
        return Err(Error::Degenerate("every delay column is undefined".into()));
    }
    let peak = points
        .iter()
        .filter(|p| p.delay_index > 0)
        .fold(None::<DelayPoint>, |best, p| match best {
            Some(b) if b.fidelity >= p.fidelity => Some(b),
            _ => Some(*p),
        })
        .ok_or_else(|| Error::Degenerate("no defined column at positive delay".into()))?;
    Ok(DelayCurve { points, peak })
}

/// The best single integration window: both photons' phases in
/// `[offset, offset + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowPeak {
    pub offset_ps: u64,
    pub width_ps: u64,
    pub estimate: FidelityEstimate,
}

impl WindowPeak {
    pub fn gate(&self) -> GateSpec {
        GateSpec::Window {
            offset_ps: self.offset_ps,
            width_ps: self.width_ps,
        }
    }
}

struct Prefix2 {
    n: usize,
    sums: Vec<u64>,
}

impl Prefix2 {
    fn new(grid: &CoincidenceGrid) -> Self {
        let n = grid.axis_len();
        let m = n + 1;
        let mut sums = vec![0u64; m * m];
        for i in 0..n {
            let mut row = 0u64;
            for j in 0..n {
                row += grid.counts[i * n + j];
                sums[(i + 1) * m + j + 1] = sums[i * m + j + 1] + row;
            }
        }
        Prefix2 { n, sums }
    }

    fn rect(&self, i0: usize, i1: usize, j0: usize, j1: usize) -> u64 {
        let m = self.n + 1;
        self.sums[i1 * m + j1] + self.sums[i0 * m + j0] - self.sums[i0 * m + j1] - self.sums[i1 * m + j0]
    }
}

/// Slides a window of `width_ps` over single-cycle grids, gating both
/// photons with it, and returns the position of highest pooled fidelity.
/// Offsets advance in `step_ps`, which must be a multiple of the bin width.
/// Positions holding fewer than `min_fraction` of the best-populated
/// position's coincidences are not considered.
pub fn window_peak(bases: &BasisGrids, width_ps: u64, step_ps: u64, min_fraction: f64) -> Result<WindowPeak> {
    bases.validate()?;
    let geo = bases.geometry();
    if geo.n_cycles != 1 || geo.has_truncated_bin() {
        return Err(Error::GeometryMismatch(
            "window scan needs a single-cycle grid with bins dividing the period".into(),
        ));
    }
    if width_ps == 0 || width_ps > geo.period_ps || width_ps % geo.bin_ps != 0 {
        return Err(Error::param("window_ps", format!("{width_ps} ps does not fit the {} ps grid", geo.bin_ps)));
    }
    if step_ps == 0 || step_ps % geo.bin_ps != 0 {
        return Err(Error::param("window_step_ps", "must be a positive multiple of the bin width"));
    }
    let prefixes: Vec<[Prefix2; 2]> = bases
        .bases
        .iter()
        .map(|p| [Prefix2::new(&p.co), Prefix2::new(&p.cross)])
        .collect();
    let w = (width_ps / geo.bin_ps) as usize;
    let step = (step_ps / geo.bin_ps) as usize;
    let n = geo.axis_len();
    let counts_at = |a: usize| -> [[u64; 2]; 3] {
        let mut c = [[0u64; 2]; 3];
        for (k, pre) in prefixes.iter().enumerate() {
            c[k][0] = pre[0].rect(a, a + w, a, a + w);
            c[k][1] = pre[1].rect(a, a + w, a, a + w);
        }
        c
    };
    let candidates: Vec<(usize, [[u64; 2]; 3])> = (0..=n - w).step_by(step).map(|a| (a, counts_at(a))).collect();
    let total = |c: &[[u64; 2]; 3]| c.iter().flatten().sum::<u64>();
    let max_total = candidates.iter().map(|(_, c)| total(c)).max().unwrap_or(0);
    if max_total == 0 {
        return Err(Error::Degenerate("no coincidences inside any window".into()));
    }
    let floor = ((max_total as f64 * min_fraction).ceil() as u64).max(1);
    let mut best: Option<(usize, FidelityEstimate)> = None;
    for (a, c) in &candidates {
        if total(c) < floor {
            continue;
        }
        let Some(est) = fidelity_from_counts(*c) else {
            continue;
        };
        if best.as_ref().is_none_or(|(_, e)| est.fidelity > e.fidelity) {
            best = Some((*a, est));
        }
    }
    let (a, estimate) = best.ok_or_else(|| Error::Degenerate("no window with counts in all bases".into()))?;
    Ok(WindowPeak {
        offset_ps: a as u64 * geo.bin_ps,
        width_ps,
        estimate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodFit {
    pub period_ps: f64,
    pub offset: f64,
    pub amplitude: f64,
    pub chi2: f64,
}

/// Fits `a + b·cos(2πτ/T)` to the curve points with `0 < τ < max_tau_ps` by
/// a grid search over `T` with linear least squares for `a` and `b`.
pub fn fit_period(
    curve: &DelayCurve,
    max_tau_ps: i64,
    min_period_ps: f64,
    max_period_ps: f64,
    step_ps: f64,
) -> Result<PeriodFit> {
    let pts: Vec<&DelayPoint> = curve
        .points
        .iter()
        .filter(|p| p.tau_ps > 0 && p.tau_ps < max_tau_ps && p.sigma > 0.0)
        .collect();
    if pts.len() < 3 {
        return Err(Error::Degenerate("too few points to fit a period".into()));
    }
    if !(min_period_ps > 0.0 && max_period_ps > min_period_ps && step_ps > 0.0) {
        return Err(Error::param("period range", "need 0 < min < max and step > 0"));
    }
    let mut best: Option<PeriodFit> = None;
    let steps = ((max_period_ps - min_period_ps) / step_ps).floor() as usize;
    for s in 0..=steps {
        let period = min_period_ps + s as f64 * step_ps;
        let (mut sw, mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for p in &pts {
            let w = 1.0 / (p.sigma * p.sigma);
            let x = (std::f64::consts::TAU * p.tau_ps as f64 / period).cos();
            sw += w;
            sx += w * x;
            sxx += w * x * x;
            sy += w * p.fidelity;
            sxy += w * x * p.fidelity;
        }
        let det = sw * sxx - sx * sx;
        if det.abs() < 1e-12 {
            continue;
        }
        let b = (sw * sxy - sx * sy) / det;
        let a = (sy - b * sx) / sw;
        let chi2 = pts
            .iter()
            .map(|p| {
                let m = a + b * (std::f64::consts::TAU * p.tau_ps as f64 / period).cos();
                ((p.fidelity - m) / p.sigma).powi(2)
            })
            .sum::<f64>();
        if best.as_ref().is_none_or(|f| chi2 < f.chi2) {
            best = Some(PeriodFit {
                period_ps: period,
                offset: a,
                amplitude: b,
                chi2,
            });
        }
    }
    best.ok_or_else(|| Error::Degenerate("period fit failed".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicePeak {
    pub slice: usize,
    pub tau_ps: i64,
    pub fidelity: f64,
    pub sigma: f64,
    pub below_classical: bool,
}

/// Peak delay-curve fidelity of each slice, in slice order.
pub fn stability_series(slices: &[BasisGrids], gate: &GateSpec) -> Result<Vec<SlicePeak>> {
    if slices.is_empty() {
        return Err(Error::param("slices", "need at least one slice"));
    }
    slices
        .par_iter()
        .enumerate()
        .map(|(k, g)| {
            let curve = delay_curve(&fidelity_map(&g.apply_gate(gate)?)?)?;
            Ok(SlicePeak {
                slice: k,
                tau_ps: curve.peak.tau_ps,
                fidelity: curve.peak.fidelity,
                sigma: curve.peak.sigma,
                below_classical: curve.peak.fidelity < CLASSICAL_LIMIT,
            })
        })
        .collect()
}

pub fn stability_csv(series: &[SlicePeak]) -> String {
    let mut out = String::from("slice,tau_ps,fidelity,sigma,below_classical\n");
    for s in series {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{}",
            s.slice, s.tau_ps, s.fidelity, s.sigma, s.below_classical
        );
    }
    out
}
