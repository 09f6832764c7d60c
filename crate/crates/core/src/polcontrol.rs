//! Electronic polarization controller model and the feedback loop that
//! aligns a detection basis by minimising the power in one PBS port.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::fmt::Write as _;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{drift_at, DriftProcess};
use crate::polarization::{JonesMatrix, JonesVector, PolarizationTransform};
use crate::rng::stream_rng;

/// Variable retarders in series, each with a fixed fast axis and a
/// retardance linear in its drive voltage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetarderStack {
    pub axes_rad: Vec<f64>,
    pub rad_per_volt: f64,
    pub min_voltage: f64,
    pub max_voltage: f64,
}

impl Default for RetarderStack {
    fn default() -> Self {
        RetarderStack {
            axes_rad: vec![0.0, FRAC_PI_4, 0.0, FRAC_PI_4],
            rad_per_volt: FRAC_PI_2,
            min_voltage: 0.0,
            max_voltage: 5.0,
        }
    }
}

fn retarder(axis: f64, retardance: f64) -> JonesMatrix {
    let (s, c) = axis.sin_cos();
    let rot = |sign: f64| {
        JonesMatrix([
            [Complex64::new(c, 0.0), Complex64::new(sign * s, 0.0)],
            [Complex64::new(-sign * s, 0.0), Complex64::new(c, 0.0)],
        ])
    };
    let half = Complex64::from_polar(1.0, retardance / 2.0);
    let wave = JonesMatrix([[half.conj(), Complex64::new(0.0, 0.0)], [Complex64::new(0.0, 0.0), half]]);
    rot(-1.0) * wave * rot(1.0)
}

impl RetarderStack {
    pub fn validate(&self) -> Result<()> {
        if self.axes_rad.len() < 3 {
            return Err(Error::param("compensation.stack.axes_rad", "need at least 3 retarders"));
        }
        if !(self.rad_per_volt > 0.0 && self.max_voltage > self.min_voltage) {
            return Err(Error::param("compensation.stack", "need a positive slope and a non-empty voltage range"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.axes_rad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axes_rad.is_empty()
    }

    /// All retarders at their lowest voltage.
    pub fn rest_voltages(&self) -> Vec<f64> {
        vec![self.min_voltage; self.len()]
    }

    pub fn check_voltages(&self, voltages: &[f64]) -> Result<()> {
        if voltages.len() != self.len() {
            return Err(Error::param(
                "voltages",
                format!("{} values for {} retarders", voltages.len(), self.len()),
            ));
        }
        if let Some(v) = voltages.iter().find(|v| !(self.min_voltage..=self.max_voltage).contains(*v)) {
            return Err(Error::param(
                "voltages",
                format!("{v} V outside [{}, {}] V", self.min_voltage, self.max_voltage),
            ));
        }
        Ok(())
    }

    /// Jones matrix of the stack, first retarder applied first.
    pub fn matrix(&self, voltages: &[f64]) -> Result<JonesMatrix> {
        self.check_voltages(voltages)?;
        Ok(self.matrix_unchecked(voltages))
    }

    fn matrix_unchecked(&self, voltages: &[f64]) -> JonesMatrix {
        self.axes_rad
            .iter()
            .zip(voltages)
            .fold(JonesMatrix::identity(), |acc, (&axis, &v)| {
                retarder(axis, (v - self.min_voltage) * self.rad_per_volt) * acc
            })
    }
}

/// A reference state sent into the stack and the PBS port whose power is
/// minimised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub input: JonesVector,
    pub suppressed: JonesVector,
}

fn port_power(m: &JonesMatrix, probe: &Probe) -> f64 {
    let out = m.apply(&probe.input);
    let amp = probe.suppressed.inner(&out);
    (amp.norm_sqr() / probe.input.norm_sqr()).clamp(0.0, 1.0)
}

/// Power fraction of `input` leaving the V port of an H/V PBS behind the
/// stack.
pub fn pbs_leakage(input: &JonesVector, stack: &RetarderStack, voltages: &[f64]) -> Result<f64> {
    let m = stack.matrix(voltages)?;
    Ok(port_power(
        &m,
        &Probe {
            input: *input,
            suppressed: JonesVector::v(),
        },
    ))
}

/// Mean suppressed-port power over several probes.
pub fn probe_leakage(probes: &[Probe], stack: &RetarderStack, voltages: &[f64]) -> Result<f64> {
    let m = stack.matrix(voltages)?;
    Ok(mean_leakage(&m, probes))
}

fn mean_leakage(m: &JonesMatrix, probes: &[Probe]) -> f64 {
    probes.iter().map(|p| port_power(m, p)).sum::<f64>() / probes.len() as f64
}

/// Probes that align the full transform: H and D references seen through
/// `transform`, with the V and A ports suppressed.
pub fn alignment_probes(transform: &PolarizationTransform) -> [Probe; 2] {
    let m = transform.matrix();
    [
        Probe {
            input: m.apply(&JonesVector::h()),
            suppressed: JonesVector::v(),
        },
        Probe {
            input: m.apply(&JonesVector::d()),
            suppressed: JonesVector::a(),
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    pub threshold: f64,
    pub max_iterations: usize,
    pub initial_step_v: f64,
    pub min_step_v: f64,
    /// Standard deviation of additive noise on each leakage reading.
    pub feedback_noise: f64,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            threshold: 1e-2,
            max_iterations: 200,
            initial_step_v: 0.5,
            min_step_v: 1e-3,
            feedback_noise: 0.0,
            seed: 0,
        }
    }
}

impl CalibrationOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::param("compensation.threshold", "must be in (0, 1)"));
        }
        if !(self.initial_step_v > 0.0 && self.min_step_v > 0.0 && self.min_step_v < self.initial_step_v) {
            return Err(Error::param("compensation.step", "need 0 < min_step_v < initial_step_v"));
        }
        if !(self.feedback_noise >= 0.0) {
            return Err(Error::param("compensation.feedback_noise", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub voltages: Vec<f64>,
    pub leakage: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
    /// Best reading after each iteration, starting with the initial one.
    pub trace: Vec<f64>,
}

impl CalibrationResult {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,leakage\n");
        for (i, l) in self.trace.iter().enumerate() {
            let _ = writeln!(out, "{i},{l:.8e}");
        }
        out
    }
}

/// Coordinate descent on the voltages: each iteration tries `±step` on every
/// retarder in turn and keeps any improvement; a sweep without improvement
/// halves the step, and a step below `min_step_v` restarts from random
/// voltages while keeping the best point found.
pub fn calibrate(
    probes: &[Probe],
    stack: &RetarderStack,
    start: &[f64],
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    stack.validate()?;
    options.validate()?;
    stack.check_voltages(start)?;
    if probes.is_empty() {
        return Err(Error::param("probes", "need at least one reference"));
    }
    let mut rng = stream_rng(options.seed, "calibrate", 0);
    let read = |v: &[f64], rng: &mut rand_chacha::ChaCha8Rng| {
        let l = mean_leakage(&stack.matrix_unchecked(v), probes);
        if options.feedback_noise > 0.0 {
            let n: f64 = rng.sample(StandardNormal);
            (l + options.feedback_noise * n).max(0.0)
        } else {
            l
        }
    };

    let mut x = start.to_vec();
    let mut fx = read(&x, &mut rng);
    let mut best = (x.clone(), fx);
    let mut trace = vec![fx];
    let mut step = options.initial_step_v;
    let mut iterations = 0;
    let mut restarts = 0;
    while best.1 > options.threshold && iterations < options.max_iterations {
        iterations += 1;
        let mut improved = false;
        for k in 0..x.len() {
            for dir in [1.0, -1.0] {
                let mut y = x.clone();
                y[k] = (y[k] + dir * step).clamp(stack.min_voltage, stack.max_voltage);
                if y[k] == x[k] {
                    continue;
                }
                let fy = read(&y, &mut rng);
                if fy < fx {
                    x = y;
                    fx = fy;
                    improved = true;
                    break;
                }
            }
        }
        if fx < best.1 {
            best = (x.clone(), fx);
        }
        if !improved {
            step /= 2.0;
            if step < options.min_step_v {
                restarts += 1;
                x = (0..stack.len())
                    .map(|_| rng.random_range(stack.min_voltage..=stack.max_voltage))
                    .collect();
                fx = read(&x, &mut rng);
                step = options.initial_step_v;
            }
        }
        trace.push(best.1);
    }
    let leakage = mean_leakage(&stack.matrix_unchecked(&best.0), probes);
    Ok(CalibrationResult {
        voltages: best.0,
        converged: leakage <= options.threshold,
        leakage,
        iterations,
        restarts,
        trace,
    })
}

/// Aligns `reference` onto the H port of an H/V PBS.
pub fn calibrate_reference(
    reference: &JonesVector,
    stack: &RetarderStack,
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    let probe = Probe {
        input: *reference,
        suppressed: JonesVector::v(),
    };
    calibrate(&[probe], stack, &stack.rest_voltages(), options)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetCompensation {
    pub start_ps: u64,
    pub voltages: Vec<f64>,
    pub leakage: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SetCompensation {
    /// Matrix the stack applies during this set.
    pub fn matrix(&self, stack: &RetarderStack) -> Result<JonesMatrix> {
        stack.matrix(&self.voltages)
    }
}

/// Recalibrates the stack against the drift at the start of every set and
/// freezes the voltages for the rest of the set. Each calibration starts from
/// the previous set's voltages. When `enabled` is false the stack stays at
/// rest and the leakage of the uncorrected drift is reported.
pub fn compensate_before_measurement(
    drift: &DriftProcess,
    drift_seed: u64,
    set_starts_ps: &[u64],
    stack: &RetarderStack,
    options: &CalibrationOptions,
    enabled: bool,
) -> Result<Vec<SetCompensation>> {
    drift.validate()?;
    stack.validate()?;
    if set_starts_ps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("schedule", "set start times must increase"));
    }
    let mut voltages = stack.rest_voltages();
    let mut out = Vec::with_capacity(set_starts_ps.len());
    for (k, &t) in set_starts_ps.iter().enumerate() {
        let probes = alignment_probes(&drift_at(t, drift, drift_seed));
        if !enabled {
            out.push(SetCompensation {
                start_ps: t,
                voltages: voltages.clone(),
                leakage: probe_leakage(&probes, stack, &voltages)?,
                iterations: 0,
                converged: false,
            });
            continue;
        }
        let opts = CalibrationOptions {
            seed: options.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..*options
        };
        let r = calibrate(&probes, stack, &voltages, &opts)?;
        voltages = r.voltages.clone();
        out.push(SetCompensation {
            start_ps: t,
            voltages: r.voltages,
            leakage: r.leakage,
            iterations: r.iterations,
            converged: r.converged,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_transform(rng: &mut ChaCha8Rng) -> PolarizationTransform {
        // uniform on SU(2) via a normalised 4-vector
        let q: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (a, b, c, d) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        PolarizationTransform::from_matrix(&JonesMatrix([
            [Complex64::new(a, b), Complex64::new(c, d)],
            [Complex64::new(-c, d), Complex64::new(a, -b)],
        ]))
    }

    #[test]
    fn leakage_examples() {
        let s = RetarderStack::default();
        let rest = s.rest_voltages();
        assert_eq!(pbs_leakage(&JonesVector::h(), &s, &rest).unwrap(), 0.0);
        assert_eq!(pbs_leakage(&JonesVector::v(), &s, &rest).unwrap(), 1.0);
        assert!((pbs_leakage(&JonesVector::d(), &s, &rest).unwrap() - 0.5).abs() < 1e-15);
        assert!(pbs_leakage(&JonesVector::h(), &s, &[0.0, 0.0, 0.0, 5.1]).is_err());
        assert!(pbs_leakage(&JonesVector::h(), &s, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn half_wave_at_22_5_degrees_maps_h_to_d() {
        let m = retarder(std::f64::consts::PI / 8.0, std::f64::consts::PI);
        let out = m.apply(&JonesVector::h());
        assert!((out.inner(&JonesVector::d()).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stack_is_unitary() {
        let s = RetarderStack::default();
        let m = s.matrix(&[1.3, 4.2, 0.7, 2.2]).unwrap();
        assert!((m * m.adjoint()).distance(&JonesMatrix::identity()) < 1e-12);
    }

    #[test]
    fn aligned_reference_needs_no_iterations() {
        let r = calibrate_reference(&JonesVector::h(), &RetarderStack::default(), &CalibrationOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.leakage, 0.0);
    }

    #[test]
    fn orthogonal_reference_converges() {
        let opts = CalibrationOptions::default();
        let r = calibrate_reference(&JonesVector::v(), &RetarderStack::default(), &opts).unwrap();
        assert!(r.converged, "{r:?}");
        assert!(r.leakage <= 1e-2);
        assert!(r.iterations <= 200);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.trace_csv().starts_with("iteration,leakage\n0,1.0"));
    }

    #[test]
    fn non_convergence_is_reported_not_raised() {
        let opts = CalibrationOptions {
            threshold: 1e-12,
            max_iterations: 3,
            ..CalibrationOptions::default()
        };
        let odd = JonesVector::new(Complex64::new(0.3, 0.0), Complex64::new(0.7, 0.2)).normalized();
        let r = calibrate_reference(&odd, &RetarderStack::default(), &opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        let bad = CalibrationOptions {
            threshold: 1.5,
            ..CalibrationOptions::default()
        };
        assert!(calibrate_reference(&JonesVector::v(), &RetarderStack::default(), &bad).is_err());
    }

    #[test]
    fn calibration_is_deterministic_for_a_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probes = alignment_probes(&random_transform(&mut rng));
        let s = RetarderStack::default();
        let opts = CalibrationOptions {
            feedback_noise: 1e-3,
            ..CalibrationOptions::default()
        };
        let a = calibrate(&probes, &s, &s.rest_voltages(), &opts).unwrap();
        let b = calibrate(&probes, &s, &s.rest_voltages(), &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stack_reaches_random_transforms() {
        let s = RetarderStack::default();
        let opts = CalibrationOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ok = 0;
        for k in 0..1000u64 {
            let t = random_transform(&mut rng);
            let r = calibrate(&alignment_probes(&t), &s, &s.rest_voltages(), &CalibrationOptions { seed: k, ..opts }).unwrap();
            assert!(!r.converged || r.leakage <= opts.threshold);
            if r.converged {
                ok += 1;
                // aligned on two non-orthogonal references means W·T is close to identity
                let wt = s.matrix(&r.voltages).unwrap() * t.matrix();
                let h = wt.apply(&JonesVector::r());
                assert!(h.inner(&JonesVector::r()).norm_sqr() > 0.9);
            }
        }
        assert!(ok >= 990, "{ok}/1000");
    }

    #[test]
    fn zero_drift_keeps_voltages() {
        let drift = DriftProcess {
            step_interval_ps: 1_000_000_000_000,
            angular_step_std_rad: 0.0,
        };
        let s = RetarderStack::default();
        let starts: Vec<u64> = (0..6).map(|k| k * 420_000_000_000_000).collect();
        let sets = compensate_before_measurement(&drift, 1, &starts, &s, &CalibrationOptions::default(), true).unwrap();
        assert!(sets.iter().all(|c| c.voltages == s.rest_voltages() && c.leakage == 0.0));
    }

    #[test]
    fn slow_drift_is_tracked_at_every_set() {
        let drift = DriftProcess {
            step_interval_ps: 1_000_000_000_000,
            angular_step_std_rad: 0.01,
        };
        let s = RetarderStack::default();
        let starts: Vec<u64> = (0..120).map(|k| k * 420_000_000_000_000).collect();
        let on = compensate_before_measurement(&drift, 3, &starts, &s, &CalibrationOptions::default(), true).unwrap();
        assert!(on.iter().all(|c| c.leakage <= 1e-2), "{:?}", on.iter().map(|c| c.leakage).collect::<Vec<_>>());
        let off = compensate_before_measurement(&drift, 3, &starts, &s, &CalibrationOptions::default(), false).unwrap();
        assert!(off.last().unwrap().leakage > 1e-2);
        assert!(compensate_before_measurement(&drift, 3, &[5, 5], &s, &CalibrationOptions::default(), true).is_err());
    }

    proptest! {
        #[test]
        fn leakage_ignores_global_phase(a in -3.0f64..3.0, b in -3.0f64..3.0, phase in 0.0f64..6.3,
                                        v in proptest::collection::vec(0.0f64..5.0, 4)) {
            let s = RetarderStack::default();
            let input = JonesVector::new(Complex64::new(a.cos(), 0.0), Complex64::from_polar(a.sin(), b));
            let l0 = pbs_leakage(&input, &s, &v).unwrap();
            let l1 = pbs_leakage(&input.scale(Complex64::from_polar(1.0, phase)), &s, &v).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&l0));
        }
    }
}
