//! Experiment configuration: one TOML document that, together with its seed,
//! determines every simulated and analysed byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::SourceParams;
use crate::correlator::{G2Config, GridGeometry, GridSpec};
use crate::error::{Error, Result};
use crate::fidelity::GateSpec;
use crate::link::{DetectorParams, FiberParams};
use crate::polcontrol::{CalibrationOptions, RetarderStack};
use crate::timetag::ClockFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Four channels: XX and X arms, each behind a PBS in the scheduled basis.
    #[default]
    Entanglement,
    /// Two channels: the X arm behind a 50:50 splitter.
    Autocorrelation,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSet {
    pub xx: DetectorParams,
    pub x: DetectorParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompensationConfig {
    pub enabled: bool,
    pub stack: RetarderStack,
    pub calibration: CalibrationOptions,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        CompensationConfig {
            enabled: true,
            stack: RetarderStack::default(),
            calibration: CalibrationOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub bin_ps: u64,
    pub n_cycles: u64,
    pub coincidence_window_ps: u64,
    pub gate: GateSpec,
    pub window_ps: u64,
    pub window_step_ps: u64,
    /// Windows with fewer coincidences than this fraction of the fullest
    /// window are skipped by the window scan.
    pub window_min_fraction: f64,
    pub g2_delays: usize,
    pub norm_min_cycles: u64,
    pub norm_max_cycles: u64,
    pub g2_window_ps: u64,
    pub slice_duration_ps: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            bin_ps: 72,
            n_cycles: 3,
            coincidence_window_ps: 2000,
            gate: GateSpec::Central { width_ps: 864 },
            window_ps: 168,
            window_step_ps: 1,
            window_min_fraction: 0.1,
            g2_delays: 21,
            norm_min_cycles: 5,
            norm_max_cycles: 10,
            g2_window_ps: 168,
            slice_duration_ps: 7_200_000_000_000_000,
        }
    }
}

impl AnalysisConfig {
    pub fn grid_spec(&self, clock: &ClockFrame) -> GridSpec {
        GridSpec {
            clock: *clock,
            bin_ps: self.bin_ps,
            n_cycles: self.n_cycles,
            coincidence_window_ps: self.coincidence_window_ps,
        }
    }

    /// 1 ps bins over a single cycle, used by the window scan.
    pub fn fine_grid_spec(&self, clock: &ClockFrame) -> GridSpec {
        GridSpec {
            clock: *clock,
            bin_ps: 1,
            n_cycles: 1,
            coincidence_window_ps: clock.period_ps,
        }
    }

    pub fn g2_config(&self) -> G2Config {
        G2Config {
            n_delays: self.g2_delays,
            norm_min_cycles: self.norm_min_cycles,
            norm_max_cycles: self.norm_max_cycles,
            gate: None,
        }
    }

    pub fn validate(&self, clock: &ClockFrame) -> Result<()> {
        GridGeometry::new(clock.period_ps, self.bin_ps, self.n_cycles)?;
        if self.coincidence_window_ps == 0 {
            return Err(Error::param("analysis.coincidence_window_ps", "must be > 0"));
        }
        self.gate.validate(clock.period_ps)?;
        if self.window_ps == 0 || self.window_ps > clock.period_ps {
            return Err(Error::param("analysis.window_ps", "must be in (0, period]"));
        }
        if self.g2_window_ps == 0 || self.g2_window_ps > clock.period_ps {
            return Err(Error::param("analysis.g2_window_ps", "must be in (0, period]"));
        }
        if self.window_step_ps == 0 {
            return Err(Error::param("analysis.window_step_ps", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.window_min_fraction) {
            return Err(Error::param("analysis.window_min_fraction", "must be in [0, 1]"));
        }
        if self.g2_delays % 2 == 0 {
            return Err(Error::param("analysis.g2_delays", "must be odd"));
        }
        let half = (self.g2_delays / 2) as u64;
        if self.norm_min_cycles > self.norm_max_cycles || self.norm_min_cycles > half || self.norm_min_cycles == 0 {
            return Err(Error::param(
                "analysis.norm_min_cycles",
                format!(
                    "{}..={} must select non-zero delays within ±{half}",
                    self.norm_min_cycles, self.norm_max_cycles
                ),
            ));
        }
        if self.slice_duration_ps == 0 {
            return Err(Error::param("analysis.slice_duration_ps", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub n_cycles: u64,
    /// Cycles per measurement set; sets rotate through HV, DA, RL.
    pub set_cycles: u64,
    pub acquisition_start_ns: i64,
    pub clock: ClockFrame,
    pub source: SourceParams,
    /// Present when the XX photons travel to a remote receiver.
    pub fiber: Option<FiberParams>,
    pub detectors: DetectorSet,
    pub compensation: CompensationConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Entanglement,
            seed: 1,
            n_cycles: 3_000_000,
            set_cycles: 100_000,
            acquisition_start_ns: 0,
            clock: ClockFrame::GHZ,
            source: SourceParams::default(),
            fiber: None,
            detectors: DetectorSet::default(),
            compensation: CompensationConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::param("config", e.to_string().trim_end().to_string()))?;
        cfg.source.clock = cfg.clock;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.clock.validate()?;
        if self.source.clock != self.clock {
            return Err(Error::param("source", "clock differs from the experiment clock"));
        }
        self.source.validate()?;
        if let Some(f) = &self.fiber {
            f.validate()?;
        }
        self.detectors.xx.validate(&self.clock)?;
        self.detectors.x.validate(&self.clock)?;
        self.compensation.stack.validate()?;
        self.compensation.calibration.validate()?;
        self.analysis.validate(&self.clock)?;
        if self.n_cycles == 0 {
            return Err(Error::param("n_cycles", "must be > 0"));
        }
        if self.set_cycles == 0 {
            return Err(Error::param("set_cycles", "must be > 0"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Acquisition span in ps.
    pub fn span_ps(&self) -> u64 {
        self.n_cycles * self.clock.period_ps
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn deployed_fiber_round_trips() {
        let cfg = ExperimentConfig {
            fiber: Some(FiberParams::default()),
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_ne!(back.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn partial_documents_use_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 9\n[source]\npair_probability = 0.1\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.source.pair_probability, 0.1);
        assert_eq!(cfg.analysis.bin_ps, 72);
        assert_eq!(cfg.analysis.gate, GateSpec::Central { width_ps: 864 });
        assert_eq!(cfg.source.fss_uev, 6.0);
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::from_toml("[source]\npair_probability = 1.5\n").unwrap_err();
        assert!(e.to_string().contains("source.pair_probability"), "{e}");
        let e = ExperimentConfig::from_toml("[analysis]\nbin_ps = 0\n").unwrap_err();
        assert!(e.to_string().contains("bin_ps"), "{e}");
        let e = ExperimentConfig::from_toml("[analysis]\ngate = { mode = \"central\", width_ps = 2000 }\n").unwrap_err();
        assert!(e.to_string().contains("gate"), "{e}");
        let e = ExperimentConfig::from_toml("[source]\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = ExperimentConfig::from_toml("[detectors.xx]\nefficiency = -0.1\n").unwrap_err();
        assert!(e.to_string().contains("efficiency"), "{e}");
        assert!(ExperimentConfig::from_toml("n_cycles = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("[analysis]\nnorm_min_cycles = 11\n").is_err());
    }

    #[test]
    fn source_inherits_clock() {
        let cfg = ExperimentConfig::from_toml("[clock]\nperiod_ps = 2000\ndivisor = 64\n").unwrap();
        assert_eq!(cfg.source.clock, cfg.clock);
        assert_eq!(cfg.clock.frame_period_ps(), 128_000);
    }
}
