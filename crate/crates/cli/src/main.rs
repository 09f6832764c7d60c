use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use entlink::config::{ExperimentConfig, Mode};
use entlink::fidelity::{stability_csv, GateSpec};
use entlink::link::drift_at;
use entlink::pipeline::{analyze_fidelity, analyze_g2, analyze_stability, read_acquisition, simulate, write_acquisition};
use entlink::polcontrol::{alignment_probes, calibrate};
use entlink::polarization::PolarizationTransform;
use entlink::rng::derive_seed;
use entlink::Error;
use serde::Serialize;

/// Simulate and analyse a 1 GHz clocked entangled-photon link.
#[derive(Debug, Parser)]
#[command(name = "entlink", version)]
struct Cli {
    /// Run every stage on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate detector streams and a manifest from a configuration.
    Simulate(Common),
    /// Autocorrelation histogram of the two X-channel streams.
    G2(Analysis),
    /// Fidelity map, delay curve and peak values of a three-basis run.
    Fidelity(Analysis),
    /// Peak fidelity per wall-time slice.
    Stability(Analysis),
    /// Align the remote analyzer to the drifted fiber transform.
    Calibrate(Calibrate),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "ENTLINK_OUT", default_value = "entlink-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Analysis {
    #[command(flatten)]
    common: Common,
    /// Directory holding the streams and manifest; defaults to --out.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Temporal gate: none, central:WIDTH or window:OFFSET:WIDTH (ps).
    #[arg(long)]
    gate: Option<GateSpec>,
    /// Coincidence grid bin width in ps.
    #[arg(long)]
    bin_ps: Option<u64>,
    /// Analyse streams even if their manifest names a different configuration.
    #[arg(long)]
    allow_config_mismatch: bool,
}

#[derive(Debug, Args)]
struct Calibrate {
    #[command(flatten)]
    common: Common,
    /// Time at which the fiber drift is sampled; defaults to the end of the run.
    #[arg(long)]
    time_ps: Option<u64>,
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    write(dir, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_simulate(args: &Common) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    prepare_out(&args.out)?;
    let acq = simulate(&cfg)?;
    let manifest = write_acquisition(&acq, &cfg, &args.out)?;
    println!("config {}  seed {}", manifest.config_sha256, manifest.seed);
    for f in &manifest.files {
        println!("{:<6} {:>10} tags  {}", f.role, f.n_tags, args.out.join(&f.path).display());
    }
    Ok(())
}

/// Loads config and streams, then applies the command-line analysis overrides.
fn load_run(args: &Analysis) -> anyhow::Result<(ExperimentConfig, entlink::pipeline::RecordedRun)> {
    let mut cfg = load_config(&args.common)?;
    let data = args.data.as_deref().unwrap_or(&args.common.out);
    let run = read_acquisition(data, &cfg, args.allow_config_mismatch)
        .with_context(|| format!("reading streams from {}", data.display()))?;
    if let Some(gate) = args.gate {
        cfg.analysis.gate = gate;
    }
    if let Some(bin) = args.bin_ps {
        cfg.analysis.bin_ps = bin;
    }
    cfg.analysis.validate(&run.manifest.clock)?;
    prepare_out(&args.common.out)?;
    Ok((cfg, run))
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Entanglement => "entanglement",
        Mode::Autocorrelation => "autocorrelation",
    }
}

fn require_mode(run: &entlink::pipeline::RecordedRun, mode: Mode, command: &str) -> anyhow::Result<()> {
    if run.manifest.mode != mode {
        return Err(Error::Format(format!(
            "{command} needs {}-mode streams but these come from a {}-mode run",
            mode_name(mode),
            mode_name(run.manifest.mode)
        ))
        .into());
    }
    Ok(())
}

fn cmd_g2(args: &Analysis) -> anyhow::Result<()> {
    let (cfg, run) = load_run(args)?;
    require_mode(&run, Mode::Autocorrelation, "g2")?;
    let report = analyze_g2(&run.streams, &run.manifest.clock, &cfg.analysis)?;
    let out = &args.common.out;
    write_json(out, "g2.json", &report)?;
    write(out, "g2.csv", &report.ungated.to_csv())?;
    write(out, "g2_gated.csv", &report.gated.to_csv())?;
    println!("g2(0) ungated {:.4} ± {:.4}", report.g2_zero, report.g2_zero_sigma);
    println!(
        "g2(0) gated   {:.4} ± {:.4}  (window {} ps at {} ps)",
        report.gated_g2_zero, report.gated_g2_zero_sigma, report.gate.width_ps, report.gate.offset_ps
    );
    Ok(())
}

fn cmd_fidelity(args: &Analysis) -> anyhow::Result<()> {
    let (cfg, run) = load_run(args)?;
    require_mode(&run, Mode::Entanglement, "fidelity")?;
    let report = analyze_fidelity(&run.streams, &run.manifest.schedule, &run.manifest.clock, &cfg.analysis)?;
    let out = &args.common.out;
    write_json(out, "fidelity.json", &report)?;
    write(out, "fidelity_map.csv", &report.map.to_csv())?;
    write(out, "delay_curve.csv", &report.curve.to_csv())?;
    write(out, "delay_curve_ungated.csv", &report.ungated_curve.to_csv())?;
    let u = &report.ungated_peak;
    let g = &report.gated_peak;
    let w = &report.window;
    println!("peak ungated   {:.4} ± {:.4} at {} ps", u.fidelity, u.sigma, u.tau_ps);
    println!("peak {:<9} {:.4} ± {:.4} at {} ps", report.gate.to_string(), g.fidelity, g.sigma, g.tau_ps);
    println!(
        "window {} ps   {:.4} ± {:.4} at offset {} ps",
        w.width_ps, w.estimate.fidelity, w.estimate.sigma, w.offset_ps
    );
    Ok(())
}

fn cmd_stability(args: &Analysis) -> anyhow::Result<()> {
    let (cfg, run) = load_run(args)?;
    require_mode(&run, Mode::Entanglement, "stability")?;
    let series = analyze_stability(&run.streams, &run.manifest.schedule, &run.manifest.clock, &cfg.analysis)?;
    if series.len() < 2 {
        return Err(Error::Degenerate(format!(
            "the run spans {} slice(s) of {} ps; need at least 2",
            series.len(),
            cfg.analysis.slice_duration_ps
        ))
        .into());
    }
    let out = &args.common.out;
    write_json(out, "stability.json", &series)?;
    write(out, "stability.csv", &stability_csv(&series))?;
    for s in &series {
        let flag = if s.below_classical { "  below classical limit" } else { "" };
        println!("slice {:>3}  {:.4} ± {:.4} at {} ps{flag}", s.slice, s.fidelity, s.sigma, s.tau_ps);
    }
    Ok(())
}

fn cmd_calibrate(args: &Calibrate) -> anyhow::Result<()> {
    let cfg = load_config(&args.common)?;
    let t = args.time_ps.unwrap_or_else(|| cfg.span_ps());
    let drift = match &cfg.fiber {
        Some(f) => drift_at(t, &f.drift, derive_seed(cfg.seed, "fiber-drift", 0)),
        None => PolarizationTransform::identity(),
    };
    let stack = &cfg.compensation.stack;
    let result = calibrate(
        &alignment_probes(&drift),
        stack,
        &stack.rest_voltages(),
        &cfg.compensation.calibration,
    )?;
    prepare_out(&args.common.out)?;
    write_json(&args.common.out, "calibration.json", &result)?;
    write(&args.common.out, "calibration_trace.csv", &result.trace_csv())?;
    let volts: Vec<String> = result.voltages.iter().map(|v| format!("{v:.4}")).collect();
    println!("drift at {t} ps: rotation {:.4} rad", drift.rotation_angle());
    println!(
        "leakage {:.3e} after {} iterations ({} restarts), voltages [{}]",
        result.leakage,
        result.iterations,
        result.restarts,
        volts.join(", ")
    );
    if !result.converged {
        return Err(Error::Degenerate(format!(
            "calibration did not reach leakage {} within {} iterations",
            cfg.compensation.calibration.threshold, cfg.compensation.calibration.max_iterations
        ))
        .into());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidParameter { .. }) => 2,
        Some(Error::Degenerate(_)) => 4,
        Some(Error::Io(_)) | None => 1,
        Some(_) => 3,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| anyhow!("configuring the thread pool: {e}"))?;
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::G2(a) => cmd_g2(a),
        Command::Fidelity(a) => cmd_fidelity(a),
        Command::Stability(a) => cmd_stability(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
