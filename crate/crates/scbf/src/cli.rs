//! Command-line front end: scenario files, single closed-loop runs,
//! experiment sweeps, moment validation, timing comparisons, and
//! CSV/SVG artifact emission.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barrier::BarrierConfig;
use crate::control::{Reference, ReferenceArg, ReferenceSignal};
use crate::experiments::{
    empirical_chance, feasibility_experiment, format_float, run_batch, run_closed_loop,
    success_rate_experiment, validate_moments, ControllerKind, ExperimentTable, Scenario, SweepAxis,
    TrajectoryLog,
};
use crate::models::{CircularObstacleMotion, DoubleIntegrator, ObstacleSpec};
use crate::{Error, Result};

// --- scenario files ---------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    model: Option<ModelSection>,
    reference: Option<ReferenceSection>,
    obstacles: Option<Vec<ObstacleSection>>,
    mpc: Option<MpcSection>,
    barrier: Option<BarrierSection>,
    run: Option<RunSection>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    dt: Option<f64>,
    velocity_persistence: Option<bool>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceSection {
    amplitude: Option<f64>,
    rate: Option<f64>,
    altitude: Option<f64>,
    /// "seconds" or "step_index".
    reference_arg: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleSection {
    /// Orbit center; the third component is the orbit-plane height.
    center: Option<[f64; 3]>,
    orbit_radius: Option<f64>,
    omega: Option<f64>,
    phase: Option<f64>,
    radius: Option<f64>,
    sigma2: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MpcSection {
    horizon: Option<usize>,
    p_weight: Option<f64>,
    q_weight: Option<f64>,
    r_weight: Option<f64>,
    state_bound: Option<f64>,
    input_bound: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BarrierSection {
    gamma: Option<f64>,
    delta: Option<f64>,
    zeta: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    k_max: Option<usize>,
    seed: Option<u64>,
    trials: Option<usize>,
    controller: Option<String>,
}

fn config_err(section: &str, key: &str, message: String) -> Error {
    Error::Config {
        section: section.into(),
        key: key.into(),
        message,
    }
}

fn scenario_from_file(file: &ScenarioFile) -> Result<Scenario> {
    let mut s = Scenario::tracking_default();

    let dt = file
        .model
        .as_ref()
        .and_then(|m| m.dt)
        .unwrap_or(s.model.dt);
    if !(dt > 0.0) {
        return Err(config_err("model", "dt", format!("dt must be > 0, got {dt}")));
    }
    s.model = DoubleIntegrator::new(dt);
    if let Some(vp) = file.model.as_ref().and_then(|m| m.velocity_persistence) {
        s.model.velocity_persistence = vp;
    }

    let mut reference = Reference {
        amplitude: 2.0,
        rate: 0.4,
        altitude: 2.0,
        arg: ReferenceArg::Seconds,
        dt,
    };
    if let Some(r) = &file.reference {
        if let Some(v) = r.amplitude {
            reference.amplitude = v;
        }
        if let Some(v) = r.rate {
            reference.rate = v;
        }
        if let Some(v) = r.altitude {
            reference.altitude = v;
        }
        if let Some(arg) = &r.reference_arg {
            reference.arg = match arg.as_str() {
                "seconds" => ReferenceArg::Seconds,
                "step_index" => ReferenceArg::StepIndex,
                other => {
                    return Err(config_err(
                        "reference",
                        "reference_arg",
                        format!("expected \"seconds\" or \"step_index\", got \"{other}\""),
                    ))
                }
            };
        }
    }

    if let Some(m) = &file.mpc {
        if let Some(h) = m.horizon {
            if h == 0 {
                return Err(config_err("mpc", "horizon", "horizon must be >= 1".into()));
            }
            s.mpc.horizon = h;
        }
        if let Some(v) = m.p_weight {
            s.mpc.p = nalgebra::DMatrix::identity(6, 6) * v;
        }
        if let Some(v) = m.q_weight {
            s.mpc.q = nalgebra::DMatrix::identity(6, 6) * v;
        }
        if let Some(v) = m.r_weight {
            s.mpc.r = nalgebra::DMatrix::identity(3, 3) * v;
        }
        if let Some(v) = m.state_bound {
            s.mpc.state_lower = DVector::from_element(6, -v);
            s.mpc.state_upper = DVector::from_element(6, v);
            s.mpc.terminal_lower = DVector::from_element(6, -v);
            s.mpc.terminal_upper = DVector::from_element(6, v);
        }
        if let Some(v) = m.input_bound {
            s.mpc.input_lower = DVector::from_element(3, -v);
            s.mpc.input_upper = DVector::from_element(3, v);
        }
    }
    s.mpc.reference = ReferenceSignal::Circular(reference);

    if let Some(b) = &file.barrier {
        let gamma = b.gamma.unwrap_or(s.barrier.gamma);
        let delta = b.delta.unwrap_or(s.barrier.delta);
        let zeta = b.zeta.unwrap_or(s.barrier.zeta);
        s.barrier = BarrierConfig::new(gamma, delta, zeta, 6, 3);
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(config_err("barrier", "gamma", format!("0 < γ <= 1, got {gamma}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(config_err("barrier", "delta", format!("0 < δ < 1, got {delta}")));
        }
        if zeta < 0.0 {
            return Err(config_err("barrier", "zeta", format!("ζ >= 0, got {zeta}")));
        }
    }

    if let Some(list) = &file.obstacles {
        let defaults = Scenario::tracking_default().obstacles;
        s.obstacles = list
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let base = defaults.get(i.min(defaults.len() - 1)).unwrap();
                let center = o.center.unwrap_or([
                    base.motion.center[0],
                    base.motion.center[1],
                    base.motion.altitude,
                ]);
                let radius = o.radius.unwrap_or(base.radius);
                if !(radius > 0.0) {
                    return Err(config_err(
                        "obstacles",
                        "radius",
                        format!("radius must be > 0, got {radius}"),
                    ));
                }
                let sigma2 = o.sigma2.unwrap_or(base.noise_var);
                if sigma2 < 0.0 {
                    return Err(config_err(
                        "obstacles",
                        "sigma2",
                        format!("sigma2 must be >= 0, got {sigma2}"),
                    ));
                }
                Ok(ObstacleSpec::spherical(
                    CircularObstacleMotion {
                        center: [center[0], center[1], 0.0],
                        orbit_radius: o.orbit_radius.unwrap_or(base.motion.orbit_radius),
                        angular_velocity: o.omega.unwrap_or(base.motion.angular_velocity),
                        phase: o.phase.unwrap_or(base.motion.phase),
                        altitude: center[2],
                    },
                    radius,
                    sigma2,
                    dt,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
    } else {
        for spec in &mut s.obstacles {
            spec.dt = dt;
        }
    }

    if let Some(r) = &file.run {
        if let Some(v) = r.k_max {
            s.k_max = v;
        }
        if let Some(v) = r.seed {
            s.seed = v;
        }
        if let Some(v) = r.trials {
            if v == 0 {
                return Err(config_err("run", "trials", "trials must be >= 1".into()));
            }
            s.trials = v;
        }
        if let Some(c) = &r.controller {
            s.controller = ControllerKind::parse(c)?;
        }
    }

    s.validate()?;
    Ok(s)
}

/// Parse a scenario document; missing sections and keys take the
/// default tracking-scenario values.
pub fn scenario_from_toml(text: &str) -> Result<Scenario> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config {
        section: "scenario".into(),
        key: "<document>".into(),
        message: e.to_string(),
    })?;
    scenario_from_file(&file)
}

/// Parse a scenario file from disk.
pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)?;
    scenario_from_toml(&text)
}

/// Serialize a scenario back to the document format with every key
/// explicit; reparsing reproduces an equivalent scenario.
pub fn scenario_to_toml(s: &Scenario) -> Result<String> {
    let reference = match &s.mpc.reference {
        ReferenceSignal::Circular(r) => r.clone(),
        ReferenceSignal::Fixed(_) => {
            return Err(Error::Invariant(
                "only circular references can be serialized to a scenario document".into(),
            ))
        }
    };
    let file = ScenarioFile {
        model: Some(ModelSection {
            dt: Some(s.model.dt),
            velocity_persistence: Some(s.model.velocity_persistence),
        }),
        reference: Some(ReferenceSection {
            amplitude: Some(reference.amplitude),
            rate: Some(reference.rate),
            altitude: Some(reference.altitude),
            reference_arg: Some(
                match reference.arg {
                    ReferenceArg::Seconds => "seconds",
                    ReferenceArg::StepIndex => "step_index",
                }
                .into(),
            ),
        }),
        obstacles: Some(
            s.obstacles
                .iter()
                .map(|o| ObstacleSection {
                    center: Some([o.motion.center[0], o.motion.center[1], o.motion.altitude]),
                    orbit_radius: Some(o.motion.orbit_radius),
                    omega: Some(o.motion.angular_velocity),
                    phase: Some(o.motion.phase),
                    radius: Some(o.radius),
                    sigma2: Some(o.noise_var),
                })
                .collect(),
        ),
        mpc: Some(MpcSection {
            horizon: Some(s.mpc.horizon),
            p_weight: Some(s.mpc.p[(0, 0)]),
            q_weight: Some(s.mpc.q[(0, 0)]),
            r_weight: Some(s.mpc.r[(0, 0)]),
            state_bound: Some(s.mpc.state_upper[0]),
            input_bound: Some(s.mpc.input_upper[0]),
        }),
        barrier: Some(BarrierSection {
            gamma: Some(s.barrier.gamma),
            delta: Some(s.barrier.delta),
            zeta: Some(s.barrier.zeta),
        }),
        run: Some(RunSection {
            k_max: Some(s.k_max),
            seed: Some(s.seed),
            trials: Some(s.trials),
            controller: Some(s.controller.name().into()),
        }),
    };
    toml::to_string(&file).map_err(|e| Error::Invariant(format!("scenario serialization: {e}")))
}

// --- command line -----------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "scbf",
    version,
    about = "Collision-avoiding tracking control: closed-loop runs, sweeps, validation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Single closed-loop run; writes a trajectory CSV (and optional SVG).
    Run(RunArgs),
    /// Batch parameter sweep; writes a results table CSV.
    Sweep(SweepArgs),
    /// Monte Carlo validation of the closed-form moments.
    Validate(ValidateArgs),
    /// Timing comparison of the sequential pipeline vs the one-shot solve.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Scenario document path, or one of the built-ins: "default"
    /// (encounter-rich tracking) or "diffusion" (far, noise-dominated
    /// obstacles).
    #[arg(long, default_value = "default")]
    scenario: String,
    /// nominal | det-mpc-cbf | cc-mpc-cbf | cc-mpc-dc | sequential
    #[arg(long)]
    controller: Option<String>,
    /// Override the obstacle noise variance.
    #[arg(long)]
    sigma2: Option<f64>,
    /// Override the barrier decay rate.
    #[arg(long)]
    gamma: Option<f64>,
    /// Override the chance-constraint confidence level.
    #[arg(long)]
    delta: Option<f64>,
    /// Override the prediction horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Also emit a top-down SVG plot.
    #[arg(long)]
    svg: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// sigma2 | gamma | horizon
    #[arg(long)]
    axis: String,
    /// Comma-separated parameter values.
    #[arg(long)]
    values: String,
    /// success | feasibility
    #[arg(long, default_value = "feasibility")]
    metric: String,
    /// Exit nonzero when the expected trends do not hold.
    #[arg(long)]
    assert: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Monte Carlo sample count per instance.
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Seeded runs per controller.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Exit nonzero unless the sequential pipeline is faster on average.
    #[arg(long)]
    assert: bool,
}

fn load_scenario(common: &CommonArgs) -> Result<Scenario> {
    let mut s = match common.scenario.as_str() {
        "default" => Scenario::tracking_default(),
        "diffusion" => Scenario::diffusion_default(),
        path => parse_scenario(Path::new(path))?,
    };
    if let Some(c) = &common.controller {
        s.controller = ControllerKind::parse(c)?;
    }
    if let Some(v) = common.sigma2 {
        if v < 0.0 {
            return Err(config_err("run", "sigma2", format!("sigma2 must be >= 0, got {v}")));
        }
        s.set_sigma2(v);
    }
    if let Some(v) = common.gamma {
        s.barrier.gamma = v;
    }
    if let Some(v) = common.delta {
        s.barrier.delta = v;
    }
    if let Some(v) = common.horizon {
        s.mpc.horizon = v;
    }
    if let Some(v) = common.seed {
        s.seed = v;
    }
    if let Some(v) = common.trials {
        if v == 0 {
            return Err(config_err("run", "trials", "trials must be >= 1".into()));
        }
        s.trials = v;
    }
    s.validate()?;
    Ok(s)
}

fn write_artifact(dir: &Path, name: &str, content: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), content)?;
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<i32> {
    let scenario = load_scenario(&args.common)?;
    let log = run_closed_loop(&scenario)?;
    let mut csv = log.to_csv();
    csv.push_str(&format!(
        "# summary: steps={} collided={} first_infeasible_k={} success={} wall_s={}\n",
        log.steps.len(),
        log.collided,
        log.first_infeasible_k.map(|k| k.to_string()).unwrap_or_default(),
        log.success(),
        format_float(log.wall_time),
    ));
    write_artifact(&args.common.out, "trajectory.csv", &csv)?;
    if args.svg {
        let svg = render_svg(&scenario, &log);
        write_artifact(&args.common.out, "trajectory.svg", &svg)?;
    }
    println!(
        "{}: {} steps, collided={}, first_infeasible_k={:?}",
        scenario.controller.name(),
        log.steps.len(),
        log.collided,
        log.first_infeasible_k
    );
    Ok(0)
}

fn assert_sweep(table: &ExperimentTable, axis: SweepAxis, metric: &str, values: &[f64]) -> Vec<String> {
    let mut failures = Vec::new();
    match (metric, axis) {
        ("feasibility", SweepAxis::Sigma2) => {
            for &v in values {
                let one_shot = table.row(v, "cc-mpc-cbf").map(|r| r.feasible_pct);
                let sequential = table.row(v, "sequential").map(|r| r.feasible_pct);
                if let (Some(a), Some(b)) = (one_shot, sequential) {
                    if b < a {
                        failures.push(format!(
                            "sequential feasibility {b}% below one-shot {a}% at sigma2={v}"
                        ));
                    }
                }
            }
        }
        ("feasibility", SweepAxis::Gamma) | ("feasibility", SweepAxis::Horizon) => {
            // Values are ordered from the least to the most demanding
            // setting; feasibility must not increase along the list.
            let rates: Vec<f64> = values
                .iter()
                .filter_map(|&v| table.row(v, "cc-mpc-cbf").map(|r| r.feasible_pct))
                .collect();
            for w in rates.windows(2) {
                if w[1] > w[0] + 1e-9 {
                    failures.push(format!(
                        "feasibility increased along the sweep: {} -> {}",
                        w[0], w[1]
                    ));
                }
            }
        }
        ("success", _) => {
            let rates: Vec<f64> = values
                .iter()
                .filter_map(|&v| table.row(v, "det-mpc-cbf").map(|r| r.success_pct))
                .collect();
            for w in rates.windows(2) {
                if w[1] > w[0] + 1e-9 {
                    failures.push(format!(
                        "deterministic success increased along the sweep: {} -> {}",
                        w[0], w[1]
                    ));
                }
            }
            for &v in values {
                if let Some(r) = table.row(v, "cc-mpc-cbf") {
                    if r.success_pct < 100.0 {
                        failures.push(format!(
                            "chance-constrained success {}% below 100% at sigma2={v}",
                            r.success_pct
                        ));
                    }
                }
            }
        }
        _ => {}
    }
    failures
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let scenario = load_scenario(&args.common)?;
    let axis = SweepAxis::parse(&args.axis)?;
    let values: Vec<f64> = args
        .values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| config_err("sweep", "values", format!("bad value '{v}': {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(config_err("sweep", "values", "at least one value required".into()));
    }
    let trials = scenario.trials;
    let table = match args.metric.as_str() {
        "feasibility" => feasibility_experiment(&scenario, axis, &values, trials)?,
        "success" => {
            if axis != SweepAxis::Sigma2 {
                return Err(config_err(
                    "sweep",
                    "metric",
                    "the success metric sweeps the sigma2 axis only".into(),
                ));
            }
            success_rate_experiment(
                &scenario,
                &values,
                &[ControllerKind::DetMpcCbf, ControllerKind::CcMpcCbf],
                trials,
            )?
        }
        other => {
            return Err(config_err(
                "sweep",
                "metric",
                format!("expected success | feasibility, got '{other}'"),
            ))
        }
    };
    write_artifact(&args.common.out, "table.csv", &table.to_csv())?;
    print!("{}", table.to_csv());
    if args.assert {
        let failures = assert_sweep(&table, axis, &args.metric, &values);
        if !failures.is_empty() {
            for f in &failures {
                eprintln!("assertion failed: {f}");
            }
            return Ok(3);
        }
    }
    Ok(0)
}

fn cmd_validate(args: &ValidateArgs) -> Result<i32> {
    let scenario = load_scenario(&args.common)?;
    let model = &scenario.model;
    let spec = {
        let mut spec = scenario.obstacles[0].clone();
        spec.noise_var = 0.1;
        spec
    };
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut all_pass = true;
    for i in 0..10 {
        let x = DVector::from_fn(6, |_, _| rng.gen_range(-3.0..3.0));
        let o = DVector::from_fn(3, |_, _| rng.gen_range(-3.0..3.0));
        let u = DVector::from_fn(3, |_, _| rng.gen_range(-4.0..4.0));
        let report = validate_moments(
            &x,
            &o,
            &u,
            model,
            &spec,
            &scenario.barrier,
            args.samples,
            scenario.seed + 1000 + i,
        )?;
        println!(
            "instance {i}: mean {} vs {} (se {}), var {} vs {} (se {}) -> {}",
            format_float(report.closed_mean),
            format_float(report.empirical_mean),
            format_float(report.se_mean),
            format_float(report.closed_var),
            format_float(report.empirical_var),
            format_float(report.se_var),
            if report.pass { "pass" } else { "FAIL" }
        );
        all_pass &= report.pass;
        let x2 = DVector::from_fn(6, |_, _| rng.gen_range(-3.0..3.0));
        let chance = empirical_chance(
            &x2,
            &o,
            &u,
            model,
            &spec,
            &scenario.barrier,
            (args.samples / 100).max(10_000),
            scenario.seed + 2000 + i,
        )?;
        if !(0.0..=1.0).contains(&chance) {
            all_pass = false;
        }
    }
    Ok(if all_pass { 0 } else { 3 })
}

fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let base = load_scenario(&args.common)?;
    let mut means = Vec::new();
    for kind in [ControllerKind::Sequential, ControllerKind::CcMpcCbf] {
        let mut s = base.clone();
        s.controller = kind;
        let logs = run_batch(&s, args.runs)?;
        let mean = logs.iter().map(|l| l.wall_time).sum::<f64>() / logs.len() as f64;
        println!("{}: mean wall time {:.3} s over {} runs", kind.name(), mean, args.runs);
        means.push(mean);
    }
    if args.assert && means[0] >= means[1] {
        eprintln!(
            "assertion failed: sequential mean {} s not below one-shot mean {} s",
            means[0], means[1]
        );
        return Ok(3);
    }
    Ok(0)
}

// --- SVG emission -----------------------------------------------------

/// Top-down X-Y plot: reference curve, robot path, obstacle paths, and
/// obstacle disks at five sampled times.
pub fn render_svg(scenario: &Scenario, log: &TrajectoryLog) -> String {
    let size = 640.0;
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    let mut extend = |x: f64, y: f64| {
        min[0] = min[0].min(x);
        min[1] = min[1].min(y);
        max[0] = max[0].max(x);
        max[1] = max[1].max(y);
    };
    for s in &log.steps {
        extend(s.state[0], s.state[1]);
        for o in &s.obstacle_states {
            extend(o[0], o[1]);
        }
    }
    for k in 0..=scenario.k_max {
        let r = scenario.mpc.reference.position(k);
        extend(r[0], r[1]);
    }
    if !min[0].is_finite() {
        min = [-1.0; 2];
        max = [1.0; 2];
    }
    let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-9);
    let margin = 0.08 * span;
    let scale = size / (span + 2.0 * margin);
    let to_px = |x: f64, y: f64| {
        (
            (x - min[0] + margin) * scale,
            size - (y - min[1] + margin) * scale,
        )
    };
    let polyline = |pts: &[(f64, f64)], color: &str, dash: &str| {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let (px, py) = to_px(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>\n",
            coords.join(" ")
        )
    };

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let ref_pts: Vec<(f64, f64)> = (0..=scenario.k_max)
        .map(|k| {
            let r = scenario.mpc.reference.position(k);
            (r[0], r[1])
        })
        .collect();
    svg.push_str(&polyline(&ref_pts, "#888888", " stroke-dasharray=\"6 4\""));

    let robot_pts: Vec<(f64, f64)> = log.steps.iter().map(|s| (s.state[0], s.state[1])).collect();
    svg.push_str(&polyline(&robot_pts, "#1f77b4", ""));

    let colors = ["#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    for (i, spec) in scenario.obstacles.iter().enumerate() {
        let color = colors[i % colors.len()];
        let path: Vec<(f64, f64)> = log
            .steps
            .iter()
            .map(|s| (s.obstacle_states[i][0], s.obstacle_states[i][1]))
            .collect();
        if path.is_empty() {
            continue;
        }
        svg.push_str(&polyline(&path, color, " stroke-opacity=\"0.5\""));
        let n = log.steps.len();
        for j in 0..5 {
            let idx = (j * n.saturating_sub(1)) / 4.max(1);
            let (cx, cy) = to_px(path[idx.min(n - 1)].0, path[idx.min(n - 1)].1);
            svg.push_str(&format!(
                "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{:.2}\" fill=\"{color}\" \
                 fill-opacity=\"0.25\" stroke=\"{color}\"/>\n",
                spec.radius * scale
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Entry point: returns the process exit code (0 success, 2 config
/// error, 3 assertion failure).
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
