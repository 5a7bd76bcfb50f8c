use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde_json::json;

use maprps_harness::report::{csv_string, emit_csv, emit_svg, read_csv, svg_string};
use maprps_harness::sweep::{endpoints, provenance, sample_ideal_curve};
use maprps_harness::{run_sweep, verify, Experiment, ExperimentConfig, HarnessError, SweepOptions};

/// `println!` that exits quietly when the reader has gone away (for example `| head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            panic!("failed writing to stdout: {e}");
        }
    }};
}

#[derive(Parser)]
#[command(name = "maprps", version, about = "MAP estimation plus re-noised posterior sampling on analytic priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for trial-level parallelism.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Print D*, P*, the MMSE and MAP points for the first observation.
    Oracle(Common),
    /// Run Stage 1 once and print the result with its objective trace.
    Map(Common),
    /// Run the distortion-perception sweep and write CSV and SVG.
    Traverse(Common),
    /// Run the configured oracle checks; exits 1 on any failure.
    Verify(Common),
    /// Redraw the SVG from an existing CSV.
    Plot {
        #[command(flatten)]
        common: Common,
        /// CSV to plot (default: <out>/dp_curve.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<Experiment, HarnessError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(Experiment::build(cfg)?)
}

fn fmt_vec(v: &DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.10}")).collect();
    format!("[{}]", parts.join(", "))
}

fn out_dir(c: &Common) -> Result<Option<PathBuf>, HarnessError> {
    if let Some(dir) = &c.out {
        std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    Ok(c.out.clone())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    std::fs::write(path, text + "\n").map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn oracle(c: &Common) -> Result<ExitCode, HarnessError> {
    let exp = load(c)?;
    let problem = exp.trial_problem(0)?;
    let post = exp.posterior_oracle(&problem.obs)?;
    let ends = endpoints(&exp, post.as_ref())?;
    let prov = provenance(&exp);
    say!("config_hash={}", prov.config_hash);
    say!("seed={}", prov.seed);
    let na = |v: Option<String>| v.unwrap_or_else(|| "NA".into());
    say!("d_star={}", na(ends.map(|e| format!("{:.10}", e.d_star))));
    say!("p_star={}", na(ends.map(|e| format!("{:.10}", e.p_star))));
    say!("y={}", fmt_vec(&problem.obs.y));
    say!("posterior_trace={}", na(post.as_ref().map(|o| format!("{:.10}", o.d_star))));
    say!("mmse={}", na(post.as_ref().map(|o| fmt_vec(&o.mmse))));
    say!("map={}", na(post.as_ref().and_then(|o| o.map.as_ref()).map(fmt_vec)));
    say!("mu={}", na(post.as_ref().and_then(|o| o.mu).map(|m| format!("{m:.10}"))));
    if let Some(dir) = out_dir(c)? {
        let record = json!({
            "provenance": prov,
            "d_star": ends.map(|e| e.d_star),
            "p_star": ends.map(|e| e.p_star),
            "y": problem.obs.y.as_slice(),
            "posterior_trace": post.as_ref().map(|o| o.d_star),
            "mmse": post.as_ref().map(|o| o.mmse.as_slice().to_vec()),
            "map": post.as_ref().and_then(|o| o.map.as_ref()).map(|m| m.as_slice().to_vec()),
            "mu": post.as_ref().and_then(|o| o.mu),
        });
        write_json(&dir.join("oracle.json"), &record)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn map(c: &Common) -> Result<ExitCode, HarnessError> {
    let exp = load(c)?;
    let problem = exp.trial_problem(0)?;
    let s1 = exp.run_stage1(&problem, 0)?;
    let x_map = exp.decode(&s1.x_map);
    say!("x_map={}", fmt_vec(&x_map));
    for (k, v) in s1.trace.iter().enumerate() {
        say!("trace[{k}]={v:.10e}");
    }
    if let Some(dir) = out_dir(c)? {
        let record = json!({
            "provenance": provenance(&exp),
            "x_map": x_map.as_slice(),
            "objective_trace": s1.trace,
        });
        write_json(&dir.join("map.json"), &record)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn traverse(c: &Common) -> Result<ExitCode, HarnessError> {
    let exp = load(c)?;
    let result = run_sweep(
        &exp,
        &SweepOptions {
            jobs: c.jobs,
            keep_outputs: false,
        },
    )?;
    let (csv, svg) = match out_dir(c)? {
        Some(dir) => (Some(dir.join("dp_curve.csv")), Some(dir.join("dp_curve.svg"))),
        None => (exp.cfg.output.csv.as_ref().map(PathBuf::from), exp.cfg.output.svg.as_ref().map(PathBuf::from)),
    };
    match &csv {
        Some(p) => emit_csv(&result, p)?,
        None => say!("{}", csv_string(&result.points).trim_end()),
    }
    if let Some(p) = &svg {
        emit_svg(&result, p)?;
    }
    if let Some(dir) = &c.out {
        let record = json!({
            "provenance": result.provenance,
            "d_star": result.endpoints.map(|e| e.d_star),
            "p_star": result.endpoints.map(|e| e.p_star),
            "failed_trials": result.failed_trials,
        });
        write_json(&dir.join("provenance.json"), &record)?;
    }
    if let Some(e) = result.endpoints {
        eprintln!("d_star={:.6} p_star={:.6}", e.d_star, e.p_star);
    }
    if result.failed_trials > 0 {
        eprintln!("{} trials failed and were excluded", result.failed_trials);
    }
    Ok(ExitCode::SUCCESS)
}

fn run_verify(c: &Common) -> Result<ExitCode, HarnessError> {
    let exp = load(c)?;
    let report = verify(&exp, c.jobs)?;
    for check in &report.checks {
        say!("{check}");
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn plot(c: &Common, csv: Option<&Path>) -> Result<ExitCode, HarnessError> {
    let exp = load(c)?;
    let dir = out_dir(c)?.unwrap_or_else(|| PathBuf::from("."));
    let csv = csv.map(Path::to_path_buf).unwrap_or_else(|| dir.join("dp_curve.csv"));
    let points = read_csv(&csv)?;
    let post = match &exp.fixed {
        Some((_, obs)) => exp.posterior_oracle(obs)?,
        None => None,
    };
    let ideal = match endpoints(&exp, post.as_ref())? {
        Some(e) => sample_ideal_curve(&e, points.iter().map(|p| p.w2).fold(0.0, f64::max)),
        None => Vec::new(),
    };
    let path = dir.join("dp_curve.svg");
    std::fs::write(&path, svg_string(&points, &ideal)).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Oracle(c) => oracle(c),
        Command::Map(c) => map(c),
        Command::Traverse(c) => traverse(c),
        Command::Verify(c) => run_verify(c),
        Command::Plot { common, csv } => plot(common, csv.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
