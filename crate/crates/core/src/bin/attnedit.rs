// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end for suites, runs, routing, sweeps, probes and reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 run failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use attnedit::edit::{run_edit, EditOptions};
use attnedit::harness::report::{parse_csv, Format, Report};
use attnedit::harness::runner::{default_grid, Harness, RouteMode, SweepAxis, Variant};
use attnedit::harness::suite::{generate_stratified, Suite};
use attnedit::harness::RunConfig;
use attnedit::mmdit::{encode_source, SampleConfig};
use attnedit::ops::OpSpec;
use attnedit::router::{build_centroids, AnchorSet, RouteTable};
use attnedit::text::HashedBow;
use attnedit::Result;

#[derive(Parser)]
#[command(name = "attnedit", version, about = "Attention K/V editing experiments on a toy joint-attention transformer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// key=value model and sampling config.
    #[arg(long)]
    model_cfg: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Record wall-clock seconds per case.
    #[arg(long)]
    timing: bool,
    /// Format of the file written to --out.
    #[arg(long, default_value = "json")]
    format: Format,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic suites.
    Suite {
        #[command(subcommand)]
        cmd: SuiteCmd,
    },
    /// Baseline plus one op over a suite.
    Run {
        #[arg(long)]
        op: OpSpec,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Baseline plus the routed variant over a suite.
    Route {
        #[arg(long)]
        mode: RouteMode,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Baseline plus the default grid of one axis.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-layer K similarity between halves for one case.
    Probe {
        #[arg(long)]
        op: OpSpec,
        #[arg(long)]
        case: String,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the 100-case suite with seed 0.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        model_cfg: Option<PathBuf>,
    },
    /// Re-renders a json (or csv) report to stdout.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        format: Format,
    },
}

#[derive(Subcommand)]
enum SuiteCmd {
    Gen {
        /// Total number of cases, stratified over the six categories.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Omit source captions (disables CLIP-D).
        #[arg(long)]
        no_captions: bool,
    },
}

fn load_cfg(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn harness(common: &Common) -> Result<Harness> {
    Ok(Harness::new(load_cfg(common.model_cfg.as_deref())?)?
        .with_workers(common.workers)
        .with_timing(common.timing))
}

fn header(h: &Harness, suite: &Suite) -> Vec<String> {
    let mut out = h.provider_ids();
    out.push(format!("cases={}", suite.len()));
    out.push(format!("master_seed={}", suite.master_seed));
    out.push("clip_d=cos(img(edit)-img(source), txt(instruction)-txt(caption))".into());
    out
}

fn finish(report: &Report, out: &Path, format: Format) -> Result<()> {
    report.write(out, format)?;
    print!("{}", report.render(Format::Text)?);
    Ok(())
}

fn sweep_report(h: &Harness, title: String, axis: Option<SweepAxis>, grid: &[Variant], suite: &Suite) -> Result<Report> {
    let sweep = h.sweep(axis, grid, suite)?;
    sweep.paired_audit()?;
    Report::from_sweep(title, header(h, suite), &sweep)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Suite {
            cmd: SuiteCmd::Gen {
                n,
                seed,
                out,
                no_captions,
            },
        } => {
            let mut suite = generate_stratified(n, seed);
            if no_captions {
                suite = suite.without_captions();
            }
            suite.save(&out)?;
            println!("wrote {} cases to {}", suite.len(), out.display());
        }
        Cmd::Run {
            op,
            suite,
            out,
            common,
        } => {
            let h = harness(&common)?;
            let suite = Suite::load(&suite)?;
            let report = if op == OpSpec::Baseline {
                let r = h.run_variant(&Variant::baseline(), &suite)?;
                Report::from_variants("run: baseline", header(&h, &suite), &[r])?
            } else {
                let v = Variant::op(op.to_string(), op.clone());
                sweep_report(&h, format!("run: {op}"), None, &[v], &suite)?
            };
            finish(&report, &out, common.format)?;
        }
        Cmd::Route {
            mode,
            table,
            anchors,
            suite,
            out,
            common,
        } => {
            let table = table.map_or_else(|| Ok(RouteTable::default()), |p| RouteTable::load(&p))?;
            let anchors = anchors.map_or_else(|| Ok(AnchorSet::default()), |p| AnchorSet::load(&p))?;
            let classifier = build_centroids(&anchors, Box::new(HashedBow::default()))?;
            let h = harness(&common)?.with_router(table, classifier);
            let suite = Suite::load(&suite)?;
            let report = sweep_report(&h, format!("route: {mode}"), None, &[Variant::routed(mode)], &suite)?;
            finish(&report, &out, common.format)?;
        }
        Cmd::Sweep {
            axis,
            suite,
            out,
            common,
        } => {
            let h = harness(&common)?;
            let suite = Suite::load(&suite)?;
            let grid = default_grid(axis, &h.op_context());
            let report = sweep_report(&h, format!("sweep: {axis}"), Some(axis), &grid, &suite)?;
            finish(&report, &out, common.format)?;
        }
        Cmd::Probe {
            op,
            case,
            out,
            suite,
            model_cfg,
        } => {
            let cfg = load_cfg(model_cfg.as_deref())?;
            let suite = match suite {
                Some(p) => Suite::load(&p)?,
                None => generate_stratified(100, 0),
            };
            let case = suite.case(&case)?;
            let model = attnedit::mmdit::build_model(cfg.model.clone())?;
            let source = encode_source(&case.source_label, model.config(), case.seed);
            let sc = SampleConfig {
                seed: case.seed,
                ..cfg.sample
            };
            let opts = EditOptions {
                probe: true,
                ..Default::default()
            };
            let run = run_edit(&model, &source, &case.instruction, &op, &sc, opts)?;
            let log = run.probe.expect("probe requested");
            let log = log.lock().expect("probe log lock");
            let mut buf = Vec::new();
            log.write_dump(&mut buf)?;
            std::fs::write(&out, buf)?;
            println!("# case {} op {op}", case.id);
            println!("layer,mean_cos_sim");
            for (layer, m) in log.layer_means() {
                println!("{layer},{m:.6}");
            }
        }
        Cmd::Report { input, format } => {
            let text = attnedit::error::read_file(&input)?;
            let report = match serde_json::from_str::<Report>(&text) {
                Ok(r) => r,
                Err(_) => Report {
                    title: input.display().to_string(),
                    header: Vec::new(),
                    rows: parse_csv(&text)?,
                    cases: Vec::new(),
                },
            };
            print!("{}", report.render(format)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
