use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splatseg::config::PipelineConfig;
use splatseg::distill::adapter::serve;
use splatseg::distill::{MockEmbedder, MockVlm};
use splatseg::eval::{SegmentationReport, SelectionReport};
use splatseg::fixture::{build_fixture, write_fixture, FixtureOptions};
use splatseg::masks::Granularity;
use splatseg::pipeline::{Clients, Pipeline, PipelineError};

#[derive(Parser)]
#[command(name = "splatseg", version, about = "Group, name and query objects in Gaussian splatting scenes")]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(short, long, global = true, env = "SPLATSEG_CONFIG", default_value = "splatseg.toml")]
    config: PathBuf,
    /// Override a config key, e.g. `--set entropy_threshold=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read per-view masks and record tracks.
    Ingest,
    /// Lift masks onto Gaussians and refine with neutral-point filtering.
    Group,
    /// Name every group and embed the names into the registry.
    Distill,
    /// Select Gaussians matching a text query.
    Query {
        text: String,
        #[arg(long)]
        granularity: Option<Granularity>,
    },
    /// Label every Gaussian with one of the given classes.
    Segment {
        /// Defaults to `eval.classes` from the config.
        classes: Vec<String>,
    },
    /// Score selection and segmentation against ground truth.
    Eval,
    /// Render every view, optionally only a previous query's selection.
    Render {
        #[arg(long)]
        query: Option<String>,
    },
    /// Write the synthetic two-blob fixture with a ready config.
    Synth {
        dir: PathBuf,
        /// Clean scene with exact masks instead of the halo variant.
        #[arg(long)]
        exact: bool,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Serve the adapter protocol with the deterministic mock models.
    MockAdapter {
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Listen on a TCP address instead of stdio.
        #[arg(long)]
        listen: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_pipeline(cli: &Cli) -> Result<Pipeline, PipelineError> {
    let config = PipelineConfig::load(&cli.config, &cli.overrides)?;
    if config.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(config.threads).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    Ok(Pipeline::new(config))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match &cli.command {
        Command::Synth { dir, exact, seed } => return synth(dir, *exact, *seed),
        Command::MockAdapter { dim, seed, listen } => return mock_adapter(*dim, *seed, listen.as_deref()),
        _ => {}
    }
    let pipeline = load_pipeline(&cli)?;
    match cli.command {
        Command::Ingest => {
            let tracks = pipeline.ingest()?;
            println!("{} tracks -> {}", tracks.tracks.len(), pipeline.tracks_path().display());
            for t in &tracks.tracks {
                let valid = t.views.iter().filter(|v| v.source.is_some()).count();
                println!("  {} {}: {valid}/{} valid views", t.granularity, t.track_id, t.views.len());
            }
        }
        Command::Group => {
            let groups = pipeline.group()?;
            println!("{} groups over {} Gaussians -> {}", groups.groups.len(), groups.gaussians, pipeline.groups_path().display());
            for g in &groups.groups {
                println!(
                    "  {} {}: {} foreground ({} assigned, {} neutral)",
                    g.granularity,
                    g.track_id,
                    g.foreground.len(),
                    g.assigned,
                    g.neutral.len()
                );
            }
        }
        Command::Distill => {
            let clients = Clients::from_config(&pipeline.config)?;
            let registry = pipeline.distill(&clients)?;
            println!("{} objects -> {}", registry.objects.len(), pipeline.config.registry_path().display());
            for o in &registry.objects {
                let names = if o.is_unnamed() { "<unnamed>".to_string() } else { o.names.join(", ") };
                println!("  {} {}: {names}", o.granularity, o.track_id);
            }
        }
        Command::Query { text, granularity } => {
            let clients = Clients::from_config(&pipeline.config)?;
            let out = pipeline.query(&text, granularity, &clients)?;
            let r = &out.result;
            println!("`{}`: {} objects, {} Gaussians{}", r.query, r.matched.len(), r.selected.len(), if r.fallback { " (fallback)" } else { "" });
            for m in &r.matched {
                println!("  {} {}  {:.4}  {}", m.granularity, m.track_id, m.similarity, m.best_name);
            }
            println!("-> {}", pipeline.query_path(&text).display());
        }
        Command::Segment { classes } => {
            let classes = if classes.is_empty() { pipeline.config.eval.classes.clone() } else { classes };
            let clients = Clients::from_config(&pipeline.config)?;
            let out = pipeline.segment(&classes, &clients)?;
            let seg = &out.segmentation;
            for (k, class) in seg.classes.iter().enumerate() {
                let n = seg.labels.iter().filter(|l| **l == Some(k)).count();
                println!("  {class}: {n} Gaussians");
            }
            println!("  unlabeled: {}", seg.labels.iter().filter(|l| l.is_none()).count());
            println!("-> {}", pipeline.segment_path().display());
        }
        Command::Eval => {
            let clients = Clients::from_config(&pipeline.config)?;
            let report = pipeline.eval(&clients)?;
            if let Some(s) = &report.selection {
                print_selection(s);
            }
            if let Some(s) = &report.segmentation {
                print_segmentation(s);
            }
            println!("-> {}", pipeline.report_path().display());
        }
        Command::Render { query } => {
            let written = pipeline.render(query.as_deref())?;
            println!("{} renders", written.len());
        }
        Command::Synth { .. } | Command::MockAdapter { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn print_selection(report: &SelectionReport) {
    println!("{:<32} {:>8} {:>6}", "query", "IoU", "views");
    for q in &report.queries {
        println!("{:<32} {:>8.4} {:>6}", q.query, q.iou, q.views.len());
    }
    println!("{:<32} {:>8.4}", "mIoU", report.miou);
}

fn print_segmentation(report: &SegmentationReport) {
    println!("{:<24} {:>8} {:>8} {:>8} {:>8} {:>8}", "class", "IoU", "Acc", "TP", "FP", "FN");
    for c in &report.classes {
        let acc = c.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        println!("{:<24} {:>8.4} {:>8} {:>8} {:>8} {:>8}", c.class, c.iou, acc, c.tp, c.fp, c.fn_);
    }
    println!("{:<24} {:>8.4} {:>8.4}", "mean", report.miou, report.macc);
}

fn synth(dir: &Path, exact: bool, seed: u64) -> Result<(), PipelineError> {
    let options = FixtureOptions { seed, ..if exact { FixtureOptions::exact() } else { FixtureOptions::halo() } };
    let fixture = build_fixture(&options)?;
    let layout = write_fixture(dir, &fixture)?;
    println!(
        "{} Gaussians, {} views -> {}",
        fixture.scene.gaussians.len(),
        fixture.scene.cameras.len(),
        layout.config.display()
    );
    Ok(())
}

fn mock_adapter(dim: usize, seed: u64, listen: Option<&str>) -> Result<(), PipelineError> {
    let vlm = MockVlm::new();
    let embedder = MockEmbedder::new(dim).with_seed(seed);
    let io = |e: std::io::Error| PipelineError::Io { path: PathBuf::from(listen.unwrap_or("<stdio>")), source: e };
    let Some(addr) = listen else {
        let stdin = std::io::stdin();
        return serve(stdin.lock(), std::io::stdout().lock(), &vlm, &embedder).map_err(io);
    };
    let listener = TcpListener::bind(addr).map_err(io)?;
    let local = listener.local_addr().map_err(io)?;
    println!("listening on tcp://{local}");
    std::io::stdout().flush().ok();
    std::thread::scope(|scope| {
        for stream in listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let (vlm, embedder) = (&vlm, &embedder);
            scope.spawn(move || {
                let reader = match stream.try_clone() {
                    Ok(r) => BufReader::new(r),
                    Err(e) => return log::warn!("connection setup failed: {e}"),
                };
                if let Err(e) = serve(reader, stream, vlm, embedder) {
                    log::warn!("connection closed: {e}");
                }
            });
        }
    });
    Ok(())
}
