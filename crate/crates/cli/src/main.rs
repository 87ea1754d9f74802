use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::parser::ValueSource;
use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand};
use orscene::abstraction::{abstract_sequence, AbstractOptions, FitOptions, MaskBundle};
use orscene::conditioning::{
    apply_trajectory, build_conditioning, submit_to_backend, CommandBackend, ConditioningBundle, DiffusionBackend,
    MockBackend, Trajectory,
};
use orscene::io;
use orscene::metrics::{compare_bundle, write_report_csv};
use orscene::nearmiss::{
    default_base_frame, export_dataset, generate_dataset, generate_scenario, label_sequence, DatasetPlan,
    LabeledSequence, NearMissRule, ScenarioKind, ScenarioParams, SplitPolicy, SplitRequest,
};
use orscene::render::{render_sequence, RenderConfig, RenderMode};
use orscene::scene::default_palette;
use orscene::{synth, ErrorKind, Resolution};
use orscene_service::ProjectStore;

#[derive(Parser, Debug)]
#[command(name = "orscene", version, about = "Abstract OR scene pipeline: abstraction, rendering, conditioning, labeling, metrics")]
struct Cli {
    /// JSON file of default option values keyed by long flag name;
    /// flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct RenderOpts {
    /// ellipse_depth, ellipse_flat or segmask_passthrough.
    #[arg(long, default_value = "ellipse_depth")]
    mode: RenderMode,
    /// Output width; defaults to the scene resolution.
    #[arg(long)]
    width: Option<u32>,
    /// Output height; defaults to the scene resolution.
    #[arg(long)]
    height: Option<u32>,
    /// Mask bundle for segmask_passthrough.
    #[arg(long, value_name = "DIR")]
    masks: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit ellipse nodes to mask and depth bundles and write a scene JSON.
    Abstract {
        #[arg(long, value_name = "DIR")]
        masks: PathBuf,
        #[arg(long, value_name = "DIR")]
        depth: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value_t = 24.0)]
        fps: f64,
        #[arg(long, default_value_t = 16)]
        min_pixels: usize,
    },
    /// Render a scene JSON into frame_%05d.png images.
    Render {
        #[arg(long, value_name = "FILE")]
        scene: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        render: RenderOpts,
    },
    /// Apply trajectory edits (one object or an array) to a scene JSON.
    Edit {
        #[arg(long, value_name = "FILE")]
        scene: PathBuf,
        #[arg(long, value_name = "FILE")]
        trajectory: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Build a conditioning bundle from a scene JSON and optional edits.
    Condition {
        #[arg(long, value_name = "FILE")]
        scene: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_name = "FILE")]
        trajectory: Option<PathBuf>,
        /// Image copied into the bundle as the initial scene.
        #[arg(long, value_name = "PNG")]
        initial_frame: Option<PathBuf>,
        #[command(flatten)]
        render: RenderOpts,
    },
    /// Send a conditioning bundle to a diffusion backend.
    Generate {
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// mock (echo conditioning frames) or command.
        #[arg(long, default_value = "mock")]
        backend: String,
        /// Program for the command backend; receives request.json as its last argument.
        #[arg(long, value_name = "PROGRAM")]
        command: Option<PathBuf>,
        #[arg(long = "arg", value_name = "ARG", action = ArgAction::Append)]
        args: Vec<String>,
    },
    /// Generate a labeled near-miss dataset from scripted scenarios.
    NearmissGen {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Training positives.
        #[arg(long, default_value_t = 252)]
        positives: usize,
        /// Training negatives.
        #[arg(long, default_value_t = 426)]
        negatives: usize,
        #[arg(long, default_value_t = 77)]
        val_positives: usize,
        #[arg(long, default_value_t = 151)]
        val_negatives: usize,
        #[arg(long, default_value_t = 25)]
        frames_per_scenario: usize,
        /// Emit a single scenario of this kind instead of a dataset:
        /// approach_retreat, pass_by or circulate.
        #[arg(long)]
        scenario: Option<ScenarioKind>,
        /// Boundary gap at closest approach (single scenario).
        #[arg(long, default_value_t = 0.02)]
        closest_approach: f64,
        /// Normalized units per frame (single scenario).
        #[arg(long, default_value_t = 0.02)]
        speed: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "FILE")]
        rule: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value = "ellipse_depth")]
        mode: RenderMode,
        #[arg(long, default_value_t = 1024)]
        width: u32,
        #[arg(long, default_value_t = 768)]
        height: u32,
    },
    /// Label every frame of a scene JSON and write labels.csv.
    NearmissLabel {
        #[arg(long, value_name = "FILE")]
        scene: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, value_name = "FILE")]
        rule: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compare generated frames against a conditioning bundle.
    Metrics {
        #[arg(long, value_name = "DIR")]
        bundle: PathBuf,
        #[arg(long, value_name = "DIR")]
        generated: PathBuf,
        /// Reference frames for SSIM/PSNR; defaults to the bundle frames.
        #[arg(long, value_name = "DIR")]
        reference: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, value_name = "DIR", default_value = "projects")]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write synthetic mask and depth bundles of moving ellipses.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 97)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        entities: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1024)]
        width: u32,
        #[arg(long, default_value_t = 768)]
        height: u32,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match parse_with_config(argv) {
        Ok(cli) => cli,
        Err(Usage::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
        Err(Usage::Config(e)) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Joins the error chain, dropping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<orscene::Error>()).map(|e| e.kind()) {
        Some(ErrorKind::Input | ErrorKind::NotFound | ErrorKind::Config) => 1,
        Some(ErrorKind::Backend | ErrorKind::Internal) => 2,
        None if e.is::<UsageError>() => 1,
        None => 2,
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

enum Usage {
    Clap(clap::Error),
    Config(anyhow::Error),
}

/// Parses `argv`; with `--config`, options missing from the command line
/// are filled from the file and the result is parsed again.
fn parse_with_config(mut argv: Vec<OsString>) -> Result<Cli, Usage> {
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(&argv).map_err(Usage::Clap)?;
    let Some(config) = matches.get_one::<PathBuf>("config").cloned() else {
        return Cli::from_arg_matches(&matches).map_err(Usage::Clap);
    };
    let text = std::fs::read_to_string(&config)
        .with_context(|| format!("cannot read config {}", config.display()))
        .map_err(Usage::Config)?;
    let values: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
        .with_context(|| format!("config {} must be a JSON object", config.display()))
        .map_err(Usage::Config)?;

    let (sub_name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let sub_cmd = cmd.find_subcommand(sub_name).expect("parsed subcommand exists");
    for (key, value) in values {
        let id = key.replace('-', "_");
        let arg = sub_cmd
            .get_arguments()
            .find(|a| a.get_id().as_str() == id && a.get_long().is_some())
            .ok_or_else(|| Usage::Config(anyhow!("config key `{key}` is not an option of `{sub_name}`")))?;
        if sub_matches.value_source(&id) == Some(ValueSource::CommandLine) {
            continue;
        }
        let flag = format!("--{}", arg.get_long().expect("checked above"));
        let items = match value {
            serde_json::Value::Array(v) => v,
            v => vec![v],
        };
        for item in items {
            match item {
                serde_json::Value::Bool(true) => argv.push(flag.clone().into()),
                serde_json::Value::Bool(false) | serde_json::Value::Null => {}
                serde_json::Value::String(s) => {
                    argv.push(flag.clone().into());
                    argv.push(s.into());
                }
                other => {
                    argv.push(flag.clone().into());
                    argv.push(other.to_string().into());
                }
            }
        }
    }
    Cli::try_parse_from(argv).map_err(Usage::Clap)
}

fn render_config(opts: &RenderOpts, scene_res: Resolution) -> anyhow::Result<RenderConfig> {
    let resolution = Resolution::new(
        opts.width.unwrap_or(scene_res.width),
        opts.height.unwrap_or(scene_res.height),
    );
    let masks = match &opts.masks {
        Some(dir) => Some(Arc::new(io::load_mask_bundle(dir)?)),
        None => None::<Arc<MaskBundle>>,
    };
    let cfg = RenderConfig { resolution, mode: opts.mode, palette: default_palette(), masks };
    cfg.validate()?;
    Ok(cfg)
}

fn read_trajectories(path: &Path) -> anyhow::Result<Vec<Trajectory>> {
    let value: serde_json::Value = io::read_json(path)?;
    let edits = match value {
        serde_json::Value::Array(_) => serde_json::from_value(value),
        v => serde_json::from_value(v).map(|t| vec![t]),
    }
    .map_err(orscene::Error::from)
    .with_context(|| format!("invalid trajectory file {}", path.display()))?;
    Ok(edits)
}

fn read_rule(path: Option<&Path>, threshold: Option<f64>) -> anyhow::Result<NearMissRule> {
    let mut rule: NearMissRule = match path {
        Some(p) => io::read_json(p)?,
        None => NearMissRule::default(),
    };
    if let Some(t) = threshold {
        rule.threshold = t;
    }
    rule.validate()?;
    Ok(rule)
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Abstract { masks, depth, out, fps, min_pixels } => {
            let mask_bundle = io::load_mask_bundle(&masks)?;
            let depth_bundle = io::load_depth_bundle(&depth)?;
            let opts = AbstractOptions { fit: FitOptions { min_pixels, ..FitOptions::default() }, fps };
            let abs = abstract_sequence(&mask_bundle, &depth_bundle, &opts)?;
            io::write_scene(&out, &abs.sequence)?;
            println!(
                "abstracted {} frames ({} entities, {} skipped instances) -> {}",
                abs.sequence.len(),
                abs.sequence.entities().len(),
                abs.skipped.len(),
                out.display()
            );
        }
        Command::Render { scene, out, render } => {
            let seq = io::read_scene(&scene)?;
            let cfg = render_config(&render, seq.resolution)?;
            let frames = render_sequence(&seq, &cfg)?;
            io::write_frames(&out, &frames)?;
            println!("rendered {} frames ({}) -> {}", frames.len(), cfg.mode, out.display());
        }
        Command::Edit { scene, trajectory, out } => {
            let mut seq = io::read_scene(&scene)?;
            let edits = read_trajectories(&trajectory)?;
            for edit in &edits {
                seq = apply_trajectory(&seq, edit)?;
            }
            io::write_scene(&out, &seq)?;
            println!("applied {} edits -> {}", edits.len(), out.display());
        }
        Command::Condition { scene, out, trajectory, initial_frame, render } => {
            let seq = io::read_scene(&scene)?;
            let edits = match trajectory {
                Some(p) => read_trajectories(&p)?,
                None => Vec::new(),
            };
            let cfg = render_config(&render, seq.resolution)?;
            let bundle = build_conditioning(&seq, &edits, &cfg, initial_frame.as_deref(), &out)?;
            println!(
                "bundle {} ({} frames, hash {})",
                bundle.dir.display(),
                bundle.manifest.frame_count,
                bundle.manifest.content_hash
            );
        }
        Command::Generate { bundle, out, backend, command, args } => {
            let bundle = ConditioningBundle::open(&bundle)?;
            let backend: Box<dyn DiffusionBackend> = match backend.as_str() {
                "mock" => Box::new(MockBackend),
                "command" => {
                    let program =
                        command.ok_or_else(|| UsageError("--backend command needs --command".into()))?;
                    Box::new(CommandBackend { program, args })
                }
                other => bail!(UsageError(format!("unknown backend `{other}` (mock or command)"))),
            };
            let dir = submit_to_backend(&bundle, backend.as_ref(), &out)?;
            println!("backend `{}` wrote {} frames -> {}", backend.name(), bundle.manifest.frame_count, dir.display());
        }
        Command::NearmissGen {
            out,
            positives,
            negatives,
            val_positives,
            val_negatives,
            frames_per_scenario,
            scenario,
            closest_approach,
            speed,
            seed,
            rule,
            threshold,
            mode,
            width,
            height,
        } => {
            eprintln!("seed: {seed}");
            let rule = read_rule(rule.as_deref(), threshold)?;
            let resolution = Resolution::new(width, height);
            resolution.validate()?;
            let cfg = RenderConfig { resolution, mode, ..RenderConfig::default() };
            cfg.validate()?;
            let base = default_base_frame();
            let sequences = match scenario {
                Some(kind) => {
                    let params = ScenarioParams {
                        frames: frames_per_scenario,
                        closest_approach,
                        speed,
                        subject: None,
                        seed,
                    };
                    let sc = generate_scenario(kind, &params, &base, resolution, &rule)?;
                    std::fs::create_dir_all(&out).map_err(|e| orscene::Error::io(&out, e))?;
                    io::write_scene(&out.join("scene.json"), &sc.sequence)?;
                    vec![LabeledSequence {
                        name: "scenario".into(),
                        sequence: sc.sequence,
                        labels: sc.labels,
                        split: Some("all".into()),
                    }]
                }
                None => {
                    let plan = DatasetPlan {
                        splits: vec![
                            SplitRequest { name: "train".into(), positives, negatives },
                            SplitRequest { name: "val".into(), positives: val_positives, negatives: val_negatives },
                        ],
                        frames_per_scenario,
                        seed,
                    };
                    generate_dataset(&plan, &base, resolution, &rule)?
                }
            };
            let summary = export_dataset(&out, &sequences, &SplitPolicy::PerSequence, &cfg, &rule)?;
            for (split, c) in &summary.counts {
                println!("{split}: {} positive, {} negative, {} contact", c.positive, c.negative, c.contact);
            }
            println!("dataset -> {}", out.display());
        }
        Command::NearmissLabel { scene, out, rule, threshold } => {
            let seq = io::read_scene(&scene)?;
            let rule = read_rule(rule.as_deref(), threshold)?;
            let labels = label_sequence(&seq, &rule);
            let mut w = csv::Writer::from_path(&out).with_context(|| format!("cannot write {}", out.display()))?;
            w.write_record(["frame_path", "label", "min_distance", "subject_id", "protected_id"])?;
            for l in &labels {
                let (d, s, p) = match &l.evidence {
                    Some(e) => (e.min_distance.to_string(), e.subject_id.clone(), e.protected_id.clone()),
                    None => (String::new(), String::new(), String::new()),
                };
                w.write_record([io::frame_name(l.frame_index, "png"), l.label.as_str().into(), d, s, p])?;
            }
            w.flush()?;
            let positives = labels.iter().filter(|l| l.label != orscene::nearmiss::Label::Negative).count();
            println!("labeled {} frames ({positives} not negative) -> {}", labels.len(), out.display());
        }
        Command::Metrics { bundle, generated, reference, out, csv } => {
            let bundle = ConditioningBundle::open(&bundle)?;
            let report = compare_bundle(&bundle, &generated, reference.as_deref(), &default_palette())?;
            io::write_json(&out, &report)?;
            if let Some(csv) = csv {
                write_report_csv(&csv, &report)?;
            }
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "bb_iou {} / seg_iou {} (macro), ssim {:.4}, psnr {} -> {}",
                fmt(report.summary.bb_iou_macro),
                fmt(report.summary.seg_iou_macro),
                report.summary.ssim,
                match report.summary.psnr {
                    orscene::metrics::Psnr::Finite(v) => format!("{v:.2} dB"),
                    orscene::metrics::Psnr::Infinite => "inf".into(),
                },
                out.display()
            );
        }
        Command::Serve { root, addr } => {
            let store = Arc::new(ProjectStore::open(root)?);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(orscene_service::serve(store, addr))?;
        }
        Command::Synth { out, frames, entities, seed, width, height } => {
            eprintln!("seed: {seed}");
            let resolution = Resolution::new(width, height);
            resolution.validate()?;
            if entities == 0 || entities > 1000 {
                bail!(UsageError("--entities must be between 1 and 1000".into()));
            }
            let seq = synth::random_sequence(seed, frames, entities, resolution);
            let (masks, depth) = synth::bundles_from_sequence(&seq);
            io::save_mask_bundle(&out.join("masks"), &masks)?;
            io::save_depth_bundle_f32(&out.join("depth"), &depth)?;
            io::write_scene(&out.join("truth.json"), &seq)?;
            println!("synthetic bundles ({frames} frames, {entities} entities) -> {}", out.display());
        }
    }
    Ok(())
}
