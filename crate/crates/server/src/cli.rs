//! `livestyle` subcommands. Every failure prints one JSON line on stderr and
//! exits with a code from [`exit`].

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use livestyle::ast::{train_ast, AstModel, AstTrainConfig};
use livestyle::cyclegan::{train_cyclegan, CycleGanConfig, DomainDataset};
use livestyle::image::{decode_image, resize, to_unit_tensor, ImageTensor};
use serde_json::{json, Map, Value};

use crate::engine::{prepare_image, Engine, EngineError, JobParams, ModelKind};
use crate::service::{serve, JobService, ServiceConfig};

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const BAD_INPUT: i32 = 3;
    pub const DIVERGED: i32 = 4;
    pub const PORT_IN_USE: i32 = 5;
}

#[derive(Debug, Parser)]
#[command(name = "livestyle", version, about = "Neural style transfer: Gatys, arbitrary style transfer and CycleGAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stylize one content image and write a PNG.
    Stylize(StylizeArgs),
    /// Train an AST or CycleGAN checkpoint on image directories.
    Train(TrainArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
    /// Print the model registry as JSON.
    Models,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CliModel {
    Gatys,
    Ast,
    Cyclegan,
}

impl From<CliModel> for ModelKind {
    fn from(m: CliModel) -> Self {
        match m {
            CliModel::Gatys => ModelKind::Gatys,
            CliModel::Ast => ModelKind::Ast,
            CliModel::Cyclegan => ModelKind::CycleGan,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TrainModel {
    Ast,
    Cyclegan,
}

#[derive(Debug, Args)]
struct StylizeArgs {
    #[arg(long, value_enum)]
    model: CliModel,
    #[arg(long)]
    content: PathBuf,
    #[arg(long)]
    style: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    style_weight: Option<f64>,
    #[arg(long)]
    content_weight: Option<f64>,
    #[arg(long)]
    step_size: Option<f64>,
    /// `content_copy` or `noise`
    #[arg(long)]
    init: Option<String>,
    /// `x_to_y` or `y_to_x`
    #[arg(long)]
    direction: Option<String>,
    /// Archive path, or a name resolved in the checkpoint directory.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long, env = "LIVESTYLE_CHECKPOINT_DIR")]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest processed side; inputs are resized to min(size, shorter side).
    #[arg(long, default_value_t = 256)]
    size: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: TrainModel,
    #[arg(long)]
    data_x: PathBuf,
    #[arg(long)]
    data_y: Option<PathBuf>,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training images are resized to size × size.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    style_weight: Option<f64>,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "LIVESTYLE_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, env = "LIVESTYLE_CHECKPOINT_DIR")]
    checkpoint_dir: Option<PathBuf>,
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let code = match &e {
            EngineError::InvalidParams(_) | EngineError::UnknownModel => exit::USAGE,
            EngineError::InvalidImage(_) | EngineError::Checkpoint(_) => exit::BAD_INPUT,
            EngineError::Core(core) => return core_failure(core),
        };
        Failure::new(code, e.to_string())
    }
}

fn core_failure(e: &livestyle::Error) -> Failure {
    use livestyle::Error as E;
    let code = match e {
        E::DivergedLoss { .. } => exit::DIVERGED,
        E::UnsupportedFormat | E::CorruptImage(_) | E::Io(_) | E::EmptyDataset(_) | E::Archive(_) => exit::BAD_INPUT,
        E::InvalidConfig(_) | E::InvalidStrength(_) => exit::USAGE,
        _ => exit::FAILURE,
    };
    Failure::new(code, e.to_string())
}

impl From<livestyle::Error> for Failure {
    fn from(e: livestyle::Error) -> Self {
        core_failure(&e)
    }
}

fn print_json(v: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v}");
    let _ = out.flush();
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return exit::OK;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprintln!("{}", json!({ "error": "missing subcommand", "usage": e.to_string() }));
                return exit::USAGE;
            }
            let rendered = e.to_string();
            let head = rendered.split("\n\n").next().unwrap_or("invalid arguments");
            let message = head.split_whitespace().collect::<Vec<_>>().join(" ");
            let message = message.trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": message, "usage": rendered }));
            return exit::USAGE;
        }
    };
    let outcome = match cli.command {
        Command::Stylize(a) => stylize(a),
        Command::Train(a) => train(a),
        Command::Serve(a) => serve_command(a),
        Command::Models => {
            let entries: Vec<Value> = ModelKind::ALL
                .iter()
                .map(|m| {
                    json!({
                        "name": m.name(),
                        "kind": m.kind(),
                        "description": m.description(),
                        "default_params": m.default_params(),
                    })
                })
                .collect();
            print_json(&Value::Array(entries));
            Ok(())
        }
    };
    match outcome {
        Ok(()) => exit::OK,
        Err(f) => {
            eprintln!("{}", json!({ "error": f.message, "code": f.code }));
            f.code
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::new(exit::BAD_INPUT, format!("{}: {e}", path.display())))
}

fn stylize(a: StylizeArgs) -> Result<(), Failure> {
    let model = ModelKind::from(a.model);
    let mut raw = Map::new();
    let mut set = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            raw.insert(key.to_string(), v);
        }
    };
    set("iterations", a.iterations.map(Value::from));
    set("strength", a.strength.map(Value::from));
    set("style_weight", a.style_weight.map(Value::from));
    set("content_weight", a.content_weight.map(Value::from));
    set("step_size", a.step_size.map(Value::from));
    set("init", a.init.clone().map(Value::from));
    set("direction", a.direction.clone().map(Value::from));
    set("checkpoint", a.checkpoint.clone().map(Value::from));
    if model == ModelKind::Gatys {
        set("seed", Some(Value::from(a.seed)));
    }
    let params = JobParams::parse(model, &Value::Object(raw))?;
    if a.size < 4 {
        return Err(Failure::new(exit::USAGE, "--size must be at least 4"));
    }

    let engine = match &a.checkpoint_dir {
        Some(dir) => Engine::with_checkpoint_dir(dir)?,
        None => Engine::builtin(),
    };
    let content = prepare_image(&read_file(&a.content)?, a.size)?;
    let style = match (&a.style, model.needs_style()) {
        (Some(path), _) => Some(prepare_image(&read_file(path)?, a.size)?),
        (None, true) => return Err(Failure::new(exit::USAGE, format!("--style is required for {}", model.name()))),
        (None, false) => None,
    };
    let out = engine.run(&params, &content, style.as_ref())?;
    std::fs::write(&a.out, out.png()?).map_err(|e| Failure::new(exit::FAILURE, format!("{}: {e}", a.out.display())))?;
    let mut doc = json!({
        "model": model.name(),
        "out": a.out.display().to_string(),
        "width": out.image.width(),
        "height": out.image.height(),
        "seconds": out.seconds,
    });
    if let Some(loss) = &out.loss {
        doc["loss"] = serde_json::to_value(loss).expect("loss serializes");
    }
    print_json(&doc);
    Ok(())
}

/// Every decodable file in `dir`, sorted by name, resized to `side × side`.
fn load_dir(dir: &Path, side: usize) -> Result<Vec<ImageTensor>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::new(exit::BAD_INPUT, format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut images = Vec::with_capacity(paths.len());
    for path in paths {
        let raw = decode_image(&read_file(&path)?)
            .map_err(|e| Failure::new(exit::BAD_INPUT, format!("{}: {e}", path.display())))?;
        images.push(resize(&to_unit_tensor(&raw), side)?);
    }
    if images.is_empty() {
        return Err(Failure::new(exit::BAD_INPUT, format!("no images in {}", dir.display())));
    }
    Ok(images)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let xs = load_dir(&a.data_x, a.size)?;
    let archive = match a.model {
        TrainModel::Ast => {
            let styles = match &a.data_y {
                Some(dir) => load_dir(dir, a.size)?,
                None => xs.clone(),
            };
            let defaults = AstTrainConfig::default();
            let cfg = AstTrainConfig {
                steps: a.steps,
                seed: a.seed,
                step_size: a.step_size.unwrap_or(defaults.step_size),
                style_weight: a.style_weight.unwrap_or(defaults.style_weight),
                batch_size: a.batch_size,
                ..defaults
            };
            let backbone = livestyle::backbone::BackboneModel::tiny(0);
            let (model, trace) = train_ast(AstModel::new(a.width, a.seed), &xs, &styles, &backbone, &cfg)?;
            for (step, l) in trace.iter().enumerate() {
                print_json(&json!({ "step": step, "content": l.content, "style": l.style, "total": l.total }));
            }
            model.to_archive()?
        }
        TrainModel::Cyclegan => {
            let Some(dir) = &a.data_y else {
                return Err(Failure::new(exit::USAGE, "--data-y is required for cyclegan"));
            };
            let ys = load_dir(dir, a.size)?;
            let defaults = CycleGanConfig::default();
            let cfg = CycleGanConfig {
                lambda: a.lambda.unwrap_or(defaults.lambda),
                steps: a.steps,
                step_size: a.step_size.unwrap_or(defaults.step_size),
                image_side: a.size,
                width: a.width,
                batch_size: a.batch_size,
                seed: a.seed,
                ..defaults
            };
            let (g, f, report) = train_cyclegan(&DomainDataset::new(xs)?, &DomainDataset::new(ys)?, &cfg)?;
            for (step, s) in report.steps.iter().enumerate() {
                let mut line = serde_json::to_value(s).expect("losses serialize");
                line["step"] = json!(step);
                print_json(&line);
            }
            livestyle::cyclegan::CycleGanModel { g, f }.to_archive()?
        }
    };
    archive
        .save(&a.out)
        .map_err(|e| Failure::new(exit::FAILURE, format!("{}: {e}", a.out.display())))?;
    Ok(())
}

fn serve_command(a: ServeArgs) -> Result<(), Failure> {
    let mut config = ServiceConfig::from_env().map_err(|e| Failure::new(exit::USAGE, e))?;
    if let Some(w) = a.workers {
        config.worker_count = w;
    }
    config.validate().map_err(|e| Failure::new(exit::USAGE, e))?;
    let engine = match &a.checkpoint_dir {
        Some(dir) => Engine::with_checkpoint_dir(dir)?,
        None => Engine::builtin(),
    };
    let listener = std::net::TcpListener::bind((a.host.as_str(), a.port)).map_err(|e| {
        let code = if e.kind() == std::io::ErrorKind::AddrInUse {
            exit::PORT_IN_USE
        } else {
            exit::FAILURE
        };
        Failure::new(code, format!("bind {}:{}: {e}", a.host, a.port))
    })?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Failure::new(exit::FAILURE, e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| Failure::new(exit::FAILURE, e.to_string()))?;

    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::new(exit::FAILURE, e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener).map_err(|e| Failure::new(exit::FAILURE, e.to_string()))?;
        let stop = stop_signal().map_err(|e| Failure::new(exit::FAILURE, e.to_string()))?;
        let svc = JobService::start(config, engine);
        print_json(&json!({ "listening": format!("http://{addr}") }));
        tracing::info!(%addr, "serving");
        serve(listener, svc, stop)
            .await
        .map_err(|e| Failure::new(exit::FAILURE, e.to_string()))
    })
}

/// Resolves on SIGINT or SIGTERM; handlers are installed before this returns.
#[cfg(unix)]
fn stop_signal() -> std::io::Result<impl std::future::Future<Output = ()> + Send + 'static> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut interrupt = signal(SignalKind::interrupt())?;
    let mut terminate = signal(SignalKind::terminate())?;
    Ok(async move {
        tokio::select! {
            _ = interrupt.recv() => {}
            _ = terminate.recv() => {}
        }
    })
}

#[cfg(not(unix))]
fn stop_signal() -> std::io::Result<impl std::future::Future<Output = ()> + Send + 'static> {
    Ok(async {
        let _ = tokio::signal::ctrl_c().await;
    })
}
