//! Command-line front end: train, eval, predict, serve, inspect.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::arch::{
    assemble_model, init_parameters, read_weights_file, write_weights_file, ModelVariant,
};
use crate::data::image::{dataset_mean, decode_image_file, preprocess, PreprocessOptions};
use crate::data::{DatasetManifest, Sample, Split};
use crate::error::Result;
use crate::eval::{evaluate, ReportProvenance};
use crate::service::{run_blocking, ServiceConfig, DEFAULT_BODY_LIMIT};
use crate::train::{predict_one, train, AdamHyper, TrainConfig};

#[derive(Parser)]
#[command(
    name = "covilearn",
    about = "Chest X-ray screening: train, evaluate, and serve normal-vs-positive classifiers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier head on a manifest of labeled images.
    Train(TrainArgs),
    /// Evaluate trained weights on the manifest's test split.
    Eval(EvalArgs),
    /// Classify a single image file.
    Predict(PredictArgs),
    /// Serve the HTTP screening API.
    Serve(ServeArgs),
    /// Print the per-layer parameter table of a variant.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// CSV manifest with header `path,label`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "micro")]
    variant: ModelVariant,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Subtract per-channel training-set means after scaling.
    #[arg(long, default_value_t = false)]
    mean_subtract: bool,
    #[arg(long)]
    out_weights: PathBuf,
    #[arg(long)]
    out_history: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, env = "CVL_WEIGHTS")]
    weights: PathBuf,
    #[arg(long, default_value = "micro")]
    variant: ModelVariant,
    /// Split seed; use the training seed to reproduce its test split.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = false)]
    mean_subtract: bool,
    #[arg(long)]
    out_report: PathBuf,
    /// Optional `fpr,tpr` CSV of ROC points.
    #[arg(long)]
    out_roc: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// PNG, JPEG, or DICOM image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, env = "CVL_WEIGHTS")]
    weights: PathBuf,
    #[arg(long, default_value = "micro")]
    variant: ModelVariant,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "CVL_ADDR", default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, env = "CVL_WEIGHTS")]
    weights: PathBuf,
    #[arg(long, default_value = "micro")]
    variant: ModelVariant,
    /// JSON-lines audit log of screenings.
    #[arg(long, env = "CVL_LOG")]
    log: Option<PathBuf>,
    /// URL receiving each result as JSON, fire-and-forget.
    #[arg(long)]
    webhook: Option<String>,
    #[arg(long, default_value_t = DEFAULT_BODY_LIMIT)]
    body_limit: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, default_value = "micro")]
    variant: ModelVariant,
}

/// Parses real process arguments, runs, and returns the exit code.
pub fn run() -> i32 {
    run_from(std::env::args())
}

/// Testable entry point.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // Clap renders its own usage text; --help and --version exit 0.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Predict(args) => run_predict(args),
        Command::Serve(args) => run_serve(args),
        Command::Inspect(args) => run_inspect(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn load_splits(
    manifest_path: &PathBuf,
    seed: u64,
    target: (usize, usize),
    mean_subtract: bool,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut manifest = DatasetManifest::read_csv(manifest_path)?;
    let counts = manifest.split_80_20(seed)?;
    eprintln!(
        "loaded {} records ({} train / {} test)",
        manifest.len(),
        counts.train,
        counts.test
    );
    let options = PreprocessOptions { target, mean_subtract: None };
    let mut train_set = manifest.load_split(Split::Train, &options)?;
    let mut test_set = manifest.load_split(Split::Test, &options)?;
    if mean_subtract {
        let pixels: Vec<_> = train_set.iter().map(|s| s.pixels.clone()).collect();
        let means = dataset_mean(&pixels)?;
        for sample in train_set.iter_mut().chain(test_set.iter_mut()) {
            let plane = sample.pixels.len() / 3;
            let data = sample.pixels.data_mut();
            for (ch, mean) in means.iter().enumerate() {
                for v in &mut data[ch * plane..(ch + 1) * plane] {
                    *v -= mean;
                }
            }
        }
    }
    Ok((train_set, test_set))
}

fn run_train(args: TrainArgs) -> Result<()> {
    let graph = assemble_model(args.variant);
    let [_, h, w] = graph.input_shape();
    let (train_set, test_set) = load_splits(&args.manifest, args.seed, (h, w), args.mean_subtract)?;
    let store = init_parameters(&graph, args.seed);
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        adam: AdamHyper { learning_rate: args.lr, ..AdamHyper::default() },
        seed: args.seed,
    };
    let outcome = train(&graph, store, &train_set, &test_set, &config)?;
    write_weights_file(&args.out_weights, &outcome.store, &graph)?;
    outcome.history.write_file(&args.out_history)?;
    if let Some(last) = outcome.history.history.last() {
        println!(
            "trained {} for {} epochs: train acc {:.4}, val acc {:.4}",
            args.variant, args.epochs, last.train_acc, last.val_acc
        );
    }
    println!("weights -> {}", args.out_weights.display());
    println!("history -> {}", args.out_history.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let graph = assemble_model(args.variant);
    let store = read_weights_file(&args.weights, &graph)?;
    let [_, h, w] = graph.input_shape();
    let (_, test_set) = load_splits(&args.manifest, args.seed, (h, w), args.mean_subtract)?;
    let provenance = ReportProvenance {
        variant: args.variant.to_string(),
        head_kind: args.variant.head.name().to_string(),
        seed: Some(args.seed),
        mean_subtract: args.mean_subtract,
        threshold: "argmax".into(),
    };
    let report = evaluate(&graph, &store, &test_set, provenance)?;
    report.write_file(&args.out_report)?;
    if let Some(roc_path) = &args.out_roc {
        std::fs::write(roc_path, report.roc_csv())
            .map_err(|e| crate::error::Error::file(roc_path, e))?;
    }
    println!("{}", report.summary());
    println!("report -> {}", args.out_report.display());
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let graph = assemble_model(args.variant);
    let store = read_weights_file(&args.weights, &graph)?;
    let raw = decode_image_file(&args.image)?;
    let [_, h, w] = graph.input_shape();
    let pixels = preprocess(&raw, &PreprocessOptions::for_target(h, w))?;
    let prediction = predict_one(&graph, &store, &pixels)?;
    println!(
        "label: {}  probabilities: [covid {:.4}, normal {:.4}]  confidence: {:.4}",
        prediction.label,
        prediction.probabilities[0],
        prediction.probabilities[1],
        prediction.confidence
    );
    Ok(())
}

fn run_serve(args: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        addr: args.addr,
        weights_path: args.weights,
        variant: args.variant,
        audit_log: args.log,
        webhook: args.webhook,
        body_limit: args.body_limit,
    };
    run_blocking(config)
}

fn run_inspect(args: InspectArgs) -> Result<()> {
    let graph = assemble_model(args.variant);
    println!("variant: {} ({})", args.variant, args.variant.tag());
    println!("input: {:?}", graph.input_shape());
    print!("{}", graph.parameter_table());
    Ok(())
}
