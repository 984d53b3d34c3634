//! Trains a quick micro model and prints the full metrics report:
//! confusion matrix, accuracy/sensitivity/specificity, ROC points, AUC.
//!
//! ```bash
//! cargo run --release --example evaluate_model
//! ```

use covilearn::arch::{assemble_model, init_parameters, ModelVariant};
use covilearn::data::synthetic::separable_dataset;
use covilearn::eval::{evaluate, ReportProvenance};
use covilearn::train::{train, AdamHyper, TrainConfig};

fn main() -> covilearn::Result<()> {
    let variant: ModelVariant = "micro".parse()?;
    let graph = assemble_model(variant);
    let samples = separable_dataset(120, 32, 7);
    let (train_set, test_set) = samples.split_at(96);

    let config = TrainConfig {
        epochs: 25,
        batch_size: 16,
        adam: AdamHyper { learning_rate: 1e-2, ..AdamHyper::default() },
        seed: 7,
    };
    let store = init_parameters(&graph, config.seed);
    let outcome = train(&graph, store, train_set, test_set, &config)?;

    let provenance = ReportProvenance {
        variant: variant.to_string(),
        head_kind: variant.head.name().into(),
        seed: Some(config.seed),
        mean_subtract: false,
        threshold: "argmax".into(),
    };
    let report = evaluate(&graph, &outcome.store, test_set, provenance)?;
    println!("{}", report.summary());
    println!("\nfull report JSON:\n{}", report.to_json()?);
    println!("\nROC points as CSV:\n{}", report.roc_csv());
    Ok(())
}
