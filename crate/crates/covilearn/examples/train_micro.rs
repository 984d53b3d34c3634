//! Generates a synthetic separable dataset on disk, trains the micro
//! variant's head for 25 epochs, and saves weights plus epoch history.
//!
//! ```bash
//! cargo run --release --example train_micro
//! ```

use covilearn::arch::{assemble_model, init_parameters, write_weights_file, ModelVariant};
use covilearn::data::image::PreprocessOptions;
use covilearn::data::{synthetic, Split};
use covilearn::train::{train, AdamHyper, TrainConfig};

fn main() -> covilearn::Result<()> {
    let dir = std::env::temp_dir().join("covilearn-demo");
    std::fs::create_dir_all(&dir)?;

    // 200 PNGs plus a `path,label` manifest, then the stratified 80:20 split.
    let mut manifest = synthetic::write_dataset(&dir, 200, 32, 42)?;
    manifest.write_csv(&dir.join("manifest.csv"))?;
    let counts = manifest.split_80_20(42)?;
    println!("dataset: {} train / {} test under {}", counts.train, counts.test, dir.display());

    let variant: ModelVariant = "micro".parse()?;
    let graph = assemble_model(variant);
    let [_, h, w] = graph.input_shape();
    let options = PreprocessOptions::for_target(h, w);
    let train_set = manifest.load_split(Split::Train, &options)?;
    let val_set = manifest.load_split(Split::Test, &options)?;

    let config = TrainConfig {
        epochs: 25,
        batch_size: 16,
        adam: AdamHyper { learning_rate: 1e-2, ..AdamHyper::default() },
        seed: 42,
    };
    let store = init_parameters(&graph, config.seed);
    let outcome = train(&graph, store, &train_set, &val_set, &config)?;

    for record in &outcome.history.history {
        println!(
            "epoch {:>2}: train loss {:.4} acc {:.3} | val loss {:.4} acc {:.3}",
            record.epoch, record.train_loss, record.train_acc, record.val_loss, record.val_acc
        );
    }

    let weights = dir.join("micro.cvlw");
    let history = dir.join("history.json");
    write_weights_file(&weights, &outcome.store, &graph)?;
    outcome.history.write_file(&history)?;
    println!("weights -> {}", weights.display());
    println!("history -> {}", history.display());
    Ok(())
}
