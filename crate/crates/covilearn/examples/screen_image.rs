//! End-to-end single-image screening: train a tiny model, write a PNG,
//! decode it back, and classify.
//!
//! ```bash
//! cargo run --release --example screen_image
//! ```

use covilearn::arch::{assemble_model, init_parameters, ModelVariant};
use covilearn::data::image::{decode_image_file, encode_png, preprocess, PreprocessOptions};
use covilearn::data::synthetic::separable_dataset;
use covilearn::train::{predict_one, train, AdamHyper, TrainConfig};
use covilearn::Tensor;

fn main() -> covilearn::Result<()> {
    let variant: ModelVariant = "micro".parse()?;
    let graph = assemble_model(variant);
    let samples = separable_dataset(80, 32, 3);
    let (train_set, val_set) = samples.split_at(64);
    let config = TrainConfig {
        epochs: 25,
        batch_size: 16,
        adam: AdamHyper { learning_rate: 1e-2, ..AdamHyper::default() },
        seed: 3,
    };
    let outcome = train(&graph, init_parameters(&graph, 3), train_set, val_set, &config)?;

    let dir = std::env::temp_dir().join("covilearn-demo");
    std::fs::create_dir_all(&dir)?;

    for (name, sample) in [("ramp.png", &val_set[0]), ("flat.png", &val_set[1])] {
        // Save the first channel as an 8-bit grayscale PNG and re-ingest it.
        let plane = sample.pixels.len() / 3;
        let gray = Tensor::new(
            vec![1, 32, 32],
            sample.pixels.data()[..plane].to_vec(),
        )?;
        let path = dir.join(name);
        encode_png(&gray, &path)?;

        let raw = decode_image_file(&path)?;
        let [_, h, w] = graph.input_shape();
        let pixels = preprocess(&raw, &PreprocessOptions::for_target(h, w))?;
        let prediction = predict_one(&graph, &outcome.store, &pixels)?;
        println!(
            "{name}: truth {} -> predicted {} (covid {:.4}, normal {:.4})",
            sample.label,
            prediction.label,
            prediction.probabilities[0],
            prediction.probabilities[1]
        );
    }
    Ok(())
}
