//! Trains a quick micro model, saves its weights, and serves the screening
//! API until interrupted.
//!
//! ```bash
//! cargo run --release --example serve_http
//! curl http://127.0.0.1:8642/health
//! curl -X POST --data-binary @xray.png http://127.0.0.1:8642/screen
//! ```

use covilearn::arch::{assemble_model, init_parameters, write_weights_file, ModelVariant};
use covilearn::data::synthetic::separable_dataset;
use covilearn::service::{run_blocking, ServiceConfig};
use covilearn::train::{train, AdamHyper, TrainConfig};

fn main() -> covilearn::Result<()> {
    let variant: ModelVariant = "micro".parse()?;
    let graph = assemble_model(variant);
    let samples = separable_dataset(80, 32, 5);
    let (train_set, val_set) = samples.split_at(64);
    let config = TrainConfig {
        epochs: 10,
        batch_size: 16,
        adam: AdamHyper { learning_rate: 1e-2, ..AdamHyper::default() },
        seed: 5,
    };
    let outcome = train(&graph, init_parameters(&graph, 5), train_set, val_set, &config)?;

    let dir = std::env::temp_dir().join("covilearn-demo");
    std::fs::create_dir_all(&dir)?;
    let weights = dir.join("served.cvlw");
    write_weights_file(&weights, &outcome.store, &graph)?;

    let mut service = ServiceConfig::new("127.0.0.1:8642".parse().unwrap(), &weights, variant);
    service.audit_log = Some(dir.join("audit.jsonl"));
    println!("audit log: {}", dir.join("audit.jsonl").display());
    println!("try:");
    println!("  curl http://127.0.0.1:8642/health");
    println!("  curl http://127.0.0.1:8642/model");
    println!("  curl -X POST --data-binary @image.png http://127.0.0.1:8642/screen");
    run_blocking(service)
}
