//! Builds every classifier variant and prints its parameter accounting.
//!
//! ```bash
//! cargo run --example inspect_architectures
//! ```

use covilearn::arch::{assemble_model, build_backbone, Backbone, HeadKind, ModelVariant};

fn main() {
    println!(
        "{:<26} {:>6} {:>14} {:>14} {:>12}",
        "variant", "tag", "backbone", "total", "trainable"
    );
    for backbone in [
        Backbone::ResNet50,
        Backbone::ResNet101,
        Backbone::DenseNet121,
        Backbone::DenseNet169,
        Backbone::Micro,
    ] {
        let backbone_params = build_backbone(backbone).total_parameters();
        for head in [HeadKind::GapDense, HeadKind::Alg1Conv] {
            let variant = ModelVariant::new(backbone, head);
            let graph = assemble_model(variant);
            println!(
                "{:<26} {:>6} {:>14} {:>14} {:>12}",
                variant.to_string(),
                variant.tag(),
                backbone_params,
                graph.total_parameters(),
                graph.trainable_parameters()
            );
        }
    }

    println!("\nper-layer table for the micro variant:\n");
    let micro = assemble_model(ModelVariant::new(Backbone::Micro, HeadKind::GapDense));
    print!("{}", micro.parameter_table());
}
