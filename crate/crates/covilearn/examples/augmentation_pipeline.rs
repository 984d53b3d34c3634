//! Shows the augmentation set: per-seed draws, determinism, and the
//! identity transform.
//!
//! ```bash
//! cargo run --example augmentation_pipeline
//! ```

use covilearn::data::augment::{apply_params, augment, AugmentParams, AugmentPolicy};
use covilearn::data::synthetic::separable_dataset;

fn main() -> covilearn::Result<()> {
    let sample = separable_dataset(2, 32, 11).remove(0);
    let policy = AugmentPolicy::default();

    println!("policy: {policy:?}\n");
    println!("{:>4} {:>9} {:>9} {:>9} {}", "seed", "min", "max", "mean", "drawn params");
    for seed in 0..8 {
        let params = AugmentParams::draw(&policy, seed);
        let out = augment(&sample, &policy, seed)?;
        let data = out.pixels.data();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let (lo, hi) = data.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let mut drawn = Vec::new();
        if params.crop_frac != 1.0 {
            drawn.push(format!("crop {:.2}", params.crop_frac));
        }
        if params.rotation_deg != 0.0 {
            drawn.push(format!("rot {:+.1}", params.rotation_deg));
        }
        if params.shear_deg != 0.0 {
            drawn.push(format!("shear {:+.1}", params.shear_deg));
        }
        if params.zoom != 1.0 {
            drawn.push(format!("zoom {:.2}", params.zoom));
        }
        if params.horizontal_flip {
            drawn.push("hflip".into());
        }
        if params.vertical_flip {
            drawn.push("vflip".into());
        }
        if params.brightness_delta != 0.0 {
            drawn.push(format!("bright {:+.2}", params.brightness_delta));
        }
        if params.contrast_delta != 0.0 {
            drawn.push(format!("contrast {:+.2}", params.contrast_delta));
        }
        if params.jitter.is_some() {
            drawn.push("jitter".into());
        }
        println!("{seed:>4} {lo:>9.4} {hi:>9.4} {mean:>9.4} {}", drawn.join(", "));
    }

    // Same seed, same pixels.
    let a = augment(&sample, &policy, 123)?;
    let b = augment(&sample, &policy, 123)?;
    assert_eq!(a.pixels.data(), b.pixels.data());
    println!("\nseed 123 twice: bitwise identical");

    // The identity draw reproduces the input.
    let identity = apply_params(&sample, &AugmentParams::identity())?;
    assert_eq!(identity.pixels.data(), sample.pixels.data());
    println!("identity parameters: input reproduced exactly");
    Ok(())
}
