//! Writes a 16-bit DICOM-lite file with a few opaque tags, parses it back,
//! and pushes the pixels through the preprocessing chain.
//!
//! ```bash
//! cargo run --example dicom_roundtrip
//! ```

use covilearn::data::dicom::{parse_dicom_lite, DicomLiteFile};
use covilearn::data::image::{decode_image_bytes, preprocess, PreprocessOptions};

fn main() -> covilearn::Result<()> {
    // A 64x64 ramp at 16-bit depth.
    let pixels: Vec<u16> = (0..64 * 64)
        .map(|i| ((i % 64) as f64 / 63.0 * u16::MAX as f64) as u16)
        .collect();
    let mut file = DicomLiteFile::from_pixels_u16(64, 64, &pixels)?;
    file.extra_tags.insert((0x0008, 0x0060), ("CS".into(), b"DX".to_vec()));
    file.extra_tags.insert((0x0010, 0x0010), ("PN".into(), b"ANON".to_vec()));

    let dir = std::env::temp_dir().join("covilearn-demo");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("ramp.dcm");
    file.write_file(&path)?;
    println!("wrote {} ({} bytes)", path.display(), file.to_bytes().len());

    let bytes = std::fs::read(&path)?;
    let parsed = parse_dicom_lite(&bytes)?;
    println!(
        "parsed: {}x{} at {} bits, {} opaque tags",
        parsed.rows,
        parsed.columns,
        parsed.bits_allocated,
        parsed.extra_tags.len()
    );
    for ((group, element), (vr, value)) in &parsed.extra_tags {
        println!(
            "  ({group:04X},{element:04X}) {vr}: {:?}",
            String::from_utf8_lossy(value)
        );
    }
    assert_eq!(parsed, file);
    println!("round trip is value-exact");

    // The same bytes go straight through the upload decoding path.
    let raw = decode_image_bytes(&bytes)?;
    let tensor = preprocess(&raw, &PreprocessOptions::for_target(32, 32))?;
    let (lo, hi) = tensor.data().iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    println!("preprocessed to {:?}, range [{lo:.4}, {hi:.4}]", tensor.shape());
    Ok(())
}
