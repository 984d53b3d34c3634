//! Dataset manifests, labels, the stratified split, and sample loading.
//!
//! The class-index convention is fixed globally: the positive class (covid)
//! is index 0, normal is index 1. Confusion-matrix semantics and one-hot
//! encodings all follow from it.

pub mod augment;
pub mod dicom;
pub mod image;
pub mod synthetic;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary screening label; covid is the positive class, index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Covid,
    Normal,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Covid => 0,
            Label::Normal => 1,
        }
    }

    pub fn from_class_index(index: usize) -> Result<Label> {
        match index {
            0 => Ok(Label::Covid),
            1 => Ok(Label::Normal),
            other => Err(Error::argument(format!("class index {other} out of range"))),
        }
    }

    /// One-hot encoding: covid -> [1,0], normal -> [0,1].
    pub fn one_hot(self) -> Tensor {
        match self {
            Label::Covid => Tensor::from_slice(&[1.0, 0.0]),
            Label::Normal => Tensor::from_slice(&[0.0, 1.0]),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Covid => "covid",
            Label::Normal => "normal",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Label> {
        match s {
            "covid" => Ok(Label::Covid),
            "normal" => Ok(Label::Normal),
            other => Err(Error::argument(format!(
                "unknown label `{other}`, expected covid|normal"
            ))),
        }
    }
}

/// One-hot encode a label. Covid occupies index 0 by convention.
pub fn one_hot(label: Label) -> Tensor {
    label.one_hot()
}

/// Train/test membership after splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A decoded, preprocessed image with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Pixels in `[0,1]` (or `[-1,1]` after mean subtraction), shape `[3,H,W]`.
    pub pixels: Tensor,
    pub label: Label,
}

impl Sample {
    pub fn one_hot(&self) -> Tensor {
        self.label.one_hot()
    }
}

/// One manifest row: an image path, its label, and (after splitting) the
/// split it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: Label,
    pub split: Option<Split>,
}

/// Labeled image records with unique paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    records: Vec<ManifestRecord>,
}

/// Per-split record counts returned by [`DatasetManifest::split_80_20`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
}

impl DatasetManifest {
    pub fn new() -> Self {
        DatasetManifest::default()
    }

    pub fn push(&mut self, path: impl Into<PathBuf>, label: Label) -> Result<()> {
        let path = path.into();
        if self.records.iter().any(|r| r.path == path) {
            return Err(Error::argument(format!(
                "manifest already contains `{}`",
                path.display()
            )));
        }
        self.records.push(ManifestRecord { path, label, split: None });
        Ok(())
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    /// Reads a `path,label` CSV manifest. Relative paths are resolved against
    /// the manifest's directory.
    pub fn read_csv(path: &Path) -> Result<DatasetManifest> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if headers.len() < 2 || &headers[0] != "path" || &headers[1] != "label" {
            return Err(Error::Format(format!(
                "{}: manifest header must be `path,label`, got {headers:?}",
                path.display()
            )));
        }
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        let mut manifest = DatasetManifest::new();
        for (line, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let image: &str = row
                .get(0)
                .ok_or_else(|| Error::Format(format!("manifest row {} has no path", line + 2)))?;
            let label: Label = row
                .get(1)
                .ok_or_else(|| Error::Format(format!("manifest row {} has no label", line + 2)))?
                .parse()?;
            let image_path = if Path::new(image).is_absolute() {
                PathBuf::from(image)
            } else {
                base.join(image)
            };
            manifest.push(image_path, label)?;
        }
        Ok(manifest)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer =
            csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        writer
            .write_record(["path", "label"])
            .and_then(|()| {
                self.records.iter().try_for_each(|r| {
                    writer.write_record([r.path.to_string_lossy().as_ref(), r.label.as_str()])
                })
            })
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        writer.flush()?;
        Ok(())
    }

    /// Decodes and preprocesses every record of a split, in manifest order.
    pub fn load_split(
        &self,
        split: Split,
        options: &image::PreprocessOptions,
    ) -> Result<Vec<Sample>> {
        self.split_records(split)
            .map(|record| {
                let raw = image::decode_image_file(&record.path)?;
                let pixels = image::preprocess(&raw, options)?;
                Ok(Sample { pixels, label: record.label })
            })
            .collect()
    }

    /// Stratified 80:20 split: per class, `round(0.2 * class_size)` records
    /// go to test after a seeded shuffle. Deterministic for a fixed seed.
    pub fn split_80_20(&mut self, seed: u64) -> Result<SplitCounts> {
        let labels: BTreeSet<Label> = self.records.iter().map(|r| r.label).collect();
        for label in [Label::Covid, Label::Normal] {
            if !labels.contains(&label) {
                return Err(Error::argument(format!(
                    "cannot split: class `{label}` has no records"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = SplitCounts { train: 0, test: 0 };
        for label in [Label::Covid, Label::Normal] {
            let mut indices: Vec<usize> = self
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.label == label)
                .map(|(i, _)| i)
                .collect();
            indices.shuffle(&mut rng);
            // round(0.2 * n) without floats; 0.2n never lands on .5 exactly.
            let test_count = (indices.len() + 2) / 5;
            for (order, idx) in indices.into_iter().enumerate() {
                let split = if order < test_count { Split::Test } else { Split::Train };
                self.records[idx].split = Some(split);
                match split {
                    Split::Test => counts.test += 1,
                    Split::Train => counts.train += 1,
                }
            }
        }
        Ok(counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest(covid: usize, normal: usize) -> DatasetManifest {
        let mut m = DatasetManifest::new();
        for i in 0..covid {
            m.push(format!("c{i}.png"), Label::Covid).unwrap();
        }
        for i in 0..normal {
            m.push(format!("n{i}.png"), Label::Normal).unwrap();
        }
        m
    }

    #[test]
    fn one_hot_definition_and_inverse() {
        assert_eq!(Label::Covid.one_hot().data(), &[1.0, 0.0]);
        assert_eq!(Label::Normal.one_hot().data(), &[0.0, 1.0]);
        for label in [Label::Covid, Label::Normal] {
            let hot = label.one_hot();
            let argmax = if hot.data()[0] >= hot.data()[1] { 0 } else { 1 };
            assert_eq!(Label::from_class_index(argmax).unwrap(), label);
        }
        assert!("pneumonia".parse::<Label>().is_err());
    }

    #[test]
    fn paper_counts_force_48_50() {
        let mut m = manifest(240, 250);
        let counts = m.split_80_20(42).unwrap();
        assert_eq!(counts.train, 392);
        assert_eq!(counts.test, 98);
        let covid_test = m
            .split_records(Split::Test)
            .filter(|r| r.label == Label::Covid)
            .count();
        let normal_test = m
            .split_records(Split::Test)
            .filter(|r| r.label == Label::Normal)
            .count();
        assert_eq!(covid_test, 48);
        assert_eq!(normal_test, 50);
    }

    #[test]
    fn ten_plus_ten_gives_two_plus_two() {
        let mut m = manifest(10, 10);
        let counts = m.split_80_20(1).unwrap();
        assert_eq!(counts.test, 4);
        for label in [Label::Covid, Label::Normal] {
            let test = m
                .split_records(Split::Test)
                .filter(|r| r.label == label)
                .count();
            assert_eq!(test, 2);
        }
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let mut a = manifest(15, 15);
        let mut b = manifest(15, 15);
        a.split_80_20(7).unwrap();
        b.split_80_20(7).unwrap();
        assert_eq!(a, b);
        let mut c = manifest(15, 15);
        c.split_80_20(8).unwrap();
        let differs = a
            .records()
            .iter()
            .zip(c.records())
            .any(|(x, y)| x.split != y.split);
        assert!(differs, "different seeds should disagree on at least one record");
    }

    #[test]
    fn empty_class_is_an_argument_error() {
        let mut m = manifest(5, 0);
        assert!(matches!(m.split_80_20(0), Err(Error::Argument(_))));
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut m = DatasetManifest::new();
        m.push("a.png", Label::Covid).unwrap();
        assert!(m.push("a.png", Label::Normal).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(3, 2);
        let path = dir.path().join("manifest.csv");
        m.write_csv(&path).unwrap();
        let back = DatasetManifest::read_csv(&path).unwrap();
        assert_eq!(back.len(), 5);
        // Relative paths resolve against the manifest directory.
        assert_eq!(back.records()[0].path, dir.path().join("c0.png"));
        assert_eq!(back.records()[0].label, Label::Covid);
    }

    proptest! {
        #[test]
        fn split_partitions_with_fraction_near_20(
            covid in 1usize..60, normal in 1usize..60, seed in 0u64..500,
        ) {
            let mut m = manifest(covid, normal);
            let counts = m.split_80_20(seed).unwrap();
            prop_assert_eq!(counts.train + counts.test, covid + normal);
            prop_assert!(m.records().iter().all(|r| r.split.is_some()));
            for (label, n) in [(Label::Covid, covid), (Label::Normal, normal)] {
                let test = m.split_records(Split::Test).filter(|r| r.label == label).count();
                let want = 0.2 * n as f64;
                prop_assert!((test as f64 - want).abs() <= 1.0 + 1e-9);
            }
        }
    }
}
