//! Reader/writer for the DICOM-lite subset: explicit-VR little-endian,
//! uncompressed, single-frame grayscale.
//!
//! Layout: 128-byte preamble, `DICM` marker, then data elements of the form
//! `group u16, element u16, VR (2 ASCII bytes), length, value`. VRs OB, OW,
//! OF, SQ, UT, UN carry 2 reserved bytes and a u32 length; every other VR a
//! u16 length. Tags the parser does not interpret are preserved opaquely and
//! written back byte-identical.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PREAMBLE_LEN: usize = 128;
const MAGIC: &[u8; 4] = b"DICM";

/// Explicit-VR little-endian uncompressed, the only supported syntax.
pub const TRANSFER_SYNTAX_EXPLICIT_LE: &str = "1.2.840.10008.1.2.1";

const TAG_TRANSFER_SYNTAX: (u16, u16) = (0x0002, 0x0010);
const TAG_ROWS: (u16, u16) = (0x0028, 0x0010);
const TAG_COLUMNS: (u16, u16) = (0x0028, 0x0011);
const TAG_BITS_ALLOCATED: (u16, u16) = (0x0028, 0x0100);
const TAG_PIXEL_DATA: (u16, u16) = (0x7FE0, 0x0010);

fn has_long_length(vr: &str) -> bool {
    matches!(vr, "OB" | "OW" | "OF" | "SQ" | "UT" | "UN")
}

/// A parsed DICOM-lite file: image geometry, raw pixel bytes, and every
/// other tag kept opaque.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomLiteFile {
    pub rows: u16,
    pub columns: u16,
    /// 8 or 16.
    pub bits_allocated: u16,
    /// Raw little-endian sample bytes, `rows * columns * bits/8` of them.
    pub pixel_data: Vec<u8>,
    /// Tags other than the structural ones, keyed `(group, element)`,
    /// holding `(VR, value bytes)`.
    pub extra_tags: BTreeMap<(u16, u16), (String, Vec<u8>)>,
}

impl DicomLiteFile {
    pub fn from_pixels_u8(rows: u16, columns: u16, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != rows as usize * columns as usize {
            return Err(Error::argument(format!(
                "{rows}x{columns} image needs {} samples, got {}",
                rows as usize * columns as usize,
                pixels.len()
            )));
        }
        Ok(DicomLiteFile {
            rows,
            columns,
            bits_allocated: 8,
            pixel_data: pixels.to_vec(),
            extra_tags: BTreeMap::new(),
        })
    }

    pub fn from_pixels_u16(rows: u16, columns: u16, pixels: &[u16]) -> Result<Self> {
        if pixels.len() != rows as usize * columns as usize {
            return Err(Error::argument(format!(
                "{rows}x{columns} image needs {} samples, got {}",
                rows as usize * columns as usize,
                pixels.len()
            )));
        }
        Ok(DicomLiteFile {
            rows,
            columns,
            bits_allocated: 16,
            pixel_data: pixels.iter().flat_map(|v| v.to_le_bytes()).collect(),
            extra_tags: BTreeMap::new(),
        })
    }

    /// Raw sample values widened to f64, row-major.
    pub fn samples(&self) -> Vec<f64> {
        match self.bits_allocated {
            8 => self.pixel_data.iter().map(|&b| b as f64).collect(),
            _ => self
                .pixel_data
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
                .collect(),
        }
    }

    /// The dtype maximum samples are normalized against.
    pub fn max_value(&self) -> f64 {
        match self.bits_allocated {
            8 => u8::MAX as f64,
            _ => u16::MAX as f64,
        }
    }

    /// Pixels normalized to `[0,1]` by the dtype maximum, shape `[1,rows,cols]`.
    pub fn pixel_tensor(&self) -> Result<Tensor> {
        let max = self.max_value();
        let data = self.samples().into_iter().map(|v| v / max).collect();
        Tensor::new(vec![1, self.rows as usize, self.columns as usize], data)
    }

    /// Serializes the file: preamble, marker, and all elements in ascending
    /// tag order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut elements: BTreeMap<(u16, u16), (String, Vec<u8>)> = self.extra_tags.clone();
        elements.insert(
            TAG_TRANSFER_SYNTAX,
            ("UI".into(), TRANSFER_SYNTAX_EXPLICIT_LE.as_bytes().to_vec()),
        );
        elements.insert(TAG_ROWS, ("US".into(), self.rows.to_le_bytes().to_vec()));
        elements.insert(TAG_COLUMNS, ("US".into(), self.columns.to_le_bytes().to_vec()));
        elements.insert(
            TAG_BITS_ALLOCATED,
            ("US".into(), self.bits_allocated.to_le_bytes().to_vec()),
        );
        elements.insert(TAG_PIXEL_DATA, ("OW".into(), self.pixel_data.clone()));

        let mut out = vec![0u8; PREAMBLE_LEN];
        out.extend_from_slice(MAGIC);
        for ((group, element), (vr, value)) in &elements {
            out.extend_from_slice(&group.to_le_bytes());
            out.extend_from_slice(&element.to_le_bytes());
            out.extend_from_slice(vr.as_bytes());
            // DICOM values have even length; pad with NUL.
            let mut value = value.clone();
            if value.len() % 2 != 0 {
                value.push(0);
            }
            if has_long_length(vr) {
                out.extend_from_slice(&[0, 0]);
                out.extend_from_slice(&(value.len() as u32).to_le_bytes());
            } else {
                out.extend_from_slice(&(value.len() as u16).to_le_bytes());
            }
            out.extend_from_slice(&value);
        }
        out
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }
}

fn read_u16_value(tag_name: &str, value: &[u8]) -> Result<u16> {
    match value {
        [a, b] => Ok(u16::from_le_bytes([*a, *b])),
        other => Err(Error::format(format!(
            "{tag_name} must be a 2-byte US value, got {} bytes",
            other.len()
        ))),
    }
}

/// Parses a DICOM-lite byte stream.
pub fn parse_dicom_lite(bytes: &[u8]) -> Result<DicomLiteFile> {
    if bytes.len() < PREAMBLE_LEN + 4 {
        return Err(Error::format(format!(
            "file too short for a DICOM preamble: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC {
        return Err(Error::format("missing DICM marker after the 128-byte preamble"));
    }

    let mut at = PREAMBLE_LEN + 4;
    let mut rows = None;
    let mut columns = None;
    let mut bits_allocated = None;
    let mut pixel_data: Option<Vec<u8>> = None;
    let mut extra_tags = BTreeMap::new();

    while at < bytes.len() {
        if bytes.len() - at < 8 {
            return Err(Error::format(format!(
                "truncated element header at byte {at}: {} bytes remain",
                bytes.len() - at
            )));
        }
        let group = u16::from_le_bytes([bytes[at], bytes[at + 1]]);
        let element = u16::from_le_bytes([bytes[at + 2], bytes[at + 3]]);
        let vr_bytes = &bytes[at + 4..at + 6];
        let vr = std::str::from_utf8(vr_bytes)
            .ok()
            .filter(|vr| vr.bytes().all(|b| b.is_ascii_uppercase()))
            .ok_or_else(|| {
                Error::format(format!(
                    "tag ({group:04X},{element:04X}) has invalid VR bytes {vr_bytes:?}; \
                     only explicit-VR little-endian is supported"
                ))
            })?
            .to_string();
        if vr == "SQ" {
            return Err(Error::Unsupported(format!(
                "tag ({group:04X},{element:04X}) is a sequence (VR SQ); sequences are outside the supported subset"
            )));
        }
        let (length, header_len) = if has_long_length(&vr) {
            if bytes.len() - at < 12 {
                return Err(Error::format(format!("truncated long element header at byte {at}")));
            }
            let len = u32::from_le_bytes([
                bytes[at + 8],
                bytes[at + 9],
                bytes[at + 10],
                bytes[at + 11],
            ]);
            if len == u32::MAX {
                return Err(Error::Unsupported(format!(
                    "tag ({group:04X},{element:04X}) uses undefined length; encapsulated data is outside the supported subset"
                )));
            }
            (len as usize, 12)
        } else {
            let len = u16::from_le_bytes([bytes[at + 6], bytes[at + 7]]);
            (len as usize, 8)
        };
        let value_at = at + header_len;
        if bytes.len() - value_at < length {
            return Err(Error::format(format!(
                "tag ({group:04X},{element:04X}) declares {length} value bytes but only {} remain",
                bytes.len() - value_at
            )));
        }
        let value = &bytes[value_at..value_at + length];
        at = value_at + length;

        match (group, element) {
            TAG_TRANSFER_SYNTAX => {
                let uid = std::str::from_utf8(value)
                    .map_err(|_| Error::format("transfer syntax UID is not ASCII"))?
                    .trim_end_matches(['\0', ' '])
                    .to_string();
                if uid != TRANSFER_SYNTAX_EXPLICIT_LE {
                    return Err(Error::Unsupported(format!(
                        "transfer syntax `{uid}`; only explicit-VR little-endian \
                         ({TRANSFER_SYNTAX_EXPLICIT_LE}) is supported"
                    )));
                }
            }
            TAG_ROWS => rows = Some(read_u16_value("Rows (0028,0010)", value)?),
            TAG_COLUMNS => columns = Some(read_u16_value("Columns (0028,0011)", value)?),
            TAG_BITS_ALLOCATED => {
                bits_allocated = Some(read_u16_value("BitsAllocated (0028,0100)", value)?)
            }
            TAG_PIXEL_DATA => pixel_data = Some(value.to_vec()),
            tag => {
                extra_tags.insert(tag, (vr, value.to_vec()));
            }
        }
    }

    let rows = rows.ok_or_else(|| Error::format("missing Rows tag (0028,0010)"))?;
    let columns = columns.ok_or_else(|| Error::format("missing Columns tag (0028,0011)"))?;
    let bits_allocated =
        bits_allocated.ok_or_else(|| Error::format("missing BitsAllocated tag (0028,0100)"))?;
    let pixel_data = pixel_data.ok_or_else(|| Error::format("missing PixelData tag (7FE0,0010)"))?;

    if bits_allocated != 8 && bits_allocated != 16 {
        return Err(Error::Unsupported(format!(
            "{bits_allocated}-bit samples; only 8- and 16-bit grayscale are supported"
        )));
    }
    let expected = rows as usize * columns as usize * (bits_allocated as usize / 8);
    // Writers pad odd pixel payloads by one byte; tolerate exactly that.
    let actual = pixel_data.len();
    let padded_expected = expected + expected % 2;
    if actual != expected && actual != padded_expected {
        return Err(Error::format(format!(
            "pixel data length mismatch: {rows}x{columns} at {bits_allocated} bits expects \
             {expected} bytes, got {actual}"
        )));
    }
    let mut pixel_data = pixel_data;
    pixel_data.truncate(expected);

    Ok(DicomLiteFile { rows, columns, bits_allocated, pixel_data, extra_tags })
}

/// `true` when the bytes begin with a DICOM preamble and marker.
pub fn is_dicom(bytes: &[u8]) -> bool {
    bytes.len() >= PREAMBLE_LEN + 4 && &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] == MAGIC
}

pub fn read_dicom_file(path: &std::path::Path) -> Result<DicomLiteFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    parse_dicom_lite(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_2x2() {
        let file = DicomLiteFile::from_pixels_u8(2, 2, &[0, 1, 2, 3]).unwrap();
        let parsed = parse_dicom_lite(&file.to_bytes()).unwrap();
        assert_eq!(parsed.rows, 2);
        assert_eq!(parsed.columns, 2);
        assert_eq!(parsed.samples(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(parsed, file);
    }

    #[test]
    fn extra_tags_survive_round_trip() {
        let mut file = DicomLiteFile::from_pixels_u16(1, 3, &[10, 20, 30]).unwrap();
        file.extra_tags
            .insert((0x0008, 0x0060), ("CS".into(), b"DX".to_vec()));
        file.extra_tags
            .insert((0x0010, 0x0010), ("PN".into(), b"ANON".to_vec()));
        let parsed = parse_dicom_lite(&file.to_bytes()).unwrap();
        assert_eq!(parsed, file);
    }

    #[test]
    fn truncated_pixel_data_cites_lengths() {
        let file = DicomLiteFile::from_pixels_u8(2, 2, &[9, 9, 9, 9]).unwrap();
        let mut bytes = file.to_bytes();
        bytes.truncate(bytes.len() - 2);
        let err = parse_dicom_lite(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("4") && msg.contains("2"), "{msg}");
    }

    #[test]
    fn eight_and_sixteen_bit_normalize_identically() {
        // Proportional values: v and v * 257 normalize to the same [0,1].
        let v8: Vec<u8> = vec![0, 51, 102, 255];
        let v16: Vec<u16> = v8.iter().map(|&v| v as u16 * 257).collect();
        let f8 = DicomLiteFile::from_pixels_u8(2, 2, &v8).unwrap();
        let f16 = DicomLiteFile::from_pixels_u16(2, 2, &v16).unwrap();
        let t8 = f8.pixel_tensor().unwrap();
        let t16 = f16.pixel_tensor().unwrap();
        for (a, b) in t8.data().iter().zip(t16.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(t8.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = DicomLiteFile::from_pixels_u8(1, 1, &[5]).unwrap().to_bytes();
        bytes[PREAMBLE_LEN] = b'X';
        assert!(matches!(parse_dicom_lite(&bytes), Err(Error::Format(_))));
        assert!(!is_dicom(&bytes));
    }

    #[test]
    fn compressed_transfer_syntax_named_in_error() {
        let file = DicomLiteFile::from_pixels_u8(1, 1, &[5]).unwrap();
        let mut bytes = file.to_bytes();
        // Swap the UID for JPEG baseline, same length.
        let jpeg = b"1.2.840.10008.1.2.4\0";
        let uid = TRANSFER_SYNTAX_EXPLICIT_LE.as_bytes();
        let pos = bytes
            .windows(uid.len())
            .position(|w| w == uid)
            .expect("writer emits the UID");
        bytes[pos..pos + jpeg.len()].copy_from_slice(jpeg);
        let err = parse_dicom_lite(&bytes).unwrap_err();
        match err {
            Error::Unsupported(msg) => assert!(msg.contains("1.2.840.10008.1.2.4"), "{msg}"),
            other => panic!("expected Unsupported, got {other}"),
        }
    }

    #[test]
    fn sixteen_bit_round_trip_is_exact() {
        let pixels: Vec<u16> = (0..12).map(|i| i * 5000).collect();
        let file = DicomLiteFile::from_pixels_u16(3, 4, &pixels).unwrap();
        let parsed = parse_dicom_lite(&file.to_bytes()).unwrap();
        let back: Vec<u16> = parsed
            .pixel_data
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        assert_eq!(back, pixels);
    }
}
