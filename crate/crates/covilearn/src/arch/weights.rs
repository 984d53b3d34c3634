//! The `CVLW` weights container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   4 bytes  "CVLW"
//! version u16      currently 1
//! count   u32      number of records
//! record  repeated:
//!   name_len u16, name UTF-8, rank u8, extents u32 each,
//!   payload  f32 little-endian, product(extents) values
//! ```
//!
//! Values are stored at 32-bit precision and widened to f64 on load, so a
//! serialize/deserialize round trip is value-exact at 32 bits.

use crate::arch::{ArchitectureGraph, ParameterStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"CVLW";
const WEIGHTS_VERSION: u16 = 1;

/// Serializes every graph parameter from the store, in layer order.
pub fn serialize_weights(store: &ParameterStore, graph: &ArchitectureGraph) -> Result<Vec<u8>> {
    let specs = graph.parameters();
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(specs.len()).expect("record count fits u32").to_le_bytes());
    for (_, spec) in specs {
        let tensor = store.get(&spec.name)?;
        if tensor.shape() != spec.shape.as_slice() {
            return Err(Error::Weights(format!(
                "parameter `{}` has shape {:?}, graph declares {:?}",
                spec.name,
                tensor.shape(),
                spec.shape
            )));
        }
        let name = spec.name.as_bytes();
        out.extend_from_slice(&u16::try_from(name.len()).expect("name fits u16").to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::try_from(tensor.rank()).expect("rank fits u8"));
        for &extent in tensor.shape() {
            out.extend_from_slice(&u32::try_from(extent).expect("extent fits u32").to_le_bytes());
        }
        for &value in tensor.data() {
            out.extend_from_slice(&(value as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Weights(format!(
                "container truncated reading {what} at byte {} (need {n} more bytes of {})",
                self.at,
                self.bytes.len()
            ))
        })?;
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a `CVLW` container and checks it against the graph: every declared
/// parameter must be present with the declared shape, nothing extra, all
/// values finite. Each record is validated against the graph as soon as its
/// name is read, so a tampered shape field fails with the layer named instead
/// of corrupting the rest of the parse.
pub fn deserialize_weights(bytes: &[u8], graph: &ArchitectureGraph) -> Result<ParameterStore> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::Weights(format!(
            "bad magic {magic:?}, expected {WEIGHTS_MAGIC:?} (`CVLW`)"
        )));
    }
    let version = r.u16("version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Weights(format!(
            "unsupported container version {version}, expected {WEIGHTS_VERSION}"
        )));
    }
    let count = r.u32("record count")? as usize;
    let declared: std::collections::BTreeMap<String, Vec<usize>> = graph
        .parameters()
        .into_iter()
        .map(|(_, p)| (p.name, p.shape))
        .collect();

    let mut store = ParameterStore::new();
    for record in 0..count {
        let name_len = r.u16("record name length")? as usize;
        let name_bytes = r.take(name_len, "record name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Weights(format!("record {record} name is not UTF-8")))?
            .to_string();
        let expected = declared.get(&name).ok_or_else(|| {
            Error::Weights(format!("record `{name}` is not a parameter of this graph"))
        })?;
        let rank = r.take(1, "record rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("record extent")? as usize);
        }
        if &shape != expected {
            return Err(Error::Weights(format!(
                "parameter `{name}` declares shape {shape:?}, graph expects {expected:?}"
            )));
        }
        let len: usize = shape.iter().product();
        let payload = r.take(len * 4, &format!("`{name}` payload"))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Weights(format!(
                "parameter `{name}` contains non-finite values"
            )));
        }
        if store.contains(&name) {
            return Err(Error::Weights(format!("duplicate record for `{name}`")));
        }
        let tensor = Tensor::new(shape, data).expect("shape validated against graph");
        store.insert(name, tensor);
    }
    if r.at != bytes.len() {
        return Err(Error::Weights(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.at
        )));
    }
    if store.len() != declared.len() {
        let missing: Vec<&String> =
            declared.keys().filter(|k| !store.contains(k)).collect();
        return Err(Error::Weights(format!(
            "container is missing {} parameters: {missing:?}",
            missing.len()
        )));
    }
    store.validate_against(graph)?;
    Ok(store)
}

/// Convenience wrappers for on-disk weights.
pub fn write_weights_file(
    path: &std::path::Path,
    store: &ParameterStore,
    graph: &ArchitectureGraph,
) -> Result<()> {
    let bytes = serialize_weights(store, graph)?;
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn read_weights_file(path: &std::path::Path, graph: &ArchitectureGraph) -> Result<ParameterStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    deserialize_weights(&bytes, graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{assemble_model, init_parameters, Backbone, HeadKind, ModelVariant};

    fn micro() -> ArchitectureGraph {
        assemble_model(ModelVariant::new(Backbone::Micro, HeadKind::GapDense))
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let graph = micro();
        let store = init_parameters(&graph, 3);
        let bytes = serialize_weights(&store, &graph).unwrap();
        let loaded = deserialize_weights(&bytes, &graph).unwrap();
        for (name, tensor) in store.iter() {
            let back = loaded.get(name).unwrap();
            for (a, b) in tensor.data().iter().zip(back.data()) {
                assert_eq!(*a as f32, *b as f32, "{name}");
            }
        }
        // A second serialization of the loaded store is bitwise identical.
        let bytes2 = serialize_weights(&loaded, &graph).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn tampered_shape_names_the_layer() {
        let graph = micro();
        let store = init_parameters(&graph, 3);
        let mut bytes = serialize_weights(&store, &graph).unwrap();
        // First record is conv0.kernel: name_len(2) + name + rank(1) then extents.
        let name_len = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
        let extent_at = 12 + name_len + 1;
        bytes[extent_at] = bytes[extent_at].wrapping_add(1);
        let err = deserialize_weights(&bytes, &graph).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv0.kernel") || msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let graph = micro();
        let err = deserialize_weights(b"NOPE\x01\x00\x00\x00\x00\x00", &graph).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn missing_record_named() {
        let graph = micro();
        let store = init_parameters(&graph, 3);
        let bytes = serialize_weights(&store, &graph).unwrap();
        // Drop the record count by one and truncate the final record's bytes.
        let mut truncated = bytes.clone();
        let last_record_len = {
            let name = b"head.softmax"; // no params; last record is head.dense2.bias
            let _ = name;
            2 + "head.dense2.bias".len() + 1 + 4 + 2 * 4
        };
        truncated.truncate(bytes.len() - last_record_len);
        let count = u32::from_le_bytes(truncated[6..10].try_into().unwrap()) - 1;
        truncated[6..10].copy_from_slice(&count.to_le_bytes());
        let err = deserialize_weights(&truncated, &graph).unwrap_err();
        assert!(err.to_string().contains("head.dense2.bias"), "{err}");
    }

    #[test]
    fn empty_graph_serializes_to_zero_records() {
        let graph = ArchitectureGraph::new([3, 8, 8], "empty");
        let store = ParameterStore::new();
        let bytes = serialize_weights(&store, &graph).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 4);
        let loaded = deserialize_weights(&bytes, &graph).unwrap();
        assert!(loaded.is_empty());
    }
}
