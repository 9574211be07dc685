//! Checkpoint persistence. Layout, all integers little-endian:
//!
//! ```text
//! "TENT" | version u32 | header_len u32 | header JSON | tensor blobs
//! blob:    rank u32 | extent u32 x rank | f32 x product(extents)
//! ```
//!
//! The header records the layer specs, training provenance and the declared
//! tensor count; blobs follow in parameter declaration order (weights,
//! biases, batch-norm scale/shift/running stats, tent deltas). A save/load
//! round trip is bit-identical.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelGraph};
use crate::optim::PgdTrainConfig;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TENT";
pub const VERSION: u32 = 1;

/// How the checkpointed model was produced.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct Provenance {
    pub variant: String,
    pub seed: u64,
    pub delta_weight_decay: f32,
    pub epochs: usize,
    pub best_epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adversarial: Option<PgdTrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_subset: Option<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct Header {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    class_count: usize,
    tensor_count: u32,
    provenance: Provenance,
    /// Resolved tent sizes per tent layer, recorded for reports.
    tent_deltas: Vec<(usize, Vec<f32>)>,
}

pub(crate) fn write_blob(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    let offset = cur.position();
    cur.read_exact(&mut b)
        .map_err(|_| Error::format(offset, "truncated: expected u32"))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_blob(cur: &mut Cursor<&[u8]>) -> Result<Tensor> {
    let rank = read_u32(cur)? as usize;
    if rank > 8 {
        return Err(Error::format(cur.position(), format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(cur)? as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = vec![0.0f32; count];
    for v in data.iter_mut() {
        let mut b = [0u8; 4];
        let offset = cur.position();
        cur.read_exact(&mut b)
            .map_err(|_| Error::format(offset, "truncated tensor data"))?;
        *v = f32::from_le_bytes(b);
    }
    Tensor::from_vec(shape, data)
}

/// Serialize the graph and provenance to checkpoint bytes.
pub fn checkpoint_bytes(graph: &ModelGraph, provenance: &Provenance) -> Result<Vec<u8>> {
    let tensors = graph.all_state_tensors();
    let header = Header {
        layers: graph.specs(),
        input_shape: graph.input_shape().to_vec(),
        class_count: graph.class_count(),
        tensor_count: tensors.len() as u32,
        provenance: provenance.clone(),
        tent_deltas: graph.tent_deltas(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for t in tensors {
        write_blob(&mut out, t);
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, graph: &ModelGraph, provenance: &Provenance) -> Result<()> {
    let bytes = checkpoint_bytes(graph, provenance)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parse checkpoint bytes back into a graph and its provenance.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelGraph, Provenance)> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic, want \"TENT\""));
    }
    let mut cur = Cursor::new(bytes);
    cur.set_position(4);
    let version = read_u32(&mut cur)?;
    if version != VERSION {
        return Err(Error::format(4, format!("checkpoint version {version}, want {VERSION}")));
    }
    let header_len = read_u32(&mut cur)? as usize;
    let start = cur.position() as usize;
    if start + header_len > bytes.len() {
        return Err(Error::format(start as u64, "truncated checkpoint header"));
    }
    let header: Header = serde_json::from_slice(&bytes[start..start + header_len])?;
    cur.set_position((start + header_len) as u64);

    let mut graph = ModelGraph::new(header.layers, header.input_shape, header.class_count)?;
    {
        let slots = graph.all_state_tensors_mut();
        if slots.len() != header.tensor_count as usize {
            return Err(Error::format(
                cur.position(),
                format!(
                    "header declares {} tensors, graph needs {}",
                    header.tensor_count,
                    slots.len()
                ),
            ));
        }
        for slot in slots {
            let t = read_blob(&mut cur)?;
            if t.shape() != slot.shape() {
                return Err(Error::format(
                    cur.position(),
                    format!("tensor shape {:?} does not match slot {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
    }
    if cur.position() as usize != bytes.len() {
        return Err(Error::format(cur.position(), "trailing bytes after last tensor"));
    }
    graph.bump_params_version();
    Ok((graph, header.provenance))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, Provenance)> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mnist_net, Activation};

    fn provenance() -> Provenance {
        Provenance {
            variant: "tent".into(),
            seed: 7,
            delta_weight_decay: 0.12,
            epochs: 3,
            best_epoch: 2,
            adversarial: None,
            train_subset: None,
        }
    }

    #[test]
    fn roundtrip_bit_identical() {
        let mut g = build_mnist_net(Activation::Tent, true);
        g.init_weights(42);
        let bytes = checkpoint_bytes(&g, &provenance()).unwrap();
        let (g2, prov) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(prov, provenance());
        for (a, b) in g.all_state_tensors().iter().zip(g2.all_state_tensors().iter()) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }
        // serialized twice -> identical bytes
        let bytes2 = checkpoint_bytes(&g2, &provenance()).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut g = build_mnist_net(Activation::Relu, false);
        g.init_weights(1);
        let mut bytes = checkpoint_bytes(&g, &provenance()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn version_mismatch_is_hard_error() {
        let mut g = build_mnist_net(Activation::Relu, false);
        g.init_weights(1);
        let mut bytes = checkpoint_bytes(&g, &provenance()).unwrap();
        bytes[4] = 99;
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncation_is_detected_with_offset() {
        let mut g = build_mnist_net(Activation::Relu, false);
        g.init_weights(1);
        let bytes = checkpoint_bytes(&g, &provenance()).unwrap();
        let cut = &bytes[..bytes.len() - 10];
        match checkpoint_from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn tensor_count_mismatch_is_detected() {
        let mut g = build_mnist_net(Activation::Relu, false);
        g.init_weights(1);
        let mut bytes = checkpoint_bytes(&g, &provenance()).unwrap();
        // tamper the declared tensor_count inside the header JSON (same width)
        let needle = b"\"tensor_count\":14";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("tensor_count:14 in header");
        bytes[pos + needle.len() - 1] = b'3';
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }

    #[test]
    fn header_records_tent_deltas() {
        let mut g = build_mnist_net(Activation::Tent, true);
        g.init_weights(2);
        let bytes = checkpoint_bytes(&g, &provenance()).unwrap();
        let (g2, _) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(g2.tent_deltas().len(), 6);
    }
}
