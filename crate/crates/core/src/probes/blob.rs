//! Versioned binary serialization of trained probes.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "PAPROBE\0"
//! schema     u32      SCHEMA_ID
//! header_len u32      length of the JSON header in bytes
//! header     JSON     kind, input schema, train config, provenance,
//!                     standardization stats / threshold, loss history
//! n_tensors  u32
//! per tensor: ndims u32, dims u32 × ndims, values f32 × Π dims
//! ```

use serde::{Deserialize, Serialize};

use super::{InputSchema, Model, ProbeError, ProbeKind, Provenance, TrainConfig, TrainedProbe};

pub const MAGIC: &[u8; 8] = b"PAPROBE\0";
pub const SCHEMA_ID: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
enum ModelHeader {
    Mlp {
        hidden: usize,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Cnn {
        side: usize,
        widths: [usize; 3],
    },
    Threshold {
        theta: f64,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ProbeKind,
    schema: InputSchema,
    train_config: TrainConfig,
    provenance: Provenance,
    model: ModelHeader,
    loss_history: Vec<f64>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn to_bytes(probe: &TrainedProbe) -> Vec<u8> {
    let (model, tensor): (ModelHeader, Option<&Vec<f32>>) = match &probe.model {
        Model::Mlp {
            hidden,
            params,
            mean,
            std,
        } => (
            ModelHeader::Mlp {
                hidden: *hidden,
                mean: mean.clone(),
                std: std.clone(),
            },
            Some(params),
        ),
        Model::Cnn {
            side,
            widths,
            params,
        } => (
            ModelHeader::Cnn {
                side: *side,
                widths: *widths,
            },
            Some(params),
        ),
        Model::Threshold { theta } => (ModelHeader::Threshold { theta: *theta }, None),
    };
    let header = Header {
        kind: probe.kind,
        schema: probe.schema.clone(),
        train_config: probe.train_config.clone(),
        provenance: probe.provenance,
        model,
        loss_history: probe.loss_history.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, SCHEMA_ID);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    put_u32(&mut out, u32::from(tensor.is_some()));
    if let Some(t) = tensor {
        put_u32(&mut out, 1);
        put_u32(&mut out, t.len() as u32);
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProbeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ProbeError::Blob("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ProbeError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedProbe, ProbeError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(ProbeError::Blob("bad magic".into()));
    }
    let schema = r.u32()?;
    if schema != SCHEMA_ID {
        return Err(ProbeError::Blob(format!(
            "schema id {schema}, expected {SCHEMA_ID}"
        )));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| ProbeError::Blob(format!("header: {e}")))?;
    let mut tensors = Vec::new();
    for _ in 0..r.u32()? {
        let ndims = r.u32()? as usize;
        let mut count = 1usize;
        for _ in 0..ndims {
            count = count
                .checked_mul(r.u32()? as usize)
                .ok_or_else(|| ProbeError::Blob("tensor too large".into()))?;
        }
        let raw = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| ProbeError::Blob("tensor too large".into()))?,
        )?;
        tensors.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect::<Vec<f32>>(),
        );
    }
    if r.pos != bytes.len() {
        return Err(ProbeError::Blob("trailing bytes".into()));
    }
    let mut tensors = tensors.into_iter();
    let mut params = || {
        tensors
            .next()
            .ok_or_else(|| ProbeError::Blob("missing parameter tensor".into()))
    };
    let model = match header.model {
        ModelHeader::Mlp { hidden, mean, std } => {
            let params = params()?;
            if super::nn::Mlp::<f32>::param_count(mean.len(), hidden) != params.len()
                || std.len() != mean.len()
            {
                return Err(ProbeError::Blob(
                    "MLP dimensions disagree with parameters".into(),
                ));
            }
            Model::Mlp {
                hidden,
                params,
                mean,
                std,
            }
        }
        ModelHeader::Cnn { side, widths } => {
            let params = params()?;
            if super::nn::Cnn3::<f32>::param_count(widths) != params.len() {
                return Err(ProbeError::Blob(
                    "CNN widths disagree with parameters".into(),
                ));
            }
            Model::Cnn {
                side,
                widths,
                params,
            }
        }
        ModelHeader::Threshold { theta } => Model::Threshold { theta },
    };
    Ok(TrainedProbe {
        kind: header.kind,
        schema: header.schema,
        train_config: header.train_config,
        provenance: header.provenance,
        model,
        loss_history: header.loss_history,
    })
}
