//! Checkpoint files.
//!
//! ```text
//! "SAEC" | version u32 | section count u32 | sections...
//! section := tag [u8; 4] | payload length u64 | payload
//! ```
//!
//! `CONF` carries the configs, curves and threshold state as JSON. `WENC`,
//! `BPRE` and `BENC` carry tensors as `rows u64 | cols u64 | f64 LE...`, so
//! parameters round-trip bit-exactly. All integers are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Checkpoint, TrainConfig};
use crate::error::{Error, Result};
use crate::sae::{SaeConfig, SaeParams};
use crate::store::format::read_exact;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SAEC";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_SECTION: u64 = 1 << 36;

#[derive(Serialize, Deserialize)]
struct Header {
    sae_config: SaeConfig,
    train_config: TrainConfig,
    epoch: usize,
    final_loss: f64,
    train_loss: Vec<f64>,
    val_loss: Vec<f64>,
    threshold_trace: Vec<Vec<f64>>,
    thresholds: Vec<f64>,
    threshold_state: Vec<f64>,
    threshold_steps: u64,
}

fn tensor_payload(rows: usize, cols: usize, data: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + rows * cols * 8);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_tensor(tag: &str, payload: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if payload.len() < 16 {
        return Err(Error::Format(format!("truncated tensor section {tag}")));
    }
    let rows = u64::from_le_bytes(payload[0..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(payload[8..16].try_into().unwrap()) as usize;
    let body = &payload[16..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
        return Err(Error::Format(format!(
            "tensor section {tag}: {rows}x{cols} does not match {} payload bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

pub fn write_checkpoint<W: Write>(w: &mut W, cp: &Checkpoint) -> Result<()> {
    let header = Header {
        sae_config: cp.sae_config.clone(),
        train_config: cp.train_config.clone(),
        epoch: cp.epoch,
        final_loss: cp.final_loss,
        train_loss: cp.train_loss.clone(),
        val_loss: cp.val_loss.clone(),
        threshold_trace: cp.threshold_trace.clone(),
        thresholds: cp.params.thresholds.clone(),
        threshold_state: cp.params.threshold_state.clone(),
        threshold_steps: cp.params.threshold_steps,
    };
    let conf = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("serializing checkpoint header: {e}")))?;
    let p = &cp.params;
    let sections: [(&[u8; 4], Vec<u8>); 4] = [
        (b"CONF", conf),
        (b"WENC", tensor_payload(p.w.nrows(), p.w.ncols(), p.w.iter().copied())),
        (b"BPRE", tensor_payload(1, p.b_pre.len(), p.b_pre.iter().copied())),
        (b"BENC", tensor_payload(1, p.b_enc.len(), p.b_enc.iter().copied())),
    ];

    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(&CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(sections.len() as u32).to_le_bytes()).map_err(io)?;
    for (tag, payload) in &sections {
        w.write_all(*tag).map_err(io)?;
        w.write_all(&(payload.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(payload).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut head = [0u8; 12];
    read_exact(r, &mut head, "checkpoint header")?;
    if head[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = u32::from_le_bytes(head[8..12].try_into().unwrap());

    let mut conf = None;
    let mut w = None;
    let mut b_pre = None;
    let mut b_enc = None;
    for _ in 0..count {
        let mut sh = [0u8; 12];
        read_exact(r, &mut sh, "checkpoint section header")?;
        let tag = String::from_utf8_lossy(&sh[0..4]).into_owned();
        let len = u64::from_le_bytes(sh[4..12].try_into().unwrap());
        if len > MAX_SECTION {
            return Err(Error::Format(format!("section {tag} claims {len} bytes")));
        }
        let mut payload = vec![0u8; len as usize];
        read_exact(r, &mut payload, "checkpoint section")?;
        match &sh[0..4] {
            b"CONF" => {
                let h: Header = serde_json::from_slice(&payload)
                    .map_err(|e| Error::Format(format!("checkpoint header JSON: {e}")))?;
                conf = Some(h);
            }
            b"WENC" => w = Some(parse_tensor(&tag, &payload)?),
            b"BPRE" => b_pre = Some(parse_tensor(&tag, &payload)?),
            b"BENC" => b_enc = Some(parse_tensor(&tag, &payload)?),
            _ => return Err(Error::Format(format!("unknown checkpoint section {tag}"))),
        }
    }
    let missing = |name: &str| Error::Format(format!("checkpoint is missing section {name}"));
    let h = conf.ok_or_else(|| missing("CONF"))?;
    let (rows, cols, w) = w.ok_or_else(|| missing("WENC"))?;
    let (_, _, b_pre) = b_pre.ok_or_else(|| missing("BPRE"))?;
    let (_, _, b_enc) = b_enc.ok_or_else(|| missing("BENC"))?;
    let w = Array2::from_shape_vec((rows, cols), w)
        .map_err(|e| Error::Format(format!("encoder tensor: {e}")))?;

    h.sae_config.validate()?;
    let params = SaeParams {
        w,
        b_pre: Array1::from(b_pre),
        b_enc: Array1::from(b_enc),
        thresholds: h.thresholds,
        threshold_state: h.threshold_state,
        threshold_steps: h.threshold_steps,
    };
    if params.w.dim() != (h.sae_config.max_dict(), h.sae_config.input_dim)
        || params.b_pre.len() != h.sae_config.input_dim
        || params.b_enc.len() != h.sae_config.max_dict()
        || params.thresholds.len() != h.sae_config.levels()
    {
        return Err(Error::Format("checkpoint tensors do not match its config".into()));
    }
    Ok(Checkpoint {
        sae_config: h.sae_config,
        params,
        train_config: h.train_config,
        epoch: h.epoch,
        final_loss: h.final_loss,
        train_loss: h.train_loss,
        val_loss: h.val_loss,
        threshold_trace: h.threshold_trace,
    })
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, cp)?;
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let cp = read_checkpoint(&mut r)?;
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(cp),
        Ok(_) => Err(Error::Format("trailing bytes after checkpoint".into())),
        Err(e) => Err(Error::io(path.display().to_string(), e)),
    }
}
