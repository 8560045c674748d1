//! Versioned binary checkpoints. Layout (all integers little-endian):
//!
//! ```text
//! magic  b"XDOMCKPT"
//! u32    format version (currently 1)
//! u8     mode        (0 = k_class, 1 = k_plus_1)
//! u8     active head (0 = dense, 1 = global)
//! u32    K
//! u32    config echo length, then that many bytes of JSON (ModelConfig)
//! u32    tensor count, then per tensor: u32 rank, u32 dims…, f32 data
//! [32]   sha256 of all preceding bytes
//! ```
//!
//! Tensors appear in the model's canonical visit order (conv weight/bias
//! pairs, then classifier weight/bias), so load rebuilds bit-identical
//! parameters.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ActiveHead, DualHeadModel, HeadMode, ModelConfig};

const MAGIC: &[u8; 8] = b"XDOMCKPT";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf[0])
}

fn write_tensor(w: &mut impl Write, dims: &[usize], data: &[f32]) -> Result<()> {
    write_u32(w, dims.len() as u32)?;
    for &d in dims {
        write_u32(w, d as u32)?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(Vec<usize>, Vec<f32>)> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32(r)? as usize);
    }
    let len: usize = dims.iter().product();
    if len > 64 * 1024 * 1024 {
        return Err(Error::Checkpoint(format!("implausible tensor length {len}")));
    }
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor data: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

pub fn save_checkpoint(model: &DualHeadModel<f32>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w: Vec<u8> = Vec::new();
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    w.write_all(&[match model.mode {
        HeadMode::KClass => 0u8,
        HeadMode::KPlusOne => 1u8,
    }])?;
    w.write_all(&[match model.active_head {
        ActiveHead::Dense => 0u8,
        ActiveHead::Global => 1u8,
    }])?;
    write_u32(&mut w, model.num_semantic_classes as u32)?;

    let echo = serde_json::to_vec(&model.config)?;
    write_u32(&mut w, echo.len() as u32)?;
    w.write_all(&echo)?;

    let tensor_count = model.convs.len() * 2 + 2;
    write_u32(&mut w, tensor_count as u32)?;
    for conv in &model.convs {
        let d = conv.weight.dim();
        write_tensor(&mut w, &[d.0, d.1, d.2, d.3], conv.weight.as_slice().unwrap())?;
        write_tensor(&mut w, &[conv.bias.len()], conv.bias.as_slice().unwrap())?;
    }
    let d = model.classifier.weight.dim();
    write_tensor(&mut w, &[d.0, d.1], model.classifier.weight.as_slice().unwrap())?;
    write_tensor(&mut w, &[model.classifier.bias.len()], model.classifier.bias.as_slice().unwrap())?;

    let digest = Sha256::digest(&w);
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(&w)?;
    file.write_all(&digest)?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DualHeadModel<f32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if bytes.len() < MAGIC.len() + 32 {
        return Err(Error::Checkpoint("file too short to be a checkpoint".into()));
    }
    let (payload, footer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != footer {
        return Err(Error::Checkpoint(
            "integrity check failed: file is corrupt or truncated".into(),
        ));
    }
    let mut r: &[u8] = payload;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mode = match read_u8(&mut r)? {
        0 => HeadMode::KClass,
        1 => HeadMode::KPlusOne,
        other => return Err(Error::Checkpoint(format!("unknown mode tag {other}"))),
    };
    let active_head = match read_u8(&mut r)? {
        0 => ActiveHead::Dense,
        1 => ActiveHead::Global,
        other => return Err(Error::Checkpoint(format!("unknown head tag {other}"))),
    };
    let k = read_u32(&mut r)? as usize;

    let echo_len = read_u32(&mut r)? as usize;
    if echo_len > 1024 * 1024 {
        return Err(Error::Checkpoint("implausible config echo length".into()));
    }
    let mut echo = vec![0u8; echo_len];
    r.read_exact(&mut echo)
        .map_err(|e| Error::Checkpoint(format!("truncated config echo: {e}")))?;
    let config: ModelConfig = serde_json::from_slice(&echo)
        .map_err(|e| Error::Checkpoint(format!("bad config echo: {e}")))?;

    // Rebuild with the recorded architecture, then overwrite every tensor.
    let mut model = DualHeadModel::<f32>::new(&config, k, mode, 0)?;
    model.active_head = active_head;

    let tensor_count = read_u32(&mut r)? as usize;
    if tensor_count != model.convs.len() * 2 + 2 {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {tensor_count} tensors, architecture needs {}",
            model.convs.len() * 2 + 2
        )));
    }
    for conv in model.convs.iter_mut() {
        let (dims, data) = read_tensor(&mut r)?;
        let want: Vec<usize> = {
            let d = conv.weight.dim();
            vec![d.0, d.1, d.2, d.3]
        };
        if dims != want {
            return Err(Error::Checkpoint(format!(
                "conv weight dims {dims:?} do not match architecture {want:?}"
            )));
        }
        conv.weight =
            Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data).unwrap();
        let (bdims, bdata) = read_tensor(&mut r)?;
        if bdims != vec![conv.bias.len()] {
            return Err(Error::Checkpoint("conv bias dims mismatch".into()));
        }
        conv.bias = Array1::from_vec(bdata);
    }
    let (dims, data) = read_tensor(&mut r)?;
    let want = {
        let d = model.classifier.weight.dim();
        vec![d.0, d.1]
    };
    if dims != want {
        return Err(Error::Checkpoint(format!(
            "classifier dims {dims:?} do not match architecture {want:?}"
        )));
    }
    model.classifier.weight = Array2::from_shape_vec((dims[0], dims[1]), data).unwrap();
    let (bdims, bdata) = read_tensor(&mut r)?;
    if bdims != vec![model.classifier.bias.len()] {
        return Err(Error::Checkpoint("classifier bias dims mismatch".into()));
    }
    model.classifier.bias = Array1::from_vec(bdata);
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} unexpected trailing byte(s)",
            r.len()
        )));
    }
    Ok(model)
}

/// Load and require a specific head mode; a k_class checkpoint fed into a
/// (K+1) consumer (or vice versa) is reported, not silently accepted.
pub fn load_checkpoint_expecting(path: &Path, mode: HeadMode) -> Result<DualHeadModel<f32>> {
    let model = load_checkpoint(path)?;
    if model.mode != mode {
        return Err(Error::Checkpoint(format!(
            "checkpoint at {} has mode {:?}, expected {mode:?}",
            path.display(),
            model.mode
        )));
    }
    Ok(model)
}
