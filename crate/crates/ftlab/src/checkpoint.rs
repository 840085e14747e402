//! Model checkpoint files: magic, format version, architecture config,
//! named parameter table as raw little-endian f32, optimizer state and the
//! iteration counter. Round-trips are bitwise lossless.

use crate::dataset_io::{
    read_string, read_u16, read_u32, read_u64, write_string, write_u16, write_u32, write_u64,
    FileError,
};
use crate::model::{Activation, ModelState, OptState, TransformerConfig};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FTCK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

fn write_tensor(w: &mut impl Write, t: &Tensor<f32>) -> std::io::Result<()> {
    write_u16(w, t.shape.len() as u16)?;
    for &d in &t.shape {
        write_u32(w, d as u32)?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor<f32>, FileError> {
    let ndim = read_u16(r)? as usize;
    if ndim > 4 {
        return Err(FileError::Corrupt("tensor rank"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(FileError::Corrupt("tensor too large"));
    }
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Ok(Tensor { shape, data })
}

fn write_config(w: &mut impl Write, c: &TransformerConfig) -> std::io::Result<()> {
    write_u32(w, c.n_blocks as u32)?;
    write_u32(w, c.n_heads as u32)?;
    write_u32(w, c.d_model as u32)?;
    write_u32(w, c.d_mlp as u32)?;
    write_u32(w, c.context_len as u32)?;
    write_u32(w, c.vocab_size as u32)?;
    write_u32(w, c.n_outputs as u32)?;
    let flags = (c.use_layernorm as u32)
        | ((c.causal as u32) << 1)
        | (((c.activation == Activation::Gelu) as u32) << 2);
    write_u32(w, flags)
}

fn read_config(r: &mut impl Read) -> Result<TransformerConfig, FileError> {
    let n_blocks = read_u32(r)? as usize;
    let n_heads = read_u32(r)? as usize;
    let d_model = read_u32(r)? as usize;
    let d_mlp = read_u32(r)? as usize;
    let context_len = read_u32(r)? as usize;
    let vocab_size = read_u32(r)? as usize;
    let n_outputs = read_u32(r)? as usize;
    let flags = read_u32(r)?;
    Ok(TransformerConfig {
        n_blocks,
        n_heads,
        d_model,
        d_mlp,
        context_len,
        vocab_size,
        n_outputs,
        use_layernorm: flags & 1 != 0,
        causal: flags & 2 != 0,
        activation: if flags & 4 != 0 {
            Activation::Gelu
        } else {
            Activation::Relu
        },
    })
}

pub fn save_model(path: &Path, state: &ModelState) -> Result<(), FileError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, CHECKPOINT_FORMAT_VERSION)?;
    write_config(&mut w, &state.config)?;
    let names = state.config.param_names();
    write_u32(&mut w, names.len() as u32)?;
    for (name, t) in names.iter().zip(&state.params) {
        write_string(&mut w, name)?;
        write_tensor(&mut w, t)?;
    }
    match &state.opt_state {
        OptState::None => w.write_all(&[0u8])?,
        OptState::AdamW { step, m, v } => {
            w.write_all(&[1u8])?;
            write_u64(&mut w, *step)?;
            for t in m.iter().chain(v) {
                write_tensor(&mut w, t)?;
            }
        }
        OptState::SgdMomentum { buf } => {
            w.write_all(&[2u8])?;
            for t in buf {
                write_tensor(&mut w, t)?;
            }
        }
    }
    write_u64(&mut w, state.iteration)?;
    write_string(&mut w, &state.provenance)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelState, FileError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FileError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(FileError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let config = read_config(&mut r)?;
    config
        .validate()
        .map_err(|_| FileError::Corrupt("invalid config"))?;
    let n_params = read_u32(&mut r)? as usize;
    let names = config.param_names();
    if n_params != names.len() {
        return Err(FileError::Corrupt("parameter count mismatch"));
    }
    let mut params = Vec::with_capacity(n_params);
    for name in &names {
        let stored = read_string(&mut r)?;
        if &stored != name {
            return Err(FileError::Corrupt("parameter name mismatch"));
        }
        let t = read_tensor(&mut r)?;
        if t.shape != config.param_shape(name) {
            return Err(FileError::Corrupt("parameter shape mismatch"));
        }
        params.push(t);
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let opt_state = match tag[0] {
        0 => OptState::None,
        1 => {
            let step = read_u64(&mut r)?;
            let mut m = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                m.push(read_tensor(&mut r)?);
            }
            let mut v = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                v.push(read_tensor(&mut r)?);
            }
            OptState::AdamW { step, m, v }
        }
        2 => {
            let mut buf = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                buf.push(read_tensor(&mut r)?);
            }
            OptState::SgdMomentum { buf }
        }
        _ => return Err(FileError::Corrupt("optimizer tag")),
    };
    let iteration = read_u64(&mut r)?;
    let provenance = read_string(&mut r)?;
    Ok(ModelState {
        config,
        params,
        opt_state,
        iteration,
        provenance,
    })
}
