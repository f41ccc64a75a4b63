//! Checkpoint serialization.
//!
//! Little-endian binary layout, all multi-byte fields LE:
//!
//! ```text
//! magic        8 bytes  "DFSSCKPT"
//! version      u32      currently 1
//! spec digest  32 bytes SHA-256 of the canonical NetworkSpec JSON
//! param count  u64      number of f32 learnable parameters
//! params       f32 × N  in layer order (conv weight, conv bias, bn gamma, bn beta)
//! bn blocks    u32      block count, then per block:
//!                         layer index u32, channels u32,
//!                         running mean f32 × C, running var f32 × C
//! init seed    u64      RNG seed used at initialization
//! ```
//!
//! The file must end exactly after the seed; anything else is malformed.
//! Loading requires the expected architecture and refuses on any digest,
//! version or size mismatch, leaving no partially built network behind.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::batchnorm::Mode;
use crate::error::{Error, Result};
use crate::nets::{build_network, Network, NetworkSpec};

pub const MAGIC: &[u8; 8] = b"DFSSCKPT";
pub const VERSION: u32 = 1;

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(net)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Serialize without touching the filesystem (used for byte-compare tests).
pub fn checkpoint_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&net.spec().digest());
    out.extend_from_slice(&(net.param_count() as u64).to_le_bytes());
    let mut non_finite = false;
    net.for_each_param(|s| {
        for v in s {
            if !v.is_finite() {
                non_finite = true;
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    if non_finite {
        return Err(Error::non_finite("checkpoint save: non-finite parameter".to_string()));
    }
    let bn = net.bn_layers();
    out.extend_from_slice(&(bn.len() as u32).to_le_bytes());
    for (index, state) in bn {
        out.extend_from_slice(&(index as u32).to_le_bytes());
        out.extend_from_slice(&(state.channels() as u32).to_le_bytes());
        for v in &state.running_mean {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &state.running_var {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&net.init_seed().to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!(
                "{}: truncated checkpoint (needed {} bytes at offset {})",
                self.path, n, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Load a checkpoint written by [`save_checkpoint`], verifying it against
/// the expected architecture. The loaded network is in eval mode.
pub fn load_checkpoint(path: &Path, expected: &NetworkSpec) -> Result<Network> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&buf, expected, &path.display().to_string())
}

pub fn load_checkpoint_bytes(buf: &[u8], expected: &NetworkSpec, origin: &str) -> Result<Network> {
    let mut r = Reader { buf, pos: 0, path: origin.to_string() };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::format(format!("{origin}: bad magic bytes, not a checkpoint")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "{origin}: checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let digest = r.take(32)?;
    if digest != expected.digest() {
        return Err(Error::mismatch(format!(
            "{origin}: checkpoint was written for a different architecture (spec digest mismatch)"
        )));
    }
    let param_count = r.u64()? as usize;
    let mut net = build_network(expected, 0)?;
    if param_count != net.param_count() {
        return Err(Error::format(format!(
            "{origin}: parameter count {param_count} does not match architecture ({})",
            net.param_count()
        )));
    }
    let params = r.f32_vec(param_count)?;
    let mut offset = 0;
    net.for_each_param_mut(|s| {
        s.copy_from_slice(&params[offset..offset + s.len()]);
        offset += s.len();
    });

    let bn_count = r.u32()? as usize;
    {
        let mut bn_layers = net.bn_layers_mut();
        if bn_count != bn_layers.len() {
            return Err(Error::format(format!(
                "{origin}: {bn_count} BN blocks for an architecture with {}",
                bn_layers.len()
            )));
        }
        for (index, state) in bn_layers.iter_mut() {
            let stored_index = r.u32()? as usize;
            if stored_index != *index {
                return Err(Error::format(format!(
                    "{origin}: BN block at layer {stored_index}, expected layer {index}"
                )));
            }
            let channels = r.u32()? as usize;
            if channels != state.channels() {
                return Err(Error::format(format!(
                    "{origin}: BN block has {channels} channels, expected {}",
                    state.channels()
                )));
            }
            state.running_mean = r.f32_vec(channels)?;
            state.running_var = r.f32_vec(channels)?;
            if state.running_var.iter().any(|v| *v < 0.0) {
                return Err(Error::format(format!(
                    "{origin}: negative running variance in BN block at layer {index}"
                )));
            }
        }
    }

    let seed = r.u64()?;
    if r.pos != buf.len() {
        return Err(Error::format(format!(
            "{origin}: {} trailing bytes after checkpoint payload",
            buf.len() - r.pos
        )));
    }

    let mut net = net.with_init_seed(seed);
    net.set_mode(Mode::Eval);
    Ok(net)
}

impl Network {
    fn with_init_seed(mut self, seed: u64) -> Network {
        self.set_init_seed(seed);
        self
    }
}

/// Read a file fully; helper shared by stages that byte-compare artifacts.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}
