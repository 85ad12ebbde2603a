//! Versioned model checkpoint files.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "WAVECKPT"
//! 8       4     format version (u32), currently 1
//! 12      4     config length N (u32)
//! 16      N     ModelConfig as JSON (UTF-8)
//! 16+N    4     parameter count (u32)
//! ...           parameters, each:
//!                 u32   name length K
//!                 K     name (UTF-8)
//!                 u64   number of dimensions (always 2)
//!                 u64   rows
//!                 u64   cols
//!                 4*R*C data as f32, row-major
//! ```
//!
//! Parameters are written in canonical (lexicographic) name order. Values are
//! stored as 32-bit floats: loading returns the f32-rounded parameters, and a
//! further save/load cycle is lossless.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"WAVECKPT";
const VERSION: u32 = 1;

/// Writes `params` and their configuration to `path`.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    params.check_shapes(config)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config_json = serde_json::to_vec(config)
        .map_err(|e| Error::InvalidArgument(format!("config serialization failed: {e}")))?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(&config_json)?;
    w.write_all(&(params.arrays().len() as u32).to_le_bytes())?;
    for (name, arr) in params.arrays() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&2u64.to_le_bytes())?;
        w.write_all(&(arr.nrows() as u64).to_le_bytes())?;
        w.write_all(&(arr.ncols() as u64).to_le_bytes())?;
        for v in arr.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Counting reader so format errors can name the byte offset.
pub(crate) struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub(crate) fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format { message: format!("truncated while reading {what}"), offset: Some(at) }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    pub(crate) fn read_f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }

    pub(crate) fn read_f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    pub(crate) fn read_u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    pub(crate) fn read_string(&mut self, what: &str) -> Result<String> {
        let len = self.read_u32(what)? as usize;
        let mut bytes = vec![0u8; len];
        self.read_exact(&mut bytes, what)?;
        String::from_utf8(bytes).map_err(|_| Error::Format {
            message: format!("{what} is not valid UTF-8"),
            offset: Some(self.offset),
        })
    }
}

/// Reads a checkpoint, validating magic, version, and parameter shapes
/// against the embedded configuration.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let mut r = Counted::new(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format { message: "bad magic; not a checkpoint file".into(), offset: Some(0) });
    }
    let version = r.read_u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            message: format!("unsupported checkpoint version {version} (expected {VERSION})"),
            offset: Some(8),
        });
    }
    let config_len = r.read_u32("config length")? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes, "config")?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes).map_err(|e| Error::Format {
        message: format!("config JSON invalid: {e}"),
        offset: Some(16),
    })?;
    config.validate()?;

    let count = r.read_u32("parameter count")? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.read_u32("name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        let at = r.offset;
        r.read_exact(&mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            message: "parameter name is not UTF-8".into(),
            offset: Some(at),
        })?;
        let ndims = r.read_u64("ndims")?;
        if ndims != 2 {
            return Err(Error::Format {
                message: format!("parameter `{name}` has {ndims} dims, expected 2"),
                offset: Some(r.offset - 8),
            });
        }
        let rows = r.read_u64("rows")? as usize;
        let cols = r.read_u64("cols")? as usize;
        let mut arr = Array2::zeros((rows, cols));
        for v in arr.iter_mut() {
            *v = r.read_f32("parameter data")? as f64;
        }
        arrays.insert(name, arr);
    }
    let params = ModelParams::from_arrays(arrays);
    params.check_shapes(&config)?;
    Ok((config, params))
}

/// Rounds every parameter through f32, exactly as one save/load cycle does.
pub fn round_to_f32(params: &ModelParams) -> ModelParams {
    let arrays = params
        .arrays()
        .iter()
        .map(|(name, arr)| (name.clone(), arr.mapv(|v| v as f32 as f64)))
        .collect();
    ModelParams::from_arrays(arrays)
}
