//! Binary dataset files: a versioned header followed by 32-bit float
//! payloads, little-endian throughout.
//!
//! Layout: magic `WVDATA01`, version u32, task tag u8, transform tag u8,
//! transform scale f64, variables M u64, history L u64, horizon H u64 (0
//! means no future), delta_t f64, window count u64, base seed u64, config
//! hash string (u32 length + UTF-8), code version string, then per window
//! M*L history floats followed by M*H future floats, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::Dataset;
use crate::checkpoint::Counted;
use crate::error::{Error, Result};
use crate::series::{TaskTag, TimeSeriesWindow, Transform};

const MAGIC: &[u8; 8] = b"WVDATA01";
const VERSION: u32 = 1;

fn write_string(w: &mut dyn Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Writes a dataset; all windows must share variable count, history length,
/// horizon, and time step.
pub fn export_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let first = dataset.windows.first();
    let m = first.map_or(0, |w| w.num_variables());
    let l = first.map_or(0, |w| w.history_len());
    let h = first.and_then(|w| w.future.as_ref()).map_or(0, |f| f.ncols());
    for (i, w) in dataset.windows.iter().enumerate() {
        let wh = w.future.as_ref().map_or(0, |f| f.ncols());
        if w.num_variables() != m || w.history_len() != l || wh != h {
            return Err(Error::InvalidArgument(format!(
                "window {i} has shape ({}, {}, {wh}), expected ({m}, {l}, {h}); dataset files are homogeneous",
                w.num_variables(),
                w.history_len()
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dataset.task.to_byte()])?;
    let (ttag, tscale) = dataset.transform.to_tag();
    w.write_all(&[ttag])?;
    w.write_all(&tscale.to_le_bytes())?;
    w.write_all(&(m as u64).to_le_bytes())?;
    w.write_all(&(l as u64).to_le_bytes())?;
    w.write_all(&(h as u64).to_le_bytes())?;
    w.write_all(&dataset.delta_t_seconds.to_le_bytes())?;
    w.write_all(&(dataset.windows.len() as u64).to_le_bytes())?;
    w.write_all(&dataset.seed.to_le_bytes())?;
    write_string(&mut w, &dataset.config_hash)?;
    write_string(&mut w, &dataset.code_version)?;
    for window in &dataset.windows {
        for v in window.values.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        if let Some(f) = &window.future {
            for v in f.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`export_dataset`]; corruption errors carry
/// the byte offset where reading stopped.
pub fn import_dataset(path: &Path) -> Result<Dataset> {
    let mut r = Counted::new(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format { message: "bad magic; not a dataset file".into(), offset: Some(0) });
    }
    let version = r.read_u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            message: format!("unsupported dataset version {version}"),
            offset: Some(8),
        });
    }
    let task = TaskTag::from_byte(r.read_u8("task tag")?)?;
    let ttag = r.read_u8("transform tag")?;
    let tscale = r.read_f64("transform scale")?;
    let transform = Transform::from_tag(ttag, tscale)?;
    let m = r.read_u64("variable count")? as usize;
    let l = r.read_u64("history length")? as usize;
    let h = r.read_u64("horizon")? as usize;
    let delta_t = r.read_f64("delta_t")?;
    let count = r.read_u64("window count")? as usize;
    let seed = r.read_u64("seed")?;
    let config_hash = r.read_string("config hash")?;
    let code_version = r.read_string("code version")?;
    let mut windows = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("window {i}");
        let mut values = Array2::zeros((m, l));
        for v in values.iter_mut() {
            *v = f64::from(r.read_f32(&what)?);
        }
        let future = if h > 0 {
            let mut f = Array2::zeros((m, h));
            for v in f.iter_mut() {
                *v = f64::from(r.read_f32(&what)?);
            }
            Some(f)
        } else {
            None
        };
        windows.push(TimeSeriesWindow::new(values, future, delta_t, task)?);
    }
    Ok(Dataset {
        task,
        windows,
        transform,
        delta_t_seconds: delta_t,
        config_hash,
        seed,
        code_version,
    })
}
