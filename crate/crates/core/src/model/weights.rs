//! Flat weight file: `b"VLCW"`, u32 version, u32 config length, config TOML,
//! u64 parameter count, then little-endian f32 parameters in visit order.

use std::io::Write;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::ToyVlm;

const MAGIC: &[u8; 4] = b"VLCW";
const VERSION: u32 = 1;

pub(super) fn save(model: &ToyVlm, path: &Path) -> Result<()> {
    let echo = model.config().to_toml_string();
    let mut count = 0u64;
    model.for_each_param(|p| count += p.len() as u64);

    let mut buf = Vec::with_capacity(16 + echo.len() + 4 * count as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    buf.extend_from_slice(echo.as_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    model.for_each_param(|p| {
        for x in p {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    });
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(super) fn load(config: ModelConfig, path: &Path) -> Result<ToyVlm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Integrity {
        key: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(bad("weight file is truncated"));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported weight file version {version}")));
    }
    let echo_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let echo = std::str::from_utf8(take(echo_len)?).map_err(|_| bad("config echo is not UTF-8"))?;
    let stored = ModelConfig::from_toml_str(echo)?;
    if stored != config {
        return Err(Error::Config(format!(
            "weights at {} were built for a different model config",
            path.display()
        )));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;

    // Shapes come from a fresh init; the stored floats overwrite it.
    let mut model = ToyVlm::init(config)?;
    let mut expected = 0usize;
    model.for_each_param(|p| expected += p.len());
    if count != expected {
        return Err(bad(&format!("holds {count} parameters, config needs {expected}")));
    }
    let body = take(4 * count)?;
    if !cur.is_empty() {
        return Err(bad("trailing bytes after parameters"));
    }
    let mut floats = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    model.for_each_param_mut(|p| {
        for x in p.iter_mut() {
            *x = floats.next().expect("count checked");
        }
    });
    model.refresh_fingerprint();
    Ok(model)
}
