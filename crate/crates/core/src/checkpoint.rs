//! Binary model container: magic `SPTN`, a little-endian `u32` format
//! version, a length-prefixed TOML network config, then one block per
//! parameter tensor in declaration order (group tag, length, `f64` values).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{ensure, Error, Result};
use crate::network::{build_model, ModelParams, NetworkConfig};
use crate::optim::{ParamGroup, Parameters};

pub const MAGIC: &[u8; 4] = b"SPTN";
pub const FORMAT_VERSION: u32 = 1;

fn group_tag(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Network => 0,
        ParamGroup::Spt => 1,
    }
}

pub fn to_bytes(model: &ModelParams) -> Result<Vec<u8>> {
    let config = toml::to_string(&model.config).map_err(|e| Error::Config(format!("cannot encode config: {e}")))?;
    let blocks = model.param_slices();
    let mut out = Vec::with_capacity(64 + config.len() + 8 * model.param_count() + 9 * blocks.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(blocks.len() as u64).to_le_bytes());
    for (g, values) in blocks {
        out.push(group_tag(g));
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.bytes.len() - self.pos >= n,
            Input,
            "checkpoint truncated at byte {}",
            self.pos
        );
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    ensure!(r.take(4)? == MAGIC, Input, "not a model checkpoint (bad magic)");
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Input("config block is not UTF-8".into()))?;
    let config: NetworkConfig = toml::from_str(text).map_err(|e| Error::Config(format!("bad config block: {e}")))?;
    let mut model = build_model(&config, 0)?;
    let count = r.u64()? as usize;
    let mut slots = model.param_slices_mut();
    ensure!(
        count == slots.len(),
        Input,
        "checkpoint has {count} parameter blocks, config implies {}",
        slots.len()
    );
    for (k, (g, dst)) in slots.iter_mut().enumerate() {
        let tag = r.take(1)?[0];
        let n = r.u64()? as usize;
        ensure!(
            tag == group_tag(*g) && n == dst.len(),
            Input,
            "parameter block {k}: found tag {tag} length {n}, expected tag {} length {}",
            group_tag(*g),
            dst.len()
        );
        let raw = r.take(8 * n)?;
        for (d, c) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
    }
    ensure!(r.pos == bytes.len(), Input, "{} trailing bytes after checkpoint", bytes.len() - r.pos);
    Ok(model)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

/// Writes the container and a TOML echo of its network config next to it.
pub fn save(path: &Path, model: &ModelParams) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))?;
    let echo = toml::to_string(&model.config).map_err(|e| Error::Config(format!("cannot encode config: {e}")))?;
    let side = sidecar_path(path);
    fs::write(&side, echo).map_err(|e| Error::io(&side, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Input(reason) => Error::format(path, reason),
        other => other,
    })
}
