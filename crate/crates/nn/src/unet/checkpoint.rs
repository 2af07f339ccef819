//! Checkpoint file layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "FSEGUNET" | version | config_len | config JSON (UTF-8)
//! param_count | per param: name_len | name | 5 dims | f32 LE data
//! ```
//!
//! Parameter blocks follow the model's stable plan order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{parameter_plan, Param, UNetConfig, UNetModel};
use crate::error::{shape_err, NnError, Result};
use crate::tensor::Tensor5;

const MAGIC: &[u8; 8] = b"FSEGUNET";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &UNetModel, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<UNetModel> {
    decode(&fs::read(path)?)
}

/// Load and require the parameter layout of `expected`.
///
/// Fails with [`NnError::ShapeMismatch`] naming the first parameter whose
/// name or shape differs.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &UNetConfig) -> Result<UNetModel> {
    let model = load_checkpoint(path)?;
    let want = parameter_plan(expected);
    for (i, spec) in want.iter().enumerate() {
        match model.params().get(i) {
            Some(p) if p.name == spec.name && p.tensor.shape() == spec.shape => {}
            Some(p) => {
                return shape_err(format!(
                    "parameter {}: checkpoint has {} {:?}, expected {:?}",
                    spec.name,
                    p.name,
                    p.tensor.shape(),
                    spec.shape
                ))
            }
            None => return shape_err(format!("parameter {} missing from checkpoint", spec.name)),
        }
    }
    if model.params().len() != want.len() {
        return shape_err(format!(
            "parameter {}: not present in expected configuration",
            model.params()[want.len()].name
        ));
    }
    Ok(model)
}

fn encode(model: &UNetModel) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())
        .map_err(|e| NnError::Checkpoint(format!("config serialization: {e}")))?;
    let mut out = Vec::with_capacity(64 + config.len() + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    put_u32(&mut out, model.params().len() as u32);
    for p in model.params() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        for d in p.tensor.shape() {
            put_u32(&mut out, d as u32);
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn decode(buf: &[u8]) -> Result<UNetModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.bytes(MAGIC.len(), "magic")? != MAGIC {
        return Err(NnError::Checkpoint("not a UNet checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = r.u32("config length")? as usize;
    let config: UNetConfig = serde_json::from_slice(r.bytes(config_len, "config")?)
        .map_err(|e| NnError::Checkpoint(format!("config: {e}")))?;
    config.validate()?;
    let count = r.u32("parameter count")? as usize;
    let plan = parameter_plan(&config);
    let mut params = Vec::with_capacity(count.min(plan.len()));
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.bytes(name_len, "parameter name")?)
            .map_err(|_| NnError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let mut shape = [0usize; 5];
        for d in &mut shape {
            *d = r.u32("parameter shape")? as usize;
        }
        match plan.get(i) {
            Some(spec) if spec.name == name && spec.shape == shape => {}
            Some(spec) => {
                return shape_err(format!(
                    "parameter {name} {shape:?} does not match embedded config ({} {:?})",
                    spec.name, spec.shape
                ))
            }
            None => return shape_err(format!("parameter {name} is not in the embedded config")),
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(4 * n, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Param {
            name,
            tensor: Tensor5::new(shape, data)?,
        });
    }
    if r.pos != buf.len() {
        return Err(NnError::Checkpoint(format!(
            "{} trailing bytes after parameters",
            buf.len() - r.pos
        )));
    }
    UNetModel::from_params(config, params)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
