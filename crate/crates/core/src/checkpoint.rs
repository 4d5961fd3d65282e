//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "SPXF"  u32 version  u32 config_len  config (UTF-8 key=value lines)
//! repeated until EOF, names in ascending order:
//!   u16 name_len  name  u8 rank  u32 dims[rank]  f32 payload[product(dims)]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SPXF";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let config = model.config.to_kv();
    let mut out = Vec::with_capacity(16 + 4 * model.params.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for (name, t) in model.params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::Param(format!("parameter name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Param(format!("rank of `{name}` exceeds 255")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Param(format!("extent of `{name}` exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
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
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let config_len = r.u32("config length")? as usize;
    let config = std::str::from_utf8(r.take(config_len, "config")?)
        .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
    let config = ModelConfig::from_kv(config).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    let mut params = ParamStore::new();
    let mut last: Option<String> = None;
    while !r.done() {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        if last.as_ref().is_some_and(|prev| *prev >= name) {
            return Err(CheckpointError::Malformed(format!("parameter `{name}` out of order or duplicated")).into());
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 4, "payload")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name.clone(), Tensor::new(&shape, data)?);
        last = Some(name);
    }
    let model = Model { config, params };
    model
        .check_params()
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&fs::read(path)?)
}
