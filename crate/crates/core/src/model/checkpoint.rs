//! Checkpoint container.
//!
//! ```text
//! MOCDT-CHECKPOINT\n
//! version=1\n
//! <ModelConfig as key=value lines>\n
//! params=<count>\n
//! \n
//! per parameter, little-endian:
//!   u32 name length, UTF-8 name, u32 rank, rank × u64 dims, f64 data
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{MocdtModel, ModelConfig};
use crate::diffcore::Array;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "MOCDT-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn header(config: &ModelConfig) -> String {
    let control = config
        .control_layer
        .map_or_else(|| "final".to_string(), |l| l.to_string());
    format!(
        "d_model={}\nlayers={}\nheads={}\nhorizon={}\nvocab={}\nnum_users={}\nmax_hist={}\nseed={}\ncontrol_layer={}\n",
        config.d_model,
        config.layers,
        config.heads,
        config.horizon,
        config.vocab,
        config.num_users,
        config.max_hist,
        config.seed,
        control
    )
}

pub fn write_checkpoint(model: &MocdtModel, mut w: impl Write) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(format!("{CHECKPOINT_MAGIC}\nversion={CHECKPOINT_VERSION}\n").as_bytes());
    buf.extend_from_slice(header(model.config()).as_bytes());
    buf.extend_from_slice(format!("params={}\n\n", model.params().len()).as_bytes());
    for (name, array) in model.params().iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(array.rank() as u32).to_le_bytes());
        for &d in array.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in array.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
}

fn format_err(message: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", message.into()))
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| format_err("truncated parameter section"))?;
    Ok(b)
}

pub fn read_checkpoint(r: impl Read) -> Result<MocdtModel> {
    let mut r = BufReader::new(r);
    let mut fields = std::collections::BTreeMap::new();
    let mut first = true;
    loop {
        let mut line = String::new();
        let n = r
            .read_line(&mut line)
            .map_err(|_| format_err("unreadable header"))?;
        if n == 0 {
            return Err(format_err("missing header terminator"));
        }
        let line = line.trim_end_matches('\n');
        if first {
            if line != CHECKPOINT_MAGIC {
                return Err(format_err("bad magic"));
            }
            first = false;
            continue;
        }
        if line.is_empty() {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err(format!("malformed header line {line:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        fields.get(k).ok_or_else(|| format_err(format!("missing header field {k}")))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| format_err(format!("header field {k} is not an integer")))
    };
    if num("version")? != CHECKPOINT_VERSION as u64 {
        return Err(format_err(format!("unsupported version {}", get("version")?)));
    }
    let control_layer = match get("control_layer")?.as_str() {
        "final" => None,
        s => Some(s.parse().map_err(|_| format_err("bad control_layer"))?),
    };
    let config = ModelConfig {
        d_model: num("d_model")? as usize,
        layers: num("layers")? as usize,
        heads: num("heads")? as usize,
        horizon: num("horizon")? as usize,
        vocab: num("vocab")? as usize,
        num_users: num("num_users")? as usize,
        max_hist: num("max_hist")? as usize,
        seed: num("seed")?,
        control_layer,
    };
    let count = num("params")? as usize;
    let mut model = MocdtModel::new(config)?;
    if count != model.params().len() {
        return Err(format_err(format!(
            "{count} parameter arrays, expected {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| format_err("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| format_err("non-UTF-8 name"))?;
        let rank = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact::<8>(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_exact::<8>(&mut r)?));
        }
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| format_err(format!("unknown parameter {name}")))?;
        model.params_mut().set(id, Array::new(shape, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|_| format_err("unreadable trailer"))? != 0 {
        return Err(format_err("trailing bytes"));
    }
    Ok(model)
}

impl MocdtModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(self, file).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        read_checkpoint(file)
    }
}
