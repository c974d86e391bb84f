//! Parameter checkpoint format.
//!
//! ```text
//! hcmvp-params v1
//! meta <key>=<value>
//! param <name> shape=<d0>x<d1>... offset=<first value index> len=<value count>
//! end
//! <little-endian f32 payload>
//! ```
//!
//! Header lines are UTF-8 and newline terminated. Metadata keys and
//! parameter names contain no whitespace; metadata values are single-line.

use std::fs;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "hcmvp-params v1";

fn header_err(name: &str, reason: impl Into<String>) -> NnError {
    NnError::Checkpoint {
        name: name.to_string(),
        reason: reason.into(),
    }
}

pub fn to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for (k, v) in store.metadata() {
        if k.is_empty() || k.contains(char::is_whitespace) || k.contains('=') || v.contains('\n') {
            return Err(header_err(k, "metadata entry cannot be written"));
        }
        header.push_str(&format!("meta {k}={v}\n"));
    }
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        if name.contains(char::is_whitespace) {
            return Err(header_err(name, "parameter name contains whitespace"));
        }
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "param {name} shape={} offset={offset} len={}\n",
            shape.join("x"),
            t.len()
        ));
        offset += t.len();
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.reserve(offset * 4);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut pos = 0usize;
    let mut next_line = |what: &str| -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| header_err(what, "header ends early"))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| header_err(what, "header is not UTF-8"))?;
        pos += end + 1;
        Ok(line)
    };

    if next_line("<magic>")? != MAGIC {
        return Err(header_err("<magic>", "not a parameter checkpoint"));
    }
    let mut store = ParamStore::new();
    let mut specs: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    loop {
        let line = next_line("<header>")?;
        if line == "end" {
            break;
        }
        if let Some(kv) = line.strip_prefix("meta ") {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| header_err(kv, "metadata line without `=`"))?;
            store.set_meta(k, v);
        } else if let Some(rest) = line.strip_prefix("param ") {
            let mut fields = rest.split(' ');
            let name = fields.next().unwrap_or_default().to_string();
            let mut shape = None;
            let mut offset = None;
            let mut len = None;
            for f in fields {
                let (k, v) = f
                    .split_once('=')
                    .ok_or_else(|| header_err(&name, format!("malformed field `{f}`")))?;
                match k {
                    "shape" => {
                        let dims: std::result::Result<Vec<usize>, _> =
                            v.split('x').map(|d| d.parse::<usize>()).collect();
                        shape = Some(dims.map_err(|_| header_err(&name, format!("bad shape `{v}`")))?);
                    }
                    "offset" => offset = v.parse::<usize>().ok(),
                    "len" => len = v.parse::<usize>().ok(),
                    _ => return Err(header_err(&name, format!("unknown field `{k}`"))),
                }
            }
            let (shape, offset, len) = match (shape, offset, len) {
                (Some(s), Some(o), Some(l)) => (s, o, l),
                _ => return Err(header_err(&name, "missing shape, offset or len")),
            };
            if shape.iter().product::<usize>() != len {
                return Err(header_err(&name, format!("shape {shape:?} does not hold {len} values")));
            }
            specs.push((name, shape, offset, len));
        } else {
            return Err(header_err(line, "unrecognized header line"));
        }
    }

    let payload = &bytes[pos..];
    let mut expected_offset = 0usize;
    for (name, shape, offset, len) in specs {
        if offset != expected_offset {
            return Err(header_err(&name, format!("offset {offset}, expected {expected_offset}")));
        }
        let start = offset * 4;
        let end = start + len * 4;
        if end > payload.len() {
            return Err(header_err(
                &name,
                format!("payload truncated: needs bytes {start}..{end}, file has {}", payload.len()),
            ));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| header_err(&name, e.to_string()))?;
        store.insert(name, tensor)?;
        expected_offset += len;
    }
    if payload.len() != expected_offset * 4 {
        return Err(header_err(
            "<payload>",
            format!("{} trailing bytes", payload.len() as isize - expected_offset as isize * 4),
        ));
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(store)?)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore> {
    from_bytes(&fs::read(path)?)
}
