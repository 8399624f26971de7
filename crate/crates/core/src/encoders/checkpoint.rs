//! Single-file checkpoints of named parameter blocks.
//!
//! ```text
//! recbench-checkpoint 1
//! blocks <count>
//! <name> <offset> <length>      one line per block; offsets relative to the data section
//! end
//! <name>\n<dim dim ...>\n<raw little-endian f64 values>   repeated
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "recbench-checkpoint 1";

fn block_bytes<T: Scalar>(name: &str, t: &Tensor<T>) -> Vec<u8> {
    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    let mut out = format!("{name}\n{}\n", dims.join(" ")).into_bytes();
    for &v in t.data() {
        out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    out
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut manifest = format!("{MAGIC}\nblocks {}\n", store.len());
    let mut data = Vec::new();
    for (_, p) in store.iter() {
        if p.name.contains(char::is_whitespace) {
            return Err(Error::contract(format!("parameter name `{}` contains whitespace", p.name)));
        }
        let bytes = block_bytes(&p.name, &p.value);
        manifest.push_str(&format!("{} {} {}\n", p.name, data.len(), bytes.len()));
        data.extend_from_slice(&bytes);
    }
    manifest.push_str("end\n");
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&data);
    fs::write(path, out)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Parse {
        line: 0,
        msg: format!("checkpoint: {}", msg.into()),
    }
}

/// Reads every block as `(name, tensor)` in file order.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f64>)>> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String> {
        let end = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        let line = std::str::from_utf8(&bytes[*pos..*pos + end]).map_err(|_| bad("header is not UTF-8"))?;
        *pos += end + 1;
        Ok(line.to_string())
    };
    if next_line(&mut pos)? != MAGIC {
        return Err(bad("unknown format"));
    }
    let count: usize = next_line(&mut pos)?
        .strip_prefix("blocks ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad("missing block count"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line(&mut pos)?;
        let f: Vec<&str> = line.split(' ').collect();
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad manifest line `{line}`")));
        if f.len() != 3 {
            return Err(bad(format!("bad manifest line `{line}`")));
        }
        entries.push((f[0].to_string(), parse(f[1])?, parse(f[2])?));
    }
    if next_line(&mut pos)? != "end" {
        return Err(bad("manifest not terminated"));
    }
    let data = &bytes[pos..];
    let mut out = Vec::with_capacity(count);
    for (name, offset, len) in entries {
        let block = data
            .get(offset..offset + len)
            .ok_or_else(|| bad(format!("block `{name}` runs past end of file")))?;
        let mut p = 0;
        let mut line = || -> Result<&str> {
            let end = block[p..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("bad block"))?;
            let s = std::str::from_utf8(&block[p..p + end]).map_err(|_| bad("bad block"))?;
            p += end + 1;
            Ok(s)
        };
        if line()? != name {
            return Err(bad(format!("block at offset {offset} is not `{name}`")));
        }
        let shape: Vec<usize> = line()?
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| bad("bad shape")))
            .collect::<Result<_>>()?;
        let raw = &block[p..];
        let n: usize = shape.iter().product();
        if raw.len() != 8 * n {
            return Err(bad(format!("block `{name}` has {} bytes for {n} values", raw.len())));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(shape, values)?));
    }
    Ok(out)
}

/// Loads values into the parameters of `store` with matching names and shapes.
pub fn restore_checkpoint<T: Scalar>(store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let blocks = load_checkpoint(path)?;
    for (name, t) in blocks {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::config(format!("checkpoint block `{name}` has no matching parameter")))?;
        let p = store.get_mut(id)?;
        if p.value.shape() != t.shape() {
            return Err(Error::shape(format!(
                "checkpoint `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.cast();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    #[test]
    fn round_trip() {
        let mut store = ParamStore::<f64>::new();
        store.add("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 1e-300, 0.0, 7.0]).unwrap(), ParamRole::Backbone);
        store.add("b", Tensor::vector(vec![0.125]), ParamRole::ModalityEncoder);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&store, &path).unwrap();
        let blocks = load_checkpoint(&path).unwrap();
        assert_eq!(blocks[0].0, "a.w");
        assert_eq!(&blocks[0].1, store.value(store.find("a.w").unwrap()));
        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            other.get_mut(id).unwrap().value = Tensor::zeros(store.value(id).shape());
        }
        restore_checkpoint(&mut other, &path).unwrap();
        assert_eq!(other.snapshot(), store.snapshot());
    }
}
