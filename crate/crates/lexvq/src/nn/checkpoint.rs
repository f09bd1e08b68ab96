//! Versioned binary container for named tensors.
//!
//! Layout: 8-byte magic, u32 format version, u64 entry count, then per
//! entry: u32 name length, name bytes (UTF-8), u32 rank, u64 dims, and the
//! payload as raw little-endian f64. The same container backs parameter
//! checkpoints, optimizer state, and codebook exports.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write_with;
use crate::nn::{Optimizer, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LXVQTNSR";
const VERSION: u32 = 1;

pub fn write_tensors(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    atomic_write_with(path, |file| {
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u64).to_le_bytes())?;
        for (name, t) in entries {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    })
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Invalid(format!("{display}: {msg}"));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(&display, e))?;
    if &magic != MAGIC {
        return Err(bad("not a tensor container (bad magic)"));
    }
    let version = read_u32(&mut r, &display)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported container version {version}")));
    }
    let count = read_u64(&mut r, &display)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, &display)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|e| Error::io(&display, e))?;
        let name =
            String::from_utf8(name_bytes).map_err(|_| bad("entry name is not valid UTF-8"))?;
        let rank = read_u32(&mut r, &display)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, &display)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|e| Error::io(&display, e))?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::new(data, &shape)?));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}

/// Names with this prefix are optimizer/bookkeeping state, not parameters.
const STATE_PREFIX: &str = "__state.";

/// Writes parameters plus optimizer state and the epoch counter as one
/// container, so a resumed run continues bit-exactly.
pub fn save_train_state(
    path: &Path,
    params: &ParamStore,
    opt: &Optimizer,
    epoch: usize,
) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone().with_requires_grad(false)))
        .collect();
    entries.push((
        format!("{STATE_PREFIX}epoch"),
        Tensor::scalar(epoch as f64),
    ));
    for (name, data) in opt.state_entries(params) {
        let len = data.len();
        entries.push((
            format!("{STATE_PREFIX}opt.{name}"),
            Tensor::new(data, &[len])?,
        ));
    }
    write_tensors(path, &entries)
}

/// Loads a container written by [`save_train_state`] back into an existing
/// store/optimizer pair; returns the stored epoch.
pub fn load_train_state(
    path: &Path,
    params: &mut ParamStore,
    opt: &mut Optimizer,
) -> Result<usize> {
    let entries = read_tensors(path)?;
    let mut epoch = 0usize;
    let mut opt_entries = Vec::new();
    for (name, tensor) in entries {
        if let Some(state_name) = name.strip_prefix(STATE_PREFIX) {
            if state_name == "epoch" {
                epoch = tensor.data()[0] as usize;
            } else if let Some(opt_name) = state_name.strip_prefix("opt.") {
                opt_entries.push((opt_name.to_string(), tensor.data().to_vec()));
            } else {
                return Err(Error::Invalid(format!(
                    "unknown checkpoint state entry '{name}'"
                )));
            }
        } else {
            params.set(&name, tensor)?;
        }
    }
    opt.restore_state(&opt_entries)?;
    Ok(epoch)
}

/// Reads only the parameter entries of a checkpoint into `params`.
pub fn load_params(path: &Path, params: &mut ParamStore) -> Result<()> {
    for (name, tensor) in read_tensors(path)? {
        if !name.starts_with(STATE_PREFIX) {
            params.set(&name, tensor)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let entries = vec![
            (
                "a.weight".to_string(),
                Tensor::new(vec![1.5, -0.25, f64::MIN_POSITIVE, 1e300], &[2, 2]).unwrap(),
            ),
            ("b.bias".to_string(), Tensor::new(vec![0.1], &[1]).unwrap()),
        ];
        write_tensors(&path, &entries).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTATNSR????????").unwrap();
        assert!(read_tensors(&path).is_err());
    }

    #[test]
    fn train_state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.ckpt");
        let mut params = ParamStore::new();
        params
            .register("w", Tensor::new(vec![1.0, 2.0], &[2]).unwrap())
            .unwrap();
        params.get_mut("w").unwrap().accumulate_grad(&[0.5, 0.5]);
        let mut opt = Optimizer::adam(0.01);
        opt.step(&mut params).unwrap();
        save_train_state(&path, &params, &opt, 7).unwrap();

        let mut params2 = ParamStore::new();
        params2.register("w", Tensor::zeros(&[2])).unwrap();
        let mut opt2 = Optimizer::adam(0.01);
        let epoch = load_train_state(&path, &mut params2, &mut opt2).unwrap();
        assert_eq!(epoch, 7);
        assert_eq!(opt2.step_count(), 1);
        assert!(params.bit_eq(&params2));
    }
}
