//! Binary parameter files: the magic `RFCKPT1`, a u32 entry count, then
//! per entry the name length (u32), UTF-8 name, rank (u32), extents (u32
//! each) and the values as f64. All integers and floats little-endian.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use routefuse_core::autodiff::{ParamStore, Tensor};

pub const MAGIC: &[u8; 7] = b"RFCKPT1";

pub fn write<W: Write>(mut w: W, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.value(id);
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&u32::try_from(d).context("extent exceeds u32")?.to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn u32_of<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// All entries in file order.
pub fn read<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).context("truncated header")?;
    if &magic != MAGIC {
        bail!("not a checkpoint: bad magic");
    }
    let n = u32_of(&mut r)?;
    let mut out = Vec::with_capacity(n as usize);
    for k in 0..n {
        let len = u32_of(&mut r).with_context(|| format!("entry {k}: truncated"))? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).with_context(|| format!("entry {k}: name is not UTF-8"))?;
        let rank = u32_of(&mut r)?;
        let shape = (0..rank).map(|_| Ok(u32_of(&mut r)? as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b).with_context(|| format!("`{name}`: truncated values"))?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        bail!("trailing bytes after {n} entries");
    }
    Ok(out)
}

/// Overwrite every parameter of `store` from `entries`. Names must match
/// one to one and shapes exactly.
pub fn apply(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for (name, t) in entries {
        let Some(id) = store.find(&name) else {
            bail!("checkpoint parameter `{name}` does not exist in this model");
        };
        let want = store.value(id).shape();
        if want != t.shape() {
            bail!("shape mismatch for `{name}`: checkpoint {:?}, model {:?}", t.shape(), want);
        }
        *store.value_mut(id) = t;
        seen[id.index()] = true;
    }
    if let Some(id) = store.ids().find(|id| !seen[id.index()]) {
        bail!("checkpoint lacks parameter `{}`", store.name(id));
    }
    Ok(())
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write(std::io::BufWriter::new(f), store)
}

pub fn load(path: &Path, store: &mut ParamStore) -> Result<()> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let entries = read(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    apply(store, entries).with_context(|| format!("loading {}", path.display()))
}
