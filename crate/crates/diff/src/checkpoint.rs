//! Binary tensor containers.
//!
//! Checkpoint (`VPDC`), all integers little-endian:
//!
//! ```text
//! magic "VPDC" | version u16 | entry count u32 |
//!   per entry: name length u16 | UTF-8 name | dtype u8 (1 = binary32) |
//!              rank u8 | dims u32 * rank | data
//! ```
//!
//! Single tensor (`VPDT`): `magic "VPDT" | version u16 | dtype u8 | rank u8 |
//! dims u32 * rank | data`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DiffError, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPDC";
pub const TENSOR_MAGIC: &[u8; 4] = b"VPDT";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn write_body(w: &mut impl Write, t: &Tensor<f32>) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| DiffError::Format(format!("rank {} too large", t.rank())))?;
    w.write_all(&[DTYPE_F32, rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| DiffError::Format(format!("dim {d} too large")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &x in t.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn read_body(r: &mut impl Read) -> Result<Tensor<f32>> {
    let [dtype, rank] = read_exact::<2>(r)?;
    if dtype != DTYPE_F32 {
        return Err(DiffError::Format(format!("unsupported dtype code {dtype}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(read_exact::<4>(r)?) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

fn check_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let m = read_exact::<4>(r)?;
    if &m != magic {
        return Err(DiffError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u16::from_le_bytes(read_exact::<2>(r)?);
    if version != FORMAT_VERSION {
        return Err(DiffError::Format(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

pub fn write_entries<'a>(
    w: &mut impl Write,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len())
        .map_err(|_| DiffError::Format("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| DiffError::Format(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        write_body(w, t)?;
    }
    Ok(())
}

pub fn read_entries(r: &mut impl Read) -> Result<Vec<(String, Tensor<f32>)>> {
    check_header(r, CHECKPOINT_MAGIC)?;
    let count = u32::from_le_bytes(read_exact::<4>(r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact::<2>(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| DiffError::Format(format!("bad name: {e}")))?;
        out.push((name, read_body(r)?));
    }
    Ok(out)
}

pub fn store_to_bytes(store: &ParameterStore<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let entries: Vec<(&str, &Tensor<f32>)> = store.iter().map(|(k, v)| (k.as_str(), v)).collect();
    write_entries(&mut buf, entries.into_iter())?;
    Ok(buf)
}

pub fn store_from_bytes(mut bytes: &[u8]) -> Result<ParameterStore<f32>> {
    let mut store = ParameterStore::new();
    for (k, v) in read_entries(&mut bytes)? {
        if store.contains(&k) {
            return Err(DiffError::Format(format!("duplicate entry `{k}`")));
        }
        store.insert(k, v);
    }
    Ok(store)
}

pub fn save_store(path: &Path, store: &ParameterStore<f32>) -> Result<()> {
    let bytes = store_to_bytes(store)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<ParameterStore<f32>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    store_from_bytes(&bytes)
}

pub fn tensor_to_bytes(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + t.len() * 4);
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    write_body(&mut buf, t)?;
    Ok(buf)
}

pub fn tensor_from_bytes(mut bytes: &[u8]) -> Result<Tensor<f32>> {
    check_header(&mut bytes, TENSOR_MAGIC)?;
    read_body(&mut bytes)
}

pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(t)?)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    let f = File::open(path)?;
    let mut bytes = Vec::new();
    BufReader::new(f).read_to_end(&mut bytes)?;
    tensor_from_bytes(&bytes)
}
