//! Binary parameter serialization.
//!
//! Layout: a little-endian u32 format version, then one record per tensor
//! until end of stream. Record: name length (u32), name bytes (UTF-8), shape
//! rank (u32), each dimension (u32), then the data as little-endian f64.
//! Round-trips are bit-exact.

use std::io::{self, Read, Write};

use super::{ParameterStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensors(
    w: &mut impl Write,
    tensors: impl IntoIterator<Item = (impl AsRef<str>, impl AsRef<Tensor>)>,
) -> io::Result<()> {
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (name, tensor) in tensors {
        let name = name.as_ref().as_bytes();
        let tensor = tensor.as_ref();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
        for &d in &tensor.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &tensor.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors(r: &mut impl Read) -> io::Result<Vec<(String, Tensor)>> {
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unsupported checkpoint format version {version}"),
        ));
    }
    let mut out = Vec::new();
    loop {
        let name_len = match read_u32(r) {
            Ok(n) => n as usize,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        out.push((name, tensor));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

impl AsRef<Tensor> for Tensor {
    fn as_ref(&self) -> &Tensor {
        self
    }
}

/// Store-level convenience wrappers used by model checkpoints.
pub fn write_store(w: &mut impl Write, store: &ParameterStore) -> io::Result<()> {
    write_tensors(w, store.iter().map(|(_, p)| (p.name.as_str(), &p.value)))
}

pub fn load_into_store(r: &mut impl Read, store: &mut ParameterStore) -> io::Result<()> {
    let tensors = read_tensors(r)?;
    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    for (_, param) in store.iter_mut() {
        match by_name.remove(&param.name) {
            Some(t) if t.shape == param.value.shape => {
                param.value.data = t.data;
                param.value.grad = None;
            }
            Some(t) => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!(
                        "checkpoint shape {:?} does not match parameter {} of shape {:?}",
                        t.shape, param.name, param.value.shape
                    ),
                ));
            }
            None => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("checkpoint is missing parameter {}", param.name),
                ));
            }
        }
    }
    Ok(())
}
