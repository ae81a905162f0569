//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//! magic `STSM`, version, then one record per parameter until end of file:
//! name length, UTF-8 name, rank, extents, `f32` payload in row-major order.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::NetworkState;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STSM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar, W: Write>(state: &NetworkState<S>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    for (name, t) in state.names.iter().zip(&state.tensors) {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.rank() as u32)?;
        for &e in t.shape() {
            w.write_u32::<LittleEndian>(e as u32)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
    }
    Ok(())
}

fn data_err(detail: impl Into<String>) -> Error {
    Error::Data(format!("checkpoint: {}", detail.into()))
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R) -> Result<NetworkState<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(data_err(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(data_err(format!("unsupported version {version}")));
    }
    let mut state = NetworkState::empty(0);
    loop {
        let name_len = match r.read_u32::<LittleEndian>() {
            Ok(n) => n as usize,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| data_err("parameter name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|e| e as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(S::of(r.read_f32::<LittleEndian>()? as f64));
        }
        state.push(name, Tensor::new(shape, data)?);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_f32_bitwise() {
        let mut st = NetworkState::<f32>::empty(0);
        st.push("a.weight", Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.0, 1e-7, 0.0, 7.25]).unwrap());
        st.push("a.bias", Tensor::vector(vec![1.5, -0.0]));
        st.push("s", Tensor::scalar(4.0));
        let mut buf = Vec::new();
        write_checkpoint(&st, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"STSM");
        let back: NetworkState<f32> = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.names, st.names);
        for (a, b) in back.tensors.iter().zip(&st.tensors) {
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint::<f32, _>(&b"XXXX\x01\0\0\0"[..]).is_err());
        let mut st = NetworkState::<f32>::empty(0);
        st.push("w", Tensor::vector(vec![1.0, 2.0]));
        let mut buf = Vec::new();
        write_checkpoint(&st, &mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_checkpoint::<f32, _>(&buf[..]).is_err());
    }
}
