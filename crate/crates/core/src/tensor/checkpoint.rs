// Checkpoint layout (little-endian):
//   "KCKPT\x01" | u32 count | per tensor: u16 name_len, name, u8 rank,
//   u32 extents[rank], f64 payload (row-major)

use std::io::{Read, Write};

use super::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"KCKPT\x01";

pub fn write_checkpoint<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(CHECKPOINT_MAGIC)?;
    let count = u32::try_from(tensors.len()).map_err(|_| TensorError::Checkpoint("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| TensorError::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Checkpoint(format!("{name}: rank too large")))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| TensorError::Checkpoint(format!("{name}: extent too large")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Checkpoint(format!("truncated while reading {what}")),
        _ => TensorError::Io(e),
    })?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 6] = read_exact(&mut r, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, "tensor count")?);
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(read_exact(&mut r, "name length")?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| TensorError::Checkpoint("truncated while reading name".into()))?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
        let [rank] = read_exact::<_, 1>(&mut r, "rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(&mut r, "extent")?) as usize);
        }
        let n: usize = shape.iter().product();
        if rank == 0 || n == 0 {
            return Err(TensorError::Checkpoint(format!("{name}: empty shape {shape:?}")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_exact(&mut r, &name)?));
        }
        let t = Tensor::new(shape, data).map_err(|e| TensorError::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}
