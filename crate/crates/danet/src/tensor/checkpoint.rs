//! Checkpoint files: named tensors in a flat binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   5 bytes  "DACK1"
//! count   u32
//! entry*  u32 name_len | name bytes (utf-8) | u32 rank | u64 * rank dims
//!         | f64 * prod(dims) values
//! ```
//!
//! Values are raw IEEE-754 bit patterns, so a save/load round trip is
//! bit-exact.

use super::Tensor;
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"DACK1";

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Checkpoint(format!("too many entries: {}", entries.len())))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {} bytes", name.len())))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u32::try_from(tensor.rank()).expect("rank fits u32");
        w.write_all(&rank.to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 5];
    read_exactly(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let count = read_u32(&mut r, "entry count")?;

    let mut entries = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exactly(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("entry {i}: name is not valid utf-8")))?;

        let rank = read_u32(&mut r, "rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint(format!(
                "entry {name:?}: implausible rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut total: usize = 1;
        for _ in 0..rank {
            let mut dim_bytes = [0u8; 8];
            read_exactly(&mut r, &mut dim_bytes, "dimension")?;
            let dim = u64::from_le_bytes(dim_bytes);
            let dim = usize::try_from(dim)
                .map_err(|_| Error::Checkpoint(format!("entry {name:?}: dimension overflow")))?;
            total = total
                .checked_mul(dim)
                .ok_or_else(|| Error::Checkpoint(format!("entry {name:?}: size overflow")))?;
            shape.push(dim);
        }
        let mut data = Vec::with_capacity(total);
        let mut buf = [0u8; 8];
        for _ in 0..total {
            read_exactly(&mut r, &mut buf, "tensor data")?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| Error::Checkpoint(format!("entry {name:?}: {e}")))?;
        entries.push((name, tensor));
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }
    Ok(entries)
}

fn read_exactly<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exactly(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let entries = vec![
            (
                "layer0.weight".to_string(),
                Tensor::rand_uniform(&mut rng, &[4, 7], -10.0, 10.0),
            ),
            (
                "layer0.bias".to_string(),
                Tensor::rand_uniform(&mut rng, &[7], -1e-12, 1e-12),
            ),
            ("odd.scalar".to_string(), Tensor::scalar(0.1 + 0.2)),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dack");
        save_checkpoint(&path, &entries).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), entries.len());
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&loaded) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            // compare bit patterns, not float equality
            let bits0: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.dack");
        std::fs::write(&path, b"NOPE!rest").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn rejects_truncation() {
        let entries = vec![("w".to_string(), Tensor::full(&[16], 1.5))];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.dack");
        save_checkpoint(&path, &entries).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_trailing_garbage() {
        let entries = vec![("w".to_string(), Tensor::scalar(2.0))];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.dack");
        save_checkpoint(&path, &entries).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn empty_checkpoint_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.dack");
        save_checkpoint(&path, &[]).unwrap();
        assert!(load_checkpoint(&path).unwrap().is_empty());
    }
}
