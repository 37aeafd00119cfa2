//! Versioned binary checkpoint format.
//!
//! ```text
//! magic      4 bytes  "PDCK"
//! version    u32 LE   (1)
//! arch       u32 LE length + UTF-8 arch spec line
//! epoch      u64 LE
//! init seed  u64 LE
//! blocks     u32 LE count, then per block:
//!              u32 LE name length + UTF-8 name
//!              u32 LE rank, rank × u64 LE dims
//!              prod(dims) × f64 LE values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ArchSpec, ModelCheckpoint};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PDCK";
const VERSION: u32 = 1;

impl ModelCheckpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let arch = self.arch.to_string();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(arch.len() as u32).to_le_bytes())?;
        w.write_all(arch.as_bytes())?;
        w.write_all(&(self.epoch as u64).to_le_bytes())?;
        w.write_all(&self.init_seed.to_le_bytes())?;
        let blocks = self.blocks();
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for b in &blocks {
            w.write_all(&(b.name.len() as u32).to_le_bytes())?;
            w.write_all(b.name.as_bytes())?;
            w.write_all(&(b.shape.len() as u32).to_le_bytes())?;
            for &d in &b.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &self.params[b.offset..b.offset + b.len] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(4, &format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let arch_text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.error(at as u64, "arch spec is not UTF-8"))?;
        let arch: ArchSpec = arch_text
            .parse()
            .map_err(|e: Error| r.error(at as u64, &e.to_string()))?;
        let epoch = r.u64()? as usize;
        let init_seed = r.u64()?;
        let expected = arch.blocks();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(r.error(r.pos as u64, "block count does not match architecture"));
        }
        let mut params = Vec::with_capacity(arch.param_count());
        for block in &expected {
            let at = r.pos as u64;
            let name_len = r.u32()? as usize;
            let name = r.take(name_len)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if name != block.name.as_bytes() || shape != block.shape {
                return Err(r.error(at, &format!("block {} does not match architecture", block.name)));
            }
            for _ in 0..block.len {
                params.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, "trailing bytes after last block"));
        }
        ModelCheckpoint::from_params(arch, params, epoch, init_seed)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: u64, message: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos as u64, "truncated checkpoint"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = ArchSpec::convnet(8, 8, 3, [3, 4], 5).with_input_mean(vec![0.1, 0.2, 0.30000000000000004]);
        let mut m = ModelCheckpoint::init(arch, 77).unwrap();
        m.epoch = 12;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back, m);
        let img = Image::new(8, 8, 3, (0..192).map(|i| (i as f64).sin().abs()).collect()).unwrap();
        let a = m.logits(&img).unwrap();
        let b = back.logits(&img).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupt_files_are_rejected_with_offsets() {
        let m = ModelCheckpoint::init(ArchSpec::mlp(1, 2, 1, &[2], 2), 1).unwrap();
        let bytes = m.to_bytes();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ModelCheckpoint::from_bytes(&bad, p),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelCheckpoint::from_bytes(&extra, p).is_err());
        let mut nan = bytes;
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(ModelCheckpoint::from_bytes(&nan, p).is_err());
    }
}
