//! IDX files: big-endian magic `0x0000 08 nd`, `nd` big-endian u32 extents,
//! then unsigned bytes.
//!
//! Images use `nd = 3` (count, rows, cols) for gray data and `nd = 4`
//! (count, rows, cols, channels) for color; labels use `nd = 1`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, ImageSample};

const UBYTE: u32 = 0x08;

fn fmt_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

struct Idx {
    dims: Vec<usize>,
    data_offset: usize,
    bytes: Vec<u8>,
}

fn read_idx(path: &Path, allowed_dims: &[u32]) -> Result<Idx> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 {
        return Err(fmt_err(path, 0, "truncated IDX header"));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    let nd = magic & 0xff;
    if magic >> 8 != UBYTE || !allowed_dims.contains(&nd) {
        return Err(fmt_err(path, 0, format!("bad IDX magic {magic:#010x}")));
    }
    let nd = nd as usize;
    let header = 4 + 4 * nd;
    if bytes.len() < header {
        return Err(fmt_err(path, bytes.len(), "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..nd)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let len: usize = dims.iter().product();
    if bytes.len() < header + len {
        return Err(fmt_err(path, bytes.len(), format!("truncated IDX data, expected {len} bytes")));
    }
    if bytes.len() > header + len {
        return Err(fmt_err(path, header + len, "trailing bytes after IDX data"));
    }
    Ok(Idx {
        dims,
        data_offset: header,
        bytes,
    })
}

/// Reads an image/label IDX pair; pixels are scaled to `[0, 1]` and sample
/// ids follow file order.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Vec<ImageSample>> {
    let img = read_idx(images, &[3, 4])?;
    let lab = read_idx(labels, &[1])?;
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    let c = img.dims.get(3).copied().unwrap_or(1);
    if lab.dims[0] != n {
        return Err(fmt_err(
            labels,
            4,
            format!("label count {} does not match image count {n}", lab.dims[0]),
        ));
    }
    if h == 0 || w == 0 || c == 0 {
        return Err(fmt_err(images, 8, "image extents must be positive"));
    }
    let per = h * w * c;
    (0..n)
        .map(|i| {
            let start = img.data_offset + i * per;
            let data = img.bytes[start..start + per].iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok(ImageSample {
                pixels: Image::new(h, w, c, data)?,
                label: usize::from(lab.bytes[lab.data_offset + i]),
                id: i,
            })
        })
        .collect()
}

/// Writes samples as an IDX pair, quantizing pixels to `round(255·v)`.
pub fn write_idx(samples: &[ImageSample], images: &Path, labels: &Path) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no samples to write".into()))?;
    let (h, w, c) = (first.pixels.height(), first.pixels.width(), first.pixels.channels());
    let mut dims = vec![samples.len(), h, w];
    if c != 1 {
        dims.push(c);
    }
    let mut img = (UBYTE << 8 | dims.len() as u32).to_be_bytes().to_vec();
    for d in &dims {
        img.extend_from_slice(&(*d as u32).to_be_bytes());
    }
    let mut lab = (UBYTE << 8 | 1).to_be_bytes().to_vec();
    lab.extend_from_slice(&(samples.len() as u32).to_be_bytes());
    for s in samples {
        if (s.pixels.height(), s.pixels.width(), s.pixels.channels()) != (h, w, c) {
            return Err(Error::InvalidArgument(format!("sample {} has different extents", s.id)));
        }
        let label = u8::try_from(s.label)
            .map_err(|_| Error::InvalidArgument(format!("label {} does not fit in a byte", s.label)))?;
        img.extend(s.pixels.data().iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8));
        lab.push(label);
    }
    fs::write(images, img)?;
    fs::write(labels, lab)?;
    Ok(())
}
