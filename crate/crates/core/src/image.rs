//! Dense H×W×C images and labeled samples.

use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major, channel-interleaved (HWC) image with `f64` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "image extents must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "image buffer length",
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    /// Copies the `h`×`w` window whose top-left pixel is (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || row + h > self.height || col + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {h}x{w} at ({row},{col}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for r in row..row + h {
            let start = self.index(r, col, 0);
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Image::new(h, w, c, data)
    }

    /// Writes `src` into this image with its top-left pixel at (`row`, `col`).
    pub fn paste(&mut self, src: &Image, row: usize, col: usize) -> Result<()> {
        if src.channels != self.channels
            || row + src.height > self.height
            || col + src.width > self.width
        {
            return Err(Error::InvalidArgument(format!(
                "cannot paste {}x{}x{} at ({row},{col}) into {}x{}x{}",
                src.height, src.width, src.channels, self.height, self.width, self.channels
            )));
        }
        let c = self.channels;
        for r in 0..src.height {
            let dst = self.index(row + r, col, 0);
            let s = src.index(r, 0, 0);
            self.data[dst..dst + src.width * c].copy_from_slice(&src.data[s..s + src.width * c]);
        }
        Ok(())
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    /// Resizing to the current extents returns an exact copy.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(
                "resize target must have positive extents".into(),
            ));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let c = self.channels;
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let taps = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut out = Image::filled(height, width, c, 0.0);
        for r in 0..height {
            let (r0, r1, fy) = taps(r, sy, self.height);
            for col in 0..width {
                let (c0, c1, fx) = taps(col, sx, self.width);
                for ch in 0..c {
                    let top = self.get(r0, c0, ch) * (1.0 - fx) + self.get(r0, c1, ch) * fx;
                    let bot = self.get(r1, c0, ch) * (1.0 - fx) + self.get(r1, c1, ch) * fx;
                    out.set(r, col, ch, top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Ok(out)
    }

    /// Per-channel arithmetic mean.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = (self.height * self.width) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    fn to_bytes(&self, channels_out: usize) -> Vec<u8> {
        let q = |v: f64| (255.0 * v).round().clamp(0.0, 255.0) as u8;
        let mut out = Vec::with_capacity(self.height * self.width * channels_out);
        for px in self.data.chunks_exact(self.channels) {
            match (self.channels, channels_out) {
                (1, 3) => out.extend_from_slice(&[q(px[0]); 3]),
                (3, 1) => out.push(q((px[0] + px[1] + px[2]) / 3.0)),
                _ => out.extend(px.iter().map(|&v| q(v))),
            }
        }
        out
    }

    /// Binary PPM (P6), 8-bit, `round(255·value)`. Single-channel images are
    /// replicated to gray RGB.
    pub fn write_ppm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_bytes(3))
    }

    /// Binary PGM (P5), 8-bit. Multi-channel images are averaged to gray.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_bytes(1))
    }

    /// Reads a binary PPM written by [`Image::write_ppm`] as a 3-channel image.
    pub fn read_ppm(path: &Path) -> Result<Image> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let fmt = |offset: usize, message: &str| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: message.to_string(),
        };
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(fmt(pos, "truncated PPM header"));
            }
            fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
        }
        pos += 1;
        if fields[0].1 != "P6" {
            return Err(fmt(0, "expected P6 magic"));
        }
        let num = |i: usize| -> Result<usize> {
            fields[i]
                .1
                .parse()
                .map_err(|_| fmt(fields[i].0, "bad PPM header field"))
        };
        let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval != 255 {
            return Err(fmt(fields[3].0, "only 8-bit PPM is supported"));
        }
        let len = width * height * 3;
        if bytes.len() < pos + len {
            return Err(fmt(bytes.len(), "truncated PPM pixel data"));
        }
        let data = bytes[pos..pos + len]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        Image::new(height, width, 3, data)
    }
}

/// An image with its class label and source index.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Image,
    pub label: usize,
    pub id: usize,
}
