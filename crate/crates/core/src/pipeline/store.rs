//! On-disk layout of a distilled dataset.
//!
//! ```text
//! config.txt                 key=value lines
//! manifest.tsv               one row per patch, header first
//! images/<class>/<idx>.ppm   binary PPM, 8-bit
//! labels/<class>/<idx>.bin   u32 LE label count, then per label
//!                            u32 LE length + f64 LE probabilities
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{derived_seeds, DistillConfig, DistilledDataset, DistilledImage, KeyValues, PatchRecord};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::SoftLabel;
use crate::patch::CropOrigin;

const MANIFEST_HEADER: &str =
    "class\timage\tpatch\tsource_id\torigin_row\torigin_col\tcrop_index\tgradnorm\tloss\tlabel_epoch\ttemperature";

fn format_error(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn config_text(ds: &DistilledDataset) -> String {
    let mut out = ds.config.to_text();
    let channels = ds.images.first().map_or(0, |i| i.pixels.channels());
    let _ = writeln!(out, "classes={}", ds.classes);
    let _ = writeln!(out, "channels={channels}");
    for (name, value) in derived_seeds(ds.config.seed) {
        let _ = writeln!(out, "seed.{name}={value}");
    }
    out
}

fn manifest_text(ds: &DistilledDataset) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for img in &ds.images {
        for (p, patch) in img.patches.iter().enumerate() {
            let (row, col) = match patch.origin {
                Some(o) => (o.row.to_string(), o.col.to_string()),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:?}\t{:?}\t{}\t{:?}",
                img.class,
                img.index,
                p,
                patch.source_id,
                row,
                col,
                patch.crop_index,
                patch.gradnorm,
                patch.loss,
                patch.label.source_epoch,
                patch.label.temperature
            );
        }
    }
    out
}

fn label_bytes(patches: &[PatchRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(patches.len() as u32).to_le_bytes());
    for p in patches {
        out.extend_from_slice(&(p.label.probs.len() as u32).to_le_bytes());
        for v in &p.label.probs {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes `ds` under `dir`, creating it if needed. Output bytes depend only
/// on the dataset contents.
pub fn write_distilled(ds: &DistilledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), config_text(ds))?;
    fs::write(dir.join("manifest.tsv"), manifest_text(ds))?;
    for img in &ds.images {
        let class = img.class.to_string();
        let image_dir = dir.join("images").join(&class);
        let label_dir = dir.join("labels").join(&class);
        fs::create_dir_all(&image_dir)?;
        fs::create_dir_all(&label_dir)?;
        let mut ppm = Vec::new();
        img.pixels.write_ppm(&mut ppm)?;
        fs::write(image_dir.join(format!("{}.ppm", img.index)), ppm)?;
        fs::write(label_dir.join(format!("{}.bin", img.index)), label_bytes(&img.patches))?;
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(format_error(path, pos, "truncated label file"));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let probs = (0..len)
            .map(|_| take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(probs);
    }
    if pos != bytes.len() {
        return Err(format_error(path, pos, "trailing bytes in label file"));
    }
    Ok(out)
}

struct Row {
    class: usize,
    image: usize,
    patch: usize,
    record: PatchRecord,
}

fn parse_row(path: &Path, offset: usize, line: &str) -> Result<Row> {
    let bad = |m: &str| format_error(path, offset, m);
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 11 {
        return Err(bad("manifest row must have 11 fields"));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer field"));
    let real = |s: &str| s.parse::<f64>().map_err(|_| bad("bad real field"));
    let origin = match (f[4], f[5]) {
        ("-", "-") => None,
        (r, c) => Some(CropOrigin { row: int(r)?, col: int(c)? }),
    };
    Ok(Row {
        class: int(f[0])?,
        image: int(f[1])?,
        patch: int(f[2])?,
        record: PatchRecord {
            source_id: int(f[3])?,
            origin,
            crop_index: int(f[6])?,
            gradnorm: real(f[7])?,
            loss: real(f[8])?,
            label: SoftLabel {
                probs: Vec::new(),
                source_epoch: int(f[9])?,
                temperature: real(f[10])?,
            },
        },
    })
}

/// Reads a directory written by [`write_distilled`].
pub fn read_distilled(dir: &Path) -> Result<DistilledDataset> {
    let config_path = dir.join("config.txt");
    let mut kv = KeyValues::parse(&fs::read_to_string(&config_path)?)?;
    let (mut classes, mut channels) = (0usize, 3usize);
    kv.take("classes", &mut classes)?;
    kv.take("channels", &mut channels)?;
    let mut config = DistillConfig::default();
    config.apply(&mut kv)?;
    for (name, value) in derived_seeds(config.seed) {
        let mut stored = value;
        kv.take(&format!("seed.{name}"), &mut stored)?;
        if stored != value {
            return Err(Error::Config(format!("seed.{name} does not match the master seed")));
        }
    }
    kv.finish()?;
    config.validate()?;

    let manifest_path = dir.join("manifest.tsv");
    let manifest = fs::read_to_string(&manifest_path)?;
    let mut lines = manifest.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(format_error(&manifest_path, 0, "unexpected manifest header"));
    }
    let mut offset = MANIFEST_HEADER.len() + 1;
    let mut images: Vec<DistilledImage> = Vec::new();
    for line in lines {
        let row = parse_row(&manifest_path, offset, line)?;
        offset += line.len() + 1;
        let new_image = images
            .last()
            .map_or(true, |img| (img.class, img.index) != (row.class, row.image));
        if new_image {
            let ppm = dir.join("images").join(row.class.to_string()).join(format!("{}.ppm", row.image));
            let mut pixels = Image::read_ppm(&ppm)?;
            if channels == 1 {
                let gray = pixels.data().chunks_exact(3).map(|px| px[0]).collect();
                pixels = Image::new(pixels.height(), pixels.width(), 1, gray)?;
            }
            images.push(DistilledImage {
                class: row.class,
                index: row.image,
                pixels,
                patches: Vec::new(),
            });
        }
        let img = images.last_mut().expect("image pushed above");
        if row.patch != img.patches.len() {
            return Err(format_error(&manifest_path, offset, "patch rows out of order"));
        }
        img.patches.push(row.record);
    }
    for img in &mut images {
        let path = dir
            .join("labels")
            .join(img.class.to_string())
            .join(format!("{}.bin", img.index));
        let labels = read_labels(&path)?;
        if labels.len() != img.patches.len() {
            return Err(format_error(&path, 0, "label count does not match the manifest"));
        }
        for (patch, probs) in img.patches.iter_mut().zip(labels) {
            patch.label.probs = probs;
        }
    }
    Ok(DistilledDataset {
        config,
        classes,
        images,
    })
}
