//! IDX image/label files (big-endian dimensions, magic 0x0803 for images and
//! 0x0801 for labels), with optional per-side cropping. Pixels are scaled to
//! [0,1] and flattened row-major.

use super::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const IMAGE_MAGIC: u32 = 0x0803;
pub const LABEL_MAGIC: u32 = 0x0801;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl CropSpec {
    pub fn all_sides(n: usize) -> Self {
        CropSpec { top: n, bottom: n, left: n, right: n }
    }

    pub fn left_right(n: usize) -> Self {
        CropSpec { top: 0, bottom: 0, left: n, right: n }
    }
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::Data(format!("truncated IDX file: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

pub fn load_idx_images(
    images_path: &Path,
    labels_path: &Path,
    crop: CropSpec,
) -> Result<Dataset> {
    let mut imgs = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut imgs)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Data(format!("bad IDX image magic {magic:#x}, expected 0x0803")));
    }
    let count = read_u32_be(&mut imgs)? as usize;
    let h = read_u32_be(&mut imgs)? as usize;
    let w = read_u32_be(&mut imgs)? as usize;
    if crop.top + crop.bottom >= h || crop.left + crop.right >= w {
        return Err(Error::Config(format!("crop {crop:?} swallows the whole {h}x{w} image")));
    }
    let mut pixels = vec![0u8; count * h * w];
    imgs.read_exact(&mut pixels)
        .map_err(|e| Error::Data(format!("truncated IDX image payload: {e}")))?;

    let mut lbls = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut lbls)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Data(format!("bad IDX label magic {magic:#x}, expected 0x0801")));
    }
    let label_count = read_u32_be(&mut lbls)? as usize;
    if label_count != count {
        return Err(Error::Data(format!("{label_count} labels for {count} images")));
    }
    let mut labels = vec![0u8; count];
    lbls.read_exact(&mut labels)
        .map_err(|e| Error::Data(format!("truncated IDX label payload: {e}")))?;

    let (ch, cw) = (h - crop.top - crop.bottom, w - crop.left - crop.right);
    let mut x = Tensor::zeros(count, ch * cw);
    for img in 0..count {
        let base = img * h * w;
        for r in 0..ch {
            for c in 0..cw {
                let p = pixels[base + (r + crop.top) * w + (c + crop.left)];
                x.data[img * ch * cw + r * cw + c] = p as f64 / 255.0;
            }
        }
    }
    let classes: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let class_count = classes.iter().max().map_or(0, |&m| m + 1);
    let ds = Dataset {
        x,
        targets: Targets::Classes(classes),
        class_count,
        provenance: format!("{} (crop {crop:?})", images_path.display()),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_idx_images(path: &Path, images: &[Vec<u8>], h: usize, w: usize) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    out.write_all(&(images.len() as u32).to_be_bytes())?;
    out.write_all(&(h as u32).to_be_bytes())?;
    out.write_all(&(w as u32).to_be_bytes())?;
    for img in images {
        if img.len() != h * w {
            return Err(Error::Data(format!("image has {} pixels, expected {}", img.len(), h * w)));
        }
        out.write_all(img)?;
    }
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&LABEL_MAGIC.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    out.write_all(labels)?;
    Ok(())
}
