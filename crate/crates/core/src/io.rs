//! Dataset files on disk.
//!
//! A dataset directory holds `<stem>.png` images next to `<stem>_mask.png`
//! masks. Masks are 8-bit grayscale with the class label as the pixel value.
//! An optional manifest lists one sample id per line.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};

use crate::data::{ImageBuffer, MaskBuffer, Sample};
use crate::error::{Error, Result};

pub const MASK_SUFFIX: &str = "_mask.png";
const PNG_EXT: &str = ".png";

/// Decodes PNG bytes into an image. Gray stays single-channel; anything with
/// color is converted to 8-bit RGB (alpha dropped). 16-bit input is rejected.
pub fn decode_image(bytes: &[u8], name: &str) -> Result<ImageBuffer> {
    let img = decode_png(bytes, name)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => ImageBuffer::new(h, w, 1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => ImageBuffer::new(h, w, 3, buf.into_raw()),
        DynamicImage::ImageLumaA8(_) => {
            ImageBuffer::new(h, w, 1, img.to_luma8().into_raw())
        }
        DynamicImage::ImageRgba8(_) => ImageBuffer::new(h, w, 3, img.to_rgb8().into_raw()),
        other => Err(Error::Decode {
            name: name.to_string(),
            message: format!("unsupported pixel format {:?}", other.color()),
        }),
    }
}

/// Decodes an 8-bit grayscale PNG mask and checks labels against `num_classes`.
pub fn decode_mask(bytes: &[u8], name: &str, num_classes: u8) -> Result<MaskBuffer> {
    let img = decode_png(bytes, name)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let DynamicImage::ImageLuma8(buf) = img else {
        return Err(Error::Decode {
            name: name.to_string(),
            message: "mask must be 8-bit single-channel".into(),
        });
    };
    let mask = MaskBuffer::new(h, w, buf.into_raw())?;
    let max = mask.max_label();
    if max > num_classes {
        return Err(Error::LabelOutOfRange {
            id: name.to_string(),
            label: max,
            max: num_classes,
        });
    }
    Ok(mask)
}

fn decode_png(bytes: &[u8], name: &str) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Decode {
        name: name.to_string(),
        message: e.to_string(),
    })
}

pub fn encode_image(img: &ImageBuffer) -> Result<Vec<u8>> {
    let color = if img.channels() == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    encode_png(img.data(), img.width(), img.height(), color)
}

pub fn encode_mask(mask: &MaskBuffer) -> Result<Vec<u8>> {
    encode_png(
        mask.labels(),
        mask.width(),
        mask.height(),
        image::ExtendedColorType::L8,
    )
}

fn encode_png(data: &[u8], w: usize, h: usize, color: image::ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    image::write_buffer_with_format(&mut out, data, w as u32, h as u32, color, ImageFormat::Png)
        .map_err(|e| Error::Encode {
            name: "png".into(),
            message: e.to_string(),
        })?;
    Ok(out.into_inner())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{PNG_EXT}"))
}

pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}{MASK_SUFFIX}"))
}

/// Sample ids found in `root`, sorted lexicographically. Fails on an image
/// without a mask or a mask without an image.
pub fn list_ids(root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(stem) = name.strip_suffix(MASK_SUFFIX) {
            masks.push(stem.to_string());
        } else if let Some(stem) = name.strip_suffix(PNG_EXT) {
            images.push(stem.to_string());
        }
    }
    images.sort();
    masks.sort();
    for id in &images {
        if masks.binary_search(id).is_err() {
            return Err(Error::MissingMask(id.clone()));
        }
    }
    for id in &masks {
        if images.binary_search(id).is_err() {
            return Err(Error::OrphanMask(id.clone()));
        }
    }
    Ok(images)
}

/// Ids of every `<stem>_mask.png` in `root`, sorted. Images are not required.
pub fn list_mask_ids(root: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if let Some(stem) = entry.file_name().to_str().and_then(|n| n.strip_suffix(MASK_SUFFIX)) {
            ids.push(stem.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_sample(root: &Path, id: &str, num_classes: u8) -> Result<Sample> {
    let ipath = image_path(root, id);
    let mpath = mask_path(root, id);
    if !mpath.exists() && ipath.exists() {
        return Err(Error::MissingMask(id.to_string()));
    }
    let image = decode_image(&read(&ipath)?, id)?;
    let mask = decode_mask(&read(&mpath)?, id, num_classes)?;
    Sample::new(id, image, mask)
}

/// Loads every pair in `root`, ordered by id.
pub fn load_dataset(root: &Path, num_classes: u8) -> Result<Vec<Sample>> {
    let ids = list_ids(root)?;
    load_samples(root, &ids, num_classes)
}

/// Loads the listed ids from `root`, ordered by id.
pub fn load_samples(root: &Path, ids: &[String], num_classes: u8) -> Result<Vec<Sample>> {
    let mut ids = ids.to_vec();
    ids.sort();
    ids.dedup();
    ids.iter().map(|id| load_sample(root, id, num_classes)).collect()
}

pub fn save_sample(dir: &Path, sample: &Sample) -> Result<()> {
    write(&image_path(dir, &sample.id), &encode_image(&sample.image)?)?;
    write(&mask_path(dir, &sample.id), &encode_mask(&sample.mask)?)
}

pub fn save_mask(path: &Path, mask: &MaskBuffer) -> Result<()> {
    write(path, &encode_mask(mask)?)
}

pub fn load_mask(path: &Path, num_classes: u8) -> Result<MaskBuffer> {
    let name = path.display().to_string();
    decode_mask(&read(path)?, &name, num_classes)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Parses a manifest: one id per line, blank lines and `#` comments skipped.
pub fn parse_manifest(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Format(format!("{}: manifest is not UTF-8", path.display())))?;
    Ok(parse_manifest(&text))
}

pub fn write_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = String::new();
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    write(path, text.as_bytes())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    read(path)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write(path, bytes)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text.as_bytes())
}
