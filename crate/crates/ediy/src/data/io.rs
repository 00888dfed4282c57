//! Dataset file formats: binary PPM (P6), PNG, and the optional
//! `labels.tsv` sidecar (`filename<TAB>integer` per line).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Loads every supported image in the directory, sorted lexicographically by
/// filename, and attaches labels from `labels.tsv` when present.
pub fn load_dataset(dir: &Path) -> Result<Vec<Image>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let lower = name.to_ascii_lowercase();
        if lower.ends_with(".ppm") || lower.ends_with(".png") {
            files.push(name);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no supported image files (.ppm, .png) in {}",
            dir.display()
        )));
    }
    let labels = read_labels(&dir.join("labels.tsv"))?;
    let mut images = Vec::with_capacity(files.len());
    for name in &files {
        let path = dir.join(name);
        let mut img = read_image(&path)?;
        img.label = labels.get(name).copied();
        images.push(img);
    }
    Ok(images)
}

/// Decodes one PPM or PNG file into an [`Image`].
pub fn read_image(path: &Path) -> Result<Image> {
    let lower = path.to_string_lossy().to_ascii_lowercase();
    if lower.ends_with(".ppm") {
        read_ppm(path)
    } else if lower.ends_with(".png") {
        read_png(path)
    } else {
        Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: "unsupported extension (expected .ppm or .png)".into(),
        })
    }
}

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, u32>> {
    let mut labels = BTreeMap::new();
    if !path.exists() {
        return Ok(labels);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let (name, value) = (parts.next(), parts.next());
        let (Some(name), Some(value)) = (name, value) else {
            return Err(ingestion(path, format!("line {}: expected filename<TAB>label", lineno + 1)));
        };
        let label: u32 = value.trim().parse().map_err(|_| {
            ingestion(path, format!("line {}: label '{}' is not a non-negative integer", lineno + 1, value))
        })?;
        labels.insert(name.to_string(), label);
    }
    Ok(labels)
}

fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;

    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ingestion(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    if magic != "P6" {
        return Err(ingestion(path, format!("magic '{magic}' is not P6")));
    }
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| ingestion(path, "bad width"))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| ingestion(path, "bad height"))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| ingestion(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(ingestion(path, format!("unsupported maxval {maxval} (expected 255)")));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(ingestion(
            path,
            format!("pixel payload truncated: need {need} bytes, have {}", bytes.len() - pos),
        ));
    }
    let raw = &bytes[pos..pos + need];
    let mut data = vec![0.0f32; need];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                data[(c * height + y) * width + x] =
                    raw[(y * width + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Image::new(Tensor::from_parts(vec![3, height, width], data), None).map_err(|e| match e {
        Error::Dimension { reason, .. } => ingestion(path, reason),
        other => other,
    })
}

fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| ingestion(path, format!("png decode: {e}")))?;
    let rgb = decoded.to_rgb8();
    let (width, height) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f32; 3 * width * height];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * height + y as usize) * width + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Image::new(Tensor::from_parts(vec![3, height, width], data), None).map_err(|e| match e {
        Error::Dimension { reason, .. } => ingestion(path, reason),
        other => other,
    })
}

/// Writes an image as binary PPM (P6, 8 bits per sample).
pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let (w, h) = (image.width(), image.height());
    write!(out, "P6\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
    let mut raw = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                raw[(y * w + x) * 3 + c] = (image.at(c, y, x) * 255.0).round() as u8;
            }
        }
    }
    out.write_all(&raw).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes a single-channel map as binary PGM (P5, 8 bits per sample); values
/// are expected in `[0, 1]`.
pub fn write_pgm(path: &Path, values: &Tensor<f32>) -> Result<()> {
    if values.rank() != 2 {
        return Err(Error::dim("write_pgm", "expected rank-2 map"));
    }
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
    let raw: Vec<u8> = values
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&raw).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes `labels.tsv` for a set of named labels.
pub fn write_labels(path: &Path, labels: &BTreeMap<String, u32>) -> Result<()> {
    let mut text = String::new();
    for (name, label) in labels {
        text.push_str(&format!("{name}\t{label}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_image(h: usize, w: usize, value: f32) -> Image {
        Image::new(Tensor::filled(&[3, h, w], value), None).unwrap()
    }

    #[test]
    fn ppm_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let mut img = flat_image(16, 20, 0.0);
        // gradient so every byte value differs
        {
            let px = img.pixels().clone();
            let mut data = px.into_data();
            for (i, v) in data.iter_mut().enumerate() {
                *v = (i % 256) as f32 / 255.0;
            }
            img = Image::new(Tensor::new(vec![3, 16, 20], data).unwrap(), None).unwrap();
        }
        write_ppm(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.pixels(), img.pixels());
        write_ppm(&dir.path().join("y.ppm"), &back).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(dir.path().join("y.ppm")).unwrap()
        );
    }

    #[test]
    fn load_dataset_sorts_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["c.ppm", "a.ppm", "b.ppm"] {
            write_ppm(&dir.path().join(name), &flat_image(16, 16, 0.5)).unwrap();
        }
        let mut labels = BTreeMap::new();
        labels.insert("a.ppm".to_string(), 0u32);
        labels.insert("b.ppm".to_string(), 2u32);
        write_labels(&dir.path().join("labels.tsv"), &labels).unwrap();
        let images = load_dataset(dir.path()).unwrap();
        assert_eq!(images.len(), 3);
        assert_eq!(images[0].label, Some(0));
        assert_eq!(images[1].label, Some(2));
        assert_eq!(images[2].label, None);
    }

    #[test]
    fn all_black_image_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("black.ppm");
        write_ppm(&path, &flat_image(32, 32, 0.0)).unwrap();
        let img = read_image(&path).unwrap();
        assert!(img.pixels().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn undersized_image_is_an_ingestion_error_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.ppm");
        // write an 8-wide P6 by hand (Image::new would reject it)
        let mut bytes = b"P6\n8 16\n255\n".to_vec();
        bytes.extend(std::iter::repeat(0u8).take(8 * 16 * 3));
        fs::write(&path, bytes).unwrap();
        let err = read_image(&path).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }), "{err}");
        assert!(err.to_string().contains("tiny.ppm"));
    }

    #[test]
    fn empty_directory_is_a_configuration_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn truncated_ppm_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ppm");
        fs::write(&path, b"P6\n16 16\n255\nshort").unwrap();
        assert!(matches!(read_image(&path), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn png_round_trip_via_image_crate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut buf = image::RgbImage::new(16, 16);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            *p = image::Rgb([(x * 16) as u8, (y * 16) as u8, 128]);
        }
        buf.save_with_format(&path, image::ImageFormat::Png).unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!(img.width(), 16);
        assert!((img.at(2, 0, 0) - 128.0 / 255.0).abs() < 1e-6);
    }
}
