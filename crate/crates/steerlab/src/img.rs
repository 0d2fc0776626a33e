//! Binary PPM (P6) and PGM (P5) image files.
//!
//! Images travel as `[3, h, w]` tensors in `[0, 1]`, masks and grayscale
//! maps as `[h, w]`. Quantization to 8-bit rounds half away from zero and
//! clamps, so re-reading a written file is stable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use steerlab_nn::Tensor;

use crate::error::{LabError, Result};

fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write an RGB `[3, h, w]` tensor as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(LabError::Invalid(format!("ppm wants 3 channels, got {c}")));
    }
    let mut out = BufWriter::new(File::create(path).map_err(|e| LabError::io(path, e))?);
    let d = image.data();
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(to_byte(d[(ch * h + y) * w + x]));
            }
        }
    }
    (|| -> std::io::Result<()> {
        write!(out, "P6\n{w} {h}\n255\n")?;
        out.write_all(&buf)?;
        out.flush()
    })()
    .map_err(|e| LabError::io(path, e))?;
    Ok(())
}

/// Write a grayscale `[h, w]` tensor as binary PGM.
pub fn write_pgm(path: &Path, gray: &Tensor) -> Result<()> {
    let (h, w) = gray.dims2()?;
    let mut out = BufWriter::new(File::create(path).map_err(|e| LabError::io(path, e))?);
    let buf: Vec<u8> = gray.data().iter().map(|&v| to_byte(v)).collect();
    (|| -> std::io::Result<()> {
        write!(out, "P5\n{w} {h}\n255\n")?;
        out.write_all(&buf)?;
        out.flush()
    })()
    .map_err(|e| LabError::io(path, e))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let (w, h, data) = read_netpbm(path, b"P6", 3)?;
    let mut planar = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                planar[(ch * h + y) * w + x] = data[(y * w + x) * 3 + ch] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(vec![3, h, w], planar)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let (w, h, data) = read_netpbm(path, b"P5", 1)?;
    let gray: Vec<f32> = data.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_vec(vec![h, w], gray)?)
}

fn read_netpbm(path: &Path, magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| LabError::io(path, e))?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| LabError::io(path, e))?;
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(LabError::Invalid(format!("{}: wrong magic", path.display())));
    }
    // header = magic, width, height, maxval as whitespace-separated tokens
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| LabError::Invalid(format!("{}: bad header", path.display())))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(LabError::Invalid(format!("{}: maxval {maxval} unsupported", path.display())));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * channels;
    if bytes.len() - pos != need {
        return Err(LabError::Invalid(format!(
            "{}: payload {} bytes, expected {need}",
            path.display(),
            bytes.len() - pos
        )));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let img = Tensor::from_vec(
            vec![3, 2, 2],
            vec![0.0, 0.5, 1.0, 0.25, 0.1, 0.9, 0.3, 0.7, 0.2, 0.8, 0.4, 0.6],
        )
        .unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        for (&a, &b) in img.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // writing the read-back image again is byte-stable
        let path2 = dir.path().join("t2.ppm");
        write_ppm(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn pgm_mask_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Tensor::from_vec(vec![2, 3], vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        write_pgm(&path, &mask).unwrap();
        let back = read_pgm(&path).unwrap();
        assert!(mask.bits_eq(&back));
    }
}
