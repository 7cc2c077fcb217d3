//! 8-bit PGM/PPM previews.

use std::fs;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::pseudo::{ConfidenceMasks, PseudoLabel};
use crate::synth::PALETTE;
use crate::tensor::Tensor;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM of a `(3, H, W)` image with values in `[0, 1]`.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(invalid(format!("PPM needs a (3, H, W) image, got {:?}", image.shape())));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let plane = h * w;
    let d = image.data();
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    buf.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            buf.push(to_byte(d[c * plane + p]));
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Binary PGM of an `H x W` grey map with values in `[0, 1]`.
pub fn write_pgm(path: impl AsRef<Path>, h: usize, w: usize, values: &[f32]) -> Result<()> {
    if values.len() != h * w {
        return Err(invalid(format!("PGM needs {} values, got {}", h * w, values.len())));
    }
    let mut buf = format!("P5\n{w} {h}\n255\n").into_bytes();
    buf.extend(values.iter().map(|&v| to_byte(v)));
    fs::write(path, buf)?;
    Ok(())
}

/// Confident pixels white, uncertain black.
pub fn write_confidence(path: impl AsRef<Path>, masks: &ConfidenceMasks) -> Result<()> {
    let v: Vec<f32> = masks.confident.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    write_pgm(path, masks.h, masks.w, &v)
}

/// Label map coloured with the scene palette; ignored pixels are black.
pub fn write_labels(path: impl AsRef<Path>, labels: &PseudoLabel) -> Result<()> {
    let plane = labels.h * labels.w;
    let mut img = vec![0f32; 3 * plane];
    for (p, &l) in labels.data.iter().enumerate() {
        if let Some(c) = PALETTE.get(l as usize).filter(|_| (l as usize) < labels.k) {
            for ch in 0..3 {
                img[ch * plane + p] = c[ch];
            }
        }
    }
    write_ppm(path, &Tensor::new(vec![3, labels.h, labels.w], img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &Tensor::full(&[3, 2, 5], 1.0)).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n5 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 30);
        assert!(bytes[11..].iter().all(|&b| b == 255));
    }

    #[test]
    fn pgm_rejects_wrong_length() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_pgm(dir.path().join("a.pgm"), 2, 2, &[0.0; 3]).is_err());
    }
}
