use std::fs;
use std::path::Path;

use super::{Image, CHANNELS};
use crate::error::{Error, Result};

/// Binary 8-bit PPM (P6). Values are quantized as `round(v·255)`; values outside
/// `[0, 1]` are clamped and reported once per image.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let (h, w) = (image.height, image.width);
    let header = format!("P6\n{w} {h}\n255\n");
    let mut out = Vec::with_capacity(header.len() + h * w * CHANNELS);
    out.extend_from_slice(header.as_bytes());
    let mut clamped = 0usize;
    for i in 0..h * w {
        for c in 0..CHANNELS {
            let v = image.data[c * h * w + i];
            if !(0.0..=1.0).contains(&v) {
                clamped += 1;
            }
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((v * 255.0).round() as u8);
        }
    }
    if clamped > 0 {
        log::warn!("ppm export: clamped {clamped} out-of-range values to [0, 1]");
    }
    out
}

pub fn export_ppm(image: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &[u8] = b"P6\n2 3\n255\n";

    #[test]
    fn black_image() {
        let bytes = encode_ppm(&Image::filled(3, 2, 0.0));
        assert_eq!(&bytes[..HEADER.len()], HEADER);
        assert!(bytes[HEADER.len()..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), HEADER.len() + 18);
    }

    #[test]
    fn white_image() {
        let bytes = encode_ppm(&Image::filled(3, 2, 1.0));
        assert!(bytes[HEADER.len()..].iter().all(|&b| b == 255));
    }

    #[test]
    fn half_rounds_up() {
        let bytes = encode_ppm(&Image::filled(3, 2, 0.5));
        assert!(bytes[HEADER.len()..].iter().all(|&b| b == 128));
    }

    #[test]
    fn out_of_range_clamped_and_interleaved() {
        let mut img = Image::filled(1, 1, 0.0);
        img.data = vec![1.7, -0.2, 0.2];
        let bytes = encode_ppm(&img);
        assert_eq!(&bytes[bytes.len() - 3..], &[255, 0, 51]);
    }
}
