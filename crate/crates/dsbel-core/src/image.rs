//! Grayscale images, binary PGM (P5) I/O and the byte-sequence mapping
//! that turns an executable blob into a square-ish image.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// row-major, one byte per pixel
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Data(format!(
                "pixel count {} != {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

/// Maps a byte blob onto a grayscale image: width = ceil(sqrt(len)),
/// height = ceil(len/width), trailing cells zero.
pub fn bytes_to_image(blob: &[u8]) -> Result<GrayImage> {
    if blob.is_empty() {
        return Err(Error::Data("empty blob".into()));
    }
    let len = blob.len();
    let width = (len as f64).sqrt().ceil() as usize;
    let height = len.div_ceil(width);
    let mut pixels = vec![0u8; width * height];
    pixels[..len].copy_from_slice(blob);
    GrayImage::new(width, height, pixels)
}

/// Nearest-neighbor resize to a square of side L.
/// Source index per axis: floor(dst * src_extent / L).
pub fn resize_nearest(img: &GrayImage, side: usize) -> Result<GrayImage> {
    if side == 0 {
        return Err(Error::Config("resize side must be >= 1".into()));
    }
    let mut pixels = Vec::with_capacity(side * side);
    for dy in 0..side {
        let sy = dy * img.height / side;
        for dx in 0..side {
            let sx = dx * img.width / side;
            pixels.push(img.at(sy, sx));
        }
    }
    GrayImage::new(side, side, pixels)
}

/// Writes binary PGM (P5, maxval 255).
pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    parse_pgm(&buf).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

fn parse_pgm(buf: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let width: usize = token()?.parse().map_err(|_| "bad width")?;
    let height: usize = token()?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token()?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval} (must be 255)"));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let need = width * height;
    if buf.len() < pos + need {
        return Err("truncated pixel data".into());
    }
    GrayImage::new(width, height, buf[pos..pos + need].to_vec()).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_to_image_nine_bytes() {
        let img = bytes_to_image(&[0, 1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert_eq!((img.width, img.height), (3, 3));
        assert_eq!(img.pixels, vec![0, 1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn bytes_to_image_single_byte() {
        let img = bytes_to_image(&[255]).unwrap();
        assert_eq!((img.width, img.height), (1, 1));
        assert_eq!(img.pixels, vec![255]);
    }

    #[test]
    fn bytes_to_image_pads_with_zeros() {
        let img = bytes_to_image(&[9u8; 10]).unwrap();
        assert_eq!((img.width, img.height), (4, 3));
        assert_eq!(&img.pixels[10..], &[0, 0]);
    }

    #[test]
    fn bytes_to_image_rejects_empty() {
        assert!(bytes_to_image(&[]).is_err());
    }

    #[test]
    fn bytes_to_image_invertible_up_to_padding() {
        let blob: Vec<u8> = (0..=200u8).cycle().take(1234).collect();
        let img = bytes_to_image(&blob).unwrap();
        assert_eq!(&img.pixels[..blob.len()], &blob[..]);
    }

    #[test]
    fn resize_identity() {
        let img = GrayImage::new(2, 2, vec![0, 255, 255, 0]).unwrap();
        assert_eq!(resize_nearest(&img, 2).unwrap(), img);
    }

    #[test]
    fn resize_upsample_blocks() {
        let img = GrayImage::new(2, 2, vec![0, 255, 255, 0]).unwrap();
        let up = resize_nearest(&img, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(up.at(y, x), img.at(y / 2, x / 2));
            }
        }
    }

    #[test]
    fn resize_to_one_takes_top_left() {
        let img = GrayImage::new(3, 2, vec![7, 1, 2, 3, 4, 5]).unwrap();
        let one = resize_nearest(&img, 1).unwrap();
        assert_eq!(one.pixels, vec![7]);
    }

    #[test]
    fn pgm_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = GrayImage::new(5, 3, (0..15u8).collect()).unwrap();
        write_pgm(&img, &path).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
        // second write is byte-identical
        let bytes1 = std::fs::read(&path).unwrap();
        write_pgm(&img, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes1);
    }

    #[test]
    fn pgm_rejects_wrong_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
