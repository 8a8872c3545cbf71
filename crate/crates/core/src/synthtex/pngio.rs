use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Writes a `[3, H, W]` image in `[0, 1]` as a 16-bit RGB PNG.
pub fn write_rgb16<T: Real>(path: &Path, img: &Tensor<T>) -> Result<()> {
    if img.shape().len() != 3 || img.dim(0) != 3 {
        return Err(Error::Shape(format!("expected [3, H, W], got {:?}", img.shape())));
    }
    let (h, w) = (img.dim(1), img.dim(2));
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut bytes = Vec::with_capacity(h * w * 6);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.at3(c, y, x).to_f64_lossy().clamp(0.0, 1.0);
                bytes.extend_from_slice(&((v * 65535.0).round() as u16).to_be_bytes());
            }
        }
    }
    enc.write_header()?.write_image_data(&bytes)?;
    Ok(())
}

pub fn read_rgb16<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Format(format!("{}: expected 16-bit RGB", path.display())));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let o = ((y * w + x) * 3 + c) * 2;
                let v = u16::from_be_bytes([buf[o], buf[o + 1]]);
                out.set3(c, y, x, T::lit(v as f64 / 65535.0));
            }
        }
    }
    Ok(out)
}

/// Writes a row-major visibility mask as a 1-bit grayscale PNG.
pub fn write_mask(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::Shape(format!("mask has {} entries for {h}x{w}", mask.len())));
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let stride = w.div_ceil(8);
    let mut bytes = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                bytes[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    enc.write_header()?.write_image_data(&bytes)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
        return Err(Error::Format(format!("{}: expected 1-bit grayscale", path.display())));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = info.line_size;
    let mask = (0..h * w).map(|i| buf[(i / w) * stride + (i % w) / 8] & (0x80 >> (i % w % 8)) != 0).collect();
    Ok((mask, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Tensor::<f64>::zeros(&[3, 5, 7]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).fract();
        }
        let p = dir.path().join("a.png");
        write_rgb16(&p, &img).unwrap();
        let back: Tensor<f64> = read_rgb16(&p).unwrap();
        assert!(back.zip_map(&img, |a, b| a - b).unwrap().max_abs() <= 0.5 / 65535.0 + 1e-12);
        let mask: Vec<bool> = (0..35).map(|i| i % 3 != 0).collect();
        let q = dir.path().join("m.png");
        write_mask(&q, &mask, 5, 7).unwrap();
        assert_eq!(read_mask(&q).unwrap(), (mask, 5, 7));
    }
}
