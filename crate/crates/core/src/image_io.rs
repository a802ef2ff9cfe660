//! 8-bit RGB PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Reads an 8-bit RGB PNG into an `[H, W, 3]` tensor in `[0, 1]`.
pub fn png_read(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| image_err(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(
            path,
            format!("expected 8-bit RGB, found {:?} at {:?}", info.color_type, info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image dimensions overflow"))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    let bytes = &buf[..frame.buffer_size()];
    if bytes.len() != h * w * 3 {
        return Err(image_err(path, format!("decoded {} bytes for {w}x{h} RGB", bytes.len())));
    }
    Tensor::new(vec![h, w, 3], bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Writes an `[H, W, 3]` tensor, clamped to `[0, 1]` and rounded to 8 bits.
pub fn png_write(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(image_err(path, format!("expected an [H, W, 3] tensor, got {s:?}")));
    }
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = File::create(path).map_err(|e| image_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), s[1] as u32, s[0] as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_pair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = Tensor::uniform(&[5, 7, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        png_write(&p, &img).unwrap();
        let back = png_read(&p).unwrap();
        assert_eq!(back.shape(), &[5, 7, 3]);
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn synthetic_images_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let (c, _) = generate_synthetic_pair(2);
        png_write(&p, &c).unwrap();
        assert!(png_read(&p).unwrap().max_abs_diff(&c) <= 1.0 / 255.0);
    }

    #[test]
    fn white_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        png_write(&p, &Tensor::ones(&[1, 1, 3])).unwrap();
        assert_eq!(png_read(&p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn truncated_file_is_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        png_write(&p, &Tensor::full(&[8, 8, 3], 0.3)).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        let err = png_read(&p).unwrap_err();
        assert!(err.to_string().contains("t.png"), "{err}");
    }

    #[test]
    fn rejects_non_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let mut enc = png::Encoder::new(File::create(&p).unwrap(), 2, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&[0, 1, 2, 3]).unwrap();
        assert!(matches!(png_read(&p), Err(Error::Image { .. })));
        assert!(png_write(&p, &Tensor::zeros(&[2, 2])).is_err());
    }
}
