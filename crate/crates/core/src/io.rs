//! Image files: PFM (float32, little-endian, authoritative) and 8-bit PNG
//! previews.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Encode a 1- or 3-channel image as PFM. Rows are stored bottom to top as
/// the format prescribes; values are rounded to f32.
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::arg(format!("PFM supports 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let fail = |offset: usize, msg: &str| Error::Format {
        what: "PFM",
        offset,
        msg: msg.to_string(),
    };
    // Three whitespace-terminated header tokens after the tag line.
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<(usize, String)> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos || *pos >= bytes.len() {
            return Err(fail(start, "truncated header"));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };
    let (at, tag) = token(&mut pos)?;
    let channels = match tag.as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(fail(at, "expected PF or Pf")),
    };
    let (at, w) = token(&mut pos)?;
    let width: usize = w.parse().map_err(|_| fail(at, "bad width"))?;
    let (at, h) = token(&mut pos)?;
    let height: usize = h.parse().map_err(|_| fail(at, "bad height"))?;
    let (at, s) = token(&mut pos)?;
    let scale: f64 = s.parse().map_err(|_| fail(at, "bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(fail(at, "bad scale"));
    }
    if width == 0 || height == 0 {
        return Err(fail(at, "empty image"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height * channels;
    if bytes.len() < pos || bytes.len() - pos != n * 4 {
        return Err(fail(pos.min(bytes.len()), &format!("expected {} raster bytes", n * 4)));
    }
    let raster = &bytes[pos..];
    let read = |i: usize| {
        let b: [u8; 4] = raster[i * 4..i * 4 + 4].try_into().unwrap();
        if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let row = width * channels;
    let mut data = vec![0.0; n];
    for (file_row, y) in (0..height).rev().enumerate() {
        for k in 0..row {
            data[y * row + k] = read(file_row * row + k) as f64;
        }
    }
    Image::from_data(width, height, channels, data)
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pfm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes).map_err(|e| match e {
        Error::Format { offset, msg, .. } => Error::Format {
            what: "PFM",
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_rgb8(img: &Image, f: impl Fn(f64) -> f64) -> Result<::image::RgbImage> {
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::arg(format!("PNG export supports 1 or 3 channels, got {}", img.channels)));
    }
    let mut out = ::image::RgbImage::new(img.width as u32, img.height as u32);
    for (p, px) in out.pixels_mut().enumerate() {
        let src = img.pixel(p);
        let c = |k: usize| quantize(f(src[k.min(img.channels - 1)]));
        *px = ::image::Rgb([c(0), c(1), c(2)]);
    }
    Ok(out)
}

fn save_png(path: &Path, rgb: ::image::RgbImage) -> Result<()> {
    rgb.save_with_format(path, ::image::ImageFormat::Png)
        .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))
}

/// Gamma-2.2 8-bit preview of a linear image (lossy).
pub fn write_png_preview(path: &Path, img: &Image) -> Result<()> {
    save_png(path, to_rgb8(img, |v| v.max(0.0).powf(1.0 / 2.2))?)
}

/// Normal map as 8-bit PNG with `(n + 1) / 2` encoding.
pub fn write_normal_png(path: &Path, normals: &Image) -> Result<()> {
    save_png(path, to_rgb8(normals, |v| (v + 1.0) * 0.5)?)
}

/// Inverse of [`write_normal_png`]; not renormalized.
pub fn read_normal_png(path: &Path) -> Result<Image> {
    let rgb = ::image::open(path)
        .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0 * 2.0 - 1.0).collect();
    Image::from_data(w, h, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pfm_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for channels in [1, 3] {
            let data = (0..7 * 5 * channels).map(|_| rng.random_range(-10.0f32..10.0) as f64).collect();
            let img = Image::from_data(7, 5, channels, data).unwrap();
            let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn pfm_rejects_bad_headers() {
        let err = decode_pfm(b"P6\n2 2\n-1.0\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        let err = decode_pfm(b"PF\n2 x\n-1.0\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 5, .. }), "{err}");
        assert!(decode_pfm(b"PF\n2 2\n-1.0\n\0\0").is_err());
    }

    #[test]
    fn normal_png_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normals: Vec<crate::Vec3> = (0..64)
            .map(|_| crate::Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize())
            .collect();
        let img = Image::from_vec3(8, 8, &normals);
        let path = dir.path().join("n.png");
        write_normal_png(&path, &img).unwrap();
        let back = read_normal_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            // Rounding error is half a step in [0,1], i.e. 1/255 in [-1,1].
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12, "{a} vs {b}");
        }
    }
}
