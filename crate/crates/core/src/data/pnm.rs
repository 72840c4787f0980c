//! 8-bit binary PGM (P5) and PPM (P6).

use crate::error::{bail, Result};
use crate::model::Image;
use std::io::{Read, Write};
use std::path::Path;

pub fn write_pnm<W: Write>(mut w: W, img: &Image) -> Result<()> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    write!(w, "{magic}\n{} {}\n255\n", img.width(), img.height())?;
    let bytes: Vec<u8> = img.pixels().iter().map(|&v| (v * 255.0).round() as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_pnm<R: Read>(mut r: R) -> Result<Image> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!(Format, "truncated image header");
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => bail!(Format, "unsupported image magic {m:?}"),
    };
    let num = |s: String| -> Result<usize> {
        s.parse().map_err(|_| crate::Error::Format(format!("bad image header field {s:?}")))
    };
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        bail!(Format, "only 8-bit images are supported, maxval {maxval}");
    }
    // single whitespace byte separates header and raster
    let start = pos + 1;
    let n = width * height * channels;
    if buf.len() < start + n {
        bail!(Format, "image raster holds {} bytes, expected {n}", buf.len().saturating_sub(start));
    }
    let px = buf[start..start + n].iter().map(|&b| b as f64 / maxval as f64).collect();
    Image::new(height, width, channels, px)
}

pub fn save_pnm(path: &Path, img: &Image) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_pnm(&mut w, img)?;
    w.flush()?;
    Ok(())
}

pub fn load_pnm(path: &Path) -> Result<Image> {
    read_pnm(std::fs::File::open(path)?)
}

/// Rounds pixels to the nearest 8-bit level, as a save/load cycle would.
pub fn quantize(img: &Image) -> Image {
    let px = img.pixels().iter().map(|&v| (v * 255.0).round() / 255.0).collect();
    Image::new(img.height(), img.width(), img.channels(), px)
        .expect("same geometry")
        .with_label(img.modality_label.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_and_color_round_trip() {
        for c in [1, 3] {
            let px: Vec<f64> = (0..2 * 3 * c).map(|i| i as f64 / 17.0).collect();
            let img = quantize(&Image::new(2, 3, c, px).unwrap());
            let mut buf = Vec::new();
            write_pnm(&mut buf, &img).unwrap();
            let back = read_pnm(buf.as_slice()).unwrap();
            assert_eq!(back.pixels(), img.pixels());
            assert_eq!((back.height(), back.width(), back.channels()), (2, 3, c));
        }
    }

    #[test]
    fn header_comments_and_errors() {
        let mut data = b"P5\n# comment\n2 1\n255\n".to_vec();
        data.extend([0u8, 255]);
        assert_eq!(read_pnm(data.as_slice()).unwrap().pixels(), &[0.0, 1.0]);
        assert!(read_pnm(&b"P5\n2 1\n255\n\x00"[..]).is_err());
        assert!(read_pnm(&b"P2\n1 1\n255\n0"[..]).is_err());
    }
}
