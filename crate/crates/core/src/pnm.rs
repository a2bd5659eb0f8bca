//! Reading and writing binary portable pixmaps (P5 grayscale, P6 RGB).
//!
//! Samples are normalized to [0, 1] on load by dividing by the header maxval;
//! writing quantizes back to 8 bits. Only maxval <= 255 is supported.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::ImageRaster;

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse { file: path.display().to_string(), msg: msg.into() }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

fn token_usize(bytes: &[u8], pos: &mut usize, path: &Path, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos).ok_or_else(|| parse_err(path, format!("missing {what}")))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(path, format!("bad {what}")))
}

pub fn read_pnm(path: &Path) -> Result<ImageRaster> {
    let bytes = fs::read(path).map_err(|_| Error::MissingImage(path.display().to_string()))?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos).ok_or_else(|| parse_err(path, "empty file"))?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(parse_err(path, "magic must be P5 or P6")),
    };
    let width = token_usize(&bytes, &mut pos, path, "width")?;
    let height = token_usize(&bytes, &mut pos, path, "height")?;
    let maxval = token_usize(&bytes, &mut pos, path, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err(path, "missing raster separator"));
    }
    pos += 1;
    let need = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(parse_err(
            path,
            format!("raster truncated: {} of {need} bytes", raster.len()),
        ));
    }
    let data: Vec<f32> = raster[..need]
        .iter()
        .map(|&b| (b.min(maxval as u8)) as f32 / maxval as f32)
        .collect();
    ImageRaster::new(width, height, channels, data)
        .map_err(|e| parse_err(path, format!("invalid raster: {e}")))
}

pub fn write_pnm(path: &Path, image: &ImageRaster) -> Result<()> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::ShapeMismatch(format!(
                "pnm supports 1 or 3 channels, image has {c}"
            )))
        }
    };
    let mut out = Vec::with_capacity(32 + image.width * image.height * image.channels);
    write!(out, "{magic}\n{} {}\n255\n", image.width, image.height)?;
    out.extend_from_slice(&image.to_u8());
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_p5() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.pgm");
        let bytes: Vec<u8> = (0..32 * 32).map(|i| (i % 251) as u8).collect();
        let img = ImageRaster::from_u8(32, 32, 1, &bytes).unwrap();
        write_pnm(&path, &img).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn round_trip_p6() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.ppm");
        let bytes: Vec<u8> = (0..16 * 16 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = ImageRaster::from_u8(16, 16, 3, &bytes).unwrap();
        write_pnm(&path, &img).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n16 16\n# another\n255\n".to_vec();
        bytes.extend(std::iter::repeat(128u8).take(256));
        fs::write(&path, bytes).unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!((img.width, img.height, img.channels), (16, 16, 1));
    }

    #[test]
    fn truncated_and_bad_magic_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        fs::write(&path, b"P5\n16 16\n255\nxx").unwrap();
        assert!(matches!(read_pnm(&path), Err(Error::Parse { .. })));
        fs::write(&path, b"P4\n16 16\n255\n").unwrap();
        assert!(matches!(read_pnm(&path), Err(Error::Parse { .. })));
        assert!(matches!(
            read_pnm(Path::new("/nonexistent/x.pgm")),
            Err(Error::MissingImage(_))
        ));
    }
}
