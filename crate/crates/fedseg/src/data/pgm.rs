//! Binary PGM (P5) reading and writing.
//!
//! The only image format the tool speaks: single-channel, maxval 255,
//! bit-exact on round trip. Comments (`#` to end of line) are accepted
//! anywhere whitespace is allowed in the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Write `w*h` bytes as a binary PGM with maxval 255.
pub fn write_pgm(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != w * h {
        return Err(Error::ShapeMismatch(format!(
            "pgm payload: {} bytes for {}x{}",
            bytes.len(),
            w,
            h
        )));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Read a binary PGM; returns (width, height, payload bytes).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = fs::read(path)?;
    let name = path.display();
    if raw.len() < 2 || &raw[0..2] != b"P5" {
        return Err(Error::MalformedPgm(format!("{name}: missing P5 magic")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        pos = skip_separators(&raw, pos);
        let start = pos;
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(Error::MalformedPgm(format!("{name}: truncated header")));
        }
        let text = std::str::from_utf8(&raw[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::MalformedPgm(format!("{name}: bad header number `{text}`")))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::MalformedPgm(format!("{name}: unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::MalformedPgm(format!("{name}: zero dimension {w}x{h}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= raw.len() || !raw[pos].is_ascii_whitespace() {
        return Err(Error::MalformedPgm(format!("{name}: missing payload separator")));
    }
    pos += 1;
    if raw.len() < pos + w * h {
        return Err(Error::MalformedPgm(format!(
            "{name}: payload has {} bytes, expected {}",
            raw.len() - pos,
            w * h
        )));
    }
    Ok((w, h, raw[pos..pos + w * h].to_vec()))
}

fn skip_separators(raw: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("fedseg-pgm-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let path = tmp("rt.pgm");
        let bytes: Vec<u8> = (0..=255).collect();
        write_pgm(&path, 16, 16, &bytes).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (16, 16));
        assert_eq!(back, bytes);
    }

    #[test]
    fn header_comments_are_skipped() {
        let path = tmp("comment.pgm");
        fs::write(&path, b"P5\n# made by hand\n2 # width\n2\n255\n\x01\x02\x03\x04").unwrap();
        let (w, h, bytes) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(bytes, vec![1, 2, 3, 4]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let path = tmp("short.pgm");
        fs::write(&path, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::MalformedPgm(_))));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let path = tmp("p2.pgm");
        fs::write(&path, b"P2\n2 2\n255\n0 1 2 3").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::MalformedPgm(_))));
    }
}
