//! Portable graymap (PGM) and pixmap (PPM) read/write.
//!
//! Grayscale tensors use values in [0,1] and are quantized to 8-bit on
//! write. The reader accepts binary (P5) and ASCII (P2) graymaps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

/// Write a 2-D tensor with values in [0,1] as a binary PGM (P5).
pub fn write_pgm(map: &Tensor, path: &Path) -> Result<()> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::Format(format!(
            "write_pgm expects a 2-D tensor, got {:?}",
            shape
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut bytes = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    bytes.extend(map.data().iter().map(|&v| quantize(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write an RGB image as a binary PPM (P6). `rgb` is `[H*W*3]` bytes.
pub fn write_ppm(width: usize, height: usize, rgb: &[u8], path: &Path) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Format(format!(
            "ppm payload {} bytes does not match {}x{}x3",
            rgb.len(),
            width,
            height
        )));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a PGM (P5 or P2) into a 2-D tensor with values in [0,1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pgm(&bytes).map_err(|msg| Error::Format(format!("{}: {}", path.display(), msg)))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut cursor = 0usize;
    let magic = next_token(bytes, &mut cursor).ok_or("missing magic")?;
    let binary = match magic.as_str() {
        "P5" => true,
        "P2" => false,
        other => return Err(format!("unsupported magic {:?}", other)),
    };
    let w: usize = next_token(bytes, &mut cursor)
        .ok_or("missing width")?
        .parse()
        .map_err(|_| "bad width")?;
    let h: usize = next_token(bytes, &mut cursor)
        .ok_or("missing height")?
        .parse()
        .map_err(|_| "bad height")?;
    let maxval: f64 = next_token(bytes, &mut cursor)
        .ok_or("missing maxval")?
        .parse()
        .map_err(|_| "bad maxval")?;
    if maxval <= 0.0 || maxval > 255.0 {
        return Err(format!("unsupported maxval {}", maxval));
    }
    let n = w * h;
    let mut data = Vec::with_capacity(n);
    if binary {
        // Single whitespace byte separates header from payload.
        if cursor + n > bytes.len() {
            return Err(format!(
                "truncated payload: need {} bytes, have {}",
                n,
                bytes.len().saturating_sub(cursor)
            ));
        }
        data.extend(bytes[cursor..cursor + n].iter().map(|&b| b as f64 / maxval));
    } else {
        for _ in 0..n {
            let t = next_token(bytes, &mut cursor).ok_or("truncated ascii payload")?;
            let v: f64 = t.parse().map_err(|_| "bad ascii sample")?;
            data.push(v / maxval);
        }
    }
    Tensor::new(vec![h, w], data).map_err(|e| e.to_string())
}

/// Next whitespace-delimited token, skipping `#` comments. Advances the
/// cursor past the single whitespace byte that terminates the token.
fn next_token(bytes: &[u8], cursor: &mut usize) -> Option<String> {
    loop {
        while *cursor < bytes.len() && bytes[*cursor].is_ascii_whitespace() {
            *cursor += 1;
        }
        if *cursor < bytes.len() && bytes[*cursor] == b'#' {
            while *cursor < bytes.len() && bytes[*cursor] != b'\n' {
                *cursor += 1;
            }
            continue;
        }
        break;
    }
    let start = *cursor;
    while *cursor < bytes.len() && !bytes[*cursor].is_ascii_whitespace() {
        *cursor += 1;
    }
    if *cursor > start {
        let tok = String::from_utf8_lossy(&bytes[start..*cursor]).into_owned();
        if *cursor < bytes.len() {
            *cursor += 1; // consume the terminator
        }
        Some(tok)
    } else {
        None
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let img = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        write_pgm(&img, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[3, 4]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_binary_zero_one_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let img = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        write_pgm(&img, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(parse_pgm(b"P7\n2 2\n255\nxxxx").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\nab").is_err());
    }

    #[test]
    fn ascii_pgm_with_comments() {
        let t = parse_pgm(b"P2\n# comment line\n2 2\n255\n0 255\n128 64\n").unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data()[1], 1.0);
    }
}
