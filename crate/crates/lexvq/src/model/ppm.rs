//! Binary PPM (P6, 8-bit) image IO. Pixel values map linearly onto [0, 1]
//! as `v / 255`; writing rounds and clamps back.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write_bytes;
use crate::tensor::Tensor;

/// Reads a P6 PPM into a `3 x H x W` tensor in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    let bad = |msg: &str| Error::Invalid(format!("{display}: {msg}"));

    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Option<(usize, usize)> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (start < pos).then_some((start, pos))
    };

    let mut read_token = || -> Result<String> {
        let (s, e) = next_token(&bytes).ok_or_else(|| bad("truncated header"))?;
        Ok(String::from_utf8_lossy(&bytes[s..e]).into_owned())
    };
    if read_token()? != "P6" {
        return Err(bad("not a P6 PPM"));
    }
    let width: usize = read_token()?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = read_token()?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = read_token()?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only 8-bit (maxval 255) PPM is supported"));
    }
    // exactly one whitespace byte separates header from payload
    let payload_start = pos + 1;
    let expected = width * height * 3;
    if bytes.len() < payload_start + expected {
        return Err(bad("truncated pixel data"));
    }
    let payload = &bytes[payload_start..payload_start + expected];
    let mut data = vec![0.0f64; 3 * height * width];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                data[c * height * width + y * width + x] =
                    payload[(y * width + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(data, &[3, height, width])
}

/// Writes a `3 x H x W` tensor in [0, 1] as a P6 PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Invalid(format!(
            "write_ppm needs 3 x H x W, got {:?}",
            shape
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[c * h * w + y * w + x];
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    atomic_write_bytes(path, &bytes)
}

/// Loads every `*.ppm` in a directory, sorted by file name.
pub fn read_ppm_dir(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let display = dir.display().to_string();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(&display, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push((name, read_ppm(&p)?));
    }
    Ok(out)
}
