//! File formats: binary PPM images (8-bit RGB), binary PGM density exports
//! (16-bit, max-scaled), and CSV density grids. All writers are
//! deterministic byte-for-byte for identical inputs.

use std::fs;
use std::path::Path;

use crate::densitymap::DensityMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes a (3, h, w) tensor with values in [0, 1] as binary PPM (P6,
/// maxval 255).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = dims3(image)?;
    if c != 3 {
        return Err(Error::shape(
            "write_ppm",
            format!("expected 3 channels, got {:?}", image.shape()),
        ));
    }
    let data = image.data();
    let mut bytes = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    bytes.reserve(3 * h * w);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                let v = data[(ch * h + r) * w + col];
                bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PPM into a (3, h, w) tensor with values in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, rest) = split_token(&bytes, 0);
    if magic != b"P6" {
        return Err(Error::parse(path, 1, "not a binary PPM (P6) file"));
    }
    let (w, rest) = parse_header_int(path, &bytes, rest)?;
    let (h, rest) = parse_header_int(path, &bytes, rest)?;
    let (maxval, rest) = parse_header_int(path, &bytes, rest)?;
    if maxval != 255 {
        return Err(Error::parse(path, 1, format!("unsupported maxval {}", maxval)));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = rest + 1;
    let need = 3 * w * h;
    if bytes.len() < start + need {
        return Err(Error::parse(
            path,
            0,
            format!("raster truncated: want {} bytes, have {}", need, bytes.len().saturating_sub(start)),
        ));
    }
    let raster = &bytes[start..start + need];
    let mut data = vec![0.0; need];
    for r in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                data[(ch * h + r) * w + col] = raster[(r * w + col) * 3 + ch] as f64 / 255.0;
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Writes a density map as 16-bit binary PGM. Values are scaled so the map
/// maximum lands on 65535; the factor is recorded in a header comment
/// (`# scale=<f>`) so readers can invert it. An all-zero map uses scale 1.
pub fn write_pgm16(path: &Path, map: &DensityMap) -> Result<()> {
    let max = map.max();
    let scale = if max > 0.0 { 65535.0 / max } else { 1.0 };
    let mut bytes = format!(
        "P5\n# scale={scale}\n{} {}\n65535\n",
        map.width(),
        map.height()
    )
    .into_bytes();
    bytes.reserve(2 * map.values().len());
    for &v in map.values() {
        let q = (v * scale).round().clamp(0.0, 65535.0) as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a 16-bit PGM written by [`write_pgm16`], undoing the recorded
/// scale factor.
pub fn read_pgm16(path: &Path) -> Result<DensityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (magic, rest) = split_token(&bytes, 0);
    if magic != b"P5" {
        return Err(Error::parse(path, 1, "not a binary PGM (P5) file"));
    }
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(256)]);
    let scale = text
        .lines()
        .find_map(|l| l.strip_prefix("# scale="))
        .and_then(|s| s.trim().parse::<f64>().ok())
        .ok_or_else(|| Error::parse(path, 2, "missing `# scale=` header comment"))?;
    let (w, rest) = parse_header_int(path, &bytes, rest)?;
    let (h, rest) = parse_header_int(path, &bytes, rest)?;
    let (maxval, rest) = parse_header_int(path, &bytes, rest)?;
    if maxval != 65535 {
        return Err(Error::parse(path, 1, format!("unsupported maxval {}", maxval)));
    }
    let start = rest + 1;
    let need = 2 * w * h;
    if bytes.len() < start + need {
        return Err(Error::parse(path, 0, "raster truncated"));
    }
    let values = bytes[start..start + need]
        .chunks_exact(2)
        .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 / scale)
        .collect();
    DensityMap::from_values(w, h, values)
}

/// One CSV row per map row; f64 values in Rust's shortest round-trip
/// notation, so parsing back reproduces the exact bits.
pub fn density_to_csv(map: &DensityMap) -> String {
    let mut out = String::new();
    for r in 0..map.height() {
        for c in 0..map.width() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&map.get(r, c).to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_density_csv(path: &Path, map: &DensityMap) -> Result<()> {
    fs::write(path, density_to_csv(map)).map_err(|e| Error::io(path, e))
}

pub fn read_density_csv(path: &Path) -> Result<DensityMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::parse(path, i + 1, format!("not a number: `{}`", f)))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("ragged row: {} values, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(path, 1, "empty density CSV"));
    }
    let (h, w) = (rows.len(), rows[0].len());
    DensityMap::from_values(w, h, rows.into_iter().flatten().collect())
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::shape(
            "image",
            format!("expected (channels, h, w), got {:?}", other),
        )),
    }
}

/// Returns the first whitespace-delimited token at or after `start`,
/// skipping `#` comments, plus the index one past the token.
fn split_token(bytes: &[u8], start: usize) -> (&[u8], usize) {
    let mut i = start;
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        break;
    }
    let begin = i;
    while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
        i += 1;
    }
    (&bytes[begin..i], i)
}

fn parse_header_int(path: &Path, bytes: &[u8], start: usize) -> Result<(usize, usize)> {
    let (tok, next) = split_token(bytes, start);
    let s = std::str::from_utf8(tok).unwrap_or("");
    let v = s
        .parse::<usize>()
        .map_err(|_| Error::parse(path, 1, format!("bad header field `{}`", s)))?;
    if v == 0 {
        return Err(Error::parse(path, 1, "zero extent in header"));
    }
    Ok((v, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrips_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = Tensor::from_fn(&[3, 4, 5], |i| (i % 256) as f64 / 255.0);
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_write_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 8, 8], |i| ((i * 37) % 101) as f64 / 100.0);
        let (p1, p2) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
        write_ppm(&p1, &img).unwrap();
        write_ppm(&p2, &img).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn ppm_rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        fs::write(&path, b"P3\n1 1\n255\n1 2 3\n").unwrap();
        assert!(read_ppm(&path).is_err());
        fs::write(&path, b"P6\n4 4\n255\nxx").unwrap();
        assert!(read_ppm(&path).is_err());
    }

    #[test]
    fn pgm16_records_scale_and_roundtrips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let map = DensityMap::from_values(3, 2, vec![0.0, 0.1, 0.25, 0.5, 0.05, 0.4]).unwrap();
        write_pgm16(&path, &map).unwrap();
        let header = fs::read(&path).unwrap();
        let head = &header[..header.len().min(64)];
        assert!(String::from_utf8_lossy(head).contains("# scale="));
        let back = read_pgm16(&path).unwrap();
        let half_step = 0.5 * map.max() / 65535.0;
        for (a, b) in back.values().iter().zip(map.values()) {
            assert!((a - b).abs() <= half_step * 1.001, "{} vs {}", a, b);
        }
        // The map maximum hits the top code exactly.
        assert_eq!(back.max(), map.max());
    }

    #[test]
    fn pgm16_handles_all_zero_maps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.pgm");
        let map = DensityMap::zeros(4, 4);
        write_pgm16(&path, &map).unwrap();
        let back = read_pgm16(&path).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn density_csv_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let map = DensityMap::from_values(
            4,
            3,
            (0..12).map(|i| (i as f64 * 0.137).sin() / 3.0).collect(),
        )
        .unwrap();
        write_density_csv(&path, &map).unwrap();
        let back = read_density_csv(&path).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn density_csv_rejects_ragged_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "1,2\n3\n").unwrap();
        let err = read_density_csv(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "got {}", err);
        fs::write(&path, "1,zz\n").unwrap();
        assert!(read_density_csv(&path).is_err());
    }
}
