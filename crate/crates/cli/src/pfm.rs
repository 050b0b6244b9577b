//! Grayscale Portable Float Map depth files.
//!
//! Written little-endian (negative scale), rows bottom to top, `f32` samples.
//! On read, NaN, infinities and values `<= 0` are invalid, and both byte
//! orders are accepted.

use std::io::{BufRead, Write};

use depthcal::DepthMap;

/// Encodes `depth` as PFM. Valid depths are rounded to `f32`.
pub fn write_pfm(out: &mut impl Write, depth: &DepthMap) -> std::io::Result<()> {
    let (w, h) = (depth.width(), depth.height());
    write!(out, "Pf\n{w} {h}\n-1.0\n")?;
    let mut buf = Vec::with_capacity(w * h * 4);
    for v in (0..h).rev() {
        for u in 0..w {
            let i = depth.index(u, v);
            let d = depth.values()[i];
            // Invalid pixels keep their stored value when it still reads back
            // as invalid (NaN, infinite, <= 0); masked positive depths become NaN.
            let x = if depth.valid()[i] || !(d.is_finite() && d > 0.0) {
                d as f32
            } else {
                f32::NAN
            };
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.write_all(&buf)
}

pub fn read_pfm(input: &mut impl BufRead) -> Result<DepthMap, String> {
    let magic = token(input)?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => return Err("colour PFM (PF) is not a depth map; expected grayscale Pf".into()),
        m => return Err(format!("not a PFM file (magic {m:?})")),
    }
    let width: usize = parse(&token(input)?, "width")?;
    let height: usize = parse(&token(input)?, "height")?;
    let scale: f32 = parse(&token(input)?, "scale")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(format!("invalid scale {scale}"));
    }
    let little = scale < 0.0;
    let n = width
        .checked_mul(height)
        .filter(|n| *n <= (1 << 28))
        .ok_or_else(|| format!("image {width}x{height} is too large"))?;
    let mut raw = vec![0u8; n * 4];
    input
        .read_exact(&mut raw)
        .map_err(|_| format!("truncated pixel data: expected {} bytes", n * 4))?;
    let mut values = vec![0.0f64; n];
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let x = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, u) = (k / width, k % width);
        values[(height - 1 - row) * width + u] = x as f64;
    }
    DepthMap::from_values(width, height, values).map_err(|e| e.to_string())
}

/// Next whitespace-delimited header token; consumes exactly one trailing
/// whitespace byte, so binary data starts right after the scale line.
fn token(input: &mut impl BufRead) -> Result<String, String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match input.read(&mut byte) {
            Ok(0) => break,
            Ok(_) => {
                if byte[0].is_ascii_whitespace() {
                    if tok.is_empty() {
                        continue;
                    }
                    break;
                }
                tok.push(byte[0]);
                if tok.len() > 64 {
                    return Err("malformed PFM header".into());
                }
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    if tok.is_empty() {
        return Err("truncated PFM header".into());
    }
    String::from_utf8(tok).map_err(|_| "malformed PFM header".into())
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("invalid PFM {what} {s:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(d: &DepthMap) -> DepthMap {
        let mut buf = Vec::new();
        write_pfm(&mut buf, d).unwrap();
        read_pfm(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn header_and_row_order() {
        let d = DepthMap::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_pfm(&mut buf, &d).unwrap();
        assert!(buf.starts_with(b"Pf\n2 2\n-1.0\n"));
        let body = &buf[12..];
        // bottom row first
        assert_eq!(&body[..4], &3.0f32.to_le_bytes());
        assert_eq!(&body[12..], &2.0f32.to_le_bytes());
        assert_eq!(round_trip(&d), d);
    }

    #[test]
    fn invalid_pixels_survive() {
        let d = DepthMap::new(3, 1, vec![1.5, 0.0, 7.25], vec![true, false, true]).unwrap();
        let r = round_trip(&d);
        assert_eq!(r.valid(), d.valid());
        assert_eq!(r.get(2, 0), Some(7.25));
        assert_eq!(r.values()[1], 0.0);
        let masked = DepthMap::new(2, 1, vec![3.0, 4.0], vec![false, true]).unwrap();
        let r = round_trip(&masked);
        assert!(r.values()[0].is_nan() && !r.valid()[0]);
    }

    #[test]
    fn big_endian_accepted() {
        let mut buf = b"Pf\n2 1\n1.0\n".to_vec();
        buf.extend_from_slice(&0.5f32.to_be_bytes());
        buf.extend_from_slice(&(-1.0f32).to_be_bytes());
        let d = read_pfm(&mut buf.as_slice()).unwrap();
        assert_eq!(d.get(0, 0), Some(0.5));
        assert_eq!(d.get(1, 0), None);
    }

    #[test]
    fn malformed_files_rejected() {
        assert!(read_pfm(&mut &b"P6\n1 1\n255\n"[..]).is_err());
        assert!(read_pfm(&mut &b"PF\n1 1\n-1.0\n"[..]).is_err());
        assert!(read_pfm(&mut &b"Pf\n2 2\n-1.0\n\0\0\0\0"[..]).is_err());
        assert!(read_pfm(&mut &b"Pf\nx 2\n-1.0\n"[..]).is_err());
    }
}
