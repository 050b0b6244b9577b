//! Vertex-only PLY point clouds with `float` x, y, z.
//!
//! ASCII output prints each coordinate with the shortest decimal form that
//! parses back to the same `f32`, so both encodings round-trip bit-exactly.

use std::io::{BufRead, Read, Write};

use depthcal::{Point3, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

pub fn write_ply(out: &mut impl Write, cloud: &PointCloud, format: PlyFormat) -> std::io::Result<()> {
    let name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        out,
        "ply\nformat {name} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )?;
    match format {
        PlyFormat::Ascii => {
            for p in &cloud.points {
                writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = Vec::with_capacity(cloud.len() * 12);
            for p in &cloud.points {
                for c in p {
                    buf.extend_from_slice(&(*c as f32).to_le_bytes());
                }
            }
            out.write_all(&buf)?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
}

impl Scalar {
    fn size(self) -> usize {
        match self {
            Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

/// Reads a PLY whose only element is `vertex` with exactly the properties
/// x, y, z (`float` or `double`), in ASCII or either binary byte order.
pub fn read_ply(input: &mut impl BufRead) -> Result<PointCloud, String> {
    let mut line = String::new();
    let mut next_line = |input: &mut dyn BufRead| -> Result<String, String> {
        line.clear();
        match input.read_line(&mut line) {
            Ok(0) => Err("truncated PLY header".to_string()),
            Ok(_) => Ok(line.trim().to_string()),
            Err(e) => Err(e.to_string()),
        }
    };
    if next_line(input)? != "ply" {
        return Err("not a PLY file".into());
    }
    let mut format = None;
    let mut count: Option<usize> = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        let l = next_line(input)?;
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, "1.0"] => format = Some(f.to_string()),
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err("duplicate vertex element".into());
                }
                count = Some(n.parse().map_err(|_| format!("invalid vertex count {n:?}"))?);
            }
            ["element", other, _] => return Err(format!("unsupported element {other:?}")),
            ["property", ty, name] => {
                let s = match *ty {
                    "float" | "float32" => Scalar::F32,
                    "double" | "float64" => Scalar::F64,
                    t => return Err(format!("unsupported property type {t:?}")),
                };
                props.push((name.to_string(), s));
            }
            _ => return Err(format!("unsupported PLY header line {l:?}")),
        }
    }
    let count = count.ok_or("missing vertex element")?;
    let names: Vec<&str> = props.iter().map(|(n, _)| n.as_str()).collect();
    if names != ["x", "y", "z"] {
        return Err(format!("expected vertex properties x y z, got {names:?}"));
    }
    let points = match format.as_deref() {
        Some("ascii") => read_ascii(input, count)?,
        Some("binary_little_endian") => read_binary(input, count, &props, true)?,
        Some("binary_big_endian") => read_binary(input, count, &props, false)?,
        other => return Err(format!("unsupported PLY format {other:?}")),
    };
    Ok(PointCloud::new(points))
}

fn read_ascii(input: &mut impl BufRead, count: usize) -> Result<Vec<Point3>, String> {
    let mut text = String::new();
    input.read_to_string(&mut text).map_err(|e| e.to_string())?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut points = Vec::with_capacity(count.min(1 << 24));
    for i in 0..count {
        let l = lines.next().ok_or(format!("expected {count} vertices, found {i}"))?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("vertex {i}: malformed line {l:?}"))?;
        if v.len() != 3 {
            return Err(format!("vertex {i}: expected 3 values, got {}", v.len()));
        }
        points.push([v[0], v[1], v[2]]);
    }
    Ok(points)
}

fn read_binary(
    input: &mut impl BufRead,
    count: usize,
    props: &[(String, Scalar)],
    little: bool,
) -> Result<Vec<Point3>, String> {
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    let total = count.checked_mul(stride).ok_or("vertex count too large")?;
    let mut raw = Vec::new();
    input
        .take(total as u64)
        .read_to_end(&mut raw)
        .map_err(|e| e.to_string())?;
    if raw.len() != total {
        return Err(format!(
            "truncated vertex data: expected {total} bytes, got {}",
            raw.len()
        ));
    }
    let mut points = Vec::with_capacity(count);
    for rec in raw.chunks_exact(stride) {
        let mut p = [0.0; 3];
        let mut at = 0;
        for (c, (_, s)) in p.iter_mut().zip(props) {
            let b = &rec[at..at + s.size()];
            *c = match (s, little) {
                (Scalar::F32, true) => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                (Scalar::F32, false) => f32::from_be_bytes(b.try_into().unwrap()) as f64,
                (Scalar::F64, true) => f64::from_le_bytes(b.try_into().unwrap()),
                (Scalar::F64, false) => f64::from_be_bytes(b.try_into().unwrap()),
            };
            at += s.size();
        }
        points.push(p);
    }
    Ok(points)
}
