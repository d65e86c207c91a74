//! Splat export in the common 3D Gaussian splatting PLY convention.
//!
//! Per-vertex float32 properties, in order: x, y, z, f_dc_0..2 (SH degree-0
//! color), opacity (pre-sigmoid logit), scale_0..2 (log of the metric scale),
//! rot_0..3 (quaternion, w first). Binary files are little-endian.

use std::io::{self, BufRead, Write};

use crate::heads::GaussianSet;

const PROPS: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

fn rows(g: &GaussianSet) -> Vec<[f32; 14]> {
    let n = g.len();
    let (c, r, s, o, f) =
        (g.centers.data(), g.rotations.data(), g.scales.data(), g.opacity.data(), g.colors.data());
    (0..n)
        .map(|i| {
            let mut row = [0f32; 14];
            for a in 0..3 {
                row[a] = c[i * 3 + a] as f32;
                row[3 + a] = f[i * 3 + a] as f32;
                row[7 + a] = s[i * 3 + a].ln() as f32;
            }
            row[6] = logit(o[i]) as f32;
            for a in 0..4 {
                row[10 + a] = r[i * 4 + a] as f32;
            }
            row
        })
        .collect()
}

fn header(n: usize, format: &str) -> String {
    let mut h = format!("ply\nformat {format} 1.0\nelement vertex {n}\n");
    for p in PROPS {
        h.push_str(&format!("property float {p}\n"));
    }
    h.push_str("end_header\n");
    h
}

pub fn write_ascii(g: &GaussianSet, w: &mut impl Write) -> io::Result<()> {
    w.write_all(header(g.len(), "ascii").as_bytes())?;
    for row in rows(g) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn write_binary(g: &GaussianSet, w: &mut impl Write) -> io::Result<()> {
    w.write_all(header(g.len(), "binary_little_endian").as_bytes())?;
    for row in rows(g) {
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Minimal reader for files produced by this module; used by tests and the
/// eval path.
pub fn read_splats(r: &mut impl BufRead) -> io::Result<Vec<[f32; 14]>> {
    let err = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut line = String::new();
    let mut n = 0usize;
    let mut binary = false;
    let mut props = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(err("unexpected eof in header"));
        }
        let t = line.trim();
        if let Some(rest) = t.strip_prefix("element vertex ") {
            n = rest.parse().map_err(|_| err("bad vertex count"))?;
        } else if let Some(rest) = t.strip_prefix("property float ") {
            props.push(rest.to_string());
        } else if t.starts_with("format binary_little_endian") {
            binary = true;
        } else if t == "end_header" {
            break;
        }
    }
    if props != PROPS {
        return Err(err("unexpected property layout"));
    }
    let mut out = Vec::with_capacity(n);
    if binary {
        let mut buf = [0u8; 4];
        for _ in 0..n {
            let mut row = [0f32; 14];
            for v in &mut row {
                io::Read::read_exact(r, &mut buf)?;
                *v = f32::from_le_bytes(buf);
            }
            out.push(row);
        }
    } else {
        for _ in 0..n {
            line.clear();
            r.read_line(&mut line)?;
            let vals: Vec<f32> =
                line.split_whitespace().map(|s| s.parse().unwrap_or(f32::NAN)).collect();
            if vals.len() != 14 || vals.iter().any(|v| v.is_nan()) {
                return Err(err("bad vertex line"));
            }
            let mut row = [0f32; 14];
            row.copy_from_slice(&vals);
            out.push(row);
        }
    }
    Ok(out)
}
