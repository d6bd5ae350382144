//! Binary PLY export/import of Gaussian models in the layout standard splat
//! viewers expect: positions, zeroed normals, SH DC color, logit opacity,
//! log scales, wxyz rotation, all little-endian f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianModel, Quaternion};

/// DC spherical-harmonics basis constant 1 / (2 sqrt(pi)).
pub const SH_C0: f64 = 0.28209479177387814;

const PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0",
    "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Serialize a model. Confidence is not a viewer concept: the stored opacity
/// is the effective opacity * confidence product.
pub fn write_ply(model: &GaussianModel, sink: &mut impl Write) -> std::io::Result<()> {
    writeln!(sink, "ply")?;
    writeln!(sink, "format binary_little_endian 1.0")?;
    writeln!(sink, "element vertex {}", model.len())?;
    for p in PROPERTIES {
        writeln!(sink, "property float {p}")?;
    }
    writeln!(sink, "end_header")?;
    for g in &model.gaussians {
        let mut row = [0.0f32; 17];
        row[0] = g.mean.x as f32;
        row[1] = g.mean.y as f32;
        row[2] = g.mean.z as f32;
        // normals stay zero
        for c in 0..3 {
            row[6 + c] = ((g.color[c] - 0.5) / SH_C0) as f32;
        }
        row[9] = logit(g.effective_opacity()) as f32;
        row[10] = g.scale.x.ln() as f32;
        row[11] = g.scale.y.ln() as f32;
        row[12] = g.scale.z.ln() as f32;
        row[13] = g.rotation.w as f32;
        row[14] = g.rotation.x as f32;
        row[15] = g.rotation.y as f32;
        row[16] = g.rotation.z as f32;
        for v in row {
            sink.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn export_ply(model: &GaussianModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut sink = BufWriter::new(file);
    write_ply(model, &mut sink).map_err(|e| Error::io(path, e))?;
    sink.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parse the layout written by [`write_ply`]. Extra float properties are
/// tolerated and skipped; the seventeen standard ones must be present.
/// Imported primitives get confidence 1 and source view 0.
pub fn read_ply(source: &mut impl Read) -> Result<GaussianModel> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| Error::MalformedPly(format!("read failed: {e}")))?;
    let header_end = find_header_end(&bytes)?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::MalformedPly("header is not UTF-8".into()))?;

    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::MalformedPly("missing 'ply' magic".into()));
    }
    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    let mut format_seen = false;
    let mut in_vertex_element = false;
    for line in lines {
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("format") => {
                let rest: Vec<&str> = tokens.collect();
                if rest != ["binary_little_endian", "1.0"] {
                    return Err(Error::MalformedPly(format!("unsupported format {rest:?}")));
                }
                format_seen = true;
            }
            Some("comment") => {}
            Some("element") => {
                let name = tokens.next().unwrap_or("");
                in_vertex_element = name == "vertex";
                if in_vertex_element {
                    let count = tokens
                        .next()
                        .and_then(|c| c.parse::<usize>().ok())
                        .ok_or_else(|| Error::MalformedPly("bad vertex count".into()))?;
                    vertex_count = Some(count);
                } else {
                    return Err(Error::MalformedPly(format!("unsupported element {name}")));
                }
            }
            Some("property") => {
                if !in_vertex_element {
                    return Err(Error::MalformedPly("property outside element".into()));
                }
                let ty = tokens.next().unwrap_or("");
                if ty != "float" {
                    return Err(Error::MalformedPly(format!("unsupported property type {ty}")));
                }
                let name = tokens
                    .next()
                    .ok_or_else(|| Error::MalformedPly("unnamed property".into()))?;
                properties.push(name.to_string());
            }
            Some(other) => {
                return Err(Error::MalformedPly(format!("unexpected token {other}")));
            }
            None => {}
        }
    }
    if !format_seen {
        return Err(Error::MalformedPly("missing format line".into()));
    }
    let count =
        vertex_count.ok_or_else(|| Error::MalformedPly("missing vertex element".into()))?;
    let mut offsets = [0usize; 17];
    for (slot, wanted) in PROPERTIES.iter().enumerate() {
        offsets[slot] = properties
            .iter()
            .position(|p| p == wanted)
            .ok_or_else(|| Error::MalformedPly(format!("missing property {wanted}")))?;
    }
    let stride = properties.len() * 4;
    let body = &bytes[header_end..];
    if body.len() < count * stride {
        return Err(Error::MalformedPly(format!(
            "body holds {} bytes, need {}",
            body.len(),
            count * stride
        )));
    }

    let mut model = GaussianModel::default();
    for i in 0..count {
        let row = &body[i * stride..(i + 1) * stride];
        let at = |slot: usize| -> f64 {
            let o = offsets[slot] * 4;
            f32::from_le_bytes([row[o], row[o + 1], row[o + 2], row[o + 3]]) as f64
        };
        let rotation = Quaternion::new(at(13), at(14), at(15), at(16))
            .normalized()
            .unwrap_or(Quaternion::IDENTITY);
        model.gaussians.push(Gaussian {
            mean: Vector3::new(at(0), at(1), at(2)),
            scale: Vector3::new(at(10).exp(), at(11).exp(), at(12).exp()),
            rotation,
            opacity: sigmoid(at(9)),
            confidence: 1.0,
            color: Vector3::new(
                at(6) * SH_C0 + 0.5,
                at(7) * SH_C0 + 0.5,
                at(8) * SH_C0 + 0.5,
            ),
        });
        model.source_view.push(0);
    }
    Ok(model)
}

pub fn import_ply(path: impl AsRef<Path>) -> Result<GaussianModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(&mut BufReader::new(file))
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let marker = b"end_header\n";
    bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|p| p + marker.len())
        .ok_or_else(|| Error::MalformedPly("missing end_header".into()))
}
