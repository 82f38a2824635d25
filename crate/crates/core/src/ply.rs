//! Minimal ASCII PLY point-cloud reader/writer.
//!
//! Values are printed with the shortest representation that parses back to
//! the same `f64`, so a write/read cycle is lossless.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyScalar {
    Double,
    UChar,
    UInt,
}

impl PlyScalar {
    fn name(self) -> &'static str {
        match self {
            PlyScalar::Double => "double",
            PlyScalar::UChar => "uchar",
            PlyScalar::UInt => "uint",
        }
    }

    fn parse(name: &str) -> Option<Self> {
        match name {
            "double" | "float64" | "float" | "float32" => Some(PlyScalar::Double),
            "uchar" | "uint8" => Some(PlyScalar::UChar),
            "uint" | "uint32" | "int" | "int32" => Some(PlyScalar::UInt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyProperty {
    pub name: String,
    pub kind: PlyScalar,
    pub values: Vec<f64>,
}

/// Vertex-only PLY document: positions plus named per-vertex scalars.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyCloud {
    pub points: Vec<Point3<f64>>,
    pub properties: Vec<PlyProperty>,
}

impl PlyCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self {
            points,
            properties: Vec::new(),
        }
    }

    pub fn with_property(mut self, name: &str, kind: PlyScalar, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.points.len(), "property length mismatch");
        self.properties.push(PlyProperty {
            name: name.to_string(),
            kind,
            values,
        });
        self
    }

    pub fn property(&self, name: &str) -> Option<&[f64]> {
        self.properties
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.values.as_slice())
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(out, "element vertex {}", self.points.len());
        out.push_str("property double x\nproperty double y\nproperty double z\n");
        for p in &self.properties {
            let _ = writeln!(out, "property {} {}", p.kind.name(), p.name);
        }
        out.push_str("end_header\n");
        for (i, pt) in self.points.iter().enumerate() {
            let _ = write!(out, "{} {} {}", pt.x, pt.y, pt.z);
            for p in &self.properties {
                match p.kind {
                    PlyScalar::Double => {
                        let _ = write!(out, " {}", p.values[i]);
                    }
                    _ => {
                        let _ = write!(out, " {}", p.values[i] as u64);
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_ascii(text: &str) -> Result<Self> {
        let bad = |reason: &str| Error::format("ply", reason);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(bad("missing magic"));
        }
        let mut n_vertices = None;
        let mut columns: Vec<(String, PlyScalar)> = Vec::new();
        let mut in_vertex = false;
        loop {
            let line = lines.next().ok_or_else(|| bad("unterminated header"))?.trim();
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.as_slice() {
                ["format", "ascii", _] => {}
                ["format", ..] => return Err(bad("only ascii format is supported")),
                ["comment", ..] => {}
                ["element", "vertex", n] => {
                    n_vertices = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                    in_vertex = true;
                }
                ["element", ..] => in_vertex = false,
                ["property", kind, name] if in_vertex => {
                    let kind = PlyScalar::parse(kind).ok_or_else(|| bad("unsupported property type"))?;
                    columns.push((name.to_string(), kind));
                }
                ["property", ..] => {}
                ["end_header"] => break,
                _ => return Err(bad("unexpected header line")),
            }
        }
        let n = n_vertices.ok_or_else(|| bad("no vertex element"))?;
        let axis = |name: &str| columns.iter().position(|(c, _)| c == name);
        let (ix, iy, iz) = match (axis("x"), axis("y"), axis("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(bad("vertex element lacks x/y/z")),
        };
        let mut cloud = PlyCloud::default();
        let extra: Vec<usize> = (0..columns.len()).filter(|&c| c != ix && c != iy && c != iz).collect();
        for &c in &extra {
            cloud.properties.push(PlyProperty {
                name: columns[c].0.clone(),
                kind: columns[c].1,
                values: Vec::with_capacity(n),
            });
        }
        for _ in 0..n {
            let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
            let values = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("non-numeric vertex value"))?;
            if values.len() != columns.len() {
                return Err(bad("vertex arity mismatch"));
            }
            cloud.points.push(Point3::new(values[ix], values[iy], values[iz]));
            for (slot, &c) in extra.iter().enumerate() {
                cloud.properties[slot].values.push(values[c]);
            }
        }
        Ok(cloud)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ascii())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ascii(&std::fs::read_to_string(path)?)
    }
}
