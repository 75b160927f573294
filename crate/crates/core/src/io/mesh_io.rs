use std::fs::File;
use std::io::{BufReader, Cursor};
use std::path::Path;

use ply_rs_bw::parser::Parser;
use ply_rs_bw::ply::{
    Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType, ScalarType,
};
use ply_rs_bw::writer::Writer;

use crate::error::{Error, Result};
use crate::mesh::{Triangle, TriangleMesh};
use crate::Vec3;

fn scalar(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(x) => x.into(),
        Property::UChar(x) => x.into(),
        Property::Short(x) => x.into(),
        Property::UShort(x) => x.into(),
        Property::Int(x) => x.into(),
        Property::UInt(x) => x.into(),
        Property::Float(x) => x.into(),
        Property::Double(x) => x,
        _ => return None,
    })
}

fn index_list(p: &Property) -> Option<Vec<i64>> {
    Some(match p {
        Property::ListChar(v) => v.iter().map(|&x| x.into()).collect(),
        Property::ListUChar(v) => v.iter().map(|&x| x.into()).collect(),
        Property::ListShort(v) => v.iter().map(|&x| x.into()).collect(),
        Property::ListUShort(v) => v.iter().map(|&x| x.into()).collect(),
        Property::ListInt(v) => v.iter().map(|&x| x.into()).collect(),
        Property::ListUInt(v) => v.iter().map(|&x| x.into()).collect(),
        _ => return None,
    })
}

/// Fan-triangulates a polygon; indices are checked against `n`.
fn fan(poly: &[i64], n: usize, face: usize, path: &Path, out: &mut Vec<Triangle>) -> Result<()> {
    if poly.len() < 3 {
        return Err(Error::format(path, format!("face {face}: {} vertices, at least 3 required", poly.len())));
    }
    if let Some(bad) = poly.iter().find(|&&i| i < 0 || i as usize >= n) {
        return Err(Error::format(path, format!("face {face}: vertex index {bad} out of range 0..{n}")));
    }
    for k in 1..poly.len() - 1 {
        out.push([poly[0] as u32, poly[k] as u32, poly[k + 1] as u32]);
    }
    Ok(())
}

/// Parses an ASCII or binary PLY with `vertex` (x, y, z) and `face`
/// (`vertex_indices` or `vertex_index`) elements.
pub fn read_ply_from(reader: &mut impl std::io::Read, path: &Path) -> Result<TriangleMesh> {
    let ply = Parser::<DefaultElement>::new()
        .read_ply(reader)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let vertices_raw = ply
        .payload
        .get("vertex")
        .ok_or_else(|| Error::format(path, "no vertex element"))?;
    let mut vertices = Vec::with_capacity(vertices_raw.len());
    for (i, el) in vertices_raw.iter().enumerate() {
        let mut c = [0.0; 3];
        for (k, name) in ["x", "y", "z"].iter().enumerate() {
            c[k] = el
                .get(*name)
                .and_then(scalar)
                .ok_or_else(|| Error::format(path, format!("vertex {i}: missing or non-scalar property {name}")))?;
        }
        vertices.push(Vec3::new(c[0], c[1], c[2]));
    }
    let mut triangles = Vec::new();
    if let Some(faces) = ply.payload.get("face") {
        for (i, el) in faces.iter().enumerate() {
            let list = el
                .get("vertex_indices")
                .or_else(|| el.get("vertex_index"))
                .and_then(index_list)
                .ok_or_else(|| Error::format(path, format!("face {i}: missing vertex_indices list")))?;
            fan(&list, vertices.len(), i, path, &mut triangles)?;
        }
    }
    let mesh = TriangleMesh { vertices, triangles };
    mesh.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(mesh)
}

pub fn read_ply(path: &Path) -> Result<TriangleMesh> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply_from(&mut BufReader::new(file), path)
}

/// Binary little-endian PLY with double-precision vertices.
pub fn ply_bytes(vertices: &[Vec3], triangles: &[Triangle]) -> Vec<u8> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::BinaryLittleEndian;
    let mut vdef = ElementDef::new("vertex".into());
    for name in ["x", "y", "z"] {
        vdef.properties.add(PropertyDef::new(name.into(), PropertyType::Scalar(ScalarType::Double)));
    }
    ply.header.elements.add(vdef);
    let mut fdef = ElementDef::new("face".into());
    fdef.properties.add(PropertyDef::new(
        "vertex_indices".into(),
        PropertyType::List(ScalarType::UChar, ScalarType::UInt),
    ));
    ply.header.elements.add(fdef);
    let vs = vertices
        .iter()
        .map(|v| {
            let mut e = DefaultElement::new();
            e.insert("x".into(), Property::Double(v.x));
            e.insert("y".into(), Property::Double(v.y));
            e.insert("z".into(), Property::Double(v.z));
            e
        })
        .collect();
    let fs = triangles
        .iter()
        .map(|t| {
            let mut e = DefaultElement::new();
            e.insert("vertex_indices".into(), Property::ListUInt(t.to_vec()));
            e
        })
        .collect();
    ply.payload.insert("vertex".into(), vs);
    ply.payload.insert("face".into(), fs);
    let mut out = Vec::new();
    Writer::new()
        .write_ply(&mut out, &mut ply)
        .expect("writing to memory cannot fail");
    out
}

pub fn write_ply(path: &Path, vertices: &[Vec3], triangles: &[Triangle]) -> Result<()> {
    std::fs::write(path, ply_bytes(vertices, triangles)).map_err(|e| Error::io(path, e))
}

/// Wavefront OBJ; all objects are merged into one mesh and polygons are triangulated.
pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let options = tobj::LoadOptions {
        triangulate: true,
        ..Default::default()
    };
    let (models, _) = tobj::load_obj(path, &options).map_err(|e| match e {
        tobj::LoadError::OpenFileFailed => {
            Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "cannot open file"))
        }
        other => Error::format(path, other.to_string()),
    })?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for m in models {
        let base = vertices.len() as u32;
        vertices.extend(m.mesh.positions.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])));
        triangles.extend(m.mesh.indices.chunks_exact(3).map(|c| [base + c[0], base + c[1], base + c[2]]));
    }
    let mesh = TriangleMesh { vertices, triangles };
    mesh.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(mesh)
}

/// Dispatches on the extension (`.ply` or `.obj`, case-insensitive).
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ply") => read_ply(path),
        Some("obj") => read_obj(path),
        _ => Err(Error::format(path, "unknown mesh extension, expected .ply or .obj")),
    }
}

/// Parses PLY bytes held in memory.
pub fn ply_from_bytes(bytes: &[u8], path: &Path) -> Result<TriangleMesh> {
    read_ply_from(&mut Cursor::new(bytes), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tetra() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![
                Vec3::new(0.1, 0.2, 0.3),
                Vec3::new(1.0 / 3.0, -2.5, 1e-300),
                Vec3::new(std::f64::consts::PI, 0.0, -7.0),
                Vec3::new(0.0, 1.0, 2.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]],
        }
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let m = tetra();
        let bytes = ply_bytes(&m.vertices, &m.triangles);
        assert!(bytes.starts_with(b"ply\nformat binary_little_endian 1.0\n"));
        let back = ply_from_bytes(&bytes, Path::new("mem.ply")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn ascii_with_quads_and_floats() {
        let text = "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n\
                    element face 1\nproperty list uchar int vertex_index\nend_header\n\
                    0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let m = ply_from_bytes(text.as_bytes(), Path::new("q.ply")).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn bad_index_is_reported() {
        let text = "ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\nproperty double z\n\
                    element face 1\nproperty list uchar int vertex_indices\nend_header\n\
                    0 0 0\n1 0 0\n1 1 0\n3 0 1 7\n";
        let err = ply_from_bytes(text.as_bytes(), Path::new("b.ply")).unwrap_err().to_string();
        assert!(err.contains("b.ply") && err.contains("index 7"), "{err}");
    }

    #[test]
    fn garbage_is_a_format_error() {
        let err = ply_from_bytes(b"not a ply", Path::new("g.ply")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn obj_is_triangulated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.obj");
        std::fs::write(&p, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        let m = read_mesh(&p).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.triangles.len(), 2);
        assert!(read_mesh(&dir.path().join("missing.obj")).is_err());
        assert!(read_mesh(&dir.path().join("x.stl")).is_err());
    }
}
