//! The Wavefront OBJ subset used for templates and exported meshes:
//! `v x y z` and triangular `f a b c` lines with 1-based indices.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::{Point3, TriMesh};

pub fn write_obj(vertices: &[Point3], faces: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(vertices.len() * 40 + faces.len() * 20);
    for v in vertices {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

pub fn parse_obj(text: &str, origin: &str) -> Result<(Vec<Point3>, Vec<[usize; 3]>)> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.into(),
        line,
        msg,
    };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| err(lineno, format!("bad vertex: {e}")))?;
                if coords.len() != 3 {
                    return Err(err(lineno, "vertex needs 3 coordinates".into()));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| {
                        // accept `a`, `a/b`, `a//c`, `a/b/c`
                        let head = t.split('/').next().unwrap_or("");
                        head.parse::<usize>()
                            .ok()
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| err(lineno, format!("bad face index `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(err(
                        lineno,
                        format!("only triangles are supported, got {} indices", idx.len()),
                    ));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

pub fn read_obj(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (v, f) = parse_obj(&text, &path.display().to_string())?;
    TriMesh::new(v, f)
}

pub fn write_obj_file(path: &Path, mesh: &TriMesh) -> Result<()> {
    std::fs::write(path, mesh.to_obj()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_slash_forms_and_comments() {
        let text = "# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0 # apex\nvn 0 0 1\nf 1/1/1 2//1 3\n";
        let (v, f) = parse_obj(text, "t").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(f, vec![[0, 1, 2]]);
    }

    #[test]
    fn rejects_quads_and_zero_index() {
        assert!(parse_obj("f 1 2 3 4\n", "t").is_err());
        assert!(parse_obj("f 0 1 2\n", "t").is_err());
        let e = parse_obj("v 1 2\n", "t").unwrap_err();
        assert!(e.to_string().contains("t:1"), "{e}");
    }

    #[test]
    fn six_decimals() {
        let s = write_obj(&[[1.0 / 3.0, -0.5, 2.0]], &[]);
        assert_eq!(s, "v 0.333333 -0.500000 2.000000\n");
    }
}
