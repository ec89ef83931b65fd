//! Oriented point clouds: text I/O (`x y z nx ny nz` per line) and seeded
//! surface samplers for the training targets.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::{Point3, TriMesh};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub normals: Vec<Point3>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 64);
        for (p, n) in self.points.iter().zip(&self.normals) {
            let _ = writeln!(s, "{} {} {} {} {} {}", p[0], p[1], p[2], n[0], n[1], n[2]);
        }
        s
    }

    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cloud = PointCloud {
            points: Vec::new(),
            normals: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .ok()
                .filter(|v: &Vec<f64>| v.len() == 6 && v.iter().all(|x| x.is_finite()))
                .ok_or_else(|| Error::Parse {
                    path: origin.into(),
                    line: i + 1,
                    msg: format!("expected six numbers `x y z nx ny nz`, got `{line}`"),
                })?;
            cloud.points.push([vals[0], vals[1], vals[2]]);
            cloud.normals.push([vals[3], vals[4], vals[5]]);
        }
        if cloud.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        Ok(cloud)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Uniform samples on the surface of the axis-aligned cube
/// `[min, min + side]^3` with outward normals.
pub fn sample_cube_surface(n: usize, min: Point3, side: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = PointCloud {
        points: Vec::with_capacity(n),
        normals: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let face = rng.gen_range(0..6);
        let axis = face / 2;
        let high = face % 2 == 1;
        let mut p = [0.0; 3];
        let mut normal = [0.0; 3];
        for (k, pk) in p.iter_mut().enumerate() {
            *pk = if k == axis {
                min[k] + if high { side } else { 0.0 }
            } else {
                min[k] + rng.gen::<f64>() * side
            };
        }
        normal[axis] = if high { 1.0 } else { -1.0 };
        cloud.points.push(p);
        cloud.normals.push(normal);
    }
    cloud
}

/// Area-weighted samples on a triangle mesh with face normals.
pub fn sample_mesh_surface(mesh: &TriMesh, n: usize, seed: u64) -> PointCloud {
    let v = mesh.vertices();
    let mut cumulative = Vec::with_capacity(mesh.num_faces());
    let mut normals = Vec::with_capacity(mesh.num_faces());
    let mut total = 0.0;
    for &[a, b, c] in mesh.faces() {
        let e1: Point3 = std::array::from_fn(|k| v[b][k] - v[a][k]);
        let e2: Point3 = std::array::from_fn(|k| v[c][k] - v[a][k]);
        let cr = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        let len = (cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2]).sqrt();
        total += 0.5 * len;
        cumulative.push(total);
        normals.push(cr.map(|x| x / len));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = PointCloud {
        points: Vec::with_capacity(n),
        normals: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let r = rng.gen::<f64>() * total;
        let f = cumulative.partition_point(|&c| c < r).min(cumulative.len() - 1);
        let [a, b, c] = mesh.faces()[f];
        let (mut s, mut t) = (rng.gen::<f64>(), rng.gen::<f64>());
        if s + t > 1.0 {
            (s, t) = (1.0 - s, 1.0 - t);
        }
        cloud
            .points
            .push(std::array::from_fn(|k| v[a][k] + s * (v[b][k] - v[a][k]) + t * (v[c][k] - v[a][k])));
        cloud.normals.push(normals[f]);
    }
    cloud
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::bundled_template;

    #[test]
    fn text_round_trip() {
        let c = sample_cube_surface(50, [0.0; 3], 1.0, 4);
        let back = PointCloud::parse(&c.to_text(), Path::new("c.xyz")).unwrap();
        assert_eq!(back, c);
        assert!(PointCloud::parse("1 2 3\n", Path::new("c.xyz")).is_err());
        assert!(PointCloud::parse("# nothing\n", Path::new("c.xyz")).is_err());
    }

    #[test]
    fn cube_samples_lie_on_faces() {
        let c = sample_cube_surface(2000, [0.0; 3], 1.0, 1);
        for (p, n) in c.points.iter().zip(&c.normals) {
            let axis = n.iter().position(|&x| x != 0.0).unwrap();
            assert_eq!(p[axis], if n[axis] > 0.0 { 1.0 } else { 0.0 });
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        assert_eq!(c, sample_cube_surface(2000, [0.0; 3], 1.0, 1));
    }

    #[test]
    fn mesh_samples_have_outward_normals() {
        let m = bundled_template();
        let c = sample_mesh_surface(&m, 500, 2);
        for (p, n) in c.points.iter().zip(&c.normals) {
            let dot = p[0] * n[0] + p[1] * n[1] + p[2] * n[2];
            assert!(dot > 0.0);
        }
    }
}
