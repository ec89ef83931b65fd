//! Triangle meshes, the ellipsoid template, edge-midpoint unpooling and
//! Laplacian coordinates.
//!
//! Vertex positions are stored as `[f64; 3]` in model units. Faces are
//! counter-clockwise when seen from outside. The edge list is derived from
//! the faces and kept sorted lexicographically by `(min, max)` endpoint,
//! which also fixes the order in which [`unpool`] appends midpoints.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use crate::attention::TokenSequence;
use crate::error::{Error, Result};
use crate::obj;

pub type Point3 = [f64; 3];

/// Vertex count of the coarse template the pipeline starts from.
pub const TEMPLATE_VERTICES: usize = 156;

const BUNDLED_TEMPLATE: &str = include_str!("../fixtures/ellipsoid_156.obj");

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Point3>,
    faces: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
}

impl TriMesh {
    /// Builds a mesh, validating face indices and rejecting degenerate faces.
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&bad) = f.iter().find(|&&i| i >= n) {
                return Err(Error::Contract(format!(
                    "face {fi} references vertex {bad}, mesh has {n} vertices"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Contract(format!(
                    "face {fi} is degenerate: {f:?}"
                )));
            }
        }
        let edges = edges_of(&faces);
        Ok(Self {
            vertices,
            faces,
            edges,
        })
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Unique undirected edges, sorted by `(min, max)`.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges.len() as i64 + self.faces.len() as i64
    }

    /// True when every edge is shared by exactly two faces.
    pub fn is_closed_manifold(&self) -> bool {
        let mut counts = vec![0u32; self.edges.len()];
        for f in &self.faces {
            for (a, b) in face_edges(f) {
                match self.edge_index(a, b) {
                    Some(e) => counts[e] += 1,
                    None => return false,
                }
            }
        }
        counts.iter().all(|&c| c == 2)
    }

    /// Index of the undirected edge `{a, b}` in [`TriMesh::edges`].
    pub fn edge_index(&self, a: usize, b: usize) -> Option<usize> {
        let key = [a.min(b), a.max(b)];
        self.edges.binary_search(&key).ok()
    }

    /// Same topology, new positions.
    pub fn with_vertices(&self, vertices: Vec<Point3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Contract(format!(
                "expected {} positions, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
            edges: self.edges.clone(),
        })
    }

    pub fn translated(&self, t: Point3) -> Self {
        let vertices = self
            .vertices
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect();
        Self {
            vertices,
            faces: self.faces.clone(),
            edges: self.edges.clone(),
        }
    }

    /// Applies a vertex permutation: new vertex `i` is old vertex `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.vertices.len();
        if perm.len() != n {
            return Err(Error::Contract("permutation length mismatch".into()));
        }
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::Contract("not a permutation".into()));
            }
            inverse[old] = new;
        }
        let vertices = perm.iter().map(|&old| self.vertices[old]).collect();
        let faces = self
            .faces
            .iter()
            .map(|f| [inverse[f[0]], inverse[f[1]], inverse[f[2]]])
            .collect();
        Self::new(vertices, faces)
    }

    pub fn adjacency(&self) -> Adjacency {
        Adjacency::from_edges(self.vertices.len(), &self.edges)
    }

    /// Axis-aligned extent `max - min` per axis.
    pub fn extent(&self) -> Point3 {
        bbox_extent(&self.vertices)
    }

    pub fn to_obj(&self) -> String {
        obj::write_obj(&self.vertices, &self.faces)
    }

    pub fn from_obj(text: &str) -> Result<Self> {
        let (v, f) = obj::parse_obj(text, "<memory>")?;
        Self::new(v, f)
    }
}

pub fn bbox_extent(points: &[Point3]) -> Point3 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if points.is_empty() {
        return [0.0; 3];
    }
    [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]
}

fn face_edges(f: &[usize; 3]) -> [(usize, usize); 3] {
    [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]
}

fn edges_of(faces: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let set: BTreeSet<[usize; 2]> = faces
        .iter()
        .flat_map(face_edges)
        .map(|(a, b)| [a.min(b), a.max(b)])
        .collect();
    set.into_iter().collect()
}

/// Compressed neighbor lists; neighbors of each vertex ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Adjacency {
    pub fn from_edges(n: usize, edges: &[[usize; 2]]) -> Self {
        let mut lists = vec![Vec::new(); n];
        for &[a, b] in edges {
            lists[a].push(b);
            lists[b].push(a);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::with_capacity(2 * edges.len());
        offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            neighbors.extend(l);
            offsets.push(neighbors.len());
        }
        Self { offsets, neighbors }
    }

    pub fn num_vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Directed `(target, source)` pairs, one per neighbor relation, grouped
    /// by target. Used to express neighbor sums as gather + scatter.
    pub fn directed_pairs(&self) -> (Vec<usize>, Vec<usize>) {
        let mut targets = Vec::with_capacity(self.neighbors.len());
        for i in 0..self.num_vertices() {
            targets.extend(std::iter::repeat_n(i, self.degree(i)));
        }
        (targets, self.neighbors.clone())
    }
}

/// Parameters of the procedural latitude/longitude ellipsoid.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidConfig {
    /// Latitude rings strictly between the two poles.
    pub rings: usize,
    /// Vertices per ring.
    pub segments: usize,
    pub radii: Point3,
}

impl Default for EllipsoidConfig {
    fn default() -> Self {
        Self {
            rings: 7,
            segments: 22,
            radii: [0.5, 0.5, 0.25],
        }
    }
}

/// Builds the 156-vertex ellipsoid: two poles plus `rings x segments`
/// vertices, so `V = 2 + rings * segments` and `F = 2 * rings * segments`.
pub fn make_ellipsoid_template(cfg: &EllipsoidConfig) -> Result<TriMesh> {
    if cfg.segments < 3 || cfg.rings < 1 {
        return Err(Error::InvalidConfig(format!(
            "ellipsoid needs at least 1 ring and 3 segments, got {} and {}",
            cfg.rings, cfg.segments
        )));
    }
    let count = 2 + cfg.rings * cfg.segments;
    if count != TEMPLATE_VERTICES {
        return Err(Error::InvalidConfig(format!(
            "{} rings x {} segments gives {count} vertices, the template needs {TEMPLATE_VERTICES}",
            cfg.rings, cfg.segments
        )));
    }
    if cfg.radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "radii must be positive, got {:?}",
            cfg.radii
        )));
    }
    let [rx, ry, rz] = cfg.radii;
    let (rings, segs) = (cfg.rings, cfg.segments);
    let mut vertices = Vec::with_capacity(count);
    vertices.push([0.0, 0.0, rz]);
    for r in 1..=rings {
        let theta = PI * r as f64 / (rings + 1) as f64;
        for j in 0..segs {
            let phi = 2.0 * PI * j as f64 / segs as f64;
            vertices.push([
                rx * theta.sin() * phi.cos(),
                ry * theta.sin() * phi.sin(),
                rz * theta.cos(),
            ]);
        }
    }
    vertices.push([0.0, 0.0, -rz]);
    let south = count - 1;
    let ring = |r: usize, j: usize| 1 + (r - 1) * segs + j % segs;

    let mut faces = Vec::with_capacity(2 * rings * segs);
    for j in 0..segs {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for r in 1..rings {
        for j in 0..segs {
            let (a, b) = (ring(r, j), ring(r, j + 1));
            let (c, d) = (ring(r + 1, j), ring(r + 1, j + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    for j in 0..segs {
        faces.push([south, ring(rings, j + 1), ring(rings, j)]);
    }
    TriMesh::new(vertices, faces)
}

/// The template shipped with the crate (`fixtures/ellipsoid_156.obj`).
pub fn bundled_template() -> TriMesh {
    TriMesh::from_obj(BUNDLED_TEMPLATE).expect("bundled template is valid")
}

/// Result of subdividing the topology only: new faces plus the edges
/// whose midpoints become vertices `V..V+E`, in that order.
#[derive(Debug, Clone)]
pub struct UnpoolPlan {
    pub base_vertices: usize,
    pub midpoint_edges: Vec<[usize; 2]>,
    pub faces: Vec<[usize; 3]>,
}

impl UnpoolPlan {
    pub fn new(mesh: &TriMesh) -> Self {
        let v = mesh.num_vertices();
        let mid = |a: usize, b: usize| v + mesh.edge_index(a, b).expect("face edge exists");
        let mut faces = Vec::with_capacity(4 * mesh.num_faces());
        for &[a, b, c] in mesh.faces() {
            let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
            faces.push([a, ab, ca]);
            faces.push([b, bc, ab]);
            faces.push([c, ca, bc]);
            faces.push([ab, bc, ca]);
        }
        Self {
            base_vertices: v,
            midpoint_edges: mesh.edges().to_vec(),
            faces,
        }
    }

    pub fn output_vertices(&self) -> usize {
        self.base_vertices + self.midpoint_edges.len()
    }

    /// Original rows followed by the mean of each edge's endpoint rows.
    pub fn apply_rows(&self, rows: &[f64], width: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_vertices() * width);
        out.extend_from_slice(rows);
        for &[a, b] in &self.midpoint_edges {
            let (ra, rb) = (&rows[a * width..(a + 1) * width], &rows[b * width..(b + 1) * width]);
            out.extend(ra.iter().zip(rb).map(|(x, y)| 0.5 * (x + y)));
        }
        out
    }
}

/// Edge-midpoint subdivision of the mesh and its per-vertex features.
pub fn unpool(mesh: &TriMesh, features: &TokenSequence) -> Result<(TriMesh, TokenSequence)> {
    if features.len() != mesh.num_vertices() {
        return Err(Error::Contract(format!(
            "unpool got {} feature rows for {} vertices",
            features.len(),
            mesh.num_vertices()
        )));
    }
    let plan = UnpoolPlan::new(mesh);
    let flat: Vec<f64> = mesh.vertices().iter().flatten().copied().collect();
    let positions: Vec<Point3> = plan
        .apply_rows(&flat, 3)
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let out_mesh = TriMesh::new(positions.clone(), plan.faces.clone())?;
    let d = features.dim();
    let feats = plan.apply_rows(features.data(), d);
    let tokens = TokenSequence::with_shape(plan.output_vertices(), d, feats)?.with_coords(positions)?;
    Ok((out_mesh, tokens))
}

/// Subdivides geometry only.
pub fn unpool_mesh(mesh: &TriMesh) -> TriMesh {
    let zeros = TokenSequence::zeros(mesh.num_vertices(), 0);
    unpool(mesh, &zeros).expect("shapes agree").0
}

/// Per-vertex offset from the mean of the connected neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianCoords(pub Vec<Point3>);

pub fn laplacian_coords(mesh: &TriMesh) -> Result<LaplacianCoords> {
    let adj = mesh.adjacency();
    let v = mesh.vertices();
    let mut out = Vec::with_capacity(v.len());
    for i in 0..v.len() {
        let nb = adj.neighbors(i);
        if nb.is_empty() {
            return Err(Error::Contract(format!("vertex {i} has no neighbors")));
        }
        let inv = 1.0 / nb.len() as f64;
        let mut mean = [0.0; 3];
        for &k in nb {
            for a in 0..3 {
                mean[a] += v[k][a];
            }
        }
        out.push([
            v[i][0] - mean[0] * inv,
            v[i][1] - mean[1] * inv,
            v[i][2] - mean[2] * inv,
        ]);
    }
    Ok(LaplacianCoords(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn octahedron() -> TriMesh {
        let v = vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ];
        let f = vec![
            [0, 2, 4],
            [2, 1, 4],
            [1, 3, 4],
            [3, 0, 4],
            [2, 0, 5],
            [1, 2, 5],
            [3, 1, 5],
            [0, 3, 5],
        ];
        TriMesh::new(v, f).unwrap()
    }

    #[test]
    fn template_counts() {
        let m = make_ellipsoid_template(&EllipsoidConfig::default()).unwrap();
        assert_eq!((m.num_vertices(), m.num_faces(), m.num_edges()), (156, 308, 462));
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.is_closed_manifold());
    }

    #[test]
    fn template_faces_point_outward() {
        let m = make_ellipsoid_template(&EllipsoidConfig::default()).unwrap();
        let v = m.vertices();
        for f in m.faces() {
            let (a, b, c) = (v[f[0]], v[f[1]], v[f[2]]);
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let w = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [
                u[1] * w[2] - u[2] * w[1],
                u[2] * w[0] - u[0] * w[2],
                u[0] * w[1] - u[1] * w[0],
            ];
            let centroid: Vec<f64> = (0..3).map(|k| (a[k] + b[k] + c[k]) / 3.0).collect();
            let dot: f64 = (0..3).map(|k| n[k] * centroid[k]).sum();
            assert!(dot > 0.0, "face {f:?} points inward");
        }
    }

    #[test]
    fn template_rejects_wrong_count() {
        let cfg = EllipsoidConfig {
            rings: 8,
            segments: 20,
            ..Default::default()
        };
        let err = make_ellipsoid_template(&cfg).unwrap_err();
        assert!(err.to_string().contains("162 vertices"), "{err}");
        let cfg = EllipsoidConfig {
            radii: [0.5, -1.0, 0.25],
            ..Default::default()
        };
        assert!(make_ellipsoid_template(&cfg).is_err());
    }

    #[test]
    fn bundled_template_matches_generator() {
        let generated = make_ellipsoid_template(&EllipsoidConfig::default()).unwrap();
        let bundled = bundled_template();
        assert_eq!(bundled.faces(), generated.faces());
        assert_eq!(BUNDLED_TEMPLATE, generated.to_obj());
        for (a, b) in bundled.vertices().iter().zip(generated.vertices()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 5e-7);
            }
        }
    }

    #[test]
    fn unpool_trace() {
        let mut m = bundled_template();
        let mut trace = vec![(m.num_vertices(), m.num_faces(), m.num_edges())];
        for _ in 0..3 {
            m = unpool_mesh(&m);
            assert_eq!(m.euler_characteristic(), 2);
            assert!(m.is_closed_manifold());
            trace.push((m.num_vertices(), m.num_faces(), m.num_edges()));
        }
        assert_eq!(
            trace,
            vec![
                (156, 308, 462),
                (618, 1232, 1848),
                (2466, 4928, 7392),
                (9858, 19712, 29568)
            ]
        );
    }

    #[test]
    fn unpool_midpoints_and_features() {
        let m = octahedron();
        let d = 2;
        let feats: Vec<f64> = (0..m.num_vertices() * d).map(|x| x as f64).collect();
        let tokens = TokenSequence::new(feats.clone(), d).unwrap();
        let (out, t) = unpool(&m, &tokens).unwrap();
        assert_eq!(out.num_vertices(), 6 + 12);
        assert_eq!(out.num_faces(), 32);
        assert_eq!(&out.vertices()[..6], m.vertices());
        for (e, &[a, b]) in m.edges().iter().enumerate() {
            let p = out.vertices()[6 + e];
            for k in 0..3 {
                assert_eq!(p[k], 0.5 * (m.vertices()[a][k] + m.vertices()[b][k]));
            }
            for c in 0..d {
                assert_eq!(t.row(6 + e)[c], 0.5 * (feats[a * d + c] + feats[b * d + c]));
            }
        }
        // midpoints in sorted edge order
        let mut sorted = m.edges().to_vec();
        sorted.sort();
        assert_eq!(sorted, m.edges());
    }

    #[test]
    fn unpool_rejects_feature_count_mismatch() {
        let m = octahedron();
        let tokens = TokenSequence::zeros(5, 3);
        assert!(matches!(unpool(&m, &tokens), Err(Error::Contract(_))));
    }

    #[test]
    fn unpool_is_deterministic() {
        let m = bundled_template();
        let a = unpool_mesh(&m);
        let b = unpool_mesh(&m);
        assert_eq!(a, b);
    }

    #[test]
    fn laplacian_octahedron_apex() {
        let m = octahedron();
        let l = laplacian_coords(&m).unwrap();
        assert_eq!(l.0[4], [0.0, 0.0, 1.0]);
        // every vertex points radially outward
        for (p, d) in m.vertices().iter().zip(&l.0) {
            assert_eq!(p, d);
        }
    }

    #[test]
    fn laplacian_zero_at_neighbor_centroid() {
        // fan: center vertex surrounded symmetrically
        let v = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, -1.0, 0.0],
        ];
        let f = vec![[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]];
        let m = TriMesh::new(v, f).unwrap();
        assert_eq!(laplacian_coords(&m).unwrap().0[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn laplacian_rejects_isolated_vertex() {
        let v = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]];
        let m = TriMesh::new(v, vec![[0, 1, 2]]).unwrap();
        assert!(matches!(laplacian_coords(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_bad_faces() {
        let v = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(TriMesh::new(v, vec![[0, 1, 1]]).is_err());
    }

    #[test]
    fn adjacency_pairs() {
        let m = octahedron();
        let adj = m.adjacency();
        assert_eq!(adj.neighbors(4), &[0, 1, 2, 3]);
        let (t, s) = adj.directed_pairs();
        assert_eq!(t.len(), 2 * m.num_edges());
        assert_eq!(s.len(), t.len());
    }
}
