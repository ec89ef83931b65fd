//! Chamfer-L1, normal-consistency smoothness, Laplacian, point-move and
//! edge-length losses, as plain functions and as tape expressions.
//!
//! The plain functions return sums, except Chamfer which averages per
//! direction. The tape versions take a [`Reduction`] for the four
//! regularizers so training can average them per element instead.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::mesh::{laplacian_coords, Adjacency, Point3, TriMesh};

fn norm(v: Point3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Index of the nearest point of `to` for every point of `from`.
pub fn nearest_indices(from: &[Point3], to: &[Point3]) -> Vec<usize> {
    let tree = KdTree::new(to);
    from.iter()
        .map(|p| tree.nearest(p).expect("nonempty target").index)
        .collect()
}

/// Mean nearest-neighbor distance from `p` to `q` plus the same from `q`
/// to `p`.
pub fn chamfer_l1(p: &[Point3], q: &[Point3]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Empty("point set"));
    }
    let one_way = |a: &[Point3], b: &[Point3]| {
        let tree = KdTree::new(b);
        a.iter()
            .map(|x| tree.nearest(x).expect("nonempty").dist2.sqrt())
            .sum::<f64>()
            / a.len() as f64
    };
    Ok(one_way(p, q) + one_way(q, p))
}

/// Unit-length copies of `normals`, warning once if any needed fixing.
pub fn unit_normals(normals: &[Point3]) -> Result<Vec<Point3>> {
    let mut fixed = 0usize;
    let out = normals
        .iter()
        .map(|n| {
            let l = norm(*n);
            if l == 0.0 || !l.is_finite() {
                return Err(Error::Contract("ground-truth normal of zero length".into()));
            }
            if (l - 1.0).abs() > 1e-9 {
                fixed += 1;
            }
            Ok([n[0] / l, n[1] / l, n[2] / l])
        })
        .collect::<Result<Vec<_>>>()?;
    if fixed > 0 {
        log::warn!("normalized {fixed} ground-truth normals that were not unit length");
    }
    Ok(out)
}

/// Sum over edges `(a, b)`, `a < b`, of `|<p_b - p_a, n_q>|` where `q` is
/// the ground-truth point nearest to `p_a`.
pub fn smooth_loss(mesh: &TriMesh, gt_points: &[Point3], gt_normals: &[Point3]) -> Result<f64> {
    check_cloud(gt_points, gt_normals)?;
    let normals = unit_normals(gt_normals)?;
    let near = nearest_indices(mesh.vertices(), gt_points);
    let v = mesh.vertices();
    Ok(mesh
        .edges()
        .iter()
        .map(|&[a, b]| {
            let e = sub(&v[b], &v[a]);
            let n = normals[near[a]];
            (e[0] * n[0] + e[1] * n[1] + e[2] * n[2]).abs()
        })
        .sum())
}

fn check_cloud(points: &[Point3], normals: &[Point3]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Empty("ground-truth points"));
    }
    if points.len() != normals.len() {
        return Err(Error::Contract(format!(
            "{} points but {} normals",
            points.len(),
            normals.len()
        )));
    }
    Ok(())
}

fn check_pair(before: &TriMesh, after: &TriMesh) -> Result<()> {
    if before.num_vertices() != after.num_vertices() {
        return Err(Error::Contract(format!(
            "paired loss got {} and {} vertices",
            before.num_vertices(),
            after.num_vertices()
        )));
    }
    Ok(())
}

/// `sum_i |delta_i(after) - delta_i(before)|`.
pub fn laplacian_loss(before: &TriMesh, after: &TriMesh) -> Result<f64> {
    check_pair(before, after)?;
    let (d0, d1) = (laplacian_coords(before)?, laplacian_coords(after)?);
    Ok(d0.0.iter().zip(&d1.0).map(|(a, b)| norm(sub(b, a))).sum())
}

/// `sum_i |p_i(after) - p_i(before)|`.
pub fn point_move_loss(before: &TriMesh, after: &TriMesh) -> Result<f64> {
    check_pair(before, after)?;
    Ok(before
        .vertices()
        .iter()
        .zip(after.vertices())
        .map(|(a, b)| norm(sub(b, a)))
        .sum())
}

/// Total edge length.
pub fn edge_loss(mesh: &TriMesh) -> f64 {
    let v = mesh.vertices();
    mesh.edges().iter().map(|&[a, b]| norm(sub(&v[b], &v[a]))).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Reduction {
    Sum,
    /// Divide each regularizer by its number of terms.
    #[default]
    Mean,
}

impl Reduction {
    fn apply<'t>(self, per_item: &Var<'t>) -> Var<'t> {
        match self {
            Reduction::Sum => per_item.sum(),
            Reduction::Mean => per_item.sum().scale(1.0 / per_item.rows() as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub chamfer: f64,
    pub smooth: f64,
    pub laplacian: f64,
    pub point_move: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            chamfer: 1.0,
            smooth: 1.6e-4,
            laplacian: 0.3,
            point_move: 0.1,
            edge: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub chamfer: f64,
    pub smooth: f64,
    pub laplacian: f64,
    pub point_move: f64,
    pub edge: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossReport {
    /// The weighted sum in the order the tape evaluates it.
    pub fn weighted_total(&self) -> f64 {
        let w = &self.weights;
        w.chamfer * self.chamfer
            + w.smooth * self.smooth
            + w.laplacian * self.laplacian
            + w.point_move * self.point_move
            + w.edge * self.edge
    }
}

pub const LOSS_CSV_HEADER: &str = "step,chamfer,smooth,laplacian,point_move,edge,total";

pub fn loss_csv(curve: &[LossReport]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for (i, r) in curve.iter().enumerate() {
        s.push_str(&format!(
            "{i},{},{},{},{},{},{}\n",
            r.chamfer, r.smooth, r.laplacian, r.point_move, r.edge, r.total
        ));
    }
    s
}

/// Ground truth prepared once for repeated tape evaluation.
pub struct Target {
    pub points: Vec<Point3>,
    pub normals: Vec<Point3>,
    values: Rc<Tensor>,
    normal_values: Rc<Tensor>,
}

impl Target {
    pub fn new(points: Vec<Point3>, normals: Vec<Point3>) -> Result<Self> {
        check_cloud(&points, &normals)?;
        let normals = unit_normals(&normals)?;
        Ok(Self {
            values: Rc::new(Tensor::from_points(&points)),
            normal_values: Rc::new(Tensor::from_points(&normals)),
            points,
            normals,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Edge endpoints of a fixed topology as gather indices.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub first: Rc<[usize]>,
    pub second: Rc<[usize]>,
}

impl EdgeIndex {
    pub fn new(edges: &[[usize; 2]]) -> Self {
        Self {
            first: edges.iter().map(|e| e[0]).collect(),
            second: edges.iter().map(|e| e[1]).collect(),
        }
    }
}

/// Mean-per-direction Chamfer-L1 of an `n x 3` expression against the
/// target. Nearest-neighbor assignments are taken from the current values
/// and held fixed.
pub fn chamfer_var<'t>(pred: &Var<'t>, target: &Target) -> Var<'t> {
    let tape = pred.tape();
    let pts = pred.value().to_points();
    let gt = tape.constant_rc(target.values.clone());
    let to_gt = nearest_indices(&pts, &target.points);
    let to_pred = nearest_indices(&target.points, &pts);
    let forward = pred.sub(&gt.gather_rows(to_gt)).row_norm().mean_rows();
    let backward = pred.gather_rows(to_pred).sub(&gt).row_norm().mean_rows();
    forward.add(&backward).sum()
}

pub fn smooth_var<'t>(pos: &Var<'t>, edges: &EdgeIndex, target: &Target, reduction: Reduction) -> Var<'t> {
    let tape = pos.tape();
    let pts = pos.value().to_points();
    let sources: Vec<Point3> = edges.first.iter().map(|&a| pts[a]).collect();
    let near = nearest_indices(&sources, &target.points);
    let normals = tape.constant_rc(target.normal_values.clone()).gather_rows(near);
    let e = pos.gather_rows(edges.second.clone()).sub(&pos.gather_rows(edges.first.clone()));
    reduction.apply(&e.mul(&normals).sum_cols().abs())
}

/// Laplacian coordinates of an `n x 3` expression.
pub fn laplacian_var<'t>(pos: &Var<'t>, adj: &LaplacianIndex) -> Var<'t> {
    let tape = pos.tape();
    let mean = pos
        .gather_rows(adj.sources.clone())
        .scatter_add_rows(adj.targets.clone(), adj.vertices)
        .mul_col(&tape.constant_rc(adj.inv_degree.clone()));
    pos.sub(&mean)
}

#[derive(Debug, Clone)]
pub struct LaplacianIndex {
    pub vertices: usize,
    pub targets: Rc<[usize]>,
    pub sources: Rc<[usize]>,
    pub inv_degree: Rc<Tensor>,
}

impl LaplacianIndex {
    pub fn new(adj: &Adjacency) -> Result<Self> {
        let n = adj.num_vertices();
        if let Some(i) = (0..n).find(|&i| adj.degree(i) == 0) {
            return Err(Error::Contract(format!("vertex {i} has no neighbors")));
        }
        let (targets, sources) = adj.directed_pairs();
        Ok(Self {
            vertices: n,
            targets: targets.into(),
            sources: sources.into(),
            inv_degree: Rc::new(
                Tensor::matrix(n, 1, (0..n).map(|i| 1.0 / adj.degree(i) as f64).collect()).expect("n x 1"),
            ),
        })
    }
}

pub fn laplacian_loss_var<'t>(before: &Var<'t>, after: &Var<'t>, adj: &LaplacianIndex, reduction: Reduction) -> Var<'t> {
    let diff = laplacian_var(after, adj).sub(&laplacian_var(before, adj));
    reduction.apply(&diff.row_norm())
}

pub fn point_move_var<'t>(before: &Var<'t>, after: &Var<'t>, reduction: Reduction) -> Var<'t> {
    reduction.apply(&after.sub(before).row_norm())
}

pub fn edge_var<'t>(pos: &Var<'t>, edges: &EdgeIndex, reduction: Reduction) -> Var<'t> {
    let e = pos.gather_rows(edges.second.clone()).sub(&pos.gather_rows(edges.first.clone()));
    reduction.apply(&e.row_norm())
}

/// The five terms for one stage (or summed over several).
pub struct LossTerms<'t> {
    pub chamfer: Var<'t>,
    pub smooth: Var<'t>,
    pub laplacian: Var<'t>,
    pub point_move: Var<'t>,
    pub edge: Var<'t>,
}

impl<'t> LossTerms<'t> {
    pub fn stage(
        before: &Var<'t>,
        after: &Var<'t>,
        edges: &EdgeIndex,
        lap: &LaplacianIndex,
        target: &Target,
        reduction: Reduction,
    ) -> Self {
        Self {
            chamfer: chamfer_var(after, target),
            smooth: smooth_var(after, edges, target, reduction),
            laplacian: laplacian_loss_var(before, after, lap, reduction),
            point_move: point_move_var(before, after, reduction),
            edge: edge_var(after, edges, reduction),
        }
    }

    pub fn plus(&self, other: &Self) -> Self {
        Self {
            chamfer: self.chamfer.add(&other.chamfer),
            smooth: self.smooth.add(&other.smooth),
            laplacian: self.laplacian.add(&other.laplacian),
            point_move: self.point_move.add(&other.point_move),
            edge: self.edge.add(&other.edge),
        }
    }

    /// Weighted total on the tape plus the matching report.
    pub fn total(&self, w: &LossWeights) -> (Var<'t>, LossReport) {
        let total = self
            .chamfer
            .scale(w.chamfer)
            .add(&self.smooth.scale(w.smooth))
            .add(&self.laplacian.scale(w.laplacian))
            .add(&self.point_move.scale(w.point_move))
            .add(&self.edge.scale(w.edge));
        let report = LossReport {
            chamfer: self.chamfer.item(),
            smooth: self.smooth.item(),
            laplacian: self.laplacian.item(),
            point_move: self.point_move.item(),
            edge: self.edge.item(),
            weights: *w,
            total: total.item(),
        };
        (total, report)
    }
}
