//! Linear scale search: crop the object, pad it by a border proportional
//! to its size, reconstruct, and keep the border scale whose result best
//! matches the input silhouette.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{iou, Mask, RgbImage};
use crate::mesh::TriMesh;
use crate::model::TdmModel;
use crate::perception::{synth_backbone, Camera, IMAGE_SIZE};

pub const DEFAULT_GRID: [f64; 5] = [0.2, 0.25, 0.3, 0.35, 0.4];
pub const SCALE_RANGE: (f64, f64) = (0.2, 0.4);

/// Checks a search grid; values outside `[0.2, 0.4]` need `allow_wide`.
pub fn validate_grid(grid: &[f64], allow_wide: bool) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("scale grid is empty".into()));
    }
    for &s in grid {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::InvalidConfig(format!("scale {s} is not a nonnegative number")));
        }
        if !allow_wide && !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&s) {
            return Err(Error::InvalidConfig(format!(
                "scale {s} lies outside [{}, {}]; pass the wide-grid override to allow it",
                SCALE_RANGE.0, SCALE_RANGE.1
            )));
        }
    }
    Ok(())
}

pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("bad scale `{}` in grid", t.trim())))
        })
        .collect()
}

/// Output of [`crop_and_pad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub image: RgbImage,
    pub mask: Mask,
    /// Side of the square around the object's bounding box.
    pub side: usize,
    /// Border added on each side, `round(s * side)`.
    pub border: usize,
}

impl Crop {
    pub fn padded_side(&self) -> usize {
        self.side + 2 * self.border
    }
}

/// Mean color of the outermost pixel ring, accumulated in mirror
/// symmetric pairs so that mirrored images give the same bits.
fn border_mean(img: &RgbImage) -> [f64; 3] {
    let (w, h) = (img.width, img.height);
    let mut acc = [0.0; 3];
    let mut count = 0usize;
    let mut add_pair = |a: [f64; 3], b: Option<[f64; 3]>| {
        for c in 0..3 {
            acc[c] += a[c] + b.map_or(0.0, |b| b[c]);
        }
        count += 1 + usize::from(b.is_some());
    };
    for y in 0..h {
        let full_row = y == 0 || y == h - 1;
        if full_row {
            for x in 0..w.div_ceil(2) {
                let mx = w - 1 - x;
                add_pair(img.pixel(x, y), (mx != x).then(|| img.pixel(mx, y)));
            }
        } else if w > 1 {
            add_pair(img.pixel(0, y), Some(img.pixel(w - 1, y)));
        } else {
            add_pair(img.pixel(0, y), None);
        }
    }
    acc.map(|v| v / count as f64)
}

/// Sample position along one axis, as floor index and the two linear
/// weights. Positions are kept as integers in units of `1/(2*IMAGE_SIZE)`
/// so mirrored inputs produce exactly mirrored weights.
fn axis_sample(lo: usize, hi: usize, side: usize, i: usize) -> (i64, f64, f64) {
    let unit = 2 * IMAGE_SIZE as i64;
    // unit * (source coordinate in pixel-center units): the box center
    // (lo + hi) / 2 plus the offset of output pixel i from the middle
    let n = (IMAGE_SIZE as i64) * (lo + hi) as i64 + (2 * i as i64 + 1 - IMAGE_SIZE as i64) * side as i64;
    let q = n.div_euclid(unit);
    let r = n.rem_euclid(unit);
    (q, (unit - r) as f64 / unit as f64, r as f64 / unit as f64)
}

/// Crops the mask's bounding box to a centered square of side `h`, adds
/// a border of `round(s * h)` filled with the mean border color, and
/// resamples bilinearly to `224 x 224`. The mask is resampled the same
/// way and thresholded at one half.
pub fn crop_and_pad(image: &RgbImage, mask: &Mask, s: f64) -> Result<Crop> {
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::Contract(format!(
            "image is {}x{} but mask is {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    if !(s.is_finite() && s >= 0.0) {
        return Err(Error::InvalidConfig(format!("scale {s} must be nonnegative")));
    }
    let (x0, y0, x1, y1) = mask.bbox().ok_or(Error::Empty("mask"))?;
    if x0 == 0 && y0 == 0 && x1 == mask.width - 1 && y1 == mask.height - 1 {
        log::warn!("mask touches all four image borders; the object may be truncated");
    }
    let side = (x1 - x0 + 1).max(y1 - y0 + 1);
    let border = (s * side as f64).round() as usize;
    let padded = side + 2 * border;
    let fill = border_mean(image);

    let (w, h) = (image.width as i64, image.height as i64);
    let xs: Vec<_> = (0..IMAGE_SIZE).map(|i| axis_sample(x0, x1, padded, i)).collect();
    let ys: Vec<_> = (0..IMAGE_SIZE).map(|i| axis_sample(y0, y1, padded, i)).collect();
    let pix = |x: i64, y: i64| -> ([f64; 3], f64) {
        if x < 0 || y < 0 || x >= w || y >= h {
            (fill, 0.0)
        } else {
            let (xu, yu) = (x as usize, y as usize);
            (image.pixel(xu, yu), if mask.get(xu, yu) { 1.0 } else { 0.0 })
        }
    };
    let mut out = RgbImage::filled(IMAGE_SIZE, IMAGE_SIZE, [0.0; 3]);
    let mut out_mask = Mask::empty(IMAGE_SIZE, IMAGE_SIZE);
    for (j, &(qy, wy0, wy1)) in ys.iter().enumerate() {
        for (i, &(qx, wx0, wx1)) in xs.iter().enumerate() {
            // interpolate along x first; each row is a sum of two products,
            // which is symmetric under mirroring
            let row = |y: i64| {
                let (a, ma) = pix(qx, y);
                let (b, mb) = pix(qx + 1, y);
                (
                    [0, 1, 2].map(|c| wx0 * a[c] + wx1 * b[c]),
                    wx0 * ma + wx1 * mb,
                )
            };
            let (r0, m0) = row(qy);
            let (r1, m1) = row(qy + 1);
            out.set_pixel(i, j, [0, 1, 2].map(|c| wy0 * r0[c] + wy1 * r1[c]));
            out_mask.set(i, j, wy0 * m0 + wy1 * m1 >= 0.5);
        }
    }
    Ok(Crop {
        image: out,
        mask: out_mask,
        side,
        border,
    })
}

/// Filled silhouette of a mesh by scanline fill: a pixel is set when its
/// center lies inside (or on the boundary of) a projected triangle.
/// Triangles with a vertex behind the camera are skipped.
pub fn rasterize_silhouette(mesh: &TriMesh, camera: &Camera, width: usize, height: usize) -> Mask {
    let mut mask = Mask::empty(width, height);
    let projected: Vec<Option<[f64; 2]>> = mesh.vertices().iter().map(|p| camera.project(p)).collect();
    for f in mesh.faces() {
        let (Some(a), Some(b), Some(c)) = (projected[f[0]], projected[f[1]], projected[f[2]]) else {
            continue;
        };
        let tri = [a, b, c];
        let ymin = a[1].min(b[1]).min(c[1]);
        let ymax = a[1].max(b[1]).max(c[1]);
        let row_lo = ((ymin - 0.5).ceil().max(0.0)) as i64;
        let row_hi = ((ymax - 0.5).floor()).min(height as f64 - 1.0) as i64;
        for row in row_lo..=row_hi {
            let yc = row as f64 + 0.5;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for k in 0..3 {
                let (p, q) = (tri[k], tri[(k + 1) % 3]);
                let (ya, yb) = (p[1].min(q[1]), p[1].max(q[1]));
                if yc < ya || yc > yb {
                    continue;
                }
                if p[1] == q[1] {
                    lo = lo.min(p[0].min(q[0]));
                    hi = hi.max(p[0].max(q[0]));
                } else {
                    let x = p[0] + (yc - p[1]) * (q[0] - p[0]) / (q[1] - p[1]);
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
            if lo > hi {
                continue;
            }
            let c_lo = ((lo - 0.5).ceil().max(0.0)) as i64;
            let c_hi = ((hi - 0.5).floor()).min(width as f64 - 1.0) as i64;
            for col in c_lo..=c_hi {
                mask.set(col as usize, row as usize, true);
            }
        }
    }
    mask
}

/// Ranks a reconstruction against the cropped input mask.
pub trait Scorer {
    fn score(&self, mesh: &TriMesh, mask: &Mask, camera: &Camera) -> Result<f64>;
}

/// Silhouette IoU at the crop resolution.
#[derive(Debug, Clone, Copy, Default)]
pub struct SilhouetteIou;

impl Scorer for SilhouetteIou {
    fn score(&self, mesh: &TriMesh, mask: &Mask, camera: &Camera) -> Result<f64> {
        quality_score(mesh, mask, camera)
    }
}

pub fn quality_score(mesh: &TriMesh, mask: &Mask, camera: &Camera) -> Result<f64> {
    if mesh.num_vertices() == 0 {
        return Err(Error::Empty("mesh"));
    }
    let sil = rasterize_silhouette(mesh, camera, mask.width, mask.height);
    iou(&sil, mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub s: f64,
    pub p: usize,
    pub score: Option<f64>,
    pub error: Option<String>,
}

pub struct SearchResult {
    pub best: usize,
    pub table: Vec<CandidateRow>,
    pub crop: Crop,
    pub meshes: Vec<TriMesh>,
}

impl SearchResult {
    pub fn chosen_s(&self) -> f64 {
        self.table[self.best].s
    }

    pub fn report(&self) -> SearchReport {
        let row = &self.table[self.best];
        SearchReport {
            chosen_s: row.s,
            chosen_p: row.p,
            best_score: row.score.unwrap_or(0.0),
            vertex_counts: self.meshes.iter().map(TriMesh::num_vertices).collect(),
            candidates: self.table.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub chosen_s: f64,
    pub chosen_p: usize,
    pub best_score: f64,
    pub vertex_counts: Vec<usize>,
    pub candidates: Vec<CandidateRow>,
}

/// Tries every scale in `grid` (in order) and keeps the highest score;
/// ties go to the smaller scale.
pub fn linear_scale_search(
    image: &RgbImage,
    mask: &Mask,
    camera: &Camera,
    model: &TdmModel,
    grid: &[f64],
    seed: u64,
    scorer: &dyn Scorer,
) -> Result<SearchResult> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("scale grid is empty".into()));
    }
    camera.validate()?;
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, Crop, Vec<TriMesh>)> = None;
    for (i, &s) in grid.iter().enumerate() {
        let attempt = (|| -> Result<(Crop, Vec<TriMesh>, f64)> {
            let crop = crop_and_pad(image, mask, s)?;
            let pyramid = synth_backbone(&crop.image, seed)?;
            let meshes = model.reconstruct(&pyramid, camera)?;
            let score = scorer.score(meshes.last().expect("four meshes"), &crop.mask, camera)?;
            Ok((crop, meshes, score))
        })();
        match attempt {
            Ok((crop, meshes, score)) => {
                log::info!("s = {s}: p = {}, score = {score:.6}", crop.border);
                table.push(CandidateRow {
                    s,
                    p: crop.border,
                    score: Some(score),
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((j, b, _, _)) => score > *b || (score == *b && s < grid[*j]),
                };
                if better {
                    best = Some((i, score, crop, meshes));
                }
            }
            Err(e) => {
                log::warn!("s = {s} failed: {e}");
                let p = mask.bbox().map_or(0, |(x0, y0, x1, y1)| {
                    (s * (x1 - x0 + 1).max(y1 - y0 + 1) as f64).round() as usize
                });
                table.push(CandidateRow {
                    s,
                    p,
                    score: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let Some((best, _, crop, meshes)) = best else {
        let diag = table
            .iter()
            .map(|r| format!("s={}: {}", r.s, r.error.as_deref().unwrap_or("?")))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::SearchFailed(grid.len(), diag));
    };
    Ok(SearchResult {
        best,
        table,
        crop,
        meshes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> Mask {
        let mut m = Mask::empty(w, h);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn grid_parsing_and_validation() {
        assert_eq!(parse_grid("0.2, 0.3").unwrap(), vec![0.2, 0.3]);
        assert!(parse_grid("0.2,x").is_err());
        assert!(validate_grid(&DEFAULT_GRID, false).is_ok());
        assert!(validate_grid(&[], false).is_err());
        assert!(validate_grid(&[0.5], false).is_err());
        assert!(validate_grid(&[0.5], true).is_ok());
    }

    #[test]
    fn border_arithmetic() {
        let img = RgbImage::filled(400, 400, [0.5; 3]);
        let m = square_mask(400, 400, 100, 100, 200);
        let c = crop_and_pad(&img, &m, 0.3).unwrap();
        assert_eq!((c.side, c.border, c.padded_side()), (200, 60, 320));
    }

    #[test]
    fn zero_border_fills_frame() {
        let img = RgbImage::filled(300, 300, [0.1, 0.2, 0.3]);
        let m = square_mask(300, 300, 70, 70, 160);
        let c = crop_and_pad(&img, &m, 0.0).unwrap();
        assert_eq!(c.mask.count(), 224 * 224);
    }

    #[test]
    fn smaller_border_gives_larger_object() {
        let img = RgbImage::filled(300, 300, [0.1, 0.2, 0.3]);
        let m = square_mask(300, 300, 50, 80, 120);
        let a = crop_and_pad(&img, &m, 0.2).unwrap().mask.count();
        let b = crop_and_pad(&img, &m, 0.4).unwrap().mask.count();
        assert!(a > b, "{a} vs {b}");
    }

    #[test]
    fn empty_mask_and_size_mismatch() {
        let img = RgbImage::filled(10, 10, [0.0; 3]);
        assert!(matches!(crop_and_pad(&img, &Mask::empty(10, 10), 0.3), Err(Error::Empty(_))));
        assert!(crop_and_pad(&img, &Mask::empty(9, 10), 0.3).is_err());
    }

    #[test]
    fn border_mean_uses_only_the_ring() {
        let mut img = RgbImage::filled(5, 4, [1.0; 3]);
        img.set_pixel(2, 2, [100.0; 3]);
        assert_eq!(border_mean(&img), [1.0; 3]);
    }

    #[test]
    fn rasterized_square_and_iou() {
        // two triangles covering [40, 80) x [40, 80) in pixels at depth 1
        let cam = Camera {
            translation: [0.0; 3],
            ..Camera::default()
        };
        let to_model = |u: f64, v: f64| [(u - cam.cx) / cam.focal, (v - cam.cy) / cam.focal, 1.0];
        let mesh = TriMesh::new(
            vec![to_model(40.0, 40.0), to_model(80.0, 40.0), to_model(80.0, 80.0), to_model(40.0, 80.0)],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let sil = rasterize_silhouette(&mesh, &cam, 224, 224);
        assert_eq!(sil.count(), 40 * 40);
        assert_eq!(sil, square_mask(224, 224, 40, 40, 40));
        assert_eq!(quality_score(&mesh, &sil, &cam).unwrap(), 1.0);
        assert_eq!(quality_score(&mesh, &square_mask(224, 224, 150, 150, 40), &cam).unwrap(), 0.0);
        let half = square_mask(224, 224, 60, 40, 40);
        // overlap 20x40 of two 40x40 squares
        assert_eq!(quality_score(&mesh, &half, &cam).unwrap(), 1.0 / 3.0);
    }
}
