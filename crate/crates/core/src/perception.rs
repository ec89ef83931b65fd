//! Image features for mesh vertices: a pinhole camera, a seeded stand-in
//! backbone producing a four-level feature pyramid, and bilinear pooling
//! of pixel-aligned features at projected vertex positions.
//!
//! Pooling is linear in the grid values, so sampling a grid and then
//! multiplying by a weight matrix equals sampling the grid already
//! multiplied by it. The model relies on this: each level is projected
//! to the token width once and then sampled, which keeps the
//! differentiable path small.

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::TokenSequence;
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::mesh::{Point3, TriMesh};
use crate::nn::{init_uniform, Bound, ParamId, ParamStore};

pub const IMAGE_SIZE: usize = 224;
pub const LEVEL_RESOLUTIONS: [usize; 4] = [56, 28, 14, 7];
pub const LEVEL_CHANNELS: [usize; 4] = [256, 512, 1024, 2048];
/// Pooled channels over all levels plus the three coordinates.
pub const VERTEX_FEATURE_DIM: usize = 3843;

/// Pinhole camera; `rotation` and `translation` map model to camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            focal: 248.0,
            cx: 112.0,
            cy: 112.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 2.2],
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::InvalidConfig(format!("focal length {} must be positive", self.focal)));
        }
        let inside = |c: f64| (0.0..IMAGE_SIZE as f64).contains(&c);
        if !inside(self.cx) || !inside(self.cy) {
            return Err(Error::InvalidConfig(format!(
                "principal point ({}, {}) lies outside the {IMAGE_SIZE}x{IMAGE_SIZE} image",
                self.cx, self.cy
            )));
        }
        let all = self.rotation.iter().flatten().chain(&self.translation);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("extrinsic has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn to_camera_frame(&self, p: &Point3) -> Point3 {
        let r = &self.rotation;
        std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }

    /// Pixel coordinates of a model-frame point; `None` when it is not in
    /// front of the camera.
    pub fn project(&self, p: &Point3) -> Option<[f64; 2]> {
        self.project_camera_frame(&self.to_camera_frame(p))
    }

    pub fn project_camera_frame(&self, pc: &Point3) -> Option<[f64; 2]> {
        if pc[2] <= 0.0 {
            return None;
        }
        Some([
            self.focal * pc[0] / pc[2] + self.cx,
            self.focal * pc[1] / pc[2] + self.cy,
        ])
    }

    /// Parses `key = value` lines: `focal`, `cx`, `cy` and `extrinsic`
    /// (12 numbers, the rows of `[R | t]`). `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.into(),
            line,
            msg,
        };
        let (mut focal, mut cx, mut cy, mut extrinsic) = (None, None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| perr(i + 1, format!("expected `key = value`, got `{line}`")))?;
            let nums: Vec<f64> = value
                .split([' ', ',', '\t'])
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| perr(i + 1, format!("non-numeric value `{}`", value.trim())))?;
            let single = |nums: &[f64]| match nums {
                [v] => Ok(*v),
                _ => Err(perr(i + 1, format!("`{}` takes one number", key.trim()))),
            };
            match key.trim() {
                "focal" => focal = Some(single(&nums)?),
                "cx" => cx = Some(single(&nums)?),
                "cy" => cy = Some(single(&nums)?),
                "extrinsic" => {
                    if nums.len() != 12 {
                        return Err(perr(i + 1, format!("extrinsic needs 12 numbers, got {}", nums.len())));
                    }
                    extrinsic = Some(nums);
                }
                other => return Err(perr(i + 1, format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| perr(0, format!("missing key `{k}`"));
        let e = extrinsic.ok_or_else(|| missing("extrinsic"))?;
        let cam = Camera {
            focal: focal.ok_or_else(|| missing("focal"))?,
            cx: cx.ok_or_else(|| missing("cx"))?,
            cy: cy.ok_or_else(|| missing("cy"))?,
            rotation: std::array::from_fn(|r| [e[4 * r], e[4 * r + 1], e[4 * r + 2]]),
            translation: std::array::from_fn(|r| e[4 * r + 3]),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_config_string(&self) -> String {
        let rows: Vec<String> = (0..3)
            .map(|r| {
                let [a, b, c] = self.rotation[r];
                format!("{a} {b} {c} {}", self.translation[r])
            })
            .collect();
        format!(
            "focal = {}\ncx = {}\ncy = {}\nextrinsic = {}\n",
            self.focal,
            self.cx,
            self.cy,
            rows.join("  ")
        )
    }
}

/// One `res x res x channels` grid stored as a `res*res x channels` matrix
/// with rows in `y * res + x` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub res: usize,
    pub values: Rc<Tensor>,
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        self.values.row(y * self.res + x)
    }

    /// Grid coordinate of pixel coordinate `u`; cell centers land on
    /// integers.
    pub fn grid_coord(&self, u: f64) -> f64 {
        u * self.res as f64 / IMAGE_SIZE as f64 - 0.5
    }

    /// Bilinear sample at grid coordinates, with zeros outside the grid.
    pub fn sample(&self, gx: f64, gy: f64, out: &mut [f64]) {
        out.fill(0.0);
        for (ix, iy, w) in bilinear_corners(gx, gy) {
            if w != 0.0 && in_grid(ix, iy, self.res) {
                for (o, v) in out.iter_mut().zip(self.cell(ix as usize, iy as usize)) {
                    *o += w * v;
                }
            }
        }
    }
}

fn in_grid(ix: i64, iy: i64, res: usize) -> bool {
    ix >= 0 && iy >= 0 && (ix as usize) < res && (iy as usize) < res
}

fn bilinear_corners(gx: f64, gy: f64) -> [(i64, i64, f64); 4] {
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ]
}

fn in_frame(uv: [f64; 2]) -> bool {
    let r = 0.0..IMAGE_SIZE as f64;
    r.contains(&uv[0]) && r.contains(&uv[1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureGrid>,
}

impl FeaturePyramid {
    /// The coarsest level, whose 49 cells double as global tokens.
    pub fn global(&self) -> &FeatureGrid {
        &self.levels[3]
    }

    pub fn max_abs_diff(&self, other: &FeaturePyramid) -> f64 {
        self.levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| a.values.max_abs_diff(&b.values))
            .fold(0.0, f64::max)
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = (6.0 / rows as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Gathers non-overlapping `p x p` patches of a `res x res x c` grid into
/// rows of a `(res/p)^2 x p*p*c` matrix.
fn patches(grid: &[f64], res: usize, c: usize, p: usize) -> Vec<f64> {
    let out_res = res / p;
    let mut out = Vec::with_capacity(out_res * out_res * p * p * c);
    for oy in 0..out_res {
        for ox in 0..out_res {
            for dy in 0..p {
                for dx in 0..p {
                    let src = ((oy * p + dy) * res + ox * p + dx) * c;
                    out.extend_from_slice(&grid[src..src + c]);
                }
            }
        }
    }
    out
}

/// Seeded random strided convolutions with ReLU: a 4x4 stride-4 patch
/// layer to 56x56x256, then three 2x2 stride-2 layers doubling channels.
pub fn synth_backbone(image: &RgbImage, seed: u64) -> Result<FeaturePyramid> {
    if image.width != IMAGE_SIZE || image.height != IMAGE_SIZE {
        return Err(Error::Contract(format!(
            "backbone needs a {IMAGE_SIZE}x{IMAGE_SIZE} image, got {}x{}",
            image.width, image.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid: Vec<f64> = image.data.iter().map(|v| v - 0.5).collect();
    let (mut res, mut c) = (IMAGE_SIZE, 3);
    let mut levels = Vec::with_capacity(4);
    for (level, &out_c) in LEVEL_CHANNELS.iter().enumerate() {
        let p = if level == 0 { 4 } else { 2 };
        let x = patches(&grid, res, c, p);
        let (rows, fan_in) = ((res / p) * (res / p), p * p * c);
        let w = he_uniform(&mut rng, fan_in, out_c);
        let mut y = crate::autodiff::gemm(&x, false, &w, false, rows, fan_in, out_c);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        res /= p;
        c = out_c;
        debug_assert_eq!(res, LEVEL_RESOLUTIONS[level]);
        levels.push(FeatureGrid {
            res,
            values: Rc::new(Tensor::matrix(rows, out_c, y.clone())?),
        });
        grid = y;
    }
    Ok(FeaturePyramid { levels })
}

/// Per vertex: bilinear samples from all four levels followed by the
/// model-frame coordinate, `3843` values in all. Vertices behind the
/// camera or outside the frame get zero image features.
pub fn pool_vertex_features(mesh: &TriMesh, pyramid: &FeaturePyramid, camera: &Camera) -> Result<TokenSequence> {
    if mesh.num_vertices() == 0 {
        return Err(Error::Empty("mesh"));
    }
    let mut data = Vec::with_capacity(mesh.num_vertices() * VERTEX_FEATURE_DIM);
    for p in mesh.vertices() {
        let uv = camera.project(p).filter(|&uv| in_frame(uv));
        for g in &pyramid.levels {
            let start = data.len();
            data.resize(start + g.channels(), 0.0);
            if let Some([u, v]) = uv {
                g.sample(g.grid_coord(u), g.grid_coord(v), &mut data[start..]);
            }
        }
        data.extend_from_slice(p);
    }
    TokenSequence::with_shape(mesh.num_vertices(), VERTEX_FEATURE_DIM, data)?.with_coords(mesh.vertices().to_vec())
}

/// Pixel coordinates of tape positions, split into `n x 1` columns.
pub struct ProjectedVar<'t> {
    pub u: Var<'t>,
    pub v: Var<'t>,
    /// In front of the camera and inside the frame.
    pub visible: Vec<bool>,
}

pub fn project_var<'t>(positions: &Var<'t>, camera: &Camera) -> ProjectedVar<'t> {
    let tape = positions.tape();
    let n = positions.rows();
    let rt = Tensor::matrix(3, 3, (0..9).map(|i| camera.rotation[i % 3][i / 3]).collect()).expect("3x3");
    let pc = positions
        .matmul(&tape.constant(rt))
        .add_row(&tape.constant(Tensor::new(vec![3], camera.translation.to_vec()).expect("3")));
    let z = pc.slice_cols(2, 3);
    // Rows at or behind the camera plane get their depth shifted to 1 so
    // the division stays finite; they are masked out below.
    let shift: Vec<f64> = z.value().data().iter().map(|&d| if d > 0.0 { 0.0 } else { 1.0 - d }).collect();
    let inv_z = z.add(&tape.constant(Tensor::matrix(n, 1, shift).expect("n x 1"))).recip();
    let u = pc.slice_cols(0, 1).mul(&inv_z).scale(camera.focal).add_scalar(camera.cx);
    let v = pc.slice_cols(1, 2).mul(&inv_z).scale(camera.focal).add_scalar(camera.cy);
    let visible = (0..n)
        .map(|i| z.value().data()[i] > 0.0 && in_frame([u.value().data()[i], v.value().data()[i]]))
        .collect();
    ProjectedVar { u, v, visible }
}

/// Differentiable bilinear sample of a `res*res x c` grid at projected
/// positions; invisible vertices and out-of-grid corners contribute zero.
pub fn bilinear_sample_var<'t>(grid: &Var<'t>, res: usize, proj: &ProjectedVar<'t>) -> Var<'t> {
    let tape = grid.tape();
    let n = proj.visible.len();
    let scale = res as f64 / IMAGE_SIZE as f64;
    let gx = proj.u.scale(scale).add_scalar(-0.5);
    let gy = proj.v.scale(scale).add_scalar(-0.5);
    let col = |data: Vec<f64>| tape.constant(Tensor::matrix(n, 1, data).expect("n x 1"));
    let x0: Vec<f64> = gx.value().data().iter().map(|g| g.floor()).collect();
    let y0: Vec<f64> = gy.value().data().iter().map(|g| g.floor()).collect();
    let fx = gx.sub(&col(x0.clone()));
    let fy = gy.sub(&col(y0.clone()));
    let one_minus = |f: &Var<'t>| f.scale(-1.0).add_scalar(1.0);
    let (wx, wy) = ([one_minus(&fx), fx], [one_minus(&fy), fy]);

    let mut total: Option<Var<'t>> = None;
    for (dy, wyv) in wy.iter().enumerate() {
        for (dx, wxv) in wx.iter().enumerate() {
            let mut idx = Vec::with_capacity(n);
            let mut mask = Vec::with_capacity(n);
            for i in 0..n {
                let (ix, iy) = (x0[i] as i64 + dx as i64, y0[i] as i64 + dy as i64);
                let ok = proj.visible[i] && in_grid(ix, iy, res);
                idx.push(if ok { iy as usize * res + ix as usize } else { 0 });
                mask.push(if ok { 1.0 } else { 0.0 });
            }
            let w = wxv.mul(wyv).mul(&col(mask));
            let term = grid.gather_rows(idx).mul_col(&w);
            total = Some(match total {
                Some(t) => t.add(&term),
                None => term,
            });
        }
    }
    total.expect("four corners")
}

/// Learned map from pooled pixel-aligned features to token width,
/// applied per level before sampling.
#[derive(Debug, Clone)]
pub struct PooledProjection {
    pub levels: Vec<ParamId>,
    pub coords: ParamId,
    pub bias: ParamId,
}

impl PooledProjection {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let levels = LEVEL_CHANNELS
            .iter()
            .enumerate()
            .map(|(l, &c)| store.add(format!("{name}.level{l}"), init_uniform(rng, &[c, d], VERTEX_FEATURE_DIM)))
            .collect();
        Self {
            levels,
            coords: store.add(format!("{name}.coords"), init_uniform(rng, &[3, d], VERTEX_FEATURE_DIM)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    /// Each pyramid level multiplied by its weight, `res*res x d`.
    pub fn project_levels<'t>(&self, b: &Bound<'t>, pyramid: &FeaturePyramid) -> Vec<Var<'t>> {
        let tape = b.get(self.bias).tape();
        pyramid
            .levels
            .iter()
            .zip(&self.levels)
            .map(|(g, &w)| tape.constant_rc(g.values.clone()).matmul(b.get(w)))
            .collect()
    }

    /// `n x d` features for the vertices at `positions`.
    pub fn pool<'t>(
        &self,
        b: &Bound<'t>,
        projected: &[Var<'t>],
        pyramid: &FeaturePyramid,
        positions: &Var<'t>,
        camera: &Camera,
    ) -> Var<'t> {
        let proj = project_var(positions, camera);
        let mut acc = positions.matmul(b.get(self.coords)).add_row(b.get(self.bias));
        for (g, level) in projected.iter().zip(&pyramid.levels) {
            acc = acc.add(&bilinear_sample_var(g, level.res, &proj));
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, GradcheckOptions, Tape};
    use crate::mesh::bundled_template;

    fn small_grid(res: usize, c: usize, seed: u64) -> FeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureGrid {
            res,
            values: Rc::new(init_uniform(&mut rng, &[res * res, c], 1)),
        }
    }

    #[test]
    fn projection_examples() {
        let cam = Camera {
            translation: [0.0; 3],
            ..Camera::default()
        };
        let [u, v] = cam.project(&[0.1, 0.0, 1.0]).unwrap();
        assert!((u - 136.8).abs() < 1e-12 && v == 112.0);
        assert_eq!(cam.project(&[0.0, 0.0, 3.7]), Some([112.0, 112.0]));
        let [u2, _] = cam.project(&[0.1, 0.0, 2.0]).unwrap();
        assert!(((u2 - 112.0) - 0.5 * (u - 112.0)).abs() < 1e-12);
        assert_eq!(cam.project(&[0.0, 0.0, 0.0]), None);
        assert_eq!(cam.project(&[0.0, 0.0, -1.0]), None);
    }

    #[test]
    fn camera_config_round_trip_and_errors() {
        let cam = Camera {
            focal: 300.0,
            translation: [0.1, -0.2, 2.5],
            ..Camera::default()
        };
        let p = Path::new("cam.cfg");
        assert_eq!(Camera::parse(&cam.to_config_string(), p).unwrap(), cam);
        assert!(Camera::parse("focal = 248\ncx = 112\ncy = 112\n", p).is_err());
        assert!(Camera::parse("focal = abc", p).is_err());
        let bad_focal = cam.to_config_string().replace("focal = 300", "focal = -1");
        assert!(matches!(Camera::parse(&bad_focal, p), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn sampling_at_node_and_cell_midpoint() {
        let g = small_grid(4, 3, 1);
        let mut out = vec![0.0; 3];
        g.sample(2.0, 1.0, &mut out);
        assert_eq!(out, g.cell(2, 1));
        g.sample(1.5, 2.5, &mut out);
        for c in 0..3 {
            let want = (g.cell(1, 2)[c] + g.cell(2, 2)[c] + g.cell(1, 3)[c] + g.cell(2, 3)[c]) / 4.0;
            assert!((out[c] - want).abs() < 1e-15);
        }
        // cell centers in pixel space map to integer grid coordinates
        assert_eq!(g.grid_coord((2.0 + 0.5) * 224.0 / 4.0), 2.0);
        g.sample(-3.0, 0.0, &mut out);
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn backbone_shapes_and_determinism() {
        let img = RgbImage::filled(224, 224, [0.0; 3]);
        let a = synth_backbone(&img, 3).unwrap();
        let shapes: Vec<(usize, usize)> = a.levels.iter().map(|g| (g.res, g.channels())).collect();
        assert_eq!(shapes, vec![(56, 256), (28, 512), (14, 1024), (7, 2048)]);
        assert_eq!(a, synth_backbone(&img, 3).unwrap());
        let ones = synth_backbone(&RgbImage::filled(224, 224, [1.0; 3]), 3).unwrap();
        assert!(a.max_abs_diff(&ones) > 0.0);
        assert!(synth_backbone(&RgbImage::filled(10, 10, [0.0; 3]), 3).is_err());
    }

    #[test]
    fn pooled_vector_has_3843_entries_and_coords() {
        let img = RgbImage::filled(224, 224, [0.3, 0.6, 0.9]);
        let pyr = synth_backbone(&img, 0).unwrap();
        let mesh = bundled_template();
        let t = pool_vertex_features(&mesh, &pyr, &Camera::default()).unwrap();
        assert_eq!((t.len(), t.dim()), (156, 3843));
        assert_eq!(&t.row(7)[3840..], &mesh.vertices()[7]);
        assert!(t.row(0)[..3840].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn behind_camera_pools_zero_features() {
        let pyr = synth_backbone(&RgbImage::filled(224, 224, [0.5; 3]), 0).unwrap();
        let mesh = bundled_template();
        let cam = Camera {
            translation: [0.0, 0.0, -5.0],
            ..Camera::default()
        };
        let t = pool_vertex_features(&mesh, &pyr, &cam).unwrap();
        assert!(t.row(3)[..3840].iter().all(|&v| v == 0.0));
    }

    /// Sampling the projected grid on the tape matches pooling first and
    /// projecting afterwards.
    #[test]
    fn projected_sampling_matches_pool_then_project() {
        let pyr = synth_backbone(&RgbImage::filled(224, 224, [0.2, 0.5, 0.7]), 9).unwrap();
        let mesh = bundled_template();
        let cam = Camera::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = PooledProjection::new(&mut store, "p", 8, &mut rng);
        let tape = Tape::inference();
        let b = store.bind(&tape);
        let levels = proj.project_levels(&b, &pyr);
        let pos = tape.constant(Tensor::from_points(mesh.vertices()));
        let fast = proj.pool(&b, &levels, &pyr, &pos, &cam);

        let pooled = pool_vertex_features(&mesh, &pyr, &cam).unwrap().to_tensor();
        let mut w = Vec::new();
        for &l in &proj.levels {
            w.extend_from_slice(store.get(l).data());
        }
        w.extend_from_slice(store.get(proj.coords).data());
        let slow = tape
            .constant(pooled)
            .matmul(&tape.constant(Tensor::matrix(3843, 8, w).unwrap()));
        let diff = fast.value().max_abs_diff(slow.value());
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn bilinear_chain_gradcheck_wrt_positions() {
        let grid = small_grid(7, 5, 4);
        let cam = Camera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // keep points well inside the frame
        let pts: Vec<f64> = (0..24).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let params = vec![Tensor::matrix(8, 3, pts).unwrap()];
        let values = grid.values.clone();
        let r = gradcheck(
            |tape, p| {
                let proj = project_var(&p[0], &cam);
                let g = tape.constant_rc(values.clone());
                bilinear_sample_var(&g, 7, &proj).sum()
            },
            &params,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn out_of_frame_has_zero_gradient() {
        let grid = small_grid(7, 2, 4);
        let cam = Camera::default();
        let tape = Tape::new();
        let pos = tape.leaf(Tensor::matrix(2, 3, vec![5.0, 0.0, 0.0, 0.0, 0.0, -3.0]).unwrap());
        let proj = project_var(&pos, &cam);
        assert_eq!(proj.visible, vec![false, false]);
        let out = bilinear_sample_var(&tape.constant_rc(grid.values.clone()), 7, &proj);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
        let g = tape.backward(&out.sum()).unwrap();
        assert!(g.get(&pos).data().iter().all(|&v| v == 0.0));
    }
}
