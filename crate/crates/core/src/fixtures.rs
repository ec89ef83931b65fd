//! Seeded test data: the input image and cube target for the desk-scale
//! fit, and a scale-search scene whose silhouette is built to match one
//! border scale.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imageio::{save_mask, save_png, save_raw_f32, Mask, RgbImage};
use crate::lss::rasterize_silhouette;
use crate::mesh::TriMesh;
use crate::model::Topology;
use crate::obj::write_obj_file;
use crate::perception::{Camera, IMAGE_SIZE};
use crate::pointcloud::{sample_cube_surface, PointCloud};

pub const CUBE_POINTS: usize = 2000;

/// Smooth color gradients plus mild noise, `224 x 224`.
pub fn synthetic_image(seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let n = IMAGE_SIZE;
    let mut img = RgbImage::filled(n, n, [0.0; 3]);
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
            let rgb = std::array::from_fn(|c| {
                let base = 0.5 + 0.3 * (6.0 * u + 4.0 * v * (c as f64 + 1.0) + phase[c]).sin();
                (base + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)
            });
            img.set_pixel(x, y, rgb);
        }
    }
    img
}

/// 2000 samples on the surface of the unit cube `[0, 1]^3`.
pub fn unit_cube_target(seed: u64) -> PointCloud {
    sample_cube_surface(CUBE_POINTS, [0.0; 3], 1.0, seed)
}

/// A scale-search scene: a mask and image whose object, once cropped and
/// padded at `s`, coincides with the silhouette of `mesh` under `camera`.
pub struct LssScene {
    pub image: RgbImage,
    pub mask: Mask,
    pub camera: Camera,
    pub s: f64,
    /// Side of the silhouette's bounding square at `224 x 224`.
    pub side: usize,
}

fn silhouette_side(mesh: &TriMesh, cam: &Camera) -> usize {
    rasterize_silhouette(mesh, cam, IMAGE_SIZE, IMAGE_SIZE)
        .bbox()
        .map_or(0, |(x0, y0, x1, y1)| (x1 - x0 + 1).max(y1 - y0 + 1))
}

/// Builds the scene for `mesh` (the reconstruction an untrained model
/// returns) by picking the focal length at which the silhouette side `h`
/// satisfies `h + 2 round(s h) = 224`, so the crop at `s` is a pure
/// translation of the rendered silhouette. The mask is then placed off
/// center on a larger canvas.
pub fn lss_scene(mesh: &TriMesh, s: f64) -> LssScene {
    let n = IMAGE_SIZE;
    let target = (0..=n)
        .rev()
        .find(|&h| h + 2 * (s * h as f64).round() as usize == n)
        .expect("some side fits");
    let cam_for = |focal: f64| Camera {
        focal,
        ..Camera::default()
    };
    let (mut lo, mut hi) = (1.0, 4000.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if silhouette_side(mesh, &cam_for(mid)) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let camera = cam_for(hi);
    let side = silhouette_side(mesh, &camera);
    let sil = rasterize_silhouette(mesh, &camera, n, n);

    let (w, h, ox, oy) = (n + 96, n + 64, 61, 17);
    let mut mask = Mask::empty(w, h);
    let mut image = RgbImage::filled(w, h, [0.85, 0.8, 0.75]);
    for y in 0..n {
        for x in 0..n {
            if sil.get(x, y) {
                mask.set(x + ox, y + oy, true);
                let shade = 0.2 + 0.4 * y as f64 / n as f64;
                image.set_pixel(x + ox, y + oy, [shade, 0.3, 0.6 - 0.3 * x as f64 / n as f64]);
            }
        }
    }
    LssScene {
        image,
        mask,
        camera,
        s,
        side,
    }
}

/// Final mesh of an untrained model: three midpoint subdivisions of the
/// template.
pub fn untrained_final_mesh(template: TriMesh) -> Result<TriMesh> {
    Ok(Topology::new(template)?.meshes.pop().expect("four meshes"))
}

/// Writes every fixture into `dir`.
pub fn write_all(dir: &Path, seed: u64) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut out = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    let template = crate::mesh::make_ellipsoid_template(&Default::default())?;
    write_obj_file(&out("ellipsoid_156.obj"), &template)?;
    let img = synthetic_image(seed);
    save_raw_f32(&out("synthetic_224.f32"), &img)?;
    save_png(&out("synthetic_224.png"), &img)?;
    unit_cube_target(seed).save(&out("unit_cube_2000.xyz"))?;
    std::fs::write(out("camera_default.cfg"), Camera::default().to_config_string())
        .map_err(|e| crate::Error::io(dir.join("camera_default.cfg"), e))?;

    let scene = lss_scene(&untrained_final_mesh(template)?, 0.3);
    save_png(&out("lss_image.png"), &scene.image)?;
    save_mask(&out("lss_mask.png"), &scene.mask)?;
    let cam_path = out("lss_camera.cfg");
    std::fs::write(&cam_path, scene.camera.to_config_string()).map_err(|e| crate::Error::io(&cam_path, e))?;
    Ok(written)
}
