//! Finite-difference verification of every block, the pooling chain, the
//! losses and the whole pipeline, on small seeded inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    CoordinateHead, GlobalBlock, GraphConv, GraphIndex, GraphResidualBlock, LocalBlock, Mhsa, Neighbors,
    VectorAttention,
};
use crate::autodiff::{gradcheck, GradcheckOptions, Tape, Tensor, Var};
use crate::error::Result;
use crate::fixtures::{synthetic_image, unit_cube_target};
use crate::knn::knn_flat;
use crate::loss::{
    chamfer_var, edge_var, laplacian_loss_var, point_move_var, smooth_var, EdgeIndex, LaplacianIndex, Reduction,
    Target,
};
use crate::mesh::{Point3, TriMesh};
use crate::model::{ModelConfig, TdmModel};
use crate::nn::{init_uniform, Init, ParamStore};
use crate::perception::{synth_backbone, Camera, PooledProjection};

/// Required bound on the relative error of every check.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Adds `U(-scale, scale)` to every parameter so that zero-initialized
/// layers take part in the check.
pub fn perturb_params(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.values_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

/// Regular octahedron with unit vertices.
pub fn octahedron() -> TriMesh {
    TriMesh::new(
        vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ],
        vec![
            [4, 0, 2],
            [4, 2, 1],
            [4, 1, 3],
            [4, 3, 0],
            [5, 2, 0],
            [5, 1, 2],
            [5, 3, 1],
            [5, 0, 3],
        ],
    )
    .expect("valid octahedron")
}

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
        .collect()
}

/// A fixed pseudo-random linear functional, so the checked scalar
/// depends on every output entry with distinct weights.
fn probe<'t>(y: &Var<'t>, seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = init_uniform(&mut rng, y.shape(), 1);
    y.mul(&y.tape().constant(w)).sum()
}

fn with_store<F>(name: &str, inputs: Vec<Tensor>, store: &ParamStore, opts: &GradcheckOptions, f: F) -> Result<CheckResult>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &crate::nn::Bound<'t>) -> Var<'t>,
{
    let k = inputs.len();
    let params: Vec<Tensor> = inputs.into_iter().chain(store.values().iter().cloned()).collect();
    let r = gradcheck(
        |tape, p| {
            let b = store.bind_values(&p[k..]);
            f(tape, &p[..k], &b)
        },
        &params,
        opts,
    )?;
    Ok(CheckResult {
        name: name.into(),
        max_rel_error: r.max_rel_error,
        coords: r.coords_checked,
    })
}

/// Every block, the pooling chain and the five losses at width `d`.
pub fn gradient_suite(d: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradcheckOptions {
        seed,
        ..GradcheckOptions::default()
    };
    let heads = if d.is_multiple_of(4) { 4 } else { 1 };
    let mut out = Vec::new();
    let oct = octahedron();
    let graph = GraphIndex::new(&oct.adjacency());

    // scalar attention, 8 tokens
    {
        let mut s = ParamStore::new();
        let blk = Mhsa::new(&mut s, "mhsa", d, heads, &mut rng)?;
        perturb_params(&mut s, 0.3, seed + 1);
        let x = init_uniform(&mut rng, &[8, d], 1);
        out.push(with_store("mhsa", vec![x], &s, &opts, |_, p, b| probe(&blk.forward(b, &p[0]), seed))?);
    }
    // graph convolution and the residual block on the octahedron
    {
        let mut s = ParamStore::new();
        let conv = GraphConv::new(&mut s, "conv", d, d, Init::Uniform, &mut rng);
        let x = init_uniform(&mut rng, &[6, d], 1);
        out.push(with_store("graph_conv", vec![x], &s, &opts, |_, p, b| {
            probe(&conv.forward(b, &p[0], &graph).expect("shapes"), seed)
        })?);
    }
    {
        let mut s = ParamStore::new();
        let grb = GraphResidualBlock::new(&mut s, "grb", d, &mut rng);
        perturb_params(&mut s, 0.3, seed + 2);
        let x = init_uniform(&mut rng, &[6, d], 1);
        out.push(with_store("graph_residual_block", vec![x], &s, &opts, |_, p, b| {
            probe(&grb.forward(b, &p[0], &graph).expect("shapes"), seed)
        })?);
    }
    // global block: 6 vertex tokens and 2 global tokens
    {
        let mut s = ParamStore::new();
        let blk = GlobalBlock::with_global_tokens(&mut s, "global", d, heads, 2, &mut rng)?;
        perturb_params(&mut s, 0.3, seed + 3);
        let x = init_uniform(&mut rng, &[8, d], 1);
        out.push(with_store("global_block", vec![x], &s, &opts, |_, p, b| {
            probe(&blk.forward(b, &p[0], &graph).expect("shapes"), seed)
        })?);
    }
    // vector attention and the local block, 32 points with k = 4
    let pts = random_points(32, &mut rng);
    let nbrs = Neighbors::new(32, 4, knn_flat(&pts, 4)?)?;
    {
        let mut s = ParamStore::new();
        let va = VectorAttention::new(&mut s, "va", d, &mut rng);
        perturb_params(&mut s, 0.3, seed + 4);
        let x = init_uniform(&mut rng, &[32, d], 1);
        out.push(with_store(
            "vector_attention",
            vec![x, Tensor::from_points(&pts)],
            &s,
            &opts,
            |_, p, b| probe(&va.forward(b, &p[0], &p[1], &nbrs).expect("shapes"), seed),
        )?);
    }
    {
        let mut s = ParamStore::new();
        let blk = LocalBlock::new(&mut s, "local", d, &mut rng);
        perturb_params(&mut s, 0.3, seed + 5);
        let x = init_uniform(&mut rng, &[32, d], 1);
        out.push(with_store(
            "local_block",
            vec![x, Tensor::from_points(&pts)],
            &s,
            &opts,
            |_, p, b| probe(&blk.forward(b, &p[0], &p[1], &nbrs).expect("shapes"), seed),
        )?);
    }
    {
        let mut s = ParamStore::new();
        let head = CoordinateHead::new(&mut s, "head", d, d, Init::Uniform, &mut rng);
        let x = init_uniform(&mut rng, &[16, d], 1);
        out.push(with_store("coordinate_head", vec![x], &s, &opts, |_, p, b| {
            probe(&head.forward(b, &p[0]), seed)
        })?);
    }
    // projection and bilinear sampling w.r.t. positions and weights
    {
        let pyramid = synth_backbone(&synthetic_image(seed), seed)?;
        let cam = Camera::default();
        let mut s = ParamStore::new();
        let pool = PooledProjection::new(&mut s, "pool", d, &mut rng);
        let pos: Vec<Point3> = (0..16)
            .map(|_| [rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.2..0.2)])
            .collect();
        let capped = GradcheckOptions {
            max_coords: Some(400),
            ..opts.clone()
        };
        let mut r = with_store("pooling_chain", vec![Tensor::from_points(&pos)], &s, &capped, |_, p, b| {
            let levels = pool.project_levels(b, &pyramid);
            probe(&pool.pool(b, &levels, &pyramid, &p[0], &cam), seed)
        })?;
        // every position coordinate, on top of the sampled ones
        let only_pos = with_store("pooling_chain", vec![Tensor::from_points(&pos)], &ParamStore::new(), &opts, |tape, p, _| {
            let b = s.bind(tape);
            let levels = pool.project_levels(&b, &pyramid);
            probe(&pool.pool(&b, &levels, &pyramid, &p[0], &cam), seed)
        })?;
        r.max_rel_error = r.max_rel_error.max(only_pos.max_rel_error);
        r.coords += only_pos.coords;
        out.push(r);
    }
    // the five losses on a deformed octahedron against 24 oriented points
    {
        let before = oct.vertices().to_vec();
        let after: Vec<Point3> = before
            .iter()
            .map(|p| std::array::from_fn(|k| 1.1 * p[k] + rng.gen_range(-0.2..0.2)))
            .collect();
        let gt = random_points(24, &mut rng);
        let normals = random_points(24, &mut rng);
        let target = Target::new(gt, normals)?;
        let edges = EdgeIndex::new(oct.edges());
        let lap = LaplacianIndex::new(&oct.adjacency())?;
        let inputs = || vec![Tensor::from_points(&before), Tensor::from_points(&after)];
        let none = ParamStore::new();
        let red = Reduction::Sum;
        out.push(with_store("loss_chamfer", inputs(), &none, &opts, |_, p, _| chamfer_var(&p[1], &target))?);
        out.push(with_store("loss_smooth", inputs(), &none, &opts, |_, p, _| smooth_var(&p[1], &edges, &target, red))?);
        out.push(with_store("loss_laplacian", inputs(), &none, &opts, |_, p, _| {
            laplacian_loss_var(&p[0], &p[1], &lap, red)
        })?);
        out.push(with_store("loss_point_move", inputs(), &none, &opts, |_, p, _| point_move_var(&p[0], &p[1], red))?);
        out.push(with_store("loss_edge", inputs(), &none, &opts, |_, p, _| edge_var(&p[1], &edges, red))?);
    }
    Ok(out)
}

/// Gradient of the full training loss (all four stages, all five terms)
/// at perturbed parameters, on a random sample of `coords` parameters.
pub fn pipeline_gradcheck(d: usize, coords: usize, seed: u64) -> Result<CheckResult> {
    let mut model = TdmModel::new(ModelConfig {
        seed,
        ..ModelConfig::desk()
    }
    .with_width(d))?;
    perturb_params(&mut model.store, 0.05, seed + 7);
    let pyramid = synth_backbone(&synthetic_image(seed), seed)?;
    let cloud = unit_cube_target(seed);
    let target = Target::new(cloud.points, cloud.normals)?;
    let cam = Camera::default();
    let weights = Default::default();
    let opts = GradcheckOptions {
        max_coords: Some(coords),
        seed,
        ..GradcheckOptions::default()
    };
    let r = gradcheck(
        |_, p| {
            let b = model.store.bind_values(p);
            let pass = model.forward(&b, &pyramid, &cam).expect("forward");
            model.loss(&pass, &target, &weights, Reduction::Mean).0
        },
        model.store.values(),
        &opts,
    )?;
    Ok(CheckResult {
        name: "full_pipeline".into(),
        max_rel_error: r.max_rel_error,
        coords: r.coords_checked,
    })
}
