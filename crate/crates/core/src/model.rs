//! The three-stage deformation model and its final upsampling head.
//!
//! Stage 1 pools pixel-aligned features for the 156 template vertices,
//! appends 49 global tokens from the coarsest feature grid and runs the
//! global block. Stages 2 and 3 subdivide the mesh, re-pool features at
//! the new positions and run a local block over k nearest neighbors. The
//! final head subdivides once more and predicts positions for the 9858
//! vertices from the carried tokens and freshly pooled features.
//!
//! Every head predicts an offset from the positions it received, and its
//! last layer starts at zero, so an untrained model returns the template
//! and its midpoint subdivisions unchanged.

use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{CoordinateHead, GlobalBlock, GraphIndex, LocalBlock, Neighbors, GLOBAL_TOKENS};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::knn::knn_flat;
use crate::loss::{EdgeIndex, LaplacianIndex, LossReport, LossTerms, LossWeights, Reduction, Target};
use crate::mesh::{bbox_extent, bundled_template, TriMesh, UnpoolPlan};
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::perception::{synth_backbone, Camera, FeaturePyramid, PooledProjection, LEVEL_CHANNELS};

/// Smallest bounding-box extent a stage may produce.
pub const DEGENERATE_EXTENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token width.
    pub width: usize,
    pub heads: usize,
    pub k_stage2: usize,
    pub k_stage3: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 192,
            heads: 4,
            k_stage2: 16,
            k_stage3: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Reduced width used for tests and desk-scale training.
    pub fn desk() -> Self {
        Self {
            width: 16,
            ..Self::default()
        }
    }

    pub fn with_width(self, width: usize) -> Self {
        Self { width, ..self }
    }
}

/// Fixed connectivity of the four meshes.
#[derive(Debug, Clone)]
pub struct Topology {
    /// Template and its three successive subdivisions.
    pub meshes: Vec<TriMesh>,
    pub plans: Vec<UnpoolPlan>,
    pub graph: GraphIndex,
    pub edges: Vec<EdgeIndex>,
    pub laplacians: Vec<LaplacianIndex>,
    midpoint_a: Vec<Rc<[usize]>>,
    midpoint_b: Vec<Rc<[usize]>>,
}

impl Topology {
    pub fn new(template: TriMesh) -> Result<Self> {
        let mut meshes = vec![template];
        let mut plans = Vec::new();
        for _ in 0..3 {
            let last = meshes.last().expect("nonempty");
            let plan = UnpoolPlan::new(last);
            let flat: Vec<f64> = last.vertices().iter().flatten().copied().collect();
            let pos = plan.apply_rows(&flat, 3).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            let next = TriMesh::new(pos, plan.faces.clone())?;
            plans.push(plan);
            meshes.push(next);
        }
        let edges = meshes.iter().map(|m| EdgeIndex::new(m.edges())).collect();
        let laplacians = meshes
            .iter()
            .map(|m| LaplacianIndex::new(&m.adjacency()))
            .collect::<Result<_>>()?;
        let midpoint_a = plans.iter().map(|p| p.midpoint_edges.iter().map(|e| e[0]).collect()).collect();
        let midpoint_b = plans.iter().map(|p| p.midpoint_edges.iter().map(|e| e[1]).collect()).collect();
        Ok(Self {
            graph: GraphIndex::new(&meshes[0].adjacency()),
            meshes,
            plans,
            edges,
            laplacians,
            midpoint_a,
            midpoint_b,
        })
    }

    pub fn vertex_counts(&self) -> Vec<usize> {
        self.meshes.iter().map(TriMesh::num_vertices).collect()
    }

    /// Rows of `x` followed by the mean of each subdivided edge's rows.
    pub fn unpool_var<'t>(&self, level: usize, x: &Var<'t>) -> Var<'t> {
        let mid = x
            .gather_rows(self.midpoint_a[level].clone())
            .add(&x.gather_rows(self.midpoint_b[level].clone()))
            .scale(0.5);
        Var::concat_rows(&[x.clone(), mid])
    }

    pub fn mesh_with(&self, level: usize, positions: &Tensor) -> Result<TriMesh> {
        self.meshes[level].with_vertices(positions.to_points())
    }
}

/// Errors when a stage has collapsed to (nearly) a point.
pub fn check_degenerate(stage: usize, positions: &Tensor) -> Result<()> {
    let e = bbox_extent(&positions.to_points());
    let extent = e[0].max(e[1]).max(e[2]);
    if extent.is_nan() || extent < DEGENERATE_EXTENT {
        return Err(Error::Degenerate { stage, extent });
    }
    Ok(())
}

pub struct TdmModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub topo: Topology,
    pub pool: Vec<PooledProjection>,
    pub global_proj: Linear,
    pub global_block: GlobalBlock,
    pub head1: CoordinateHead,
    pub local2: LocalBlock,
    pub head2: CoordinateHead,
    pub local3: LocalBlock,
    pub head3: CoordinateHead,
    pub final_head: CoordinateHead,
}

/// Positions entering and leaving each of the four stages.
pub struct ForwardPass<'t> {
    pub before: Vec<Var<'t>>,
    pub after: Vec<Var<'t>>,
}

impl ForwardPass<'_> {
    pub fn meshes(&self, topo: &Topology) -> Result<Vec<TriMesh>> {
        self.after.iter().enumerate().map(|(i, p)| topo.mesh_with(i, p.value())).collect()
    }
}

impl TdmModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        Self::with_template(cfg, bundled_template())
    }

    pub fn with_template(cfg: ModelConfig, template: TriMesh) -> Result<Self> {
        let d = cfg.width;
        if d == 0 {
            return Err(Error::InvalidConfig("token width must be positive".into()));
        }
        let topo = Topology::new(template)?;
        for (stage, k) in [(1, cfg.k_stage2), (2, cfg.k_stage3)] {
            if k == 0 || k >= topo.meshes[stage].num_vertices() {
                return Err(Error::InvalidConfig(format!(
                    "k = {k} is invalid for {} vertices",
                    topo.meshes[stage].num_vertices()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;
        let pool = (0..4).map(|i| PooledProjection::new(s, &format!("pool{i}"), d, r)).collect();
        let global_proj = Linear::new(s, "global_proj", LEVEL_CHANNELS[3], d, true, Init::Uniform, r);
        let global_block = GlobalBlock::new(s, "global", d, cfg.heads, r)?;
        let head1 = CoordinateHead::new(s, "head1", d, d, Init::Zero, r);
        let local2 = LocalBlock::new(s, "local2", d, r);
        let head2 = CoordinateHead::new(s, "head2", d, d, Init::Zero, r);
        let local3 = LocalBlock::new(s, "local3", d, r);
        let head3 = CoordinateHead::new(s, "head3", d, d, Init::Zero, r);
        let final_head = CoordinateHead::new(s, "final_head", 2 * d, d, Init::Zero, r);
        Ok(Self {
            cfg,
            store,
            topo,
            pool,
            global_proj,
            global_block,
            head1,
            local2,
            head2,
            local3,
            head3,
            final_head,
        })
    }

    /// Runs all stages with parameters `b` (bound from this model's store).
    pub fn forward<'t>(&self, b: &Bound<'t>, pyramid: &FeaturePyramid, camera: &Camera) -> Result<ForwardPass<'t>> {
        let tape = b.get(self.global_proj.weight).tape();
        let topo = &self.topo;
        let nv = topo.meshes[0].num_vertices();
        let p0 = tape.constant(Tensor::from_points(topo.meshes[0].vertices()));

        // stage 1: global attention over vertex and global tokens
        let levels = self.pool[0].project_levels(b, pyramid);
        let f1 = self.pool[0].pool(b, &levels, pyramid, &p0, camera);
        let g = self
            .global_proj
            .forward(b, &tape.constant_rc(pyramid.global().values.clone()));
        debug_assert_eq!(g.rows(), GLOBAL_TOKENS);
        let x = self.global_block.forward(b, &Var::concat_rows(&[f1, g]), &topo.graph)?;
        let x1 = x.gather_rows((0..nv).collect::<Vec<_>>());
        let p1 = p0.add(&self.head1.forward(b, &x1));
        check_degenerate(1, p1.value())?;

        // stages 2 and 3: subdivide, re-pool, local attention
        let (p1u, t1u) = (topo.unpool_var(0, &p1), topo.unpool_var(0, &x1));
        let x2 = self.local_stage(b, pyramid, camera, 1, &p1u, &t1u, &self.local2, self.cfg.k_stage2)?;
        let p2 = p1u.add(&self.head2.forward(b, &x2));
        check_degenerate(2, p2.value())?;

        let (p2u, t2u) = (topo.unpool_var(1, &p2), topo.unpool_var(1, &x2));
        let x3 = self.local_stage(b, pyramid, camera, 2, &p2u, &t2u, &self.local3, self.cfg.k_stage3)?;
        let p3 = p2u.add(&self.head3.forward(b, &x3));
        check_degenerate(3, p3.value())?;

        // final head on carried tokens and freshly pooled features
        let (p3u, t3u) = (topo.unpool_var(2, &p3), topo.unpool_var(2, &x3));
        let levels = self.pool[3].project_levels(b, pyramid);
        let f4 = self.pool[3].pool(b, &levels, pyramid, &p3u, camera);
        let p4 = p3u.add(&self.final_head.forward(b, &Var::concat_cols(&[t3u, f4])));
        check_degenerate(4, p4.value())?;

        Ok(ForwardPass {
            before: vec![p0, p1u, p2u, p3u],
            after: vec![p1, p2, p3, p4],
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn local_stage<'t>(
        &self,
        b: &Bound<'t>,
        pyramid: &FeaturePyramid,
        camera: &Camera,
        level: usize,
        positions: &Var<'t>,
        carried: &Var<'t>,
        block: &LocalBlock,
        k: usize,
    ) -> Result<Var<'t>> {
        let n = positions.rows();
        let nbrs = Neighbors::new(n, k, knn_flat(&positions.value().to_points(), k)?)?;
        let levels = self.pool[level].project_levels(b, pyramid);
        let pooled = self.pool[level].pool(b, &levels, pyramid, positions, camera);
        block.forward(b, &carried.add(&pooled), positions, &nbrs)
    }

    /// Sum of the five terms over all four stages.
    pub fn loss<'t>(
        &self,
        pass: &ForwardPass<'t>,
        target: &Target,
        weights: &LossWeights,
        reduction: Reduction,
    ) -> (Var<'t>, LossReport) {
        let t = &self.topo;
        let mut terms: Option<LossTerms<'t>> = None;
        for (i, (before, after)) in pass.before.iter().zip(&pass.after).enumerate() {
            let stage = LossTerms::stage(before, after, &t.edges[i], &t.laplacians[i], target, reduction);
            terms = Some(match terms {
                Some(acc) => acc.plus(&stage),
                None => stage,
            });
        }
        terms.expect("four stages").total(weights)
    }

    /// Inference on one image: the four stage meshes.
    pub fn reconstruct(&self, pyramid: &FeaturePyramid, camera: &Camera) -> Result<Vec<TriMesh>> {
        let tape = Tape::inference();
        let b = self.store.bind(&tape);
        self.forward(&b, pyramid, camera)?.meshes(&self.topo)
    }
}

const CONFIG_FILE: &str = "model.json";

impl TdmModel {
    /// Writes the parameters and the model configuration into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        let path = dir.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(&self.cfg).expect("config serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Rebuilds a model from [`TdmModel::save_checkpoint`] output.
    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let mut model = Self::new(cfg)?;
        model.store.assign_from(&ParamStore::load(dir)?)?;
        Ok(model)
    }
}

/// Backbone features for `image` followed by [`TdmModel::reconstruct`].
pub fn tdm_forward(image: &RgbImage, camera: &Camera, model: &TdmModel, seed: u64) -> Result<Vec<TriMesh>> {
    camera.validate()?;
    let pyramid = synth_backbone(image, seed)?;
    model.reconstruct(&pyramid, camera)
}
