//! Fitting all parameters to a single target with Adam.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::loss::{LossReport, LossWeights, Reduction, Target};
use crate::mesh::TriMesh;
use crate::model::{ModelConfig, TdmModel};
use crate::nn::{Adam, AdamConfig};
use crate::perception::{synth_backbone, Camera};
use crate::pointcloud::PointCloud;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Recorded for reference; one target is fitted per step.
    pub batch_size: usize,
    pub weights: LossWeights,
    pub reduction: Reduction,
    /// Seed of the stand-in backbone.
    pub backbone_seed: u64,
}

impl Default for TrainConfig {
    /// Full-width settings with the reference optimizer values.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 300,
            lr: 5e-4,
            weight_decay: 1e-6,
            batch_size: 48,
            weights: LossWeights::default(),
            reduction: Reduction::Mean,
            backbone_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Width 16, one target per step and a larger learning rate, which
    /// a single-target fit tolerates.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            lr: 3e-3,
            batch_size: 1,
            ..Self::default()
        }
    }
}

pub struct TrainOutcome {
    /// Loss before each update, then once more after the last one.
    pub curve: Vec<LossReport>,
    /// Stage meshes after the last update.
    pub meshes: Vec<TriMesh>,
    pub model: TdmModel,
}

impl TrainOutcome {
    pub fn initial(&self) -> &LossReport {
        &self.curve[0]
    }

    pub fn last(&self) -> &LossReport {
        self.curve.last().expect("nonempty curve")
    }
}

/// Fits a freshly initialized model to `target` as seen in `image`.
pub fn overfit_train(target: &PointCloud, image: &RgbImage, camera: &Camera, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.steps == 0 {
        return Err(Error::InvalidConfig("steps must be positive".into()));
    }
    if !cfg.lr.is_finite() || cfg.lr <= 0.0 {
        return Err(Error::InvalidConfig(format!("learning rate {} must be positive", cfg.lr)));
    }
    camera.validate()?;
    let target = Target::new(target.points.clone(), target.normals.clone())?;
    let pyramid = synth_backbone(image, cfg.backbone_seed)?;
    let mut model = TdmModel::new(cfg.model.clone())?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let tape = if step < cfg.steps { Tape::new() } else { Tape::inference() };
        let b = model.store.bind(&tape);
        let pass = model.forward(&b, &pyramid, camera)?;
        let (loss, report) = model.loss(&pass, &target, &cfg.weights, cfg.reduction);
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        log::debug!("step {step}: total {:.6} chamfer {:.6}", report.total, report.chamfer);
        curve.push(report);
        if step == cfg.steps {
            let meshes = pass.meshes(&model.topo)?;
            drop(pass);
            drop(b);
            return Ok(TrainOutcome { curve, meshes, model });
        }
        let grads = tape.backward(&loss)?;
        let grads = b.grads(&grads);
        drop(pass);
        drop(b);
        opt.step(&mut model.store, &grads);
    }
    unreachable!("loop returns on the last step")
}
