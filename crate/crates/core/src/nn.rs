//! Named parameters, the few layer shapes the model is built from, Adam,
//! and the flat checkpoint format.
//!
//! Checkpoints are a directory holding `params.bin` (little-endian f64,
//! parameters back to back) and `params.manifest`, one
//! `name<TAB>shape<TAB>offset` line per parameter with the shape written
//! as `16x16` (`scalar` for rank 0) and the offset counted in values.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "params.manifest";
pub const VALUES_FILE: &str = "params.bin";
const MANIFEST_HEADER: &str = "# meshdeform parameters: f64 little-endian, offsets in values";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Binds externally supplied values (same order and shapes) instead
    /// of the stored ones. Used by finite-difference checks.
    pub fn bind_values<'t>(&self, vars: &[Var<'t>]) -> Bound<'t> {
        assert_eq!(vars.len(), self.values.len());
        Bound {
            vars: vars.to_vec(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "{MANIFEST_HEADER}");
        let mut bytes = Vec::with_capacity(self.num_values() * 8);
        let mut offset = 0;
        for (name, t) in self.names.iter().zip(&self.values) {
            let _ = writeln!(manifest, "{name}\t{}\t{offset}", shape_string(t.shape()));
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            offset += t.len();
        }
        let mpath = dir.join(MANIFEST_FILE);
        std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let vpath = dir.join(VALUES_FILE);
        std::fs::write(&vpath, bytes).map_err(|e| Error::io(&vpath, e))
    }

    /// Reads a checkpoint directory into a fresh store.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let vpath = dir.join(VALUES_FILE);
        let bytes = std::fs::read(&vpath).map_err(|e| Error::io(&vpath, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Parse {
                path: vpath,
                line: 0,
                msg: format!("{} bytes is not a whole number of f64 values", bytes.len()),
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let perr = |line: usize, msg: String| Error::Parse {
            path: mpath.clone(),
            line,
            msg,
        };
        let mut store = ParamStore::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, shape, offset] = fields[..] else {
                return Err(perr(i + 1, format!("expected 3 tab-separated fields: `{line}`")));
            };
            let shape = parse_shape(shape).ok_or_else(|| perr(i + 1, format!("bad shape `{shape}`")))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| perr(i + 1, format!("bad offset `{offset}`")))?;
            let n: usize = shape.iter().product();
            let data = values
                .get(offset..offset + n)
                .ok_or_else(|| perr(i + 1, format!("`{name}` runs past the end of the values file")))?
                .to_vec();
            if store.find(name).is_some() {
                return Err(perr(i + 1, format!("duplicate parameter `{name}`")));
            }
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    /// Copies values from `other` into matching names; shapes must agree
    /// and every parameter of `self` must be present.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let src = other
                .find(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter `{name}`")))?;
            let src = other.get(src);
            if src.shape() != self.values[i].shape() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint, model expects {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

fn shape_string(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

/// Parameters of one store placed on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients aligned with the store's parameter order.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| g.get(v)).collect()
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("len")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Uniform,
    Zero,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = match init {
            Init::Uniform => init_uniform(rng, &[fan_in, fan_out], fan_in),
            Init::Zero => Tensor::zeros(&[fan_in, fan_out]),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Var<'t> {
        let y = x.matmul(b.get(self.weight));
        match self.bias {
            Some(bias) => y.add_row(b.get(bias)),
            None => y,
        }
    }
}

/// Layer normalization over the feature axis with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Var<'t> {
        let n = x.cols();
        let centered = x.sub(&x.mean_cols().broadcast_cols(n));
        let inv_std = centered
            .mul(&centered)
            .mean_cols()
            .add_scalar(LAYER_NORM_EPS)
            .sqrt()
            .recip();
        centered
            .mul_col(&inv_std)
            .mul(&b.get(self.gain).broadcast_rows(x.rows()))
            .add_row(b.get(self.bias))
    }
}

/// Two linear layers with SiLU between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        output_init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (i, h, o) = dims;
        Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), i, h, true, Init::Uniform, rng),
            output: Linear::new(store, &format!("{name}.fc2"), h, o, true, output_init, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Var<'t> {
        self.output.forward(b, &self.hidden.forward(b, x).silu())
    }
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in store.values_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj + c.weight_decay * *w;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, GradcheckOptions};
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "a", 3, 4, true, Init::Uniform, &mut rng);
        store.add("s", Tensor::scalar(2.5));
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        let loaded = ParamStore::load(dir.path()).unwrap();
        assert_eq!(loaded, store);
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(manifest.contains("a.weight\t3x4\t0\n"));
        assert!(manifest.contains("a.bias\t4\t12\n"));
        assert!(manifest.contains("s\tscalar\t16\n"));
    }

    #[test]
    fn checkpoint_rejects_truncated_values() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2, 2]));
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        std::fs::write(dir.path().join(VALUES_FILE), [0u8; 16]).unwrap();
        assert!(ParamStore::load(dir.path()).is_err());
    }

    #[test]
    fn assign_checks_shapes() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2, 2]));
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[2, 3]));
        assert!(a.assign_from(&b).is_err());
        assert!(a.assign_from(&ParamStore::new()).is_err());
    }

    #[test]
    fn layer_norm_normalizes_and_passes_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 6);
        let x = init_uniform(&mut rng, &[4, 6], 1);
        let tape = Tape::inference();
        let b = store.bind(&tape);
        let y = ln.forward(&b, &tape.constant(x.clone()));
        for row in y.value().data().chunks(6) {
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12);
        }
        let params: Vec<Tensor> = std::iter::once(x).chain(store.values().iter().cloned()).collect();
        let r = gradcheck(
            |_, p| {
                let b = store.bind_values(&p[1..]);
                ln.forward(&b, &p[0]).mul(&p[0]).sum()
            },
            &params,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[3], 5.0));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let tape = Tape::new();
            let b = store.bind(&tape);
            let v = b.get(w);
            let loss = v.mul(v).sum();
            let g = tape.backward(&loss).unwrap();
            let grads = b.grads(&g);
            opt.step(&mut store, &grads);
        }
        assert!(store.get(w).max_abs() < 1e-2);
    }
}
