//! Token sequences and the learned blocks that transform them: scalar
//! multi-head self-attention, graph convolution, the graph residual
//! block, the global block that chains them, and vector attention over
//! k-nearest-neighbor sets.
//!
//! Every block is residual with a zero-initialized output projection, so
//! a freshly built block maps its input to itself exactly.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::{Adjacency, Point3};
use crate::nn::{Bound, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};

/// Number of global feature tokens appended to the vertex tokens.
pub const GLOBAL_TOKENS: usize = 49;

/// `n` tokens of width `d`, optionally with a 3D coordinate per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    n: usize,
    d: usize,
    data: Vec<f64>,
    coords: Option<Vec<Point3>>,
}

impl TokenSequence {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Contract(format!(
                "{} values do not split into rows of width {dim}",
                data.len()
            )));
        }
        Self::with_shape(data.len() / dim, dim, data)
    }

    pub fn with_shape(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Contract(format!(
                "{n} tokens of width {d} need {} values, got {}",
                n * d,
                data.len()
            )));
        }
        Ok(Self {
            n,
            d,
            data,
            coords: None,
        })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            data: vec![0.0; n * d],
            coords: None,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            n: t.rows(),
            d: t.cols(),
            data: t.data().to_vec(),
            coords: None,
        }
    }

    pub fn with_coords(mut self, coords: Vec<Point3>) -> Result<Self> {
        if coords.len() != self.n {
            return Err(Error::Contract(format!(
                "{} coordinates for {} tokens",
                coords.len(),
                self.n
            )));
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn coords(&self) -> Option<&[Point3]> {
        self.coords.as_deref()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n, self.d, self.data.clone()).expect("consistent shape")
    }
}

/// Directed edge lists of a mesh graph, ready for gather/scatter.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    pub vertices: usize,
    pub targets: Rc<[usize]>,
    pub sources: Rc<[usize]>,
}

impl GraphIndex {
    pub fn new(adj: &Adjacency) -> Self {
        let (targets, sources) = adj.directed_pairs();
        Self {
            vertices: adj.num_vertices(),
            targets: targets.into(),
            sources: sources.into(),
        }
    }
}

/// Uniform-length neighbor lists, row-major `n x k`.
#[derive(Debug, Clone)]
pub struct Neighbors {
    pub k: usize,
    pub flat: Rc<[usize]>,
}

impl Neighbors {
    pub fn new(n: usize, k: usize, flat: Vec<usize>) -> Result<Self> {
        if k == 0 || flat.len() != n * k {
            return Err(Error::Contract(format!(
                "neighbor table of {} entries is not {n} lists of length {k}",
                flat.len()
            )));
        }
        if let Some(&bad) = flat.iter().find(|&&j| j >= n) {
            return Err(Error::Contract(format!("neighbor index {bad} out of range for {n} tokens")));
        }
        Ok(Self {
            k,
            flat: flat.into(),
        })
    }

    pub fn from_lists(lists: &[Vec<usize>]) -> Result<Self> {
        let k = lists.first().map_or(0, Vec::len);
        if lists.iter().any(|l| l.len() != k) {
            return Err(Error::Contract("ragged neighbor lists".into()));
        }
        Self::new(lists.len(), k, lists.concat())
    }

    pub fn len(&self) -> usize {
        self.flat.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

/// Pre-norm multi-head self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub heads: usize,
    pub norm: LayerNorm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
}

impl Mhsa {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "token width {d} is not divisible by {heads} heads"
            )));
        }
        let mut proj = |tag: &str, rng: &mut ChaCha8Rng| {
            store.add(format!("{name}.{tag}"), crate::nn::init_uniform(rng, &[d, d], d))
        };
        let wq = proj("wq", rng);
        let wk = proj("wk", rng);
        let wv = proj("wv", rng);
        Ok(Self {
            heads,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            wq,
            wk,
            wv,
            out: Linear::new(store, &format!("{name}.out"), d, d, true, Init::Zero, rng),
        })
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Var<'t> {
        self.forward_with_weights(b, x).0
    }

    /// Also returns the `n x n` attention matrix of each head.
    pub fn forward_with_weights<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> (Var<'t>, Vec<Var<'t>>) {
        let d = x.cols();
        let dh = d / self.heads;
        let xn = self.norm.forward(b, x);
        let q = xn.matmul(b.get(self.wq));
        let k = xn.matmul(b.get(self.wk));
        let v = xn.matmul(b.get(self.wv));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let logits = q.slice_cols(s, e).matmul(&k.slice_cols(s, e).transpose()).scale(scale);
            let a = logits.softmax_lastdim();
            heads.push(a.matmul(&v.slice_cols(s, e)));
            weights.push(a);
        }
        let z = Var::concat_cols(&heads);
        (x.add(&self.out.forward(b, &z)), weights)
    }
}

/// `x_i' = x_i w0 + sum over neighbors j of x_j w1`.
#[derive(Debug, Clone)]
pub struct GraphConv {
    pub w0: ParamId,
    pub w1: ParamId,
}

impl GraphConv {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let mut w = |tag: &str, rng: &mut ChaCha8Rng| {
            let t = match init {
                Init::Uniform => crate::nn::init_uniform(rng, &[din, dout], din),
                Init::Zero => Tensor::zeros(&[din, dout]),
            };
            store.add(format!("{name}.{tag}"), t)
        };
        let w0 = w("w0", rng);
        let w1 = w("w1", rng);
        Self { w0, w1 }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: &Var<'t>, graph: &GraphIndex) -> Result<Var<'t>> {
        check_vertex_rows(x, graph)?;
        let own = x.matmul(b.get(self.w0));
        let msg = x
            .matmul(b.get(self.w1))
            .gather_rows(graph.sources.clone())
            .scatter_add_rows(graph.targets.clone(), graph.vertices);
        Ok(own.add(&msg))
    }
}

fn check_vertex_rows(x: &Var<'_>, graph: &GraphIndex) -> Result<()> {
    if x.rows() != graph.vertices {
        return Err(Error::Contract(format!(
            "{} tokens for a graph of {} vertices",
            x.rows(),
            graph.vertices
        )));
    }
    Ok(())
}

/// Two graph convolutions with SiLU between and an identity skip.
#[derive(Debug, Clone)]
pub struct GraphResidualBlock {
    pub conv1: GraphConv,
    pub conv2: GraphConv,
}

impl GraphResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: GraphConv::new(store, &format!("{name}.conv1"), d, d, Init::Uniform, rng),
            conv2: GraphConv::new(store, &format!("{name}.conv2"), d, d, Init::Zero, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: &Var<'t>, graph: &GraphIndex) -> Result<Var<'t>> {
        let h = self.conv1.forward(b, x, graph)?.silu();
        Ok(x.add(&self.conv2.forward(b, &h, graph)?))
    }
}

/// Pre-norm MLP with a residual: `x + mlp(norm(x))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), (d, 2 * d, d), Init::Zero, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Var<'t> {
        x.add(&self.mlp.forward(b, &self.norm.forward(b, x)))
    }
}

/// Attention over vertex and global tokens, then the graph residual
/// block on the vertex rows only, then a feed-forward layer.
#[derive(Debug, Clone)]
pub struct GlobalBlock {
    pub global_tokens: usize,
    pub attn: Mhsa,
    pub grb: GraphResidualBlock,
    pub ff: FeedForward,
}

impl GlobalBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_global_tokens(store, name, d, heads, GLOBAL_TOKENS, rng)
    }

    pub fn with_global_tokens(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        global_tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            global_tokens,
            attn: Mhsa::new(store, &format!("{name}.attn"), d, heads, rng)?,
            grb: GraphResidualBlock::new(store, &format!("{name}.grb"), d, rng),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, rng),
        })
    }

    /// `x` holds the vertex tokens first, then the global tokens.
    pub fn forward<'t>(&self, b: &Bound<'t>, x: &Var<'t>, graph: &GraphIndex) -> Result<Var<'t>> {
        let nv = graph.vertices;
        if x.rows() != nv + self.global_tokens {
            return Err(Error::Contract(format!(
                "global block expects {} tokens ({nv} vertex + {} global), got {}",
                nv + self.global_tokens,
                self.global_tokens,
                x.rows()
            )));
        }
        let h = self.attn.forward(b, x);
        let vertex: Rc<[usize]> = (0..nv).collect();
        let global: Rc<[usize]> = (nv..x.rows()).collect();
        let hv = self.grb.forward(b, &h.gather_rows(vertex), graph)?;
        let merged = Var::concat_rows(&[hv, h.gather_rows(global)]);
        Ok(self.ff.forward(b, &merged))
    }
}

/// Rows processed per chunk of query points; bounds the size of the
/// `n*k x d` intermediates when running without a recording tape.
const VECTOR_ATTENTION_CHUNK_ROWS: usize = 16_384;

/// Vector attention with a learned relative positional embedding.
///
/// `z_i = x_i + out( sum_j softmax_j( gamma(phi(x_i) - psi(x_j) + delta) ) * (alpha(x_j) + delta) )`
/// with `delta = theta(c_i - c_j)`, the softmax taken per channel over the
/// `k` neighbors of `i`, and all projections applied to the normalized tokens.
#[derive(Debug, Clone)]
pub struct VectorAttention {
    pub norm: LayerNorm,
    pub phi: Linear,
    pub psi: Linear,
    pub alpha: Linear,
    pub theta: Mlp,
    pub gamma: Mlp,
    pub out: Linear,
}

impl VectorAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let p = |tag: &str| format!("{name}.{tag}");
        Self {
            norm: LayerNorm::new(store, &p("norm"), d),
            phi: Linear::new(store, &p("phi"), d, d, false, Init::Uniform, rng),
            psi: Linear::new(store, &p("psi"), d, d, false, Init::Uniform, rng),
            alpha: Linear::new(store, &p("alpha"), d, d, false, Init::Uniform, rng),
            theta: Mlp::new(store, &p("theta"), (3, d, d), Init::Uniform, rng),
            gamma: Mlp::new(store, &p("gamma"), (d, d, d), Init::Uniform, rng),
            out: Linear::new(store, &p("out"), d, d, true, Init::Zero, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: &Var<'t>, coords: &Var<'t>, nbrs: &Neighbors) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(b, x, coords, nbrs, false)?.0)
    }

    /// With `keep_weights`, also returns the `n*k x d` attention weights
    /// (rows grouped by query, neighbors in list order).
    pub fn forward_with_weights<'t>(
        &self,
        b: &Bound<'t>,
        x: &Var<'t>,
        coords: &Var<'t>,
        nbrs: &Neighbors,
        keep_weights: bool,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let (n, d, k) = (x.rows(), x.cols(), nbrs.k);
        if coords.rows() != n || coords.cols() != 3 {
            return Err(Error::Contract(format!(
                "{n} tokens need {n}x3 coordinates, got {:?}",
                coords.shape()
            )));
        }
        if nbrs.len() != n {
            return Err(Error::Contract(format!("{} neighbor lists for {n} tokens", nbrs.len())));
        }
        let xn = self.norm.forward(b, x);
        let q = self.phi.forward(b, &xn);
        let key = self.psi.forward(b, &xn);
        let val = self.alpha.forward(b, &xn);

        let per_chunk = (VECTOR_ATTENTION_CHUNK_ROWS / k).max(1);
        let mut aggregated = Vec::new();
        let mut weights = Vec::new();
        for start in (0..n).step_by(per_chunk) {
            let end = (start + per_chunk).min(n);
            let m = end - start;
            let own: Rc<[usize]> = (start..end).flat_map(|i| std::iter::repeat_n(i, k)).collect();
            let other: Rc<[usize]> = nbrs.flat[start * k..end * k].into();
            let local: Rc<[usize]> = (0..m).flat_map(|i| std::iter::repeat_n(i, k)).collect();

            let rel = coords.gather_rows(own.clone()).sub(&coords.gather_rows(other.clone()));
            let delta = self.theta.forward(b, &rel);
            let logits = self.gamma.forward(
                b,
                &q.gather_rows(own).sub(&key.gather_rows(other.clone())).add(&delta),
            );
            let w = logits
                .reshape(&[m, k, d])
                .transpose()
                .softmax_lastdim()
                .transpose()
                .reshape(&[m * k, d]);
            let agg = w
                .mul(&val.gather_rows(other).add(&delta))
                .scatter_add_rows(local, m);
            aggregated.push(agg);
            if keep_weights {
                weights.push(w);
            }
        }
        let z = if aggregated.len() == 1 {
            aggregated.pop().expect("one chunk")
        } else {
            Var::concat_rows(&aggregated)
        };
        let w = keep_weights.then(|| {
            if weights.len() == 1 {
                weights.pop().expect("one chunk")
            } else {
                Var::concat_rows(&weights)
            }
        });
        Ok((x.add(&self.out.forward(b, &z)), w))
    }
}

/// Vector attention followed by a feed-forward layer.
#[derive(Debug, Clone)]
pub struct LocalBlock {
    pub attn: VectorAttention,
    pub ff: FeedForward,
}

impl LocalBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attn: VectorAttention::new(store, &format!("{name}.attn"), d, rng),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: &Var<'t>, coords: &Var<'t>, nbrs: &Neighbors) -> Result<Var<'t>> {
        let y = self.attn.forward(b, x, coords, nbrs)?;
        Ok(self.ff.forward(b, &y))
    }
}

/// Small MLP mapping each token to three numbers.
#[derive(Debug, Clone)]
pub struct CoordinateHead {
    pub mlp: Mlp,
}

impl CoordinateHead {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, hidden: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        Self {
            mlp: Mlp::new(store, name, (din, hidden, 3), init, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, x: &Var<'t>) -> Var<'t> {
        self.mlp.forward(b, x)
    }
}
