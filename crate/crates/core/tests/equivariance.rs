mod common;

use common::*;
use meshdeform::attention::{GlobalBlock, GraphConv, GraphIndex, GraphResidualBlock, LocalBlock, Mhsa, Neighbors, VectorAttention};
use meshdeform::autodiff::{Tape, Tensor};
use meshdeform::knn::knn_indices;
use meshdeform::mesh::{bundled_template, laplacian_coords};
use meshdeform::nn::{Init, ParamStore};
use meshdeform::verify::perturb_params;

const D: usize = 16;
const EXACT: f64 = 1e-12;

/// Neighbor lists re-indexed for tokens reordered by `perm`.
fn permuted_neighbors(lists: &[Vec<usize>], perm: &[usize]) -> Neighbors {
    let inv = inverse(perm);
    let out: Vec<Vec<usize>> = perm.iter().map(|&old| lists[old].iter().map(|&j| inv[j]).collect()).collect();
    Neighbors::from_lists(&out).unwrap()
}

#[test]
fn graph_blocks_commute_with_vertex_permutation() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let mesh = bundled_template();
        let perm = permutation(&mut r, mesh.num_vertices());
        let g = GraphIndex::new(&mesh.adjacency());
        let gp = GraphIndex::new(&mesh.permuted(&perm).unwrap().adjacency());
        let mut s = ParamStore::new();
        let conv = GraphConv::new(&mut s, "conv", D, D, Init::Uniform, &mut r);
        let grb = GraphResidualBlock::new(&mut s, "grb", D, &mut r);
        perturb_params(&mut s, 0.3, seed);
        let x = uniform(&mut r, 156, D);
        let xp = permute_rows(&x, &perm);

        let tape = Tape::inference();
        let b = s.bind(&tape);
        let (v, vp) = (tape.constant(x), tape.constant(xp));
        let y = conv.forward(&b, &v, &g).unwrap();
        let yp = conv.forward(&b, &vp, &gp).unwrap();
        assert!(permute_rows(y.value(), &perm).max_abs_diff(yp.value()) < EXACT);
        let y = grb.forward(&b, &v, &g).unwrap();
        let yp = grb.forward(&b, &vp, &gp).unwrap();
        assert!(permute_rows(y.value(), &perm).max_abs_diff(yp.value()) < EXACT);
    }
}

#[test]
fn attention_blocks_commute_with_token_permutation() {
    for seed in 0..4 {
        let mut r = rng(100 + seed);
        let mut s = ParamStore::new();
        let mhsa = Mhsa::new(&mut s, "mhsa", D, 4, &mut r).unwrap();
        let global = GlobalBlock::new(&mut s, "global", D, 4, &mut r).unwrap();
        perturb_params(&mut s, 0.3, seed);
        let tape = Tape::inference();
        let b = s.bind(&tape);

        let x = uniform(&mut r, 24, D);
        let perm = permutation(&mut r, 24);
        let y = mhsa.forward(&b, &tape.constant(x.clone()));
        let yp = mhsa.forward(&b, &tape.constant(permute_rows(&x, &perm)));
        assert!(permute_rows(y.value(), &perm).max_abs_diff(yp.value()) < EXACT);

        // vertex tokens reordered with the mesh; global tokens left in place
        let mesh = bundled_template();
        let vperm = permutation(&mut r, 156);
        let full: Vec<usize> = vperm.iter().copied().chain(156..205).collect();
        let g = GraphIndex::new(&mesh.adjacency());
        let gp = GraphIndex::new(&mesh.permuted(&vperm).unwrap().adjacency());
        let x = uniform(&mut r, 205, D);
        let y = global.forward(&b, &tape.constant(x.clone()), &g).unwrap();
        let yp = global.forward(&b, &tape.constant(permute_rows(&x, &full)), &gp).unwrap();
        assert!(permute_rows(y.value(), &full).max_abs_diff(yp.value()) < EXACT);
    }
}

#[test]
fn local_blocks_commute_with_point_permutation() {
    for seed in 0..4 {
        let mut r = rng(200 + seed);
        let n = 64;
        let mut s = ParamStore::new();
        let va = VectorAttention::new(&mut s, "va", D, &mut r);
        let local = LocalBlock::new(&mut s, "local", D, &mut r);
        perturb_params(&mut s, 0.3, seed);
        let pts = points(&mut r, n, 1.0);
        let lists = knn_indices(&pts, 8).unwrap();
        let nbrs = Neighbors::from_lists(&lists).unwrap();
        let perm = permutation(&mut r, n);
        let nbrs_p = permuted_neighbors(&lists, &perm);
        let x = uniform(&mut r, n, D);
        let c = Tensor::from_points(&pts);

        let tape = Tape::inference();
        let b = s.bind(&tape);
        let (xv, cv) = (tape.constant(x.clone()), tape.constant(c.clone()));
        let (xp, cp) = (tape.constant(permute_rows(&x, &perm)), tape.constant(permute_rows(&c, &perm)));
        let y = va.forward(&b, &xv, &cv, &nbrs).unwrap();
        let yp = va.forward(&b, &xp, &cp, &nbrs_p).unwrap();
        assert!(permute_rows(y.value(), &perm).max_abs_diff(yp.value()) < EXACT);
        let y = local.forward(&b, &xv, &cv, &nbrs).unwrap();
        let yp = local.forward(&b, &xp, &cp, &nbrs_p).unwrap();
        assert!(permute_rows(y.value(), &perm).max_abs_diff(yp.value()) < EXACT);
    }
}

#[test]
fn vector_attention_ignores_a_shift_of_all_coordinates() {
    for seed in 0..4 {
        let mut r = rng(300 + seed);
        let n = 48;
        let mut s = ParamStore::new();
        let va = VectorAttention::new(&mut s, "va", D, &mut r);
        perturb_params(&mut s, 0.3, seed);
        let pts = points(&mut r, n, 1.0);
        let nbrs = Neighbors::from_lists(&knn_indices(&pts, 6).unwrap()).unwrap();
        let t = points(&mut r, 1, 3.0)[0];
        let shifted: Vec<_> = pts.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
        let tape = Tape::inference();
        let b = s.bind(&tape);
        let x = tape.constant(uniform(&mut r, n, D));
        let y = va.forward(&b, &x, &tape.constant(Tensor::from_points(&pts)), &nbrs).unwrap();
        let ys = va.forward(&b, &x, &tape.constant(Tensor::from_points(&shifted)), &nbrs).unwrap();
        assert!(y.value().max_abs_diff(ys.value()) < EXACT);
    }
}

#[test]
fn laplacian_coordinates_ignore_translation() {
    for seed in 0..4 {
        let mut r = rng(400 + seed);
        let base = bundled_template();
        let noisy: Vec<_> = base
            .vertices()
            .iter()
            .zip(points(&mut r, 156, 0.05))
            .map(|(p, e)| [p[0] + e[0], p[1] + e[1], p[2] + e[2]])
            .collect();
        let mesh = base.with_vertices(noisy).unwrap();
        let t = points(&mut r, 1, 2.0)[0];
        let a = laplacian_coords(&mesh).unwrap();
        let b = laplacian_coords(&mesh.translated(t)).unwrap();
        for (p, q) in a.0.iter().zip(&b.0) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < EXACT);
            }
        }
    }
}

#[test]
fn octahedron_apex_has_unit_laplacian() {
    let l = laplacian_coords(&meshdeform::verify::octahedron()).unwrap();
    assert_eq!(l.0[4], [0.0, 0.0, 1.0]);
}

#[test]
fn scalar_attention_rows_sum_to_one() {
    for (n, d, heads) in [(1, 4, 1), (8, 16, 4), (37, 16, 2), (205, 32, 4)] {
        let mut r = rng(n as u64);
        let mut s = ParamStore::new();
        let mhsa = Mhsa::new(&mut s, "m", d, heads, &mut r).unwrap();
        perturb_params(&mut s, 1.0, 1);
        let tape = Tape::inference();
        let b = s.bind(&tape);
        let (_, weights) = mhsa.forward_with_weights(&b, &tape.constant(scaled(&uniform(&mut r, n, d), 3.0)));
        assert_eq!(weights.len(), heads);
        for w in weights {
            for i in 0..n {
                let sum: f64 = w.value().row(i).iter().sum();
                assert!((sum - 1.0).abs() < EXACT, "row sum {sum}");
            }
        }
    }
}

#[test]
fn vector_attention_channel_weights_sum_to_one() {
    for (n, d, k) in [(2, 4, 1), (32, 16, 4), (100, 8, 16), (80, 16, 64)] {
        let mut r = rng(1000 + n as u64);
        let mut s = ParamStore::new();
        let va = VectorAttention::new(&mut s, "va", d, &mut r);
        perturb_params(&mut s, 1.0, 2);
        let pts = points(&mut r, n, 1.0);
        let nbrs = Neighbors::from_lists(&knn_indices(&pts, k).unwrap()).unwrap();
        let tape = Tape::inference();
        let b = s.bind(&tape);
        let x = tape.constant(uniform(&mut r, n, d));
        let (_, w) = va
            .forward_with_weights(&b, &x, &tape.constant(Tensor::from_points(&pts)), &nbrs, true)
            .unwrap();
        let w = w.unwrap();
        let w = w.value();
        for i in 0..n {
            for ch in 0..d {
                let sum: f64 = (0..k).map(|j| w.row(i * k + j)[ch]).sum();
                assert!((sum - 1.0).abs() < EXACT, "sum {sum}");
            }
        }
    }
}
