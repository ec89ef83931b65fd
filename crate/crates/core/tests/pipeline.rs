use meshdeform::autodiff::Tape;
use meshdeform::fixtures::{synthetic_image, unit_cube_target, untrained_final_mesh};
use meshdeform::imageio::RgbImage;
use meshdeform::loss::{chamfer_l1, Reduction, Target};
use meshdeform::mesh::{bundled_template, unpool_mesh};
use meshdeform::model::{tdm_forward, ModelConfig, TdmModel};
use meshdeform::perception::{synth_backbone, Camera};
use meshdeform::pointcloud::sample_mesh_surface;
use meshdeform::train::{overfit_train, TrainConfig};
use meshdeform::verify::{perturb_params, pipeline_gradcheck, TOLERANCE};
use meshdeform::Error;

fn perturbed_model(seed: u64) -> TdmModel {
    let mut m = TdmModel::new(ModelConfig::desk()).unwrap();
    perturb_params(&mut m.store, 0.05, seed);
    m
}

#[test]
fn unpool_trace_of_the_bundled_template() {
    let mut mesh = bundled_template();
    let mut trace = vec![(mesh.num_vertices(), mesh.num_faces(), mesh.euler_characteristic())];
    for _ in 0..3 {
        mesh = unpool_mesh(&mesh);
        trace.push((mesh.num_vertices(), mesh.num_faces(), mesh.euler_characteristic()));
    }
    assert_eq!(
        trace,
        vec![(156, 308, 2), (618, 1232, 2), (2466, 4928, 2), (9858, 19712, 2)]
    );
    assert_eq!(bundled_template().num_edges(), 462);
}

#[test]
fn untrained_model_returns_template_and_midpoint_subdivisions() {
    let model = TdmModel::new(ModelConfig::desk()).unwrap();
    let meshes = tdm_forward(&synthetic_image(0), &Camera::default(), &model, 0).unwrap();
    assert_eq!(meshes[3].vertices(), untrained_final_mesh(bundled_template()).unwrap().vertices());
    // the first stage returns the template itself
    assert_eq!(meshes[0].vertices(), bundled_template().vertices());
    let counts: Vec<usize> = meshes.iter().map(|m| m.num_vertices()).collect();
    assert_eq!(counts, vec![156, 618, 2466, 9858]);
}

#[test]
fn forward_is_deterministic_and_keeps_topology() {
    let model = perturbed_model(11);
    let img = synthetic_image(3);
    let a = tdm_forward(&img, &Camera::default(), &model, 5).unwrap();
    let b = tdm_forward(&img, &Camera::default(), &model, 5).unwrap();
    assert_eq!(a, b);
    let faces = [308, 1232, 4928, 19712];
    for (m, f) in a.iter().zip(faces) {
        assert_eq!(m.num_faces(), f);
        assert_eq!(m.euler_characteristic(), 2);
    }
    // learned offsets moved the final mesh away from the subdivided template
    let plain = untrained_final_mesh(bundled_template()).unwrap();
    assert_ne!(a[3].vertices(), plain.vertices());
}

#[test]
fn wrong_image_size_is_rejected() {
    let model = TdmModel::new(ModelConfig::desk()).unwrap();
    let img = RgbImage::filled(100, 100, [0.0; 3]);
    assert!(tdm_forward(&img, &Camera::default(), &model, 0).is_err());
}

#[test]
fn invalid_neighbor_counts_are_rejected() {
    let cfg = ModelConfig {
        k_stage3: 5000,
        ..ModelConfig::desk()
    };
    assert!(matches!(TdmModel::new(cfg), Err(Error::InvalidConfig(_))));
}

#[test]
fn reported_total_equals_the_tape_scalar() {
    let model = perturbed_model(12);
    let pyramid = synth_backbone(&synthetic_image(0), 0).unwrap();
    let cloud = unit_cube_target(0);
    let target = Target::new(cloud.points, cloud.normals).unwrap();
    for reduction in [Reduction::Mean, Reduction::Sum] {
        let tape = Tape::inference();
        let b = model.store.bind(&tape);
        let pass = model.forward(&b, &pyramid, &Camera::default()).unwrap();
        let (loss, report) = model.loss(&pass, &target, &Default::default(), reduction);
        assert_eq!(loss.item(), report.total);
        assert_eq!(report.weighted_total(), report.total);
        assert!(report.chamfer > 0.0 && report.edge > 0.0);
    }
}

#[test]
fn full_pipeline_gradient_matches_finite_differences() {
    let r = pipeline_gradcheck(16, 60, 3).unwrap();
    assert!(r.coords >= 50);
    assert!(r.max_rel_error < TOLERANCE, "{r:?}");
}

#[test]
fn short_fits_are_reproducible() {
    let cfg = TrainConfig {
        steps: 3,
        ..TrainConfig::desk()
    };
    let run = || overfit_train(&unit_cube_target(1), &synthetic_image(1), &Camera::default(), &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.meshes, b.meshes);
    assert!(a.last().total < a.initial().total);
}

#[test]
fn untrained_loss_on_the_template_surface_is_small() {
    let template_surface = sample_mesh_surface(&untrained_final_mesh(bundled_template()).unwrap(), 2000, 4);
    let cfg = TrainConfig {
        steps: 1,
        ..TrainConfig::desk()
    };
    let out = overfit_train(&template_surface, &synthetic_image(2), &Camera::default(), &cfg).unwrap();
    let cube = unit_cube_target(4);
    let final_mesh = untrained_final_mesh(bundled_template()).unwrap();
    let to_cube = chamfer_l1(final_mesh.vertices(), &cube.points).unwrap();
    let start = out.initial().chamfer;
    // four stages summed, each far closer than the same mesh to the cube
    assert!(start < 0.25 * 4.0 * to_cube, "{start} vs {to_cube}");
    assert_eq!(out.initial().laplacian, 0.0);
    assert_eq!(out.initial().point_move, 0.0);
}

#[test]
fn zero_steps_or_bad_rates_are_rejected() {
    let img = synthetic_image(0);
    let cube = unit_cube_target(0);
    let zero = TrainConfig {
        steps: 0,
        ..TrainConfig::desk()
    };
    assert!(overfit_train(&cube, &img, &Camera::default(), &zero).is_err());
    let bad = TrainConfig {
        lr: f64::NAN,
        ..TrainConfig::desk()
    };
    assert!(overfit_train(&cube, &img, &Camera::default(), &bad).is_err());
}
