use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshdeform"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixtures(dir: &Path) {
    let o = run(&["fixtures", "--out-dir", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unpool_trace_prints_the_four_vertex_counts() {
    let o = run(&["unpool-trace"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "156 618 2466 9858");
}

#[test]
fn gradcheck_passes_at_width_16() {
    let o = run(&["gradcheck", "--width", "16"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), 13);
    assert!(lines.iter().all(|l| l.ends_with("ok")));
}

#[test]
fn fixtures_then_reconstruct_selects_the_built_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    fixtures(&fx);
    let out = tmp.path().join("out");
    let p = |name: &str| fx.join(name).to_str().unwrap().to_owned();
    let o = run(&[
        "reconstruct",
        "--image",
        &p("lss_image.png"),
        "--mask",
        &p("lss_mask.png"),
        "--camera",
        &p("lss_camera.cfg"),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["chosen_s"], 0.3);
    assert_eq!(report["candidates"].as_array().unwrap().len(), 5);
    let best = report["best_score"].as_f64().unwrap();
    for row in report["candidates"].as_array().unwrap() {
        assert!(row["score"].as_f64().unwrap() <= best);
    }
    let obj = std::fs::read_to_string(out.join("mesh.obj")).unwrap();
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 9858);
    assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 19712);
}

#[test]
fn overfit_writes_curve_mesh_and_a_reloadable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fit");
    let o = run(&["overfit", "--steps", "2", "--width", "8", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "step,chamfer,smooth,laplacian,point_move,edge,total");
    assert_eq!(rows.len(), 4);

    let fx = tmp.path().join("fx");
    fixtures(&fx);
    let o = run(&[
        "reconstruct",
        "--image",
        fx.join("lss_image.png").to_str().unwrap(),
        "--mask",
        fx.join("lss_mask.png").to_str().unwrap(),
        "--grid",
        "0.3",
        "--checkpoint",
        out.join("checkpoint").to_str().unwrap(),
        "--out-dir",
        tmp.path().join("rec").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("chosen s=0.3"));
}

#[test]
fn missing_mask_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    fixtures(&fx);
    let missing = tmp.path().join("no_such_mask.png");
    let o = run(&[
        "reconstruct",
        "--image",
        fx.join("lss_image.png").to_str().unwrap(),
        "--mask",
        missing.to_str().unwrap(),
        "--out-dir",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn error_categories_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    fixtures(&fx);
    let img = fx.join("lss_image.png");
    let mask = fx.join("lss_mask.png");
    let out = tmp.path().join("out");
    let base = |extra: &[&str]| {
        let mut a = vec![
            "reconstruct",
            "--image",
            img.to_str().unwrap(),
            "--mask",
            mask.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ];
        a.extend_from_slice(extra);
        run(&a).status.code()
    };

    assert_eq!(run(&["reconstruct", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));

    assert_eq!(base(&["--grid", "0.1,0.3"]), Some(4));
    assert_eq!(base(&["--grid", "0.2,abc"]), Some(4));
    let bad_cam = tmp.path().join("bad.cfg");
    std::fs::write(&bad_cam, "focal = abc\n").unwrap();
    assert_eq!(base(&["--camera", bad_cam.to_str().unwrap()]), Some(4));
    assert_eq!(base(&["--checkpoint", tmp.path().join("nowhere").to_str().unwrap()]), Some(3));
}

#[test]
fn wide_grid_flag_admits_scales_outside_the_default_range() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    fixtures(&fx);
    let o = run(&[
        "reconstruct",
        "--image",
        fx.join("lss_image.png").to_str().unwrap(),
        "--mask",
        fx.join("lss_mask.png").to_str().unwrap(),
        "--grid",
        "0.1",
        "--wide-grid",
        "--out-dir",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("chosen s=0.1"));
}
