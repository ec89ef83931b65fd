"""Exercises the Python bindings end to end on the seeded fixtures."""

import json
import sys
import tempfile
from pathlib import Path

import meshdeform_py as md


def main() -> int:
    assert md.unpool_trace() == [156, 618, 2466, 9858]

    t = md.template()
    assert (t.num_vertices, t.num_faces, t.euler_characteristic()) == (156, 308, 2)
    up = t.unpool()
    assert up.num_vertices == 618
    back = md.TriMesh.from_obj(t.to_obj())
    assert back.faces == t.faces

    pts = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 2.0, 0.0)]
    assert md.knn_indices(pts, 1) == [[1], [0], [0]]
    assert md.chamfer_l1(pts, pts) == 0.0

    for name, err, coords in md.gradient_suite(width=8):
        assert err < md.TOLERANCE, (name, err)
        print(f"{name:<24} {err:.2e} over {coords} coords")

    model = md.Model(width=16)
    meshes = model.reconstruct()
    assert [m.num_vertices for m in meshes] == [156, 618, 2466, 9858]
    assert meshes[0].vertices == t.vertices

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        md.write_fixtures(d / "fx")
        cam = md.Camera.load(d / "fx" / "lss_camera.cfg")
        report, best = model.search(d / "fx" / "lss_image.png", d / "fx" / "lss_mask.png", camera=cam)
        assert report["chosen_s"] == 0.3, report
        assert len(report["candidates"]) == 5
        print(json.dumps({k: report[k] for k in ("chosen_s", "chosen_p", "best_score")}))
        best[-1].write_obj(d / "mesh.obj")

        curve, fit_meshes, fitted = md.overfit(steps=3, width=8)
        assert len(curve) == 4 and curve[-1]["total"] < curve[0]["total"]
        fitted.save(d / "ckpt")
        again = md.Model.load(d / "ckpt")
        assert again.reconstruct()[-1].vertices == fitted.reconstruct()[-1].vertices

        try:
            md.Camera.load(d / "missing.cfg")
        except OSError as e:
            assert "missing.cfg" in str(e)
        else:
            raise AssertionError("missing camera file was accepted")

    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
