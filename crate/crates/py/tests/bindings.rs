use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(meshdeform_py::meshdeform_py)(py);
        let locals = PyDict::new(py);
        locals.set_item("md", m).unwrap();
        f(py, &locals);
    });
}

#[test]
fn module_exposes_the_unpool_trace_and_template() {
    with_module(|py, locals| {
        py.run(
            c"assert md.unpool_trace() == [156, 618, 2466, 9858]
t = md.template()
assert (t.num_vertices, t.num_faces) == (156, 308)
assert t.unpool().num_faces == 1232
assert md.TriMesh.from_obj(t.to_obj()).faces == t.faces",
            None,
            Some(locals),
        )
        .unwrap();
    });
}

#[test]
fn core_errors_become_python_exceptions() {
    with_module(|py, locals| {
        py.run(
            c"try:
    md.knn_indices([(0.0, 0.0, 0.0)], 1)
    raise AssertionError('accepted k >= n')
except ValueError:
    pass
try:
    md.Model.load('/nonexistent/checkpoint')
    raise AssertionError('loaded a missing checkpoint')
except OSError as e:
    assert '/nonexistent/checkpoint' in str(e)
try:
    md.Camera(focal=-1.0)
    raise AssertionError('accepted a negative focal length')
except ValueError:
    pass",
            None,
            Some(locals),
        )
        .unwrap();
    });
}

#[test]
fn untrained_model_reconstructs_the_template() {
    with_module(|py, locals| {
        py.run(
            c"m = md.Model(width=8)
meshes = m.reconstruct()
assert [x.num_vertices for x in meshes] == [156, 618, 2466, 9858]
assert meshes[0].vertices == md.template().vertices",
            None,
            Some(locals),
        )
        .unwrap();
    });
}
