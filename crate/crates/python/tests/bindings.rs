//! Drives the module through an embedded interpreter.

use pyo3::prelude::*;
use pyo3::types::PyDict;
use rawhdr_py::rawhdr_py;

fn with_module(f: impl FnOnce(Python<'_>, &Bound<'_, PyModule>)) {
    pyo3::append_to_inittab!(rawhdr_py);
    Python::initialize();
    Python::attach(|py| {
        let m = py.import("rawhdr_py").unwrap();
        f(py, &m);
    });
}

#[test]
fn bracket_merge_infer_evaluate() {
    with_module(|py, m| {
        let locals = PyDict::new(py);
        locals.set_item("rh", m).unwrap();
        py.run(
            c"
frames = rh.capture_bracket(1, 32, 32, [-3.0, 0.0, 3.0], dynamic_range_bits=10, center_log2=-2.5)
target = rh.merge(frames)
assert target.shape == (16, 16, 4)
assert rh.coverage(frames) == 1.0
model = rh.Model({'base_width': 8, 'mask_width': 8}, seed=2)
pred = model.infer(frames[1])
report = rh.evaluate(pred, target, mu=5000.0)
assert set(report) >= {'psnr', 'psnr_mu', 'ssim', 'mu', 'peak'}
assert rh.log_l2_loss(target, target) == 0.0
try:
    rh.Model({'base_width': 8, 'no_such_field': 1})
except ValueError:
    pass
else:
    raise AssertionError('unknown config fields are rejected')
",
            None,
            Some(&locals),
        )
        .unwrap();
    });
}
