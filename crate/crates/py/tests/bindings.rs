use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

fn with_module(f: impl FnOnce(&Bound<'_, PyModule>)) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "iterarray_py").unwrap();
        iterarray_py::iterarray_py(&m).unwrap();
        f(&m);
    });
}

#[test]
fn worked_example_through_python() {
    with_module(|m| {
        let py = m.py();
        let locals = PyDict::new(py);
        locals.set_item("ia", m).unwrap();
        py.run(
            c"a = ia.Array([('x', 0, 3), ('y', 0, 3)], [('label', 'int64')], chunks=[2, 2])
for x, y in [(0, 0), (1, 1), (2, 2), (0, 3), (3, 0)]:
    a.set((x, y), [x * 4 + y])
o = ia.run(ia.sourcedetect_spec(1), a)
steps = len(o.trace)
label = o.array.get((2, 2))[0]",
            None,
            Some(&locals),
        )
        .unwrap();
        assert_eq!(locals.get_item("steps").unwrap().unwrap().extract::<usize>().unwrap(), 3);
        assert_eq!(locals.get_item("label").unwrap().unwrap().extract::<i64>().unwrap(), 0);
    });
}

#[test]
fn engine_errors_raise() {
    with_module(|m| {
        let e = m.getattr("sigmaclip_spec").unwrap().call1((-1.0,)).unwrap_err();
        assert!(e.is_instance(m.py(), &m.getattr("IterArrayError").unwrap()));
        let e = m.getattr("Array").unwrap().call1((vec![("x", 0, 3)], vec![("v", "int32")])).unwrap_err();
        assert!(e.to_string().contains("int32"));
    });
}

#[test]
fn dumps_round_trip() {
    with_module(|m| {
        let g = m.getattr("random_grid").unwrap().call1((3u64, 8i64, 8i64, 0.5, vec![4i64, 4])).unwrap();
        let text: String = g.call_method0("dump").unwrap().extract().unwrap();
        let back = m.getattr("Array").unwrap().call_method1("parse", (text,)).unwrap();
        assert!(back.eq(&g).unwrap());
        assert_eq!(back.len().unwrap(), g.len().unwrap());
    });
}
