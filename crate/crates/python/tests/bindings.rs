use maskdiff_py::maskdiff_py;
use pyo3::prelude::*;
use pyo3::types::PyDict;

#[test]
fn module_exposes_schedule_masks_and_metrics() {
    pyo3::append_to_inittab!(maskdiff_py);
    Python::initialize();
    Python::attach(|py| {
        let m = py.import("maskdiff_py").unwrap();
        let sched = m
            .getattr("Schedule")
            .unwrap()
            .call_method1("linear", (50,))
            .unwrap();
        let ab: Vec<f64> = sched.getattr("alpha_bars").unwrap().extract().unwrap();
        assert_eq!(ab.len(), 50);
        assert!(ab[49] < 0.01);
        let post: [f64; 2] = sched
            .call_method1("posterior", (1u8, 0u8, 5usize))
            .unwrap()
            .extract()
            .unwrap();
        assert!((post[0] + post[1] - 1.0).abs() < 1e-12);
        assert!(sched.call_method1("posterior", (2u8, 0u8, 5usize)).is_err());

        let kw = PyDict::new(py);
        kw.set_item("size", 32).unwrap();
        kw.set_item("seed", 5).unwrap();
        let samples = m
            .getattr("generate_dataset")
            .unwrap()
            .call((2,), Some(&kw))
            .unwrap();
        let first = samples.get_item(0).unwrap();
        let mask = first.getattr("mask").unwrap();
        let f1: f64 = m
            .getattr("f1")
            .unwrap()
            .call1((&mask, &mask))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(f1, 1.0);
        let checks: Vec<(String, bool, String)> = m
            .getattr("verify")
            .unwrap()
            .call0()
            .unwrap()
            .extract()
            .unwrap();
        assert!(checks.iter().all(|c| c.1), "{checks:?}");
    });
}
