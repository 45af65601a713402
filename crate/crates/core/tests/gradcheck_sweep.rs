use relit_core::engine::gradcheck::{gradcheck, OPS};

#[test]
fn every_op_passes_over_seeds() {
    let mut failures = Vec::new();
    for (op, _) in OPS {
        for seed in 0..20 {
            let r = gradcheck(op, seed, None).unwrap();
            if !r.pass {
                failures.push(r);
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
