mod common;

use std::time::Instant;

#[test]
fn every_operation_matches_central_differences() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for (k, case) in common::cases().iter().enumerate() {
        let err = common::worst_error(case, 20, 100 + k as u64);
        if !(err < 1e-4) {
            failures.push(format!("{}: relative error {err:e}", case.name));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn oracle_detects_a_wrong_gradient() {
    use weedshift::tensor::Tensor;
    // Squaring through `mul` is right; pretending the gradient is x (not 2x) is not.
    let right: common::Build = Box::new(|t, v| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y, None)
    });
    let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let numeric = common::central_difference(&right, std::slice::from_ref(&x), 1e-6);
    let (_, exact) = common::analytic(&right, std::slice::from_ref(&x));
    assert!(common::relative_error(&exact, &numeric) < 1e-8);
    let wrong = vec![x.data().to_vec()];
    assert!(common::relative_error(&wrong, &numeric) > 0.1);
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    use weedshift::tape::Tape;
    use weedshift::tensor::Tensor;
    let mut tape = Tape::new();
    let x = tape.leaf_with(&Tensor::new(vec![2], vec![1.0, 3.0]).unwrap(), true);
    let y = tape.sum(x, None).unwrap();
    tape.backward(y).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}
