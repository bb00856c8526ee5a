use super::*;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn random(shape: &[usize], rng: &mut FlowRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Reduces `build`'s output with fixed random weights and compares the tape
/// gradient of every input with central differences.
fn check_grad(inputs: &[Tensor], build: impl Fn(&Tape, &[Var]) -> Var) {
    let eval = |xs: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone()).unwrap()).collect();
        let out = build(&tape, &vars);
        let shape = tape.shape(out);
        let mut wrng = FlowRng::new(99);
        let w = tape.constant(Tensor::from_fn(&shape, |_| wrng.normal())).unwrap();
        let s = tape.sum(tape.mul(out, w).unwrap()).unwrap();
        (tape, vars, s)
    };
    let (tape, vars, s) = eval(inputs);
    let grads = tape.backward(s).unwrap();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let fd = fd_gradient(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[k] = probe.clone();
                let (t, _, s) = eval(&xs);
                
                t.value(s).item()
            },
            x,
            1e-5,
        );
        for (a, f) in analytic.data().iter().zip(fd.data()) {
            assert!(rel_err(*a, *f) < 1e-4, "input {k}: analytic {a} vs fd {f}");
        }
    }
}

#[test]
fn elementwise_primitives_match_fd() {
    let mut rng = FlowRng::new(1);
    for _ in 0..3 {
        let a = random(&[2, 3], &mut rng);
        let b = random(&[2, 3], &mut rng);
        let pos = a.map(|v| v.abs() + 0.5);
        check_grad(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
        check_grad(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
        check_grad(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
        check_grad(&[a.clone(), pos.clone()], |t, v| t.div(v[0], v[1]).unwrap());
        check_grad(std::slice::from_ref(&a), |t, v| t.scale(v[0], -2.5).unwrap());
        check_grad(std::slice::from_ref(&a), |t, v| t.add_scalar(v[0], 0.7).unwrap());
        check_grad(std::slice::from_ref(&a), |t, v| t.exp(v[0]).unwrap());
        check_grad(std::slice::from_ref(&pos), |t, v| t.log(v[0]).unwrap());
        check_grad(std::slice::from_ref(&a), |t, v| t.sigmoid(v[0]).unwrap());
        check_grad(std::slice::from_ref(&a), |t, v| t.swish(v[0]).unwrap());
        check_grad(std::slice::from_ref(&a), |t, v| t.tanh(v[0]).unwrap());
        check_grad(std::slice::from_ref(&a), |t, v| t.relu(v[0]).unwrap());
    }
}

#[test]
fn broadcasting_primitives_match_fd() {
    let mut rng = FlowRng::new(2);
    let x = random(&[2, 3, 2, 2], &mut rng);
    let c = random(&[1, 3, 1, 1], &mut rng);
    let pos = c.map(|v| v.abs() + 0.5);
    check_grad(&[x.clone(), c.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check_grad(&[x.clone(), c.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check_grad(&[x.clone(), pos.clone()], |t, v| t.div(v[0], v[1]).unwrap());
    check_grad(&[c.clone(), x.clone()], |t, v| t.sub(v[0], v[1]).unwrap());
}

#[test]
fn linear_algebra_primitives_match_fd() {
    let mut rng = FlowRng::new(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    check_grad(&[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]).unwrap());
    let ba = random(&[2, 3, 4], &mut rng);
    let bb = random(&[2, 4, 2], &mut rng);
    check_grad(&[ba, bb], |t, v| t.bmm(v[0], v[1]).unwrap());
    let x = random(&[2, 3, 4, 5], &mut rng);
    let w3 = random(&[2, 3, 3, 3], &mut rng);
    check_grad(&[x.clone(), w3], |t, v| t.conv3x3(v[0], v[1]).unwrap());
    let w1 = random(&[4, 3], &mut rng);
    check_grad(&[x, w1], |t, v| t.conv1x1(v[0], v[1]).unwrap());
}

#[test]
fn structural_primitives_match_fd() {
    let mut rng = FlowRng::new(4);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 2, 4], &mut rng);
    check_grad(&[a.clone(), b], |t, v| t.concat(&[v[0], v[1]], 1).unwrap());
    check_grad(std::slice::from_ref(&a), |t, v| t.narrow(v[0], 2, 1, 2).unwrap());
    check_grad(std::slice::from_ref(&a), |t, v| t.permute(v[0], &[2, 0, 1]).unwrap());
    check_grad(std::slice::from_ref(&a), |t, v| t.reshape(v[0], &[6, 4]).unwrap());
    check_grad(std::slice::from_ref(&a), |t, v| t.sum(v[0]).unwrap());
    check_grad(std::slice::from_ref(&a), |t, v| t.mean(v[0]).unwrap());
    check_grad(std::slice::from_ref(&a), |t, v| t.sum_axis(v[0], 1).unwrap());
    check_grad(std::slice::from_ref(&a), |t, v| t.sum_per_sample(v[0]).unwrap());
    check_grad(std::slice::from_ref(&a), |t, v| t.index_select(v[0], 1, &[2, 0, 2]).unwrap());
    check_grad(std::slice::from_ref(&a), |t, v| t.softmax(v[0], 2).unwrap());
    check_grad(&[a], |t, v| t.softmax(v[0], 0).unwrap());
    let m = random(&[3, 5], &mut rng);
    check_grad(&[m], |t, v| t.transpose(v[0]).unwrap());
}

#[test]
fn composed_sigmoid_chain_matches_fd() {
    let x = Tensor::new(&[3], vec![0.4, -1.2, 2.0]).unwrap();
    check_grad(&[x], |t, v| {
        let s = t.sigmoid(v[0]).unwrap();
        let s = t.sigmoid(t.scale(s, 3.0).unwrap()).unwrap();
        t.sigmoid(t.mul(s, v[0]).unwrap()).unwrap()
    });
}

#[test]
fn matmul_with_identity() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap()).unwrap();
    let i = tape.constant(Tensor::eye(2)).unwrap();
    let y = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
}

#[test]
fn softmax_of_single_logit_is_one() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::new(&[1], vec![-3.7]).unwrap()).unwrap();
    assert_eq!(tape.value(tape.softmax(a, 0).unwrap()).item(), 1.0);
}

#[test]
fn swish_at_zero() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[1])).unwrap();
    assert_eq!(tape.value(tape.swish(a).unwrap()).item(), 0.0);
}

#[test]
fn square_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).item(), 6.0);
}

#[test]
fn product_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0)).unwrap();
    let y = tape.leaf(Tensor::scalar(5.0)).unwrap();
    let g = tape.backward(tape.mul(x, y).unwrap()).unwrap();
    assert_eq!((g.wrt(x).item(), g.wrt(y).item()), (5.0, 2.0));
}

#[test]
fn non_scalar_output_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarOutput { .. })));
}

#[test]
fn shape_mismatch_reported() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.leaf(Tensor::zeros(&[2, 2])).unwrap();
    assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    assert!(matches!(tape.matmul(a, a), Err(TensorError::ShapeMismatch { .. })));
    assert!(matches!(tape.conv1x1(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn non_finite_values_are_errors() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::scalar(1000.0)).unwrap();
    assert!(matches!(tape.exp(a), Err(TensorError::NonFinite { .. })));
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store.add("used", Tensor::scalar(2.0));
    let unused = store.add("unused", Tensor::zeros(&[3]));
    let tape = Tape::new();
    let p = tape.param(&store, used);
    let g = tape.backward(tape.mul(p, p).unwrap()).unwrap();
    assert_eq!(g.param(used, &store).item(), 4.0);
    assert_eq!(g.param(unused, &store), Tensor::zeros(&[3]));
}

#[test]
fn reductions_are_bitwise_deterministic() {
    let mut rng = FlowRng::new(5);
    let a = random(&[7, 9], &mut rng);
    let b = random(&[9, 4], &mut rng);
    let run = || {
        let t = Tape::new();
        let (va, vb) = (t.leaf(a.clone()).unwrap(), t.leaf(b.clone()).unwrap());
        let m = t.matmul(va, vb).unwrap();
        let s = t.sum(m).unwrap();
        (t.value(m).as_ref().clone(), t.value(s).item())
    };
    let (m1, s1) = run();
    let (m2, s2) = run();
    assert_eq!(m1, m2);
    assert_eq!(s1.to_bits(), s2.to_bits());
}
