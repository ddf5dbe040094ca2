//! Analytic gradients of every op against central finite differences in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpd_diff::check::{finite_difference, rel_error};
use vpd_diff::{forward_mlp, init_mlp, Graph, MlpSpec, ParameterStore, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts the op output with fixed random weights so every output element
/// contributes to the scalar, then compares analytic and numeric gradients for
/// every input.
fn gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let build = |g: &mut Graph<f64>, xs: &[Tensor<f64>], w: Option<&Tensor<f64>>| {
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(g, &vars);
        (vars, out, w.cloned())
    };

    let mut g = Graph::new();
    let (vars, out, _) = build(&mut g, inputs, None);
    let weights = rand_tensor(&mut rng, g.shape(out));
    let wv = g.constant(weights.clone());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod);
    let table = g.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| table.wrt(v).into_data()).collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = finite_difference(
        |x| {
            let mut off = 0;
            let xs: Vec<Tensor<f64>> = inputs
                .iter()
                .map(|t| {
                    let d = x[off..off + t.len()].to_vec();
                    off += t.len();
                    Tensor::new(t.shape().to_vec(), d).unwrap()
                })
                .collect();
            let mut g = Graph::new();
            let (_, out, _) = build(&mut g, &xs, Some(&weights));
            g.value(out)
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        },
        &flat,
        STEP,
    );
    rel_error(&analytic, &numeric)
}

fn assert_grad(name: &str, err: f64) {
    assert!(err < TOL, "{name}: relative error {err:.3e} >= {TOL:e}");
}

/// Values bounded away from zero so kinks (relu, max) are not probed.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn dense_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[3, 5]);
    let bias = rand_tensor(&mut rng, &[5]);
    assert_grad(
        "matmul",
        gradcheck(&[a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]).unwrap()),
    );
    assert_grad(
        "linear",
        gradcheck(&[a.clone(), b.clone(), bias], |g, v| {
            g.linear(v[0], v[1], v[2]).unwrap()
        }),
    );
    let c = rand_tensor(&mut rng, &[4, 3]);
    assert_grad("add", gradcheck(&[a.clone(), c.clone()], |g, v| g.add(v[0], v[1]).unwrap()));
    assert_grad("sub", gradcheck(&[a.clone(), c.clone()], |g, v| g.sub(v[0], v[1]).unwrap()));
    assert_grad("mul", gradcheck(&[a.clone(), c.clone()], |g, v| g.mul(v[0], v[1]).unwrap()));
    assert_grad("mul_self", gradcheck(std::slice::from_ref(&a), |g, v| g.mul(v[0], v[0]).unwrap()));
    assert_grad("scale", gradcheck(std::slice::from_ref(&a), |g, v| g.scale(v[0], -2.5)));
    assert_grad("add_scalar", gradcheck(std::slice::from_ref(&a), |g, v| g.add_scalar(v[0], 0.3)));
    let s = rand_tensor(&mut rng, &[4]);
    assert_grad(
        "scale_rows",
        gradcheck(&[a.clone(), s], |g, v| g.scale_rows(v[0], v[1]).unwrap()),
    );
    assert_grad("transpose", gradcheck(std::slice::from_ref(&a), |g, v| g.transpose(v[0]).unwrap()));
    assert_grad("reshape", gradcheck(std::slice::from_ref(&a), |g, v| g.reshape(v[0], &[2, 6]).unwrap()));
    assert_grad(
        "mean",
        gradcheck(&[a], |g, v| {
            let m = g.mean(v[0]);
            g.reshape(m, &[1]).unwrap()
        }),
    );
}

#[test]
fn activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = away_from_zero(&mut rng, &[5, 4]);
    assert_grad("relu", gradcheck(std::slice::from_ref(&x), |g, v| g.relu(v[0])));
    assert_grad("softplus", gradcheck(std::slice::from_ref(&x), |g, v| g.softplus(v[0])));
    assert_grad("sigmoid", gradcheck(std::slice::from_ref(&x), |g, v| g.sigmoid(v[0])));
    assert_grad("tanh", gradcheck(std::slice::from_ref(&x), |g, v| g.tanh(v[0])));
    assert_grad("square", gradcheck(std::slice::from_ref(&x), |g, v| g.square(v[0])));
    assert_grad("exp", gradcheck(&[x], |g, v| g.exp(v[0])));
}

#[test]
fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 6]);
    let gamma = rand_tensor(&mut rng, &[6]);
    let beta = rand_tensor(&mut rng, &[6]);
    assert_grad(
        "layer_norm",
        gradcheck(&[x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()),
    );
}

#[test]
fn indexing_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let c = rand_tensor(&mut rng, &[2, 3]);
    assert_grad(
        "concat_cols",
        gradcheck(&[a.clone(), b.clone()], |g, v| g.concat_cols(&[v[0], v[1]]).unwrap()),
    );
    assert_grad(
        "concat_rows",
        gradcheck(&[a.clone(), c], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap()),
    );
    assert_grad(
        "slice_cols",
        gradcheck(std::slice::from_ref(&a), |g, v| g.slice_cols(v[0], 1, 2).unwrap()),
    );
    assert_grad(
        "gather_rows",
        gradcheck(std::slice::from_ref(&a), |g, v| g.gather_rows(v[0], vec![3, 0, 0, 2, 3]).unwrap()),
    );
    assert_grad(
        "scatter_add_rows",
        gradcheck(&[a], |g, v| g.scatter_add_rows(v[0], vec![1, 1, 0, 4], 5).unwrap()),
    );
}

#[test]
fn image_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 4, 6]);
    let w3 = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let w1 = rand_tensor(&mut rng, &[3, 2, 1, 1]);
    let b = rand_tensor(&mut rng, &[3]);
    assert_grad(
        "conv3x3",
        gradcheck(&[x.clone(), w3, b.clone()], |g, v| g.conv2d(v[0], v[1], v[2]).unwrap()),
    );
    assert_grad(
        "conv1x1",
        gradcheck(&[x.clone(), w1, b], |g, v| g.conv2d(v[0], v[1], v[2]).unwrap()),
    );
    assert_grad("max_pool2", gradcheck(std::slice::from_ref(&x), |g, v| g.max_pool2(v[0]).unwrap()));
    assert_grad("upsample2", gradcheck(&[x], |g, v| g.upsample2(v[0]).unwrap()));
}

#[test]
fn two_layer_mlp_mse_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = MlpSpec::new(3, &[8, 2]);
    let mut store = ParameterStore::<f64>::new();
    init_mlp(&mut store, "m", &spec, &mut rng).unwrap();
    // Non-zero biases so their gradients are exercised at a generic point.
    for name in ["m.0.b", "m.1.b"] {
        let n = store.get(name).unwrap().len();
        store.insert(name, rand_tensor(&mut rng, &[n]));
    }
    let x = rand_tensor(&mut rng, &[5, 3]);
    let target = rand_tensor(&mut rng, &[5, 2]);
    let loss_of = |store: &ParameterStore<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = forward_mlp(&mut g, store, "m", &spec, xv).unwrap();
        let l = g.mse(y, &target).unwrap();
        (g, l)
    };
    let (g, l) = loss_of(&store);
    let grads = g.backward(l).unwrap().params();
    let names: Vec<String> = store.names().cloned().collect();
    let analytic: Vec<f64> = names
        .iter()
        .flat_map(|n| grads.get(n).unwrap().data().to_vec())
        .collect();
    let flat: Vec<f64> = names
        .iter()
        .flat_map(|n| store.get(n).unwrap().data().to_vec())
        .collect();
    let numeric = finite_difference(
        |p| {
            let mut s = store.clone();
            let mut off = 0;
            for n in &names {
                let t = s.get_mut(n).unwrap();
                let len = t.len();
                t.data_mut().copy_from_slice(&p[off..off + len]);
                off += len;
            }
            let (g, l) = loss_of(&s);
            g.value(l).item()
        },
        &flat,
        STEP,
    );
    assert_grad("mlp mse", rel_error(&analytic, &numeric));
}

#[test]
fn mlp_with_layer_norm_and_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = MlpSpec::new(4, &[6, 4]).with_layer_norm().with_residual();
    let mut store = ParameterStore::<f64>::new();
    init_mlp(&mut store, "u", &spec, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[3, 4]);
    let err = gradcheck(&[x], |g, v| forward_mlp(g, &store, "u", &spec, v[0]).unwrap());
    assert_grad("residual mlp input", err);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = MlpSpec::new(5, &[16, 16, 3]).with_layer_norm();
    let mut store = ParameterStore::<f32>::new();
    init_mlp(&mut store, "d", &spec, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[32, 5]).cast::<f32>();
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = forward_mlp(&mut g, &store, "d", &spec, xv).unwrap();
        let s = g.square(y);
        let l = g.mean(s);
        g.backward(l).unwrap().params()
    };
    assert_eq!(run(), run());
}
