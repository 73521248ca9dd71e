//! Central finite-difference checks for every differentiable op and for a
//! random 3-layer dense net. The numeric differentiator is independent of the
//! reverse sweep: it only re-runs forward passes on perturbed parameters.

use numcore::rng::substream;
use numcore::{Graph, NodeId, ParamSet, Real, Tensor};

/// max relative error between analytic and central-difference gradients over
/// every element of every trainable parameter.
fn gradcheck<T: Real, F>(params: &mut ParamSet<T>, h: f64, build: F) -> f64
where
    F: Fn(&mut Graph<T>, &ParamSet<T>) -> NodeId,
{
    let loss_of = |ps: &ParamSet<T>| -> f64 {
        let mut g = Graph::new();
        let l = build(&mut g, ps);
        g.value(l).item().as_f64()
    };

    let mut g = Graph::new();
    let loss = build(&mut g, params);
    g.backward(loss, params).unwrap();

    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| match &p.grad {
            Some(t) => t.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; p.value.numel()],
        })
        .collect();

    let mut worst = 0.0f64;
    for pid in 0..params.len() {
        for i in 0..params.get(pid).value.numel() {
            let orig = params.get(pid).value.data()[i];
            params.get_mut(pid).value.data_mut()[i] = orig + T::from_f64(h);
            let up = loss_of(params);
            params.get_mut(pid).value.data_mut()[i] = orig - T::from_f64(h);
            let down = loss_of(params);
            params.get_mut(pid).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pid][i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}

fn rand_tensor<T: Real>(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor<T> {
    use rand::Rng;
    let mut rng = substream(seed, "gradcheck-data");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-scale..scale)))
        .collect();
    Tensor::new(shape, data)
}

#[test]
fn three_layer_dense_net_matches_finite_differences() {
    let mut rng = substream(42, "init");
    let mut ps = ParamSet::<f64>::new();
    let w1 = ps.add_uniform("w1", vec![6, 4], 4, &mut rng).unwrap();
    let b1 = ps.add_uniform("b1", vec![6], 4, &mut rng).unwrap();
    let w2 = ps.add_uniform("w2", vec![5, 6], 6, &mut rng).unwrap();
    let b2 = ps.add_uniform("b2", vec![5], 6, &mut rng).unwrap();
    let w3 = ps.add_uniform("w3", vec![3, 5], 5, &mut rng).unwrap();
    let b3 = ps.add_uniform("b3", vec![3], 5, &mut rng).unwrap();

    let worst = gradcheck(&mut ps, 1e-4, |g, ps| {
        let x = g.leaf(rand_tensor(vec![4], 1, 1.0));
        let t = g.leaf(rand_tensor(vec![3], 2, 1.0));
        let (w1, b1) = (g.param(ps, w1), g.param(ps, b1));
        let (w2, b2) = (g.param(ps, w2), g.param(ps, b2));
        let (w3, b3) = (g.param(ps, w3), g.param(ps, b3));
        let h1 = g.dense(w1, b1, x).unwrap();
        let h1 = g.relu(h1);
        let h2 = g.dense(w2, b2, h1).unwrap();
        let h2 = g.tanh(h2);
        let y = g.dense(w3, b3, h2).unwrap();
        g.mse(t, y).unwrap()
    });
    assert!(worst < 1e-5, "relative error {worst}");
}

#[test]
fn three_layer_dense_net_f32_mode() {
    // 32-bit mode uses a larger step to balance truncation vs roundoff.
    let mut rng = substream(43, "init");
    let mut ps = ParamSet::<f32>::new();
    let w1 = ps.add_uniform("w1", vec![5, 3], 3, &mut rng).unwrap();
    let b1 = ps.add_uniform("b1", vec![5], 3, &mut rng).unwrap();
    let w2 = ps.add_uniform("w2", vec![4, 5], 5, &mut rng).unwrap();
    let b2 = ps.add_uniform("b2", vec![4], 5, &mut rng).unwrap();
    let w3 = ps.add_uniform("w3", vec![2, 4], 4, &mut rng).unwrap();
    let b3 = ps.add_uniform("b3", vec![2], 4, &mut rng).unwrap();

    let worst = gradcheck(&mut ps, 5e-3, |g, ps| {
        let x = g.leaf(rand_tensor(vec![3], 3, 1.0));
        let t = g.leaf(rand_tensor(vec![2], 4, 1.0));
        let (w1, b1) = (g.param(ps, w1), g.param(ps, b1));
        let (w2, b2) = (g.param(ps, w2), g.param(ps, b2));
        let (w3, b3) = (g.param(ps, w3), g.param(ps, b3));
        let h1 = g.dense(w1, b1, x).unwrap();
        let h1 = g.tanh(h1);
        let h2 = g.dense(w2, b2, h1).unwrap();
        let h2 = g.sigmoid(h2);
        let y = g.dense(w3, b3, h2).unwrap();
        g.mse(t, y).unwrap()
    });
    assert!(worst < 1e-3, "relative error {worst}");
}

#[test]
fn conv_pool_upsample_stack_matches_finite_differences() {
    let mut rng = substream(44, "init");
    let mut ps = ParamSet::<f64>::new();
    let w1 = ps.add_uniform("w1", vec![3, 2, 3, 3], 18, &mut rng).unwrap();
    let b1 = ps.add_uniform("b1", vec![3], 18, &mut rng).unwrap();
    let w2 = ps.add_uniform("w2", vec![2, 3, 3, 3], 27, &mut rng).unwrap();
    let b2 = ps.add_uniform("b2", vec![2], 27, &mut rng).unwrap();

    let worst = gradcheck(&mut ps, 1e-4, |g, ps| {
        let x = g.leaf(rand_tensor(vec![2, 4, 4], 5, 1.0));
        let t = g.leaf(rand_tensor(vec![2, 4, 4], 6, 1.0));
        let (w1, b1) = (g.param(ps, w1), g.param(ps, b1));
        let (w2, b2) = (g.param(ps, w2), g.param(ps, b2));
        let h = g.conv3x3(w1, b1, x).unwrap();
        let h = g.softplus(h);
        let h = g.maxpool2x2(h).unwrap();
        let h = g.upsample2x2(h).unwrap();
        let y = g.conv3x3(w2, b2, h).unwrap();
        g.mse(t, y).unwrap()
    });
    assert!(worst < 1e-5, "relative error {worst}");
}

#[test]
fn vector_plumbing_ops_match_finite_differences() {
    // concat, slice, reshape, add, affine, mean-over-set in one graph
    let mut rng = substream(45, "init");
    let mut ps = ParamSet::<f64>::new();
    let a = ps.add_uniform("a", vec![4], 4, &mut rng).unwrap();
    let b = ps.add_uniform("b", vec![4], 4, &mut rng).unwrap();
    let c = ps.add_uniform("c", vec![2], 2, &mut rng).unwrap();

    let worst = gradcheck(&mut ps, 1e-4, |g, ps| {
        let t = g.leaf(rand_tensor(vec![6], 7, 1.0));
        let (a, b, c) = (g.param(ps, a), g.param(ps, b), g.param(ps, c));
        let m = g.mean_over_set(&[a, b]).unwrap();
        let m = g.affine(m, 1.7, -0.3);
        let s = g.add(m, b).unwrap();
        let s4 = g.reshape(s, vec![2, 2]).unwrap();
        let s = g.reshape(s4, vec![4]).unwrap();
        let joined = g.concat(&[s, c]).unwrap();
        let cut = g.slice(joined, 0, 6).unwrap();
        g.mse(t, cut).unwrap()
    });
    assert!(worst < 1e-5, "relative error {worst}");
}

#[test]
fn gaussian_nll_grads_match_finite_differences() {
    // learned-sigma path: mean and raw-std heads both receive gradients
    let mut rng = substream(46, "init");
    let mut ps = ParamSet::<f64>::new();
    let mean = ps.add_uniform("mean", vec![5], 1, &mut rng).unwrap();
    let raw = ps.add_uniform("raw_std", vec![5], 1, &mut rng).unwrap();

    let worst = gradcheck(&mut ps, 1e-4, |g, ps| {
        let t = g.leaf(rand_tensor(vec![5], 8, 1.0));
        let (mean, raw) = (g.param(ps, mean), g.param(ps, raw));
        let sp = g.softplus(raw);
        let std = g.affine(sp, 1.0, 0.01);
        g.gaussian_nll(t, mean, std).unwrap()
    });
    assert!(worst < 1e-5, "relative error {worst}");
}

#[test]
fn relu_path_matches_finite_differences() {
    let mut rng = substream(47, "init");
    let mut ps = ParamSet::<f64>::new();
    let w = ps.add_uniform("w", vec![6, 3], 3, &mut rng).unwrap();
    let b = ps.add_uniform("b", vec![6], 3, &mut rng).unwrap();
    let worst = gradcheck(&mut ps, 1e-4, |g, ps| {
        let x = g.leaf(rand_tensor(vec![3], 9, 1.0));
        let t = g.leaf(rand_tensor(vec![6], 10, 1.0));
        let (w, b) = (g.param(ps, w), g.param(ps, b));
        let h = g.dense(w, b, x).unwrap();
        let h = g.relu(h);
        g.mse(t, h).unwrap()
    });
    assert!(worst < 1e-5, "relative error {worst}");
}

#[test]
fn forward_is_deterministic() {
    let run = || -> Vec<f64> {
        let mut rng = substream(48, "init");
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add_uniform("w", vec![8, 2, 3, 3], 18, &mut rng).unwrap();
        let b = ps.add_zeros("b", vec![8]).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(vec![2, 8, 8], 11, 1.0));
        let (w, b) = (g.param(&ps, w), g.param(&ps, b));
        let y = g.conv3x3(w, b, x).unwrap();
        g.value(y).data().to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}
