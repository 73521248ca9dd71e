use numcore::rng::substream;
use numcore::{Graph, ParamSet, Tensor};
use std::time::Instant;

fn main() {
    let mut rng = substream(1, "bench");
    let mut ps = ParamSet::<f32>::new();
    let w1 = ps.add_uniform("w1", vec![64, 64, 3, 3], 576, &mut rng).unwrap();
    let b1 = ps.add_zeros("b1", vec![64]).unwrap();

    let iters = 500;
    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for i in 0..iters {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![64, 16, 16], 0.1 + (i as f32) * 1e-6));
        let (w1n, b1n) = (g.param(&ps, w1), g.param(&ps, b1));
        let h = g.conv3x3(w1n, b1n, x).unwrap();
        let h = g.relu(h);
        let t = g.leaf(Tensor::full(vec![64, 16, 16], 0.0));
        let loss = g.mse(t, h).unwrap();
        g.backward(loss, &mut ps).unwrap();
        sink += g.value(loss).item();
    }
    let dt = t0.elapsed().as_secs_f64();
    // conv fwd MACs: 16*16*64*9*64 = 9.44M; fwd + dW + dX ~ 3x
    let gmac = iters as f64 * (9.44e6 * 3.0) / 1e9;
    println!("sink {sink}  {:.2} s, {:.2} GMAC/s ({:.2} GFLOP/s)", dt, gmac / dt, 2.0 * gmac / dt);
}
