// temporary micro-profiles at batch-64 training shapes
use ssmfuse_core::graph::Graph;
use ssmfuse_core::ssm::DiscretizeMode;
use ssmfuse_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn time<F: FnMut()>(n: usize, mut f: F) -> f64 {
    f(); // warm
    let t = Instant::now();
    for _ in 0..n { f(); }
    t.elapsed().as_secs_f64() / n as f64 * 1e3
}

#[test]
fn probe_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (b, f, d, n) = (64usize, 32usize, 64usize, 16usize);

    // zoh + scan at V-branch shapes
    let a_log = Tensor::randn(&[d, n], 0.3, &mut rng);
    let b_mat_t = Tensor::randn(&[b, f, n], 1.0, &mut rng);
    let delta_t = {
        let mut t = Tensor::randn(&[b, f, d], 0.1, &mut rng);
        t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.01);
        t
    };
    let c_t = Tensor::randn(&[b, f, n], 1.0, &mut rng);
    let x_t = Tensor::randn(&[b, f, d], 1.0, &mut rng);

    let zoh_fwd = time(10, || {
        let mut g = Graph::no_grad();
        let a_logv = g.param(&a_log);
        let e = g.exp(a_logv);
        let a = g.neg(e);
        let bm = g.input(&b_mat_t);
        let dl = g.input(&delta_t);
        let _ = g.zoh_discretize(a, bm, dl, DiscretizeMode::ExactZoh).unwrap();
    });

    let zoh_scan_full = time(10, || {
        let mut g = Graph::new();
        let a_logv = g.param(&a_log);
        let e = g.exp(a_logv);
        let a = g.neg(e);
        let bm = g.param(&b_mat_t);
        let dl = g.param(&delta_t);
        let c = g.param(&c_t);
        let x = g.param(&x_t);
        let (ab, bb) = g.zoh_discretize(a, bm, dl, DiscretizeMode::ExactZoh).unwrap();
        let y = g.selective_scan(ab, bb, c, x).unwrap();
        let l = g.sum_all(y);
        g.backward(l).unwrap();
    });

    // big linear at encoder shapes
    let x2 = Tensor::randn(&[b, f, d], 1.0, &mut rng);
    let w2 = Tensor::randn(&[d, d], 0.2, &mut rng);
    let lin_full = time(20, || {
        let mut g = Graph::new();
        let x = g.param(&x2);
        let w = g.param(&w2);
        let y = g.linear(x, w, None).unwrap();
        let l = g.sum_all(y);
        g.backward(l).unwrap();
    });

    eprintln!("zoh fwd {zoh_fwd:.1} ms | zoh+scan fwd+bwd {zoh_scan_full:.1} ms | linear 2048x64x64 fwd+bwd {lin_full:.2} ms");
}
