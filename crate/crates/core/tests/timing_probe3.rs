// temporary forward-phase probe
use ssmfuse_core::config::TrainConfig;
use ssmfuse_core::fusion::{encode_modality, project_selective, DetachA, FusionBlock};
use ssmfuse_core::graph::Graph;
use ssmfuse_core::ssm::DiscretizeMode;
use ssmfuse_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn timeit<F: FnMut()>(n: usize, mut f: F) -> f64 {
    f();
    let t = Instant::now();
    for _ in 0..n { f(); }
    t.elapsed().as_secs_f64() / n as f64 * 1e3
}

#[test]
fn probe_forward_phases() {
    let mut cfg = TrainConfig::default();
    cfg.d_raw = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = FusionBlock::new(&cfg, &mut rng).unwrap();
    let x_raw = Tensor::randn(&[64, 32, 32], 1.0, &mut rng);

    let enc_ms = timeit(10, || {
        let mut g = Graph::new();
        let vars = block.bind(&mut g, DetachA::Neither);
        let x = g.input(&x_raw);
        let _ = encode_modality(&mut g, x, &vars.enc_v).unwrap();
    });

    let x_enc = Tensor::randn(&[64, 32, 64], 1.0, &mut rng);
    let proj_ms = timeit(10, || {
        let mut g = Graph::new();
        let vars = block.bind(&mut g, DetachA::Neither);
        let x = g.input(&x_enc);
        let _ = project_selective(&mut g, x, &vars.stage0.select_v).unwrap();
    });

    let ssm_ms = timeit(10, || {
        let mut g = Graph::new();
        let vars = block.bind(&mut g, DetachA::Neither);
        let x = g.input(&x_enc);
        let (bm, cm, dl) = project_selective(&mut g, x, &vars.stage0.select_v).unwrap();
        let _ = g.selective_ssm(vars.stage0.a_v, bm, cm, dl, x, DiscretizeMode::ExactZoh).unwrap();
    });

    let bind_ms = timeit(20, || {
        let mut g = Graph::new();
        let _ = block.bind(&mut g, DetachA::Neither);
    });

    eprintln!("bind {bind_ms:.1} ms | encode_V {enc_ms:.1} ms | project_V {proj_ms:.1} ms | project+ssm_V {ssm_ms:.1} ms");
}
