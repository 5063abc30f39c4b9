// temporary timing probe
use ssmfuse_core::config::TrainConfig;
use ssmfuse_core::graph::Graph;
use ssmfuse_core::model::ActionModel;
use ssmfuse_core::params::Parameterized;
use ssmfuse_core::synth::{gen_split, make_batch, task_vocab};
use std::time::Instant;

#[test]
fn probe_step_phases() {
    let cfg = TrainConfig::default();
    let vocab = task_vocab(&cfg);
    let ds = gen_split(0, 256, &cfg).unwrap();
    let mut model = ActionModel::new(&cfg, vocab.len(), 0).unwrap();
    let refs: Vec<_> = ds.train.iter().take(64).collect();
    let batch = make_batch(&refs);

    // warmup
    for _ in 0..2 {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let (loss, _, _) = model.loss(&mut g, &vars, &batch).unwrap();
        g.backward(loss).unwrap();
    }

    let n = 10;
    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::no_grad();
        let vars = model.bind(&mut g);
        let _ = model.loss(&mut g, &vars, &batch).unwrap();
    }
    let fwd_nograd = t0.elapsed().as_secs_f64() / n as f64;

    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let _ = model.loss(&mut g, &vars, &batch).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / n as f64;

    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let (loss, _, _) = model.loss(&mut g, &vars, &batch).unwrap();
        g.backward(loss).unwrap();
        model.zero_grads();
        model.harvest_grads(&g, &vars);
    }
    let full = t0.elapsed().as_secs_f64() / n as f64;

    eprintln!(
        "fwd(no-grad) {:.1} ms | fwd(rec) {:.1} ms | fwd+bwd+harvest {:.1} ms | bwd portion {:.1} ms",
        fwd_nograd * 1e3, fwd * 1e3, full * 1e3, (full - fwd) * 1e3
    );
}
