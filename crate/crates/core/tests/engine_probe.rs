//! Manual probe: does in-context pretraining on the synthetic task prior
//! actually reduce held-out episode loss, and how fast?
//! Run with `cargo test -p pdx-core --test engine_probe -- --ignored --nocapture`.

use pdx_core::engine::{Engine, EngineConfig};
use pdx_core::prior::{pretrain_engine, sample_task, PretrainConfig, PriorConfig, SampledTask};
use pdx_core::quantile::QuantileTransform;
use pdx_tensor::{Binding, SeededRng, Tape};

fn mean_loss(engine: &Engine, held: &[SampledTask]) -> f64 {
    held.iter()
        .map(|task| {
            let qt = QuantileTransform::fit(&task.support_x).unwrap();
            let sx = qt.apply(&task.support_x);
            let qx = qt.apply(&task.query_x);
            let mut tape = Tape::new();
            let mut binding = Binding::frozen();
            let loss = engine
                .episode_loss(
                    &mut tape,
                    &mut binding,
                    &sx,
                    &task.support_y,
                    &qx,
                    &task.query_y,
                    task.n_classes,
                )
                .unwrap();
            tape.scalar_value(loss)
        })
        .sum::<f64>()
        / held.len() as f64
}

#[test]
#[ignore]
fn pretraining_convergence_at_small_scale() {
    let cfg = EngineConfig { d_model: 16, layers: 1, heads: 2, f_max: 12, c_max: 4, ff_mult: 2 };
    let prior = PriorConfig {
        features_max: 8,
        classes_max: 3,
        support_max: 24,
        query_max: 12,
        ..Default::default()
    };
    let held: Vec<SampledTask> =
        (0..32).map(|i| sample_task(&prior, 24, 12, &mut SeededRng::new(500 + i))).collect();

    for (label, steps, lr) in [
        ("300 steps lr 2e-3", 300usize, 2e-3),
        ("1000 steps lr 1e-3", 1000, 1e-3),
        ("2000 steps lr 1e-3", 2000, 1e-3),
    ] {
        let mut engine = Engine::new(cfg.clone(), &mut SeededRng::new(0));
        let before = mean_loss(&engine, &held);
        let pc = PretrainConfig { steps, lr, prior: prior.clone() };
        let start = std::time::Instant::now();
        let report = pretrain_engine(&mut engine, &pc, &SeededRng::new(42)).unwrap();
        let after = mean_loss(&engine, &held);
        let curve: Vec<String> =
            report.curve.points.iter().map(|(s, l)| format!("{s}:{l:.3}")).collect();
        println!(
            "{label}: held-out {before:.4} -> {after:.4} in {:.1}s\n  curve {}",
            start.elapsed().as_secs_f64(),
            curve.join(" ")
        );
    }
}
