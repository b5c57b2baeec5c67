//! Temporary diagnostic probe (not part of the suite).

use pdx_cli::checkpoint;
use pdx_core::engine::{Engine, EngineConfig};
use pdx_core::adapter::predict_raw;
use pdx_core::prior::{sample_task, PriorConfig};
use pdx_core::oracle::separable_binary_task;
use pdx_core::quantile::QuantileTransform;
use pdx_tensor::{Binding, SeededRng, Tape};
use std::io::Write as _;

fn say(line: &str) {
    let mut out = std::io::stderr().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.write_all(b"\n");
    let _ = out.flush();
}

fn argmax_rows(t: &pdx_tensor::Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[test]
#[ignore]
fn probe_pretrained_engine() {
    let mut rng = SeededRng::new(2202);
    let mut engine = Engine::new(EngineConfig::default(), &mut rng.split(1));
    checkpoint::load_params(
        std::path::Path::new("/tmp/acc-cache/engine-default-s2202.ckpt"),
        &mut engine,
    )
    .unwrap();

    // Held-out prior tasks: mean query CE and accuracy.
    let prior = PriorConfig::default();
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    let n_tasks = 30;
    for i in 0..n_tasks {
        let mut trng = SeededRng::new(7_000_000 + i);
        let task = sample_task(&prior, engine.config.f_max, engine.config.c_max, &mut trng);
        let qt = QuantileTransform::fit(&task.support_x).unwrap();
        let sx = qt.apply(&task.support_x);
        let qx = qt.apply(&task.query_x);
        let mut tape = Tape::new();
        let mut binding = Binding::frozen();
        let loss = engine
            .episode_loss(&mut tape, &mut binding, &sx, &task.support_y, &qx, &task.query_y, task.n_classes)
            .unwrap();
        loss_sum += tape.scalar_value(loss);
        let probs = predict_raw(&engine, &task.support_x, &task.support_y, &task.query_x, task.n_classes).unwrap();
        let pred = argmax_rows(&probs);
        let hits = pred.iter().zip(&task.query_y).filter(|(a, b)| a == b).count();
        acc_sum += hits as f64 / task.query_y.len() as f64;
    }
    say(&format!(
        "prior held-out: mean CE {:.4}, mean acc {:.4} over {n_tasks} tasks",
        loss_sum / n_tasks as f64,
        acc_sum / n_tasks as f64
    ));

    // Separable tasks exactly like the acceptance check.
    let mut eval = SeededRng::new(3303).split(30);
    let mut acc = 0.0;
    for _ in 0..10 {
        let task = separable_binary_task(8, 40, 20, 2.0, &mut eval);
        let probs = predict_raw(&engine, &task.support_x, &task.support_y, &task.query_x, 2).unwrap();
        let pred = argmax_rows(&probs);
        let hits = pred.iter().zip(&task.query_y).filter(|(a, b)| a == b).count();
        acc += hits as f64 / task.query_y.len() as f64;
    }
    say(&format!("separable margin-2sigma: mean acc {:.4} over 10 tasks", acc / 10.0));

    // One separable task in detail: support labels, a few query probabilities.
    let mut drng = SeededRng::new(99);
    let task = separable_binary_task(8, 40, 20, 2.0, &mut drng);
    let probs = predict_raw(&engine, &task.support_x, &task.support_y, &task.query_x, 2).unwrap();
    let support_ones: usize = task.support_y.iter().sum();
    say(&format!(
        "detail: support class-1 count {}/{}, first 5 query p1 {:?}, first 5 query y {:?}",
        support_ones,
        task.support_y.len(),
        (0..5).map(|i| (probs.get2(i, 1) * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        &task.query_y[..5]
    ));
}
