//! Trains the desk-scale model on a generated synthetic dataset and reports
//! held-out recall.
//!
//! cargo run --release --example train_synthetic -- [train_n] [test_n] [max_steps]

use geodtr::datagen::{generate_scene, item_seed, SceneConfig};
use geodtr::training::{evaluate_pairs, train_pairs, Pair};
use geodtr::RunConfig;

fn make_pairs(n: usize, seed: u64, scene: &SceneConfig) -> geodtr::Result<Vec<Pair>> {
    (0..n as u64)
        .map(|i| generate_scene(i, item_seed(seed, i), scene).map(|p| (p.aerial, p.ground)))
        .collect()
}

fn main() -> geodtr::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (train_n, test_n) = (args.first().copied().unwrap_or(128), args.get(1).copied().unwrap_or(32));
    let mut cfg = RunConfig::desk();
    if let Some(&s) = args.get(2) {
        cfg.train.max_steps = Some(s);
    }
    let scene = cfg.data.clone();
    let train = make_pairs(train_n, 1, &scene)?;
    let test = make_pairs(test_n, 2, &scene)?;

    let untrained = geodtr::model::ModelParams::init(&cfg.model, cfg.train.seed);
    let before = evaluate_pairs(&untrained, &cfg.model, cfg.train.use_polar_transform, &test)?;
    println!("untrained R@1 {:.3}", before.r1);

    let t = std::time::Instant::now();
    let run = train_pairs(&cfg, &train, Some(&test), None)?;
    let (first, last) = run.first_last_epoch_loss();
    println!("{} steps in {:.1?}; mean loss first epoch {first:.4}, last epoch {last:.4}", run.log.len(), t.elapsed());
    for (epoch, r) in run.val_history.iter().enumerate() {
        println!("epoch {epoch:>3}: R@1 {:.3}  R@5 {:.3}", r.r1, r.r5);
    }
    let after = evaluate_pairs(&run.final_checkpoint.params, &cfg.model, cfg.train.use_polar_transform, &test)?;
    print!("{}", after.table());
    Ok(())
}
