//! Soft-margin triplet and counterfactual losses on hand-picked distances and
//! on a random batch.
//!
//!     cargo run --release --example losses

use geodtr::embedding::ModulatedEmbedding;
use geodtr::losses::{batch_triplet_loss, counterfactual_loss_from_distance, triplet_loss};
use geodtr::rng;
use geodtr::tensor::Tensor;

fn main() -> geodtr::Result<()> {
    println!("{:>6} {:>6} {:>10}", "d_pos", "d_neg", "triplet");
    for (p, n) in [(0.4, 0.4), (0.0, 1.0), (1.0, 0.0), (0.2, 1.2)] {
        println!("{p:>6.2} {n:>6.2} {:>10.6}", triplet_loss(p, n, 10.0));
    }
    println!("\n{:>6} {:>10}", "d", "cf");
    for d in [0.0, 0.5, 1.0, 2.0] {
        println!("{d:>6.2} {:>10.6}", counterfactual_loss_from_distance(d, 5.0));
    }

    let mut r = rng::seeded(0);
    let mut emb = |n: usize| -> Vec<ModulatedEmbedding> {
        (0..n).map(|_| ModulatedEmbedding { data: Tensor::randn(&[16], 1.0, &mut r).data, normalized: false }).collect()
    };
    let (g, a) = (emb(8), emb(8));
    println!("\nrandom batch of 8: triplet {:.6}", batch_triplet_loss(&g, &a, 10.0)?);
    println!("matched batch of 8: triplet {:.6}", batch_triplet_loss(&g, &g, 10.0)?);
    Ok(())
}
