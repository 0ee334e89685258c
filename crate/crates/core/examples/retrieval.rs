//! Distance matrices and recall metrics, including ties and R@1%.
//!
//!     cargo run --release --example retrieval

use geodtr::retrieval::{percent_to_k, DistanceMatrix, Recalls};

fn main() -> geodtr::Result<()> {
    let d = DistanceMatrix::new(3, 3, vec![0.1, 0.5, 0.9, 0.4, 0.3, 0.2, 0.7, 0.7, 0.7])?;
    for i in 0..3 {
        println!("query {i}: rank of truth {}", d.rank_of_truth(i));
    }
    print!("{}", Recalls::compute(&d)?.table());

    for m in [3, 100, 250, 1000] {
        println!("R@1% over {m:>4} references uses k = {}", percent_to_k(1.0, m)?);
    }

    // a noisy diagonal: matches closer than most non-matches
    let n = 200;
    let data = (0..n * n)
        .map(|i| {
            let (r, c) = (i / n, i % n);
            let noise = ((i as f64 * 12.9898).sin() * 43758.5453).fract().abs();
            if r == c { 0.3 * noise } else { 0.2 + noise }
        })
        .collect();
    let d = DistanceMatrix::new(n, n, data)?;
    print!("\n{}", Recalls::compute(&d)?.csv());
    Ok(())
}
