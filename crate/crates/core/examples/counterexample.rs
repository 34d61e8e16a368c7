use corrdp::oracle::adaptivity_counterexample_check;

// cargo run --release --example counterexample
fn main() -> corrdp::Result<()> {
    // C = [[1, 0], [-1, 1]] with two batches: the signs of the second
    // contribution change the divergence even though |C| is the same.
    for sigma in [0.5, 1.0, 2.0] {
        for alpha in [1.0, 0.5f64.exp(), 1f64.exp()] {
            let (opposite, same) = adaptivity_counterexample_check(sigma, alpha)?;
            println!("sigma {sigma}, alpha {alpha:.4}: opposite {opposite:.6}, same {same:.6}");
        }
    }
    Ok(())
}
