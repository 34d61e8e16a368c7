use corrdp::batching::{assign, practical_batches, schedule};

// cargo run --release --example balls_in_bins
fn main() -> corrdp::Result<()> {
    let (n, b) = (1000, 8);
    let plan = assign(n, b, 42)?;
    println!("counts {:?}", plan.counts());
    let batches = practical_batches(&plan, n / b)?;
    for (k, batch) in batches.iter().enumerate() {
        println!(
            "batch {}: {} real, {} padded, {} truncated",
            k + 1,
            batch.real_count,
            batch.pad_count(),
            batch.truncated_count
        );
    }
    let order: Vec<usize> = (1..=2 * b)
        .map(|i| schedule(i, b))
        .collect::<corrdp::Result<_>>()?;
    println!("two epochs visit batches {order:?}");
    Ok(())
}
