use corrdp::accountant::{estimate_epsilon, Adjacency, PldBaseSample};
use corrdp::matrix::{ParticipationSchema, StrategyMatrix};

// cargo run --release --example estimate_epsilon
fn main() -> corrdp::Result<()> {
    let schema = ParticipationSchema::new(10, 3)?;
    let c = StrategyMatrix::blt(&[0.3, 0.1], &[0.6, 0.95], schema.iterations())?;
    let modes = c.mode_vectors(&schema)?;
    let base = PldBaseSample::draw(&modes, 500_000, 7)?;
    let losses = base.privacy_losses(2.0, modes.gram(), Adjacency::Both)?;
    for delta in [1e-3, 1e-4, 1e-5] {
        println!("delta {delta:.0e}: eps {:.4}", losses.epsilon_for(delta)?);
    }
    for sigma in [1.0, 2.0, 4.0, 8.0] {
        println!(
            "sigma {sigma}: eps {:.4} at delta 1e-5",
            estimate_epsilon(1e-5, sigma, &base, modes.gram(), Adjacency::Both)?
        );
    }
    Ok(())
}
