use corrdp::accountant::{
    evr_gate, verification_failure_prob, Adjacency, Calibrator, PldBaseSample, PrivacyParams,
};
use corrdp::matrix::{ParticipationSchema, StrategyMatrix};

// cargo run --release --example verify_release
fn main() -> corrdp::Result<()> {
    let schema = ParticipationSchema::new(8, 2)?;
    let c = StrategyMatrix::toeplitz_with_order(&[1.0, 0.5, 0.375, 0.3125], schema.iterations())?;
    let target = PrivacyParams::new(1.0, 8e-6)?;
    let sigma = Calibrator::new(target.epsilon, target.delta, 100_000, 1)
        .calibrate(&c, &schema)?
        .sigma;

    let modes = c.mode_vectors(&schema)?;
    let samples = 1_000_000;
    let base = PldBaseSample::draw(&modes, samples, 2)?;
    let est = base.estimate_delta(target.epsilon, sigma, modes.gram(), Adjacency::Both)?;
    let release = evr_gate(&target, est.delta_hat, 1.25)?;
    println!(
        "sigma {sigma:.4}: delta_hat {:.3e} +- {:.1e}",
        est.delta_hat, est.std_error
    );
    println!(
        "decision {release:?}, failure probability {:.2e}",
        verification_failure_prob(samples as u64, 1.25, target.delta, Adjacency::Both)?
    );

    println!(
        "failure probability with 1e8 samples {:.2e}",
        verification_failure_prob(100_000_000, 1.25, target.delta, Adjacency::Both)?
    );

    let low = evr_gate(
        &target,
        base.estimate_delta(target.epsilon, 0.5 * sigma, modes.gram(), Adjacency::Both)?
            .delta_hat,
        1.25,
    )?;
    println!("at half the noise: {low:?}");
    Ok(())
}
