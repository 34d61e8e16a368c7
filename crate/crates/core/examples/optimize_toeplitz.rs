use corrdp::accountant::Adjacency;
use corrdp::matrix::ParticipationSchema;
use corrdp::optimizer::{optimize, Family, OptimizerConfig};

// cargo run --release --example optimize_toeplitz
fn main() -> corrdp::Result<()> {
    let config = OptimizerConfig {
        family: Family::Toeplitz,
        epsilon: 1.0,
        delta: 1e-5,
        tau: 1.25,
        schema: ParticipationSchema::new(16, 1)?,
        steps: 30,
        learning_rate: 0.01,
        samples_per_step: 1 << 12,
        final_sample_count: 1 << 17,
        seed: 3,
        resample_each_step: true,
        adjacency: Adjacency::Both,
        initial: None,
    };
    let result = optimize(&config)?;
    for s in &result.trace.steps {
        println!(
            "step {:>2}: rmse {:.4} sigma {:.4} lr {:.2e} accepted {}",
            s.step, s.rmse, s.sigma, s.learning_rate, s.accepted
        );
    }
    println!("final rmse {:.4} at sigma {:.4}", result.rmse, result.sigma);
    println!("coefficients {:.3?}", result.params.to_vec());
    Ok(())
}
