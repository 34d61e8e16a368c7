use corrdp::accountant::Adjacency;
use corrdp::matrix::ParticipationSchema;
use corrdp::optimizer::{optimize, Family, OptimizerConfig, StrategyParams};

// cargo run --release --example optimize_blt
fn main() -> corrdp::Result<()> {
    let config = OptimizerConfig {
        family: Family::Blt { buffers: 3 },
        epsilon: 1.0,
        delta: 1e-5,
        tau: 1.25,
        schema: ParticipationSchema::new(8, 4)?,
        steps: 25,
        learning_rate: 0.01,
        samples_per_step: 1 << 12,
        final_sample_count: 1 << 17,
        seed: 4,
        resample_each_step: true,
        adjacency: Adjacency::Both,
        initial: None,
    };
    let result = optimize(&config)?;
    if let StrategyParams::Blt { weights, decays } = &result.params {
        println!("weights {weights:.4?}");
        println!("decays  {decays:.4?}");
    }
    println!(
        "{} parameters, rmse {:.4}, sigma {:.4}",
        result.params.len(),
        result.rmse,
        result.sigma
    );
    Ok(())
}
