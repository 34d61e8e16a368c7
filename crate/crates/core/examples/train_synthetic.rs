use corrdp::cli::{train_comparison, MatrixSpec, TrainCommandConfig};
use corrdp::harness::{TrainingConfig, TrainingMode};
use corrdp::matrix::ParticipationSchema;

// cargo run --release --example train_synthetic
fn main() -> corrdp::Result<()> {
    let config = TrainCommandConfig {
        training: TrainingConfig {
            model_dim: 8,
            dataset_size: 512,
            schema: ParticipationSchema::new(16, 2)?,
            batch_size: 32,
            clip_norm: 1.0,
            learning_rate: 0.3,
            momentum: 0.0,
            data_seed: 0,
            assignment_seed: 0,
            noise_seed: 0,
            mode: TrainingMode::PracticalBib,
            label_noise: 0.1,
        },
        matrix: MatrixSpec::Identity,
        epsilon: 1.0,
        delta: 1e-5,
        tau: 1.25,
        sample_count: 1 << 17,
        seed: 0,
        repeats: 10,
    };
    let (summary, _) = train_comparison(&config)?;
    for m in &summary.modes {
        println!(
            "{:?}: sigma {:.3}, mean final loss {:.4}",
            m.mode, m.sigma, m.mean_final_loss
        );
    }
    println!(
        "batching gap {:.4}, amplification gap {:.4}",
        summary.batching_gap, summary.amplification_gap
    );
    Ok(())
}
