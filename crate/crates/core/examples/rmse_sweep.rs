use corrdp::cli::{rmse_sweep, MatrixSpec, NamedMatrix, RmseSweepConfig};
use corrdp::matrix::ParticipationSchema;

// cargo run --release --example rmse_sweep
fn main() -> corrdp::Result<()> {
    let n = 16;
    let mut arcsine = vec![1.0; n];
    for k in 1..n {
        arcsine[k] = arcsine[k - 1] * (2 * k - 1) as f64 / (2 * k) as f64;
    }
    let config = RmseSweepConfig {
        epsilons: vec![0.5, 1.0, 2.0, 4.0],
        delta: 8e-6,
        tau: 1.25,
        schema: ParticipationSchema::new(16, 1)?,
        matrices: vec![
            NamedMatrix {
                name: "identity".into(),
                spec: MatrixSpec::Identity,
            },
            NamedMatrix {
                name: "toeplitz".into(),
                spec: MatrixSpec::Toeplitz { coeffs: arcsine },
            },
        ],
        sample_count: 200_000,
        seed: 0,
    };
    let mut out = csv::Writer::from_writer(std::io::stdout());
    for row in rmse_sweep(&config)? {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}
