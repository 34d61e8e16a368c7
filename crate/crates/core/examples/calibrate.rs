use corrdp::accountant::Calibrator;
use corrdp::baseline::calibrate_sigma_unamplified;
use corrdp::matrix::{ParticipationSchema, StrategyMatrix};

// cargo run --release --example calibrate
fn main() -> corrdp::Result<()> {
    let schema = ParticipationSchema::new(16, 1)?;
    let c = StrategyMatrix::identity(16)?;
    for eps in [0.5, 1.0, 2.0, 4.0] {
        let calibrator = Calibrator::new(eps, 1e-5, 200_000, 1);
        let cal = calibrator.calibrate(&c, &schema)?;
        let unamp = calibrate_sigma_unamplified(eps, calibrator.target_delta(), &c, &schema)?;
        println!(
            "eps {eps:>4}: sigma {:.4} (unamplified {unamp:.4}), delta_hat {:.3e} <= {:.1e}",
            cal.sigma, cal.delta_hat, cal.target_delta
        );
    }
    Ok(())
}
