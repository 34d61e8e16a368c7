use corrdp::harness::NoiseStream;
use corrdp::matrix::StrategyMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// cargo run --release --example noise_stream
fn main() -> corrdp::Result<()> {
    let (n, p) = (1000, 4);
    let c = StrategyMatrix::blt(&[0.25, 0.1], &[0.7, 0.98], n)?;
    let mut stream = NoiseStream::new(&c, p)?;
    println!("BLT state: {} floats", stream.state_len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = vec![0.0; p];
    for t in 0..n {
        let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let w = stream.noise_next(&z)?;
        for (acc, v) in total.iter_mut().zip(&w) {
            *acc += v;
        }
        if (t + 1) % 250 == 0 {
            println!("after {:>4} steps, prefix noise {:.3?}", t + 1, total);
        }
    }
    Ok(())
}
