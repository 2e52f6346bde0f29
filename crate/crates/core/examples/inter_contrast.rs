//! Inter-instance contrast on toy embeddings: prototypes, the hard-sample
//! gate and the InfoNCE loss against class-opposite queues.
//!
//! Real and fake keys are drawn around two directions whose overlap is set
//! by `mix`; only keys that resemble the other class's prototype enter the
//! queues once the warm-up fill is reached.
//!
//! cargo run --release --example inter_contrast -- [mix]

use dcl::data::Label;
use dcl::inter_icl::{inter_loss_batch, ContrastConfig, HardNegativeQueues, PrototypeBank};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const DIM: usize = 36;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mix: f32 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0.6);
    let config = ContrastConfig {
        queue_capacity: 256,
        warmup_fill: 64,
        ..ContrastConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 0.6f32)?;
    let real_dir: Vec<f32> = (0..DIM).map(|i| if i < DIM / 2 { 1.0 } else { 0.0 }).collect();
    let fake_dir: Vec<f32> = (0..DIM)
        .map(|i| if i < DIM / 2 { mix } else { 1.0 })
        .collect();

    let mut bank = PrototypeBank::new(DIM, config.alpha, config.gate_threshold);
    let mut queues = HardNegativeQueues::new(DIM, &config);
    for step in 0..20 {
        let labels: Vec<Label> = (0..32).map(|i| if i % 2 == 0 { Label::Real } else { Label::Fake }).collect();
        let keys: Vec<Vec<f32>> = labels
            .iter()
            .map(|l| {
                let dir = if *l == Label::Real { &real_dir } else { &fake_dir };
                dir.iter().map(|&d| d + noise.sample(&mut rng)).collect()
            })
            .collect();
        let refs: Vec<(&[f32], Label)> = keys.iter().zip(&labels).map(|(k, &l)| (k.as_slice(), l)).collect();
        bank.update(&refs)?;
        let gate = queues.gate_and_enqueue(&bank, &refs)?;

        // Queries are a second noisy draw of the same instances.
        let queries = Array2::from_shape_fn((32, DIM), |(i, j)| (keys[i][j] + 0.2 * noise.sample(&mut rng)) as f64);
        let keys_m = Array2::from_shape_fn((32, DIM), |(i, j)| keys[i][j] as f64);
        let (loss, _) = inter_loss_batch(
            queries.view(),
            keys_m.view(),
            &labels,
            queues.real.to_matrix().view(),
            queues.fake.to_matrix().view(),
            config.tau,
        )?;
        if step % 4 == 0 || step == 19 {
            println!(
                "step {step:2}: inter loss {loss:.4}  admitted real {:2} fake {:2} rejected {:2}  queues {}/{}",
                gate.enqueued_real,
                gate.enqueued_fake,
                gate.rejected,
                queues.real.len(),
                queues.fake.len()
            );
        }
    }
    Ok(())
}
