//! Region masks from pixel correspondence and the two intra-instance losses.
//!
//! For a handful of fake frames this prints the feature-grid mask, then
//! scores three synthetic feature maps: uniform rows, rows where the forged
//! cells point elsewhere and fully random rows.
//!
//! cargo run --release --example intra_masks

use dcl::data::{synthesize, CorpusSpec, Dataset, Label};
use dcl::intra_icl::{intra_loss_fake, intra_loss_real, make_mask, segment_parts, IntraConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRID: usize = 6;
const C: usize = 16;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dataset = Dataset::from_videos(&synthesize(&CorpusSpec {
        n_videos: 6,
        frames_per_video: 1,
        ..CorpusSpec::default()
    })?)?;
    let cfg = IntraConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    for fake in dataset.samples().iter().filter(|s| s.label == Label::Fake).take(3) {
        let real = dataset.corresponding_real(fake).expect("fake has a source");
        let mask = make_mask(&fake.image, &real.image, GRID, GRID, cfg.bin_threshold)?;
        println!("{}: {} forged of {} cells", fake.video_id, mask.n_fake, GRID * GRID);
        for r in 0..GRID {
            let row: String = (0..GRID).map(|c| if mask.grid[r * GRID + c] { '#' } else { '.' }).collect();
            println!("  {row}");
        }

        let base: Vec<f64> = (0..C).map(|_| rng.gen_range(0.5..1.0)).collect();
        let other: Vec<f64> = (0..C).map(|i| if i % 2 == 0 { -base[i] } else { base[i] }).collect();
        let uniform = Array2::from_shape_fn((GRID * GRID, C), |(_, j)| base[j]);
        let split = Array2::from_shape_fn((GRID * GRID, C), |(l, j)| if mask.grid[l] { other[j] } else { base[j] });
        let random = Array2::from_shape_fn((GRID * GRID, C), |_| rng.gen_range(-1.0..1.0));
        for (name, rows) in [("uniform", &uniform), ("split", &split), ("random", &random)] {
            let parts = segment_parts(rows.view(), &mask)?;
            println!(
                "  {name:>7}: fake-frame loss {:.4}  real-frame loss {:.4}",
                intra_loss_fake(&parts, cfg.tau, cfg.include_self_pairs)?,
                intra_loss_real(rows.view(), cfg.tau)?
            );
        }
    }
    Ok(())
}
