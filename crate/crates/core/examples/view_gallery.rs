//! Write each view transform applied to one fake frame as PNGs, plus a few
//! full random view pairs under the default policy.
//!
//! cargo run --release --example view_gallery -- [out_dir]

use std::path::PathBuf;

use dcl::data::{synthesize, CorpusSpec, Dataset, Label};
use dcl::imageops::{flip_horizontal, gaussian_blur, write_png};
use dcl::views::{corresponding_mixup, make_views, random_patch, srm_enhance, ViewPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/view_gallery".into()));
    std::fs::create_dir_all(&out)?;
    let dataset = Dataset::from_videos(&synthesize(&CorpusSpec {
        n_videos: 4,
        frames_per_video: 2,
        ..CorpusSpec::default()
    })?)?;
    let index = (0..dataset.len())
        .find(|&i| dataset.get(i).label == Label::Fake)
        .expect("corpus has fakes");
    let fake = dataset.get(index);
    let real = dataset.corresponding_real(fake).expect("fake has a source");
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let policy = ViewPolicy::default();
    let singles = [
        ("0_fake", fake.image.clone()),
        ("1_real", real.image.clone()),
        ("2_random_patch", random_patch(&fake.image, policy.patch_k, &mut rng)?),
        ("3_srm", srm_enhance(&fake.image, policy.srm_lambda)?),
        ("4_mixup", corresponding_mixup(&fake.image, &real.image, 0.5)?),
        ("5_flip", flip_horizontal(&fake.image)),
        ("6_blur", gaussian_blur(&fake.image, 1.0)),
    ];
    for (name, image) in &singles {
        write_png(image, &out.join(format!("{name}.png")))?;
    }
    for i in 0..4 {
        let pair = make_views(&dataset, index, &policy, &mut rng)?;
        write_png(&pair.view1, &out.join(format!("pair{i}_v1.png")))?;
        write_png(&pair.view2, &out.join(format!("pair{i}_v2.png")))?;
        println!(
            "pair {i}: views from frames {} and {} of {}",
            dataset.get(pair.base1).frame_idx,
            dataset.get(pair.base2).frame_idx,
            fake.video_id
        );
    }
    println!("wrote {} images to {}", singles.len() + 8, out.display());
    Ok(())
}
