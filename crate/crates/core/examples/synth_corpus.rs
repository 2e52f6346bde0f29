//! Generate a small corpus on disk and print what was written.
//!
//! cargo run --release --example synth_corpus -- [out_dir] [family]

use std::path::PathBuf;

use dcl::data::{generate_corpus, load_dataset, CorpusSpec, Label, ManipKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/example_corpus".into()));
    let family: ManipKind = args.next().map(|s| s.parse()).transpose()?.unwrap_or(ManipKind::SpliceRect);

    let spec = CorpusSpec {
        n_videos: 8,
        frames_per_video: 3,
        manipulation_families: vec![family],
        ..CorpusSpec::default()
    };
    let videos = generate_corpus(&spec, &out)?;
    for v in videos.iter().filter(|v| v.label == Label::Fake).take(3) {
        let forged: usize = v.truth.iter().map(|t| t.iter().filter(|&&b| b).count()).sum();
        let total = v.truth.len() * spec.image_size * spec.image_size;
        println!(
            "{} forged from {}: {:.1}% of pixels changed",
            v.video_id,
            v.corresponding_video_id.as_deref().unwrap_or("?"),
            100.0 * forged as f64 / total as f64
        );
    }

    let dataset = load_dataset(&out)?;
    println!(
        "{}: {} real and {} fake frames from {} videos",
        out.display(),
        dataset.count(Label::Real),
        dataset.count(Label::Fake),
        videos.len()
    );
    Ok(())
}
