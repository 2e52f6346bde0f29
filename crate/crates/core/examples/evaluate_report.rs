//! Load a checkpoint, score a freshly generated corpus and write the report
//! files: metrics, per-frame self-similarity, embeddings and histograms.
//!
//! cargo run --release --example train_small
//! cargo run --release --example evaluate_report -- target/train_small/model.ckpt [family] [out_dir]

use std::path::PathBuf;

use dcl::data::{synthesize, CorpusSpec, Dataset, ManipKind};
use dcl::eval::{report, self_similarity_scores};
use dcl::trainer::load_checkpoint;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let checkpoint = PathBuf::from(args.next().ok_or("usage: evaluate_report <checkpoint> [family] [out_dir]")?);
    let family: ManipKind = args.next().map(|s| s.parse()).transpose()?.unwrap_or(ManipKind::WarpPatch);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/report".into()));

    let state = load_checkpoint(&checkpoint)?;
    let corpus = CorpusSpec {
        n_videos: 16,
        manipulation_families: vec![family],
        seed: 99,
        ..CorpusSpec::default()
    };
    let dataset = Dataset::from_videos(&synthesize(&corpus)?)?;
    let metrics = report(&state.model, &dataset, &out)?;
    let selfsim = self_similarity_scores(&state.model, &dataset)?;
    println!("{family} after {} epochs of training", state.epoch);
    println!("  frame AUC {:.4}  EER {:.4}", metrics.auc_frame, metrics.eer_frame);
    println!("  video AUC {:.4}  EER {:.4}", metrics.auc_video, metrics.eer_video);
    println!("  self-similarity AUC {:.4}", selfsim.auc()?);
    let mut files: Vec<String> = std::fs::read_dir(&out)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    files.sort();
    println!("wrote {} to {}", files.join(", "), out.display());
    Ok(())
}
