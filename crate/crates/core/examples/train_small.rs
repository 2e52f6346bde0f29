//! Train on a small SPLICE_RECT corpus, save a checkpoint and a loss log, and
//! score a held-out split.
//!
//! cargo run --release --example train_small -- [epochs] [out_dir]

use std::path::PathBuf;

use dcl::data::{synthesize, CorpusSpec, Dataset};
use dcl::eval::evaluate;
use dcl::trainer::{read_loss_log, train, TrainConfig, TrainOutputs};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(12);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/train_small".into()));

    let corpus = CorpusSpec {
        n_videos: 32,
        ..CorpusSpec::default()
    };
    let (train_set, test_set) = Dataset::from_videos(&synthesize(&corpus)?)?.split_by_source(0.25, 0)?;
    let mut config = TrainConfig::default();
    config.run.epochs = epochs;
    let outputs = TrainOutputs {
        checkpoint: Some(out.join("model.ckpt")),
        loss_log: Some(out.join("loss.jsonl")),
    };
    let state = train(config, &train_set, &outputs)?;

    for row in read_loss_log(&out.join("loss.jsonl"))? {
        println!(
            "epoch {:2}  phi {:.1}  ce {:.4}  inter {:.4}  intra {:.4}  queues {}/{}",
            row.epoch, row.phi, row.ce, row.inter, row.intra, row.queue_real, row.queue_fake
        );
    }
    let metrics = evaluate(&state.model, &test_set)?;
    println!(
        "held-out: frame AUC {:.4}  EER {:.4}  video AUC {:.4}",
        metrics.auc_frame, metrics.eer_frame, metrics.auc_video
    );
    println!("checkpoint in {}", out.join("model.ckpt").display());
    Ok(())
}
