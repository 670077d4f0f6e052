//! Trains the toy preset on eight generated dialogs and reports how well the
//! model reconstructs them. `cargo run --release --example overfit [steps]`

use std::time::Instant;

use vhda::corpus::{generate_toy_corpus, Dialog, ToySpec};
use vhda::trainer::{TrainConfig, Trainer};

fn main() -> vhda::Result<()> {
    let steps: u64 = match std::env::args().nth(1) {
        Some(s) => s.parse().expect("steps must be an integer"),
        None => 2000,
    };
    let corpus = generate_toy_corpus(&ToySpec {
        seed: 1,
        ..ToySpec::default()
    })?;
    let mut trainer = Trainer::new(
        TrainConfig {
            steps,
            ..TrainConfig::toy()
        },
        &corpus,
    )?;
    let start = Instant::now();
    trainer.train(|r| {
        if r.step % 100 == 0 {
            println!(
                "step {:>5} {:>6.1}s  loss {:>8.3}  recon {:>8.3}  kl_c {:.3}  mi {:.3}",
                r.step,
                start.elapsed().as_secs_f64(),
                r.loss.total,
                r.loss.recon_total(),
                r.loss.kl_per_level.get("c").copied().unwrap_or_default(),
                r.loss.mi_estimate
            );
        }
    })?;
    let refs: Vec<&Dialog> = corpus.dialogs.iter().collect();
    println!("{:?}", trainer.model.reconstruct(&refs)?);
    Ok(())
}
