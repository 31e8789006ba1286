//! Trains on a small synthetic set and evaluates on held-out images of the
//! training identities.
//!
//! `cargo run --release --example overfit -- [key=value ...]` where keys are
//! run-config keys plus `heldout` and `ids`.

use std::time::Instant;

use pah_core::data::{generate_synthetic, load_dataset, PkSampler, SynthSpec};
use pah_core::eval::{evaluate, EvalOptions, Scenario};
use pah_core::train::{eval_sets, TrainSet, Trainer};
use pah_core::{Exec, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let mut cfg = RunConfig::default();
    let mut spec = SynthSpec {
        test_ids: 0,
        heldout_per_id: 6,
        ..Default::default()
    };
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("expected key=value")?;
        match k {
            "heldout" => spec.heldout_per_id = v.parse()?,
            "ids" => spec.num_ids = v.parse()?,
            "data_seed" => spec.seed = v.parse()?,
            _ => cfg.set(k, v)?,
        }
    }
    let dir = tempfile::tempdir()?;
    generate_synthetic(dir.path(), &spec)?;
    let ds = load_dataset(dir.path(), true)?;
    let train = TrainSet::from_dataset(&ds)?;
    let (q, g) = eval_sets(&ds)?;
    let mut t = Trainer::new(cfg.clone(), train.num_classes, Exec::Parallel)?;
    let m = &t.config.model;
    let sampler = PkSampler::new(&train.labels, m.batch_p, m.batch_k, m.seed)?;
    let start = Instant::now();
    for _ in 0..cfg.total_epochs() {
        let e = t.train_epoch(&train, &sampler)?;
        println!(
            "{:>3} total {:.4} id {:.4} pair {:.4} psd {:.2} lr {:.2e} [{:.0}s]",
            e.epoch,
            e.loss_total,
            e.loss_id,
            e.loss_pair,
            e.loss_psd,
            e.lr,
            start.elapsed().as_secs_f64()
        );
        if t.epoch % 5 == 0 || t.epoch == cfg.total_epochs() {
            let r = evaluate(&t.model, &q, &g, &Scenario::ALL, EvalOptions::default(), Exec::Parallel)?;
            print!("{}", r.table());
        }
    }
    Ok(())
}
