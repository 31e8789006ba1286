//! Training loop: per-epoch pseudo labels, PK batches, augmentation,
//! optimisation at the scheduled learning rate, metrics and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{augment, load_dataset, Dataset, ImageSample, PkSampler, Split};
use crate::error::{PahError, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport, ItemMeta, Scenario};
use crate::model::{ModelInput, PahModel};
use crate::optim::Optimizer;
use crate::parallel::{map_range, map_slice, Exec};
use crate::pseudo::{generate_pseudo_labels, refresh_policy, PseudoLabelMap};
use crate::schedule::lr_schedule;

pub const METRICS_HEADER: &str = "epoch,loss_id,loss_pair,loss_psd,loss_total,lr";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Batch-averaged losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_id: f64,
    pub loss_pair: f64,
    pub loss_psd: f64,
    pub loss_total: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?}",
            self.epoch, self.loss_id, self.loss_pair, self.loss_psd, self.loss_total, self.lr
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

/// Training images with contiguous labels.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub samples: Vec<ImageSample>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl TrainSet {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let samples = ds.samples(Split::Train)?;
        if samples.is_empty() {
            return Err(PahError::EmptyDataset);
        }
        let labels = samples
            .iter()
            .map(|s| s.label.expect("training identities are labelled"))
            .collect();
        Ok(TrainSet {
            samples,
            labels,
            num_classes: ds.num_classes(),
        })
    }
}

/// Model, optimizer and position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: PahModel,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    pub exec: Exec,
    /// Where to write a diagnostic file if a loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(mut config: RunConfig, num_classes: usize, exec: Exec) -> Result<Self> {
        config.model.num_classes = num_classes;
        config.validate()?;
        let model = PahModel::new(config.model.clone())?;
        let optimizer = Optimizer::new(config.optimizer, config.momentum, config.weight_decay, &model.store);
        Ok(Trainer {
            config,
            model,
            optimizer,
            epoch: 0,
            exec,
            dump_dir: None,
        })
    }

    pub fn from_checkpoint(ck: checkpoint::Checkpoint, exec: Exec) -> Self {
        let optimizer = ck.optimizer.unwrap_or_else(|| {
            Optimizer::new(ck.config.optimizer, ck.config.momentum, ck.config.weight_decay, &ck.model.store)
        });
        Trainer {
            config: ck.config,
            model: ck.model,
            optimizer,
            epoch: ck.epoch as usize,
            exec,
            dump_dir: None,
        }
    }

    fn psd_active(&self) -> bool {
        self.model.part.is_some() && self.config.model.lambda_psd > 0.0
    }

    /// Pseudo labels from the current model on un-augmented images.
    pub fn pseudo_labels(&self, train: &TrainSet, epoch: usize) -> Result<Vec<PseudoLabelMap>> {
        let seed = self.config.model.seed;
        let k = self.config.model.parts;
        map_range(self.exec, train.samples.len(), |i| {
            let dense = self.model.dense_features(&train.samples[i].pixels)?;
            let s = seed ^ (epoch as u64) << 32 ^ i as u64;
            let mut map = match generate_pseudo_labels(&dense, k, s) {
                Err(PahError::DegenerateFeatures(m)) => {
                    log::warn!("image {}: {m}; labelling it background", train.samples[i].sample_id);
                    let (h, w) = (dense.shape()[0], dense.shape()[1]);
                    PseudoLabelMap {
                        height: h,
                        width: w,
                        parts: k,
                        labels: vec![0; h * w],
                        epoch_generated: epoch,
                        fallback: true,
                    }
                }
                r => r?,
            };
            map.epoch_generated = epoch;
            Ok(map)
        })
        .into_iter()
        .collect()
    }

    /// Runs the next epoch.
    pub fn train_epoch(&mut self, train: &TrainSet, sampler: &PkSampler) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let lr = lr_schedule(epoch as f64, &self.config);
        let pseudo = if self.psd_active() && refresh_policy(epoch as i64)? {
            Some(self.pseudo_labels(train, epoch)?)
        } else {
            None
        };
        let seed = self.config.model.seed;
        let batches = sampler.epoch(epoch);
        let mut sums = [0.0; 4];
        for (b, batch) in batches.iter().enumerate() {
            let prepared = map_slice(self.exec, &batch.iter().enumerate().collect::<Vec<_>>(), |&(pos, &i)| {
                let s = &train.samples[i];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((epoch as u64) << 40 ^ (b as u64) << 20 ^ pos as u64);
                let (pixels, head_box, flipped) = if self.config.augment {
                    let a = augment(&s.pixels, s.head_box, &mut rng);
                    (a.pixels, a.head_box, a.flipped)
                } else {
                    (s.pixels.clone(), s.head_box, false)
                };
                let labels = pseudo.as_ref().map(|p| if flipped { p[i].flipped() } else { p[i].clone() });
                ModelInput::new(pixels, head_box).map(|x| (x, labels))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let (inputs, maps): (Vec<ModelInput>, Vec<Option<PseudoLabelMap>>) = prepared.into_iter().unzip();
            let maps: Option<Vec<PseudoLabelMap>> = maps.into_iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let step = self
                .model
                .train_step(&inputs, &labels, maps.as_deref(), self.exec)
                .and_then(|s| {
                    if s.loss_total.is_finite() {
                        Ok(s)
                    } else {
                        Err(PahError::NonFinite(format!("total loss {}", s.loss_total)))
                    }
                });
            let step = match step {
                Ok(s) => s,
                Err(PahError::NonFinite(msg)) => {
                    let dump = self.dump_batch(epoch, b, lr, batch, train, &msg);
                    return Err(PahError::NonFinite(format!(
                        "epoch {epoch} batch {b}: {msg}{}",
                        dump.map(|p| format!(" (diagnostics in {})", p.display())).unwrap_or_default()
                    )));
                }
                Err(e) => return Err(e),
            };
            if step.ln_clamped > 0 {
                log::debug!("epoch {epoch} batch {b}: {} part probabilities clamped", step.ln_clamped);
            }
            self.optimizer.step(&mut self.model.store, &step.grads, lr)?;
            for (s, v) in sums.iter_mut().zip([step.loss_id, step.loss_pair, step.loss_psd, step.loss_total]) {
                *s += v;
            }
        }
        self.epoch += 1;
        let n = batches.len() as f64;
        Ok(EpochMetrics {
            epoch,
            loss_id: sums[0] / n,
            loss_pair: sums[1] / n,
            loss_psd: sums[2] / n,
            loss_total: sums[3] / n,
            lr,
        })
    }

    fn dump_batch(
        &self,
        epoch: usize,
        b: usize,
        lr: f64,
        batch: &[usize],
        train: &TrainSet,
        msg: &str,
    ) -> Option<PathBuf> {
        let dir = self.dump_dir.as_ref()?;
        let path = dir.join(format!("nonfinite_epoch{epoch}_batch{b}.txt"));
        let mut text = format!("error: {msg}\nepoch: {epoch}\nbatch: {b}\nlr: {lr:?}\nsample_id,identity,label\n");
        for &i in batch {
            let s = &train.samples[i];
            text += &format!("{},{},{}\n", s.sample_id, s.identity, train.labels[i]);
        }
        text += "\nparameter,max_abs\n";
        for (_, p) in self.model.store.iter() {
            let m = p.value.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            text += &format!("{},{m:?}\n", p.name);
        }
        std::fs::write(&path, text).ok()?;
        Some(path)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.config, &self.model, Some(&self.optimizer), self.epoch as u64)
    }
}

pub type EvalSet = Vec<(ModelInput, ItemMeta)>;

/// Query and gallery images as model inputs.
pub fn eval_sets(ds: &Dataset) -> Result<(EvalSet, EvalSet)> {
    let load = |split| -> Result<EvalSet> {
        ds.samples(split)?
            .into_iter()
            .map(|s| Ok((s.model_input()?, s.meta())))
            .collect()
    };
    Ok((load(Split::Query)?, load(Split::Gallery)?))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub metrics: Vec<EpochMetrics>,
    pub reports: Vec<(usize, EvalReport)>,
}

/// Full run from `config.dataset` into `config.out_dir`: metrics CSV and a
/// checkpoint after every epoch, evaluation every `eval_every` epochs.
pub fn train(config: &RunConfig, exec: Exec) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = load_dataset(&config.dataset, config.allow_shared_identities)?;
    let train_set = TrainSet::from_dataset(&ds)?;
    let mut trainer = Trainer::new(config.clone(), train_set.num_classes, exec)?;
    std::fs::create_dir_all(&config.out_dir)?;
    trainer.dump_dir = Some(config.out_dir.clone());
    let m = &trainer.config.model;
    let sampler = PkSampler::new(&train_set.labels, m.batch_p, m.batch_k, m.seed)?;
    let eval_data = if config.eval_every > 0 {
        Some(eval_sets(&ds)?)
    } else {
        None
    };
    let mut metrics = Vec::new();
    let mut reports = Vec::new();
    for _ in 0..config.total_epochs() {
        let em = trainer.train_epoch(&train_set, &sampler)?;
        log::info!(
            "epoch {} loss {:.4} (id {:.4}, pair {:.4}, psd {:.4}) lr {:.3e}",
            em.epoch,
            em.loss_total,
            em.loss_id,
            em.loss_pair,
            em.loss_psd,
            em.lr
        );
        metrics.push(em);
        write_metrics_csv(&config.out_dir.join(METRICS_FILE), &metrics)?;
        trainer.save_checkpoint(&config.out_dir.join(CHECKPOINT_FILE))?;
        if let Some((q, g)) = &eval_data {
            if trainer.epoch % config.eval_every == 0 && !q.is_empty() && !g.is_empty() {
                let r = evaluate(&trainer.model, q, g, &Scenario::ALL, EvalOptions::default(), exec)?;
                log::info!("epoch {} eval\n{}", em.epoch, r.table());
                reports.push((em.epoch, r));
            }
        }
    }
    Ok(TrainOutcome {
        trainer,
        metrics,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StreamSet;
    use crate::data::{generate_synthetic, SynthSpec};

    fn toy(dir: &Path) -> RunConfig {
        generate_synthetic(
            &dir.join("data"),
            &SynthSpec {
                num_ids: 2,
                imgs_per_id: 4,
                test_ids: 0,
                heldout_per_id: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let mut c = RunConfig::default();
        c.dataset = dir.join("data");
        c.out_dir = dir.join("run");
        c.epochs_warmup = 1;
        c.epochs_main = 0;
        c.allow_shared_identities = true;
        c.model.batch_p = 2;
        c.model.batch_k = 2;
        c.model.streams = StreamSet::ALL;
        c
    }

    #[test]
    fn one_epoch_smoke() {
        let d = tempfile::tempdir().unwrap();
        let c = toy(d.path());
        let out = train(&c, Exec::Parallel).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert!(out.metrics[0].loss_psd > 0.0);
        let text = std::fs::read_to_string(c.out_dir.join(METRICS_FILE)).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(text.lines().count(), 2);
        let ck = checkpoint::load(&c.out_dir.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.model, out.trainer.model);
        assert_eq!(ck.epoch, 1);
    }
}
