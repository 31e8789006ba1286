//! The three-stream model: global and head streams share the two-branch
//! backbone design, the part stream pools a dense map with predicted part
//! probabilities.
//!
//! Training records each image on its own tape (backbones, pooling and the
//! part loss), then records batch norm, classifiers and batch losses on a
//! separate batch tape whose leaves are the pooled vectors. The batch
//! gradients on those leaves seed the per-image reverse passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::StreamBackbone;
use crate::config::ModelConfig;
use crate::error::{PahError, Result};
use crate::heads::{crop_head, HeadBox, StreamHead};
use crate::losses::{
    identity_loss_batch, ms_loss_batch, one_hot, psd_loss, FeatureBundle, HeadKind, PairLossParams,
};
use crate::nn::{BatchNorm1d, ClassifierHead};
use crate::parallel::{map_range, map_slice, Exec};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::part::PartStream;
use crate::pseudo::PseudoLabelMap;
use crate::tensor::{BnMode, Graph, Tensor, Var};

/// Backbone and pooling heads of the global or the head stream.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchStream {
    pub backbone: StreamBackbone,
    pub head: StreamHead,
}

impl BranchStream {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(BranchStream {
            backbone: StreamBackbone::new(store, prefix, cfg, rng)?,
            head: StreamHead::new(store, &format!("{prefix}.heads"), cfg, rng)?,
        })
    }

    fn pool(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<[Var; 3]> {
        let x = g.input(image.clone());
        let (a, b) = self.backbone.forward(g, store, x)?;
        let (p, _) = self.head.pool(g, a, b)?;
        Ok([p.f_gmp, p.f_ae, p.f_gap])
    }
}

/// A full image plus its head crop resized to the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub image: Tensor,
    pub head: Tensor,
    pub head_fallback: bool,
}

impl ModelInput {
    pub fn new(image: Tensor, head_box: Option<HeadBox>) -> Result<Self> {
        let (head, head_fallback) = crop_head(&image, head_box)?;
        Ok(ModelInput {
            image,
            head,
            head_fallback,
        })
    }
}

/// Per-image tape after the forward pass.
pub struct SampleTape {
    pub graph: Graph,
    /// Pre-BN vectors in [`PahModel::slots`] order.
    pub pooled: Vec<Var>,
    pub dense: Option<Var>,
    pub probs: Option<Var>,
    pub psd: Option<Var>,
}

/// Losses and gradients of one optimisation step. Losses are batch means.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss_id: f64,
    pub loss_pair: f64,
    pub loss_psd: f64,
    pub loss_total: f64,
    pub grads: GradBuffer,
    pub ln_clamped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PahModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub global: Option<BranchStream>,
    pub part: Option<PartStream>,
    pub head: Option<BranchStream>,
}

impl PahModel {
    /// Builds and initialises every enabled stream from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.num_classes < 2 {
            return Err(PahError::Config(format!(
                "model needs at least 2 identity classes, got {}",
                config.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let s = config.streams;
        let global = s
            .global
            .then(|| BranchStream::new(&mut store, "global", &config, &mut rng))
            .transpose()?;
        let part = s
            .part
            .then(|| PartStream::new(&mut store, "part", &config, &mut rng))
            .transpose()?;
        let head = s
            .head
            .then(|| BranchStream::new(&mut store, "head", &config, &mut rng))
            .transpose()?;
        Ok(PahModel {
            config,
            store,
            global,
            part,
            head,
        })
    }

    /// Enabled output slots in descriptor order.
    pub fn slots(&self) -> Vec<HeadKind> {
        let s = self.config.streams;
        HeadKind::ORDER
            .into_iter()
            .filter(|k| match k {
                HeadKind::GlobalGmp | HeadKind::GlobalAe | HeadKind::GlobalGap => s.global,
                HeadKind::Part => s.part,
                HeadKind::HeadGmp | HeadKind::HeadAe | HeadKind::HeadGap => s.head,
            })
            .collect()
    }

    fn classifiers(&self) -> Vec<&ClassifierHead> {
        let mut v = Vec::new();
        if let Some(gs) = &self.global {
            v.extend(gs.head.heads());
        }
        if let Some(p) = &self.part {
            v.push(&p.head);
        }
        if let Some(hs) = &self.head {
            v.extend(hs.head.heads());
        }
        v
    }

    fn classifiers_mut<'a>(
        global: &'a mut Option<BranchStream>,
        part: &'a mut Option<PartStream>,
        head: &'a mut Option<BranchStream>,
    ) -> Vec<&'a mut ClassifierHead> {
        let mut v = Vec::new();
        if let Some(gs) = global {
            v.extend(gs.head.heads_mut());
        }
        if let Some(p) = part {
            v.push(&mut p.head);
        }
        if let Some(hs) = head {
            v.extend(hs.head.heads_mut());
        }
        v
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm1d> {
        self.classifiers().into_iter().map(|c| &c.bn).collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm1d> {
        let PahModel {
            global, part, head, ..
        } = self;
        Self::classifiers_mut(global, part, head)
            .into_iter()
            .map(|c| &mut c.bn)
            .collect()
    }

    /// Forward pass of one image up to the pooled vectors. With `labels`
    /// the part loss of this image is recorded as well.
    pub fn sample_forward(
        &self,
        input: &ModelInput,
        labels: Option<&PseudoLabelMap>,
        grad: bool,
    ) -> Result<SampleTape> {
        let mut g = if grad { Graph::new() } else { Graph::no_grad() };
        let mut pooled = Vec::with_capacity(7);
        let (mut dense, mut probs, mut psd) = (None, None, None);
        if let Some(gs) = &self.global {
            pooled.extend(gs.pool(&mut g, &self.store, &input.image)?);
        }
        if let Some(ps) = &self.part {
            let x = g.input(input.image.clone());
            let out = ps.pool(&mut g, &self.store, x)?;
            pooled.push(out.f_l);
            dense = Some(out.dense);
            probs = Some(out.probs);
            if let Some(l) = labels {
                psd = Some(psd_loss(&mut g, out.probs, &l.labels)?);
            }
        }
        if let Some(hs) = &self.head {
            pooled.extend(hs.pool(&mut g, &self.store, &input.head)?);
        }
        Ok(SampleTape {
            graph: g,
            pooled,
            dense,
            probs,
            psd,
        })
    }

    /// Dense part-stream map of one image, as used for pseudo labels.
    pub fn dense_features(&self, image: &Tensor) -> Result<Tensor> {
        let ps = self
            .part
            .as_ref()
            .ok_or_else(|| PahError::Contract("part stream is disabled".into()))?;
        let mut g = Graph::no_grad();
        let x = g.input(image.clone());
        let d = ps.backbone.forward(&mut g, &self.store, x)?;
        Ok(g.value(d).clone())
    }

    /// Eval-mode outputs of one image. `label` fills the one-hot target.
    pub fn features(&self, input: &ModelInput, label: Option<usize>) -> Result<FeatureBundle> {
        let tape = self.sample_forward(input, None, false)?;
        let mut g = tape.graph;
        let mut bundle = FeatureBundle {
            heads: self.slots(),
            pre_bn: Vec::new(),
            post_bn: Vec::new(),
            logits: Vec::new(),
            y: label.map(|l| one_hot(l, self.config.num_classes)).unwrap_or_default(),
        };
        for (&v, head) in tape.pooled.iter().zip(self.classifiers()) {
            let d = g.shape(v)[0];
            let row = g.reshape(v, &[1, d])?;
            let (t, p) = head.forward_eval(&mut g, &self.store, row)?;
            bundle.pre_bn.push(g.value(v).data().to_vec());
            bundle.post_bn.push(g.value(t).data().to_vec());
            bundle.logits.push(g.value(p).data().to_vec());
        }
        Ok(bundle)
    }

    /// Inference descriptor: concatenated post-BN vectors.
    pub fn descriptor(&self, input: &ModelInput) -> Result<Vec<f64>> {
        Ok(self.features(input, None)?.descriptor())
    }

    pub fn descriptors(&self, inputs: &[ModelInput], exec: Exec) -> Result<Vec<Vec<f64>>> {
        map_slice(exec, inputs, |x| self.descriptor(x)).into_iter().collect()
    }

    pub fn pair_params(&self) -> PairLossParams {
        PairLossParams {
            alpha_pos: self.config.alpha_pos,
            alpha_neg: self.config.alpha_neg,
            margin: self.config.ms_margin,
        }
    }

    /// Forward and backward over one batch. Updates BN running statistics;
    /// parameters are left untouched. `pseudo` holds one label map per
    /// input when the part loss is active.
    pub fn train_step(
        &mut self,
        inputs: &[ModelInput],
        labels: &[usize],
        pseudo: Option<&[PseudoLabelMap]>,
        exec: Exec,
    ) -> Result<StepOutput> {
        let n = inputs.len();
        if labels.len() != n || pseudo.is_some_and(|p| p.len() != n) {
            return Err(PahError::Contract("inputs, labels and label maps differ in length".into()));
        }
        if n < 2 {
            return Err(PahError::InsufficientBatch(n));
        }
        let psd_on = self.part.is_some() && pseudo.is_some();
        let tapes: Vec<SampleTape> = map_range(exec, n, |i| {
            self.sample_forward(&inputs[i], pseudo.map(|p| &p[i]), true)
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let slots = tapes[0].pooled.len();
        let mut bg = Graph::new();
        let mut leaves = Vec::with_capacity(slots);
        for s in 0..slots {
            let rows: Vec<&[f64]> = tapes.iter().map(|t| t.graph.value(t.pooled[s]).data()).collect();
            leaves.push(bg.leaf(Tensor::stack_rows(&rows)?));
        }
        let PahModel {
            store,
            global,
            part,
            head,
            ..
        } = self;
        let mut logits = Vec::with_capacity(slots);
        for (&leaf, head) in leaves.iter().zip(Self::classifiers_mut(global, part, head)) {
            let (_, p) = head.forward(&mut bg, store, leaf, BnMode::Train)?;
            logits.push(p);
        }
        let id = identity_loss_batch(&mut bg, &logits, labels)?;
        let loss_id = bg.mean(id)?;
        let params = self.pair_params();
        let mut pair: Option<Var> = None;
        for &leaf in &leaves {
            let l = ms_loss_batch(&mut bg, leaf, labels, params)?;
            pair = Some(match pair {
                Some(acc) => bg.add(acc, l)?,
                None => l,
            });
        }
        let loss_pair = bg.mean(pair.expect("at least one slot"))?;
        let weighted = bg.scale(loss_pair, self.config.lambda_pair)?;
        let batch_loss = bg.add(loss_id, weighted)?;
        let bgrads = bg.backward(batch_loss)?;

        let lambda_psd = self.config.lambda_psd;
        let leaf_grads: Vec<Tensor> = leaves
            .iter()
            .map(|&l| bgrads.get(l).cloned().unwrap_or_else(|| Tensor::zeros(bg.shape(l))))
            .collect();
        let sample_grads = map_range(exec, n, |i| {
            let t = &tapes[i];
            let mut seeds = Vec::with_capacity(slots + 1);
            for (s, g) in leaf_grads.iter().enumerate() {
                let row = g.row(i);
                seeds.push((t.pooled[s], Tensor::vector(row.to_vec())));
            }
            if let (true, Some(p)) = (psd_on, t.psd) {
                seeds.push((p, Tensor::scalar(lambda_psd / n as f64)));
            }
            t.graph.backward_from(seeds)
        });
        let mut grads = GradBuffer::zeros_like(&self.store);
        grads.accumulate(&bgrads);
        for g in sample_grads {
            grads.accumulate(&g?);
        }
        let loss_psd = if psd_on {
            tapes
                .iter()
                .map(|t| t.graph.value(t.psd.expect("psd recorded")).item())
                .sum::<f64>()
                / n as f64
        } else {
            0.0
        };
        let loss_id = bg.value(loss_id).item();
        let loss_pair = bg.value(loss_pair).item();
        let ln_clamped = tapes.iter().map(|t| t.graph.ln_clamped()).sum::<usize>() + bg.ln_clamped();
        Ok(StepOutput {
            loss_id,
            loss_pair,
            loss_psd,
            loss_total: loss_id + self.config.lambda_pair * loss_pair + lambda_psd * loss_psd,
            grads,
            ln_clamped,
        })
    }

    /// Parameter ids grouped by module.
    pub fn module_params(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut out = Vec::new();
        let head_ids = |h: &ClassifierHead| vec![h.bn.gamma, h.bn.beta, h.fc.weight, h.fc.bias];
        for (name, s) in [("global", &self.global), ("head", &self.head)] {
            if let Some(s) = s {
                out.push((format!("{name}.branch_a"), s.backbone.branch_param_ids(true)));
                out.push((format!("{name}.branch_b"), s.backbone.branch_param_ids(false)));
                let all = s.backbone.param_ids();
                let branches: Vec<ParamId> = s
                    .backbone
                    .branch_param_ids(true)
                    .into_iter()
                    .chain(s.backbone.branch_param_ids(false))
                    .collect();
                out.push((
                    format!("{name}.stem"),
                    all.into_iter().filter(|id| !branches.contains(id)).collect(),
                ));
                for (k, h) in ["gmp", "ae", "gap"].iter().zip(s.head.heads()) {
                    out.push((format!("{name}.{k}"), head_ids(h)));
                }
            }
        }
        if let Some(p) = &self.part {
            out.push(("part.dense".into(), p.dense_param_ids()));
            out.push(("part.head".into(), head_ids(&p.head)));
        }
        out
    }

    /// Checks that no parameter tensor is shared between modules and that
    /// every stored parameter belongs to some module.
    pub fn audit_parameters(&self) -> Result<()> {
        let mut owner: Vec<Option<String>> = vec![None; self.store.len()];
        for (module, ids) in self.module_params() {
            for id in ids {
                if let Some(prev) = &owner[id.index()] {
                    return Err(PahError::Contract(format!(
                        "parameter {} shared by {prev} and {module}",
                        self.store.name(id)
                    )));
                }
                owner[id.index()] = Some(module.clone());
            }
        }
        if let Some(i) = owner.iter().position(|o| o.is_none()) {
            let id = self.store.ids().nth(i).expect("index in range");
            return Err(PahError::Contract(format!("parameter {} has no owner", self.store.name(id))));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StreamSet;
    use rand::Rng;

    fn small_cfg(streams: StreamSet) -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            streams,
            ..Default::default()
        }
    }

    fn random_input(cfg: &ModelConfig, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.input_h * cfg.input_w * 3;
        let img = Tensor::new(&[cfg.input_h, cfg.input_w, 3], (0..n).map(|_| rng.gen()).collect()).unwrap();
        ModelInput::new(img, Some(HeadBox { x0: 4, y0: 0, x1: 28, y1: 14 })).unwrap()
    }

    #[test]
    fn descriptor_length_and_order() {
        let cfg = small_cfg(StreamSet::ALL);
        let m = PahModel::new(cfg.clone()).unwrap();
        let b = m.features(&random_input(&cfg, 1), Some(2)).unwrap();
        assert_eq!(b.heads, HeadKind::ORDER.to_vec());
        assert_eq!(b.descriptor().len(), cfg.descriptor_len());
        assert_eq!(b.descriptor().len(), 6 * 32 + 6 * 48);
        assert_eq!(b.label().unwrap(), 2);
        let mut swapped = b.clone();
        swapped.post_bn.swap(0, 4);
        assert_ne!(swapped.descriptor(), b.descriptor());
    }

    #[test]
    fn single_stream_models() {
        for (s, len) in [(StreamSet::GLOBAL, 96), (StreamSet::PART, 288), (StreamSet::HEAD, 96)] {
            let cfg = small_cfg(s);
            let m = PahModel::new(cfg.clone()).unwrap();
            assert_eq!(m.descriptor(&random_input(&cfg, 2)).unwrap().len(), len);
            m.audit_parameters().unwrap();
        }
    }

    #[test]
    fn parameters_are_not_aliased() {
        let m = PahModel::new(small_cfg(StreamSet::ALL)).unwrap();
        m.audit_parameters().unwrap();
        let g = m.global.as_ref().unwrap();
        assert_eq!(g.backbone.branch_a_descriptor(), g.backbone.branch_b_descriptor());
    }

    #[test]
    fn parallel_and_sequential_steps_agree() {
        let cfg = small_cfg(StreamSet::ALL);
        let inputs: Vec<_> = (0..4).map(|i| random_input(&cfg, 10 + i)).collect();
        let labels = [0, 0, 1, 2];
        let mut a = PahModel::new(cfg.clone()).unwrap();
        let mut b = a.clone();
        let ra = a.train_step(&inputs, &labels, None, Exec::Sequential).unwrap();
        let rb = b.train_step(&inputs, &labels, None, Exec::Parallel).unwrap();
        assert_eq!(ra.loss_total.to_bits(), rb.loss_total.to_bits());
        for ((_, x), (_, y)) in ra.grads.iter().zip(rb.grads.iter()) {
            assert_eq!(x, y);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn part_loss_only_reaches_part_stream() {
        let cfg = small_cfg(StreamSet::ALL);
        let m = PahModel::new(cfg.clone()).unwrap();
        let input = random_input(&cfg, 3);
        let dense = m.dense_features(&input.image).unwrap();
        let labels = crate::pseudo::generate_pseudo_labels(&dense, cfg.parts, 0).unwrap();
        let tape = m.sample_forward(&input, Some(&labels), true).unwrap();
        let grads = tape
            .graph
            .backward_from(vec![(tape.psd.unwrap(), Tensor::scalar(1.0))])
            .unwrap();
        let dense_ids = m.part.as_ref().unwrap().dense_param_ids();
        let mut touched = 0;
        for (id, g) in grads.param_grads() {
            if dense_ids.contains(&id) {
                touched += 1;
            } else {
                assert!(g.data().iter().all(|&v| v == 0.0), "{}", m.store.name(id));
            }
        }
        assert_eq!(touched, dense_ids.len());
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let cfg = small_cfg(StreamSet::GLOBAL);
        let mut m = PahModel::new(cfg.clone()).unwrap();
        assert!(matches!(
            m.train_step(&[random_input(&cfg, 0)], &[0], None, Exec::Sequential),
            Err(PahError::InsufficientBatch(1))
        ));
    }
}
