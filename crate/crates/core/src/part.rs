//! Local body part stream: per-pixel part probabilities from the dense map,
//! probability-weighted part pooling, and the BN + classifier head.

use rand::Rng;

use crate::backbone::DenseBackbone;
use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::nn::ClassifierHead;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// `P[i, j] = softmax(W_part · F[i, j])` for `F[h, w, Cd]`, `W_part[K, Cd]`.
pub fn part_probabilities(g: &mut Graph, dense: Var, w_part: Var) -> Result<Var> {
    let (h, w, cd) = match *g.shape(dense) {
        [h, w, c] => (h, w, c),
        ref s => return dim_err(format!("dense map must be [h, w, Cd], got {s:?}")),
    };
    let k = match *g.shape(w_part) {
        [k, c] if c == cd => k,
        ref s => return dim_err(format!("W_part must be [K, {cd}], got {s:?}")),
    };
    let flat = g.reshape(dense, &[h * w, cd])?;
    let logits = g.linear(flat, w_part)?;
    let probs = g.softmax(logits)?;
    g.reshape(probs, &[h, w, k])
}

/// Concatenated part vectors `f_l` (background channel 0 skipped), of
/// length `(K - 1) * Cd`, ordered by ascending part index.
pub fn part_aggregate(g: &mut Graph, dense: Var, probs: Var) -> Result<Var> {
    g.part_pool(probs, dense)
}

/// Split `f_l` into its `K - 1` per-part vectors.
pub fn split_parts(f_l: &[f64], dense_channels: usize) -> Vec<&[f64]> {
    f_l.chunks(dense_channels).collect()
}

/// Per-image outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PartPooled {
    pub dense: Var,
    pub probs: Var,
    pub f_l: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartStream {
    pub backbone: DenseBackbone,
    pub w_part: ParamId,
    pub head: ClassifierHead,
    pub parts: usize,
}

impl PartStream {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let backbone = DenseBackbone::new(store, prefix, cfg, rng)?;
        let cd = cfg.dense_channels;
        let bound = 1.0 / (cd as f64).sqrt();
        let w = (0..cfg.parts * cd).map(|_| rng.gen_range(-bound..bound)).collect();
        let w_part = store.add(format!("{prefix}.w_part"), Tensor::new(&[cfg.parts, cd], w)?)?;
        let head = ClassifierHead::new(
            store,
            &format!("{prefix}.head"),
            (cfg.parts - 1) * cd,
            cfg.num_classes,
            cfg.bn_eps,
            cfg.bn_momentum,
            rng,
        )?;
        Ok(PartStream {
            backbone,
            w_part,
            head,
            parts: cfg.parts,
        })
    }

    /// Dense map, part probabilities and the aggregated vector for one image.
    pub fn pool(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<PartPooled> {
        let dense = self.backbone.forward(g, store, image)?;
        let w = g.param(self.w_part, store.get(self.w_part));
        let probs = part_probabilities(g, dense, w)?;
        let f_l = part_aggregate(g, dense, probs)?;
        Ok(PartPooled { dense, probs, f_l })
    }

    /// Parameters of the dense backbone and the part classifier.
    pub fn dense_param_ids(&self) -> Vec<ParamId> {
        let mut v = self.backbone.param_ids();
        v.push(self.w_part);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn probs_of(f: &Tensor, w: &Tensor) -> Tensor {
        let mut g = Graph::no_grad();
        let fv = g.input(f.clone());
        let wv = g.input(w.clone());
        let p = part_probabilities(&mut g, fv, wv).unwrap();
        g.value(p).clone()
    }

    fn aggregate_of(f: &Tensor, p: &Tensor) -> Vec<f64> {
        let mut g = Graph::no_grad();
        let fv = g.input(f.clone());
        let pv = g.input(p.clone());
        let a = part_aggregate(&mut g, fv, pv).unwrap();
        g.value(a).data().to_vec()
    }

    #[test]
    fn zero_weights_give_uniform() {
        let p = probs_of(&rand_tensor(&[4, 3, 5], 1), &Tensor::zeros(&[7, 5]));
        assert!(p.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn two_part_direct_formula() {
        let mut f = Tensor::zeros(&[1, 1, 3]);
        f.set(&[0, 0, 0], 1.0);
        let w = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = probs_of(&f, &w);
        let e = 1f64.exp();
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn pixel_rows_sum_to_one() {
        let p = probs_of(&rand_tensor(&[6, 4, 8], 2), &rand_tensor(&[7, 8], 3));
        for px in p.data().chunks(7) {
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn indicator_weighting_selects_gap() {
        let f = rand_tensor(&[4, 3, 5], 4);
        let mut p = Tensor::zeros(&[4, 3, 4]);
        for i in 0..4 {
            for j in 0..3 {
                p.set(&[i, j, 2], 1.0);
            }
        }
        let agg = aggregate_of(&f, &p);
        let gap = crate::heads::gap(&f).unwrap();
        let parts = split_parts(&agg, 5);
        assert_eq!(parts.len(), 3);
        assert!(parts[0].iter().all(|&v| v == 0.0));
        assert!(parts[2].iter().all(|&v| v == 0.0));
        for (a, b) in parts[1].iter().zip(&gap) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_weighting_divides_gap() {
        let f = rand_tensor(&[4, 3, 5], 5);
        let p = Tensor::full(&[4, 3, 7], 1.0 / 7.0);
        let agg = aggregate_of(&f, &p);
        let gap = crate::heads::gap(&f).unwrap();
        for part in split_parts(&agg, 5) {
            for (a, b) in part.iter().zip(&gap) {
                assert!((a - b / 7.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn aggregate_matches_triple_loop() {
        let (h, w, k, c) = (5, 3, 4, 6);
        let f = rand_tensor(&[h, w, c], 6);
        let p = rand_tensor(&[h, w, k], 7).map(f64::abs);
        let agg = aggregate_of(&f, &p);
        for kk in 1..k {
            for cc in 0..c {
                let mut s = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        s += p.at(&[i, j, kk]) * f.at(&[i, j, cc]);
                    }
                }
                s /= (h * w) as f64;
                assert!((agg[(kk - 1) * c + cc] - s).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hand_set_part_head_logits() {
        let mut cfg = ModelConfig::default();
        cfg.parts = 2;
        cfg.dense_channels = 2;
        cfg.num_classes = 2;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ps = PartStream::new(&mut store, "part", &cfg, &mut rng).unwrap();
        *store.get_mut(ps.head.fc.weight) = Tensor::new(&[2, 2], vec![2.0, 0.0, 1.0, -1.0]).unwrap();
        let mut g = Graph::no_grad();
        let x = g.input(Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap());
        let (_, p) = ps.head.forward_eval(&mut g, &store, x).unwrap();
        let s = 1.0 / (1.0 + cfg.bn_eps).sqrt();
        let want = [2.0 * s, s - 3.0 * s];
        for (a, b) in g.value(p).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = g.input(Tensor::zeros(&[1, 2]));
        let (_, pz) = ps.head.forward_eval(&mut g, &store, z).unwrap();
        assert!(g.value(pz).data().iter().all(|&v| v == 0.0));
    }
}
