//! Identity cross-entropy over every logit head, the multi-similarity pair
//! loss over every pre-BN vector, the pseudo part-segmentation loss, and
//! their weighted total.

use crate::error::{dim_err, PahError, Result};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

/// The seven per-image output slots, in descriptor order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    GlobalGmp,
    GlobalAe,
    GlobalGap,
    Part,
    HeadGmp,
    HeadAe,
    HeadGap,
}

impl HeadKind {
    pub const ORDER: [HeadKind; 7] = [
        HeadKind::GlobalGmp,
        HeadKind::GlobalAe,
        HeadKind::GlobalGap,
        HeadKind::Part,
        HeadKind::HeadGmp,
        HeadKind::HeadAe,
        HeadKind::HeadGap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::GlobalGmp => "global_gmp",
            HeadKind::GlobalAe => "global_ae",
            HeadKind::GlobalGap => "global_gap",
            HeadKind::Part => "part",
            HeadKind::HeadGmp => "head_gmp",
            HeadKind::HeadAe => "head_ae",
            HeadKind::HeadGap => "head_gap",
        }
    }
}

/// All per-image outputs of a model: pre-BN vectors (pair loss), post-BN
/// vectors (descriptor), logits (identity loss), and the one-hot label.
/// Slots are listed in [`HeadKind::ORDER`] restricted to enabled streams.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub heads: Vec<HeadKind>,
    pub pre_bn: Vec<Vec<f64>>,
    pub post_bn: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl FeatureBundle {
    /// Concatenation of the post-BN vectors.
    pub fn descriptor(&self) -> Vec<f64> {
        self.post_bn.iter().flatten().copied().collect()
    }

    pub fn label(&self) -> Result<usize> {
        one_hot_index(&self.y)
    }
}

/// Index of the single 1 in an exact one-hot vector.
pub fn one_hot_index(y: &[f64]) -> Result<usize> {
    let ones: Vec<usize> = y
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| (v == 1.0).then_some(i))
        .collect();
    let zeros = y.iter().filter(|&&v| v == 0.0).count();
    if ones.len() != 1 || zeros + 1 != y.len() {
        return Err(PahError::Label(format!("label vector is not one-hot: {y:?}")));
    }
    Ok(ones[0])
}

pub fn one_hot(index: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[index] = 1.0;
    v
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLossParams {
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    pub margin: f64,
}

impl Default for PairLossParams {
    fn default() -> Self {
        PairLossParams {
            alpha_pos: 2.0,
            alpha_neg: 40.0,
            margin: 0.5,
        }
    }
}

impl PairLossParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_pos > 0.0 && self.alpha_neg > 0.0 {
            Ok(())
        } else {
            Err(PahError::Config("pair loss scales must be positive".into()))
        }
    }
}

/// `ln(1 + sum exp(x))` evaluated stably, plus the softmax weights
/// `exp(x_i) / (1 + sum exp(x))`.
fn log1p_sum_exp(xs: &[f64]) -> (f64, Vec<f64>) {
    let m = xs.iter().cloned().fold(0.0f64, f64::max);
    let base = (-m).exp();
    let es: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z = base + es.iter().sum::<f64>();
    (m + z.ln(), es.into_iter().map(|e| e / z).collect())
}

/// Multi-similarity loss of each row of a `[N, D]` feature matrix against
/// the other rows, with positives sharing its label. Similarity is the raw
/// dot product. Output is `[N]`.
struct MultiSimilarity {
    labels: Vec<usize>,
    params: PairLossParams,
}

impl MultiSimilarity {
    /// Per-anchor losses and `dL_a / dS[a, b]`.
    fn eval(&self, f: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let n = f.shape()[0];
        let d = f.shape()[1];
        let mut sim = vec![0.0; n * n];
        crate::tensor::linalg::gemm(n, d, n, f.data(), false, f.data(), true, 0.0, &mut sim);
        let PairLossParams {
            alpha_pos: a1,
            alpha_neg: a2,
            margin: lam,
        } = self.params;
        let mut losses = vec![0.0; n];
        let mut dsim = vec![0.0; n * n];
        for a in 0..n {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for b in (0..n).filter(|&b| b != a) {
                if self.labels[b] == self.labels[a] {
                    pos.push(b);
                } else {
                    neg.push(b);
                }
            }
            let xp: Vec<f64> = pos.iter().map(|&b| -a1 * (sim[a * n + b] - lam)).collect();
            let xn: Vec<f64> = neg.iter().map(|&b| a2 * (sim[a * n + b] - lam)).collect();
            let (lp, wp) = log1p_sum_exp(&xp);
            let (ln_, wn) = log1p_sum_exp(&xn);
            losses[a] = lp / a1 + ln_ / a2;
            for (&b, w) in pos.iter().zip(wp) {
                dsim[a * n + b] = -w;
            }
            for (&b, w) in neg.iter().zip(wn) {
                dsim[a * n + b] = w;
            }
        }
        (losses, dsim)
    }
}

impl CustomOp for MultiSimilarity {
    fn name(&self) -> &'static str {
        "multi_similarity"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let f = inputs[0];
        match *f.shape() {
            [n, _] if n == self.labels.len() => {}
            ref s => return dim_err(format!("multi-similarity: features {s:?} vs {} labels", self.labels.len())),
        }
        Ok(Tensor::vector(self.eval(f).0))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let f = inputs[0];
        let n = f.shape()[0];
        let d = f.shape()[1];
        let (_, mut dsim) = self.eval(f);
        for a in 0..n {
            for b in 0..n {
                dsim[a * n + b] *= grad.data()[a];
            }
        }
        // dF = dS F + dS^T F
        let mut df = vec![0.0; n * d];
        crate::tensor::linalg::gemm(n, n, d, &dsim, false, f.data(), false, 0.0, &mut df);
        crate::tensor::linalg::gemm(n, n, d, &dsim, true, f.data(), false, 1.0, &mut df);
        vec![Some(Tensor::new(&[n, d], df).expect("shape"))]
    }
}

/// Per-anchor multi-similarity losses `[N]` for one head's `[N, D]` batch.
pub fn ms_loss_batch(g: &mut Graph, feats: Var, labels: &[usize], params: PairLossParams) -> Result<Var> {
    params.validate()?;
    g.custom(
        &[feats],
        Box::new(MultiSimilarity {
            labels: labels.to_vec(),
            params,
        }),
    )
}

/// Per-image identity loss `[N]`: the sum over heads of the cross-entropy
/// of `softmax(logits)` against the label.
pub fn identity_loss_batch(g: &mut Graph, logits: &[Var], labels: &[usize]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in logits {
        let c = match *g.shape(p) {
            [n, c] if n == labels.len() => c,
            ref s => return dim_err(format!("logits {s:?} vs {} labels", labels.len())),
        };
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(PahError::Label(format!("label {bad} out of range for {c} classes")));
        }
        let lp = g.log_softmax(p)?;
        let picked = g.gather(lp, labels)?;
        let ce = g.scale(picked, -1.0)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| PahError::Contract("identity loss needs at least one head".into()))
}

/// `-sum_ij ln P[i, j, label_ij]` for a `[h, w, K]` probability map and
/// per-pixel integer labels. Probabilities below the log clamp are counted
/// by [`Graph::ln_clamped`].
pub fn psd_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let (h, w, k) = match *g.shape(probs) {
        [h, w, k] => (h, w, k),
        ref s => return dim_err(format!("part probabilities must be [h, w, K], got {s:?}")),
    };
    if labels.len() != h * w {
        return dim_err(format!("{} labels for a {h}x{w} map", labels.len()));
    }
    if labels.iter().any(|&l| l >= k) {
        return Err(PahError::Label(format!("pseudo label out of range for K = {k}")));
    }
    let flat = g.reshape(probs, &[h * w, k])?;
    let picked = g.gather(flat, labels)?;
    let logp = g.ln(picked)?;
    let s = g.sum(logp)?;
    g.scale(s, -1.0)
}

/// `L = L_id + lambda_pair * L_pair + lambda_psd * L_psd`.
pub fn total_loss(l_id: f64, l_pair: f64, l_psd: f64, lambda_pair: f64, lambda_psd: f64) -> f64 {
    l_id + lambda_pair * l_pair + lambda_psd * l_psd
}

/// Identity loss of one image from its bundle.
pub fn identity_loss(bundle: &FeatureBundle) -> Result<f64> {
    let y = bundle.label()?;
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = bundle
        .logits
        .iter()
        .map(|p| g.input(Tensor::new(&[1, p.len()], p.clone()).expect("row")))
        .collect();
    let l = identity_loss_batch(&mut g, &vars, &[y])?;
    Ok(g.value(l).item())
}

/// Pair loss of an anchor bundle against explicit positive and negative
/// sets, summed over heads.
pub fn ms_loss(
    anchor: &FeatureBundle,
    positives: &[&FeatureBundle],
    negatives: &[&FeatureBundle],
    params: PairLossParams,
) -> Result<f64> {
    let mut total = 0.0;
    for (h, f) in anchor.pre_bn.iter().enumerate() {
        let mut rows: Vec<&[f64]> = vec![f];
        let mut labels = vec![0usize];
        for p in positives {
            rows.push(&p.pre_bn[h]);
            labels.push(0);
        }
        for (i, q) in negatives.iter().enumerate() {
            rows.push(&q.pre_bn[h]);
            labels.push(i + 1);
        }
        let mut g = Graph::no_grad();
        let x = g.input(Tensor::stack_rows(&rows)?);
        let l = ms_loss_batch(&mut g, x, &labels, params)?;
        total += g.value(l).data()[0];
    }
    Ok(total)
}

/// Pseudo-segmentation loss from a probability map and a one-hot target of
/// the same shape. Returns the loss and the number of clamped logs.
pub fn psd_loss_value(probs: &Tensor, one_hot_target: &Tensor) -> Result<(f64, usize)> {
    if probs.shape() != one_hot_target.shape() || probs.ndim() != 3 {
        return dim_err("probability map and target must share an [h, w, K] shape");
    }
    let k = probs.shape()[2];
    let labels = one_hot_target
        .data()
        .chunks(k)
        .map(one_hot_index)
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::no_grad();
    let p = g.input(probs.clone());
    let l = psd_loss(&mut g, p, &labels)?;
    Ok((g.value(l).item(), g.ln_clamped()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bundle(pre: Vec<Vec<f64>>, logits: Vec<Vec<f64>>, y: usize, c: usize) -> FeatureBundle {
        FeatureBundle {
            heads: HeadKind::ORDER[..pre.len().max(logits.len())].to_vec(),
            post_bn: pre.clone(),
            pre_bn: pre,
            logits,
            y: one_hot(y, c),
        }
    }

    #[test]
    fn uniform_heads_give_seven_ln_c() {
        let b = bundle(vec![], vec![vec![0.3; 4]; 7], 2, 4);
        assert!((identity_loss(&b).unwrap() - 7.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_heads_give_zero() {
        let logits = vec![vec![0.0, 800.0, 0.0]; 7];
        let b = bundle(vec![], logits, 1, 3);
        assert_eq!(identity_loss(&b).unwrap(), 0.0);
    }

    #[test]
    fn identity_loss_matches_direct_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let b = bundle(vec![], logits.clone(), 3, 5);
        let mut want = 0.0;
        for p in &logits {
            let z: f64 = p.iter().map(|v| v.exp()).sum();
            want -= (p[3].exp() / z).ln();
        }
        assert!((identity_loss(&b).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn bad_labels_are_rejected() {
        let mut b = bundle(vec![], vec![vec![0.0; 3]], 0, 3);
        b.y = vec![0.5, 0.5, 0.0];
        assert!(matches!(identity_loss(&b), Err(PahError::Label(_))));
        b.y = vec![1.0, 1.0, 0.0];
        assert!(identity_loss(&b).is_err());
        assert!(one_hot_index(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn ms_empty_sets_are_zero() {
        let a = bundle(vec![vec![1.0, 2.0]; 7], vec![], 0, 2);
        assert_eq!(ms_loss(&a, &[], &[], PairLossParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn ms_single_positive_at_margin() {
        let p = PairLossParams::default();
        // <f, f_pos> = 0.5 = margin
        let a = bundle(vec![vec![1.0, 0.0]], vec![], 0, 2);
        let pos = bundle(vec![vec![0.5, 3.0]], vec![], 0, 2);
        let l = ms_loss(&a, &[&pos], &[], p).unwrap();
        assert!((l - 2f64.ln() / p.alpha_pos).abs() < 1e-15);
    }

    #[test]
    fn ms_large_similarities_stay_finite() {
        let a = bundle(vec![vec![30.0, 30.0]], vec![], 0, 2);
        let n = bundle(vec![vec![30.0, 30.0]], vec![], 1, 2);
        let l = ms_loss(&a, &[], &[&n], PairLossParams::default()).unwrap();
        assert!(l.is_finite());
        assert!((l - (1800.0 - 0.5)).abs() < 1e-9);
    }

    #[test]
    fn psd_examples() {
        let mut y = Tensor::zeros(&[2, 3, 4]);
        for (i, px) in y.data_mut().chunks_mut(4).enumerate() {
            px[i % 4] = 1.0;
        }
        assert_eq!(psd_loss_value(&y, &y).unwrap(), (0.0, 0));
        let u = Tensor::full(&[2, 3, 4], 0.25);
        let (l, _) = psd_loss_value(&u, &y).unwrap();
        assert!((l - 6.0 * 4f64.ln()).abs() < 1e-12);
        let mut z = u.clone();
        z.data_mut()[0] = 0.0;
        let (l, clamped) = psd_loss_value(&z, &y).unwrap();
        assert_eq!(clamped, 1);
        assert!(l.is_finite());
    }

    #[test]
    fn total_loss_weights() {
        assert!((total_loss(1.0, 2.0, 3.0, 1.0, 0.1) - 3.3).abs() < 1e-15);
        assert_eq!(total_loss(1.5, 2.0, 3.0, 0.0, 0.0), 1.5);
    }
}
