use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use pah_core::data::{generate_synthetic, load_dataset, PkSampler, Split, SynthSpec};
use pah_core::eval::{cosine_similarity, evaluate_descriptors, EvalOptions, ItemMeta, Scenario};
use pah_core::heads::{adversarial_erase, gmp};
use pah_core::losses::{ms_loss_batch, PairLossParams};
use pah_core::part::{part_aggregate, part_probabilities};
use pah_core::pseudo::{foreground_split, generate_pseudo_labels};
use pah_core::schedule::lr_schedule;
use pah_core::tensor::{Graph, Tensor};
use pah_core::{Exec, RunConfig};

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

fn nonzero_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn aggregate(f: &Tensor, w: &Tensor) -> (Tensor, Vec<f64>) {
    let mut g = Graph::no_grad();
    let fv = g.input(f.clone());
    let wv = g.input(w.clone());
    let p = part_probabilities(&mut g, fv, wv).unwrap();
    let a = part_aggregate(&mut g, fv, p).unwrap();
    (g.value(p).clone(), g.value(a).data().to_vec())
}

fn ms_losses(f: &Tensor, labels: &[usize]) -> Vec<f64> {
    let mut g = Graph::no_grad();
    let x = g.input(f.clone());
    let l = ms_loss_batch(&mut g, x, labels, PairLossParams::default()).unwrap();
    g.value(l).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_ignores_positive_scaling(q in nonzero_vec(8), g in nonzero_vec(8), a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let base = cosine_similarity(&q, &g).unwrap();
        let qs: Vec<f64> = q.iter().map(|x| x * a).collect();
        let gs: Vec<f64> = g.iter().map(|x| x * b).collect();
        prop_assert!((cosine_similarity(&qs, &gs).unwrap() - base).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn part_probabilities_are_distributions(f in tensor(&[3, 2, 4], 0.0, 2.0), w in tensor(&[5, 4], -3.0, 3.0)) {
        let (p, _) = aggregate(&f, &w);
        for px in p.data().chunks(5) {
            prop_assert!(px.iter().all(|&v| v >= 0.0));
            prop_assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn part_aggregation_is_linear_in_features(
        f1 in tensor(&[3, 2, 4], 0.0, 2.0),
        f2 in tensor(&[3, 2, 4], 0.0, 2.0),
        w in tensor(&[5, 4], -3.0, 3.0),
        a in -2.0f64..2.0,
    ) {
        let (p, _) = aggregate(&f1, &w);
        let pool = |f: &Tensor| {
            let mut g = Graph::no_grad();
            let fv = g.input(f.clone());
            let pv = g.input(p.clone());
            let v = part_aggregate(&mut g, fv, pv).unwrap();
            g.value(v).data().to_vec()
        };
        let mix = Tensor::new(
            &[3, 2, 4],
            f1.data().iter().zip(f2.data()).map(|(x, y)| x + a * y).collect(),
        ).unwrap();
        let (l, r1, r2) = (pool(&mix), pool(&f1), pool(&f2));
        for i in 0..l.len() {
            prop_assert!((l[i] - (r1[i] + a * r2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn erased_max_never_exceeds_plain_max(f in tensor(&[6, 3, 4], 0.0, 5.0)) {
        let (_, ae) = adversarial_erase(&f, 1.0 / 3.0).unwrap();
        let m = gmp(&f).unwrap();
        for (a, b) in ae.iter().zip(&m) {
            prop_assert!(a <= b);
            prop_assert!(*a >= 0.0);
        }
    }

    #[test]
    fn pseudo_labels_stay_in_range(f in tensor(&[6, 4, 5], 0.0, 1.0), seed in any::<u64>()) {
        let k = 7;
        let map = generate_pseudo_labels(&f, k, seed).unwrap();
        let split = foreground_split(&f, seed).unwrap();
        prop_assert_eq!(map.labels.len(), 24);
        for (l, fg) in map.labels.iter().zip(&split.foreground) {
            prop_assert!(*l < k);
            prop_assert_eq!(*l == 0, !fg);
        }
    }

    #[test]
    fn pair_loss_falls_as_a_positive_moves_closer(f in tensor(&[4, 3], -0.5, 0.5), step in 0.01f64..0.2) {
        let labels = [0usize, 0, 1, 1];
        let before = ms_losses(&f, &labels)[0];
        let mut moved = f.clone();
        for c in 0..3 {
            let a = f.at(&[0, c]);
            moved.set(&[1, c], f.at(&[1, c]) + step * a);
        }
        prop_assert!(ms_losses(&moved, &labels)[0] <= before);
    }

    #[test]
    fn pair_loss_rises_as_a_negative_moves_closer(f in tensor(&[4, 3], -0.5, 0.5), step in 0.01f64..0.2) {
        let labels = [0usize, 0, 1, 1];
        let before = ms_losses(&f, &labels)[0];
        let mut moved = f.clone();
        for c in 0..3 {
            moved.set(&[2, c], f.at(&[2, c]) + step * f.at(&[0, c]));
        }
        prop_assert!(ms_losses(&moved, &labels)[0] >= before);
    }

    #[test]
    fn pk_batches_hold_p_identities_of_k_images(
        counts in prop::collection::vec(1usize..6, 2..10),
        p in 2usize..5,
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        prop_assume!(counts.len() >= p);
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(id, &n)| std::iter::repeat_n(id, n)).collect();
        let sampler = PkSampler::new(&labels, p, k, seed).unwrap();
        let batches = sampler.epoch(0);
        prop_assert_eq!(batches.len(), sampler.batches_per_epoch());
        let mut seen = BTreeSet::new();
        for b in &batches {
            prop_assert_eq!(b.len(), p * k);
            let mut per_id: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in b {
                *per_id.entry(labels[i]).or_default() += 1;
            }
            prop_assert_eq!(per_id.len(), p);
            prop_assert!(per_id.values().all(|&c| c == k));
            seen.extend(per_id.keys().copied());
        }
        prop_assert_eq!(seen.len(), counts.len());
    }

    #[test]
    fn cmc_is_monotone_and_map_bounded(
        qd in prop::collection::vec(nonzero_vec(4), 1..10),
        gd in prop::collection::vec(nonzero_vec(4), 1..20),
        seed in any::<u64>(),
    ) {
        let meta = |i: usize| ItemMeta { identity: (seed as usize).wrapping_add(i * 7) % 3, clothes_id: i % 2, camera_id: 0, sample_id: i };
        let qm: Vec<ItemMeta> = (0..qd.len()).map(meta).collect();
        let gm: Vec<ItemMeta> = (0..gd.len()).map(|i| meta(100 + i)).collect();
        let opts = EvalOptions { max_rank: gd.len(), exclude_same_sample: false };
        if let Ok(r) = evaluate_descriptors(&qd, &qm, &gd, &gm, Scenario::General, opts, Exec::Sequential) {
            prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
            prop_assert!(r.map > 0.0 && r.map <= 1.0);
            prop_assert!(r.map >= r.rank(1) / gd.len() as f64);
        }
    }

    #[test]
    fn schedule_rises_then_falls(a in 0.0f64..160.0, b in 0.0f64..160.0) {
        let c = RunConfig::full_scale();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if hi <= 10.0 {
            prop_assert!(lr_schedule(lo, &c) <= lr_schedule(hi, &c));
        }
        if lo >= 10.0 {
            prop_assert!(lr_schedule(lo, &c) >= lr_schedule(hi, &c));
        }
        prop_assert!(lr_schedule(a, &c) >= c.lr_final && lr_schedule(a, &c) <= c.lr_peak);
    }
}

fn region_mean(px: &Tensor, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> [f64; 3] {
    let mut s = [0.0; 3];
    let mut n = 0.0;
    for y in rows {
        for x in cols.clone() {
            for (c, v) in s.iter_mut().enumerate() {
                *v += px.at(&[y, x, c]);
            }
            n += 1.0;
        }
    }
    s.map(|v| v / n)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn synthetic_outfits_change_torso_not_head(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(dir.path(), &SynthSpec { num_ids: 4, imgs_per_id: 6, test_ids: 0, seed, ..Default::default() }).unwrap();
        let ds = load_dataset(dir.path(), false).unwrap();
        let samples = ds.samples(Split::Train).unwrap();
        let stats: Vec<(usize, usize, [f64; 3], [f64; 3])> = samples
            .iter()
            .map(|s| {
                let b = s.head_box.unwrap();
                let cx = (b.x0 + b.x1) / 2;
                let head = region_mean(&s.pixels, b.y0 + 2..b.y1 - 1, cx - 2..cx + 2);
                let torso = region_mean(&s.pixels, b.y1 + 4..b.y1 + 12, cx - 4..cx + 4);
                (s.identity, s.clothes_id, head, torso)
            })
            .collect();
        let (mut head_d, mut torso_d, mut n) = (0.0, 0.0, 0.0);
        for (i, a) in stats.iter().enumerate() {
            for b in &stats[i + 1..] {
                if a.0 == b.0 && a.1 != b.1 {
                    head_d += dist(a.2, b.2);
                    torso_d += dist(a.3, b.3);
                    n += 1.0;
                }
            }
        }
        prop_assert!(n > 0.0);
        prop_assert!(head_d / n < torso_d / n, "head {} torso {}", head_d / n, torso_d / n);
    }
}
