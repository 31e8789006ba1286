//! Pseudo part labels from dense features: a two-way k-means on normalized
//! activation magnitude separates foreground from background, then k-means
//! on unit-normalized foreground features finds `K - 1` parts, numbered top
//! to bottom by mean row.

use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, PahError, Result};
use crate::tensor::Tensor;

pub const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, starting with the seeding.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid (lowest index on ties) and its squared distance.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(point, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let a = points
        .iter()
        .map(|p| {
            let (c, d) = nearest(p, centroids);
            inertia += d;
            c
        })
        .collect();
    (a, inertia)
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.gen_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if r < d {
                        break;
                    }
                    r -= d;
                }
            }
            pick.expect("positive total")
        } else {
            (0..points.len()).find(|i| !chosen.contains(i)).expect("enough points")
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Lloyd's algorithm from k-means++ seeding. Stops at an assignment fixpoint
/// or after [`KMEANS_MAX_ITER`] updates. A cluster left empty by an update
/// takes over the point farthest from its own centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 || points.len() < k {
        return Err(PahError::InsufficientPoints { points: points.len(), k });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return dim_err("k-means points differ in dimension");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(points, k, &mut rng);
    let (mut assignment, inertia) = assign(points, &centroids);
    let mut history = vec![inertia];
    for _ in 0..KMEANS_MAX_ITER {
        update_centroids(points, &mut assignment, &mut centroids);
        let (next, inertia) = assign(points, &centroids);
        history.push(inertia);
        let done = next == assignment;
        assignment = next;
        if done {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignment,
        inertia: *history.last().expect("non-empty"),
        history,
    })
}

fn update_centroids(points: &[Vec<f64>], assignment: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignment.iter()) {
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..points.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .map(|i| (i, sq_dist(&points[i], &centroids[assignment[i]])))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        let (i, _) = far.expect("|points| >= k guarantees a donor cluster");
        let donor = assignment[i];
        counts[donor] -= 1;
        // donor centroid becomes the mean of its remaining points
        centroids[donor] = centroids[donor]
            .iter()
            .zip(&points[i])
            .map(|(m, p)| (m * (counts[donor] + 1) as f64 - p) / counts[donor] as f64)
            .collect();
        centroids[c] = points[i].clone();
        assignment[i] = c;
        counts[c] = 1;
    }
}

/// Foreground mask and normalized magnitudes `|F_ij| / max |F|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundSplit {
    pub foreground: Vec<bool>,
    pub magnitude: Vec<f64>,
}

fn dense_dims(f: &Tensor) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
        ref s => dim_err(format!("dense map must be a non-empty [h, w, Cd], got {s:?}")),
    }
}

pub fn foreground_split(dense: &Tensor, seed: u64) -> Result<ForegroundSplit> {
    let (_, _, c) = dense_dims(dense)?;
    let norms: Vec<f64> = dense
        .data()
        .chunks(c)
        .map(|px| px.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(PahError::DegenerateFeatures("all pixel features are zero".into()));
    }
    let magnitude: Vec<f64> = norms.iter().map(|n| n / max).collect();
    let lo = magnitude.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo == 1.0 {
        return Ok(ForegroundSplit {
            foreground: vec![true; magnitude.len()],
            magnitude,
        });
    }
    let pts: Vec<Vec<f64>> = magnitude.iter().map(|&m| vec![m]).collect();
    let km = kmeans(&pts, 2, seed)?;
    let mut sum = [0.0; 2];
    let mut cnt = [0usize; 2];
    for (&a, &m) in km.assignment.iter().zip(&magnitude) {
        sum[a] += m;
        cnt[a] += 1;
    }
    let mean = |c: usize| if cnt[c] > 0 { sum[c] / cnt[c] as f64 } else { f64::NEG_INFINITY };
    let fg = if mean(1) > mean(0) { 1 } else { 0 };
    Ok(ForegroundSplit {
        foreground: km.assignment.iter().map(|&a| a == fg).collect(),
        magnitude,
    })
}

/// Per-pixel part labels for one image (`0` is background).
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    pub height: usize,
    pub width: usize,
    pub parts: usize,
    pub labels: Vec<usize>,
    pub epoch_generated: usize,
    /// Set when the foreground was too small or uniform to split into parts
    /// and every foreground pixel got label 1.
    pub fallback: bool,
}

impl PseudoLabelMap {
    /// `[h, w, K]` one-hot encoding of the labels.
    pub fn one_hot(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.height, self.width, self.parts]);
        for (px, &l) in t.data_mut().chunks_mut(self.parts).zip(&self.labels) {
            px[l] = 1.0;
        }
        t
    }

    /// Labels of the horizontally mirrored image.
    pub fn flipped(&self) -> PseudoLabelMap {
        let mut labels = Vec::with_capacity(self.labels.len());
        for row in self.labels.chunks(self.width) {
            labels.extend(row.iter().rev());
        }
        PseudoLabelMap {
            labels,
            ..self.clone()
        }
    }

    /// Mean row index of each label, `None` where the label is absent.
    pub fn mean_rows(&self) -> Vec<Option<f64>> {
        let mut sum = vec![0.0; self.parts];
        let mut cnt = vec![0usize; self.parts];
        for (i, &l) in self.labels.iter().enumerate() {
            sum[l] += (i / self.width) as f64;
            cnt[l] += 1;
        }
        (0..self.parts)
            .map(|k| (cnt[k] > 0).then(|| sum[k] / cnt[k] as f64))
            .collect()
    }

    /// Write the label map as an indexed-colour PNG, each label pixel drawn
    /// as a `scale x scale` block.
    pub fn write_png(&self, path: &Path, scale: usize) -> Result<()> {
        let scale = scale.max(1);
        let (w, h) = (self.width * scale, self.height * scale);
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(LABEL_PALETTE.concat());
        let png_err = |e: png::EncodingError| PahError::Io(std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(png_err)?;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let l = self.labels[(y / scale) * self.width + x / scale];
                data.push((l % LABEL_PALETTE.len()) as u8);
            }
        }
        writer.write_image_data(&data).map_err(png_err)?;
        Ok(())
    }
}

const LABEL_PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [245, 130, 48],
    [255, 225, 25],
    [60, 180, 75],
    [0, 130, 200],
    [145, 30, 180],
    [240, 50, 230],
];

/// Two-stage clustering of one dense map into `parts` labels.
pub fn generate_pseudo_labels(dense: &Tensor, parts: usize, seed: u64) -> Result<PseudoLabelMap> {
    let (h, w, c) = dense_dims(dense)?;
    if parts < 2 {
        return Err(PahError::Config(format!("need at least 2 labels, got {parts}")));
    }
    let split = foreground_split(dense, seed)?;
    let fg: Vec<usize> = (0..h * w).filter(|&i| split.foreground[i]).collect();
    let unit: Vec<Vec<f64>> = fg
        .iter()
        .map(|&i| {
            let px = &dense.data()[i * c..(i + 1) * c];
            let n = px.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                px.iter().map(|v| v / n).collect()
            } else {
                px.to_vec()
            }
        })
        .collect();
    let k = parts - 1;
    let mut labels = vec![0usize; h * w];
    let distinct = {
        let mut d: Vec<&Vec<f64>> = Vec::new();
        for u in &unit {
            if d.len() >= k {
                break;
            }
            if !d.contains(&u) {
                d.push(u);
            }
        }
        d.len()
    };
    if fg.len() < k || distinct < k {
        log::warn!(
            "pseudo-labels: foreground has {} pixels / {distinct} distinct features, fewer than {k} parts; labelling all foreground as part 1",
            fg.len()
        );
        for &i in &fg {
            labels[i] = 1;
        }
        return Ok(PseudoLabelMap {
            height: h,
            width: w,
            parts,
            labels,
            epoch_generated: 0,
            fallback: true,
        });
    }
    let km = kmeans(&unit, k, seed.wrapping_add(1))?;
    let mut row_sum = vec![0.0; k];
    let mut cnt = vec![0usize; k];
    for (&i, &a) in fg.iter().zip(&km.assignment) {
        row_sum[a] += (i / w) as f64;
        cnt[a] += 1;
    }
    let key: Vec<(f64, f64)> = (0..k)
        .map(|a| {
            let norm = km.centroids[a].iter().map(|v| v * v).sum::<f64>().sqrt();
            (row_sum[a] / cnt[a].max(1) as f64, norm)
        })
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        key[a]
            .0
            .total_cmp(&key[b].0)
            .then(key[a].1.total_cmp(&key[b].1))
            .then(a.cmp(&b))
    });
    let mut label_of = vec![0usize; k];
    for (rank, &cluster) in order.iter().enumerate() {
        label_of[cluster] = rank + 1;
    }
    for (&i, &a) in fg.iter().zip(&km.assignment) {
        labels[i] = label_of[a];
    }
    Ok(PseudoLabelMap {
        height: h,
        width: w,
        parts,
        labels,
        epoch_generated: 0,
        fallback: false,
    })
}

/// Pseudo labels are regenerated at every epoch, the first included.
pub fn refresh_policy(epoch: i64) -> Result<bool> {
    if epoch < 0 {
        return Err(PahError::Contract(format!("epoch must be non-negative, got {epoch}")));
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn k1_centroid_is_mean() {
        let pts = rand_points(20, 3, 1);
        let r = kmeans(&pts, 1, 0).unwrap();
        for d in 0..3 {
            let m: f64 = pts.iter().map(|p| p[d]).sum::<f64>() / 20.0;
            assert!((r.centroids[0][d] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_blobs() {
        let mut pts = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for b in 0..2 {
            for _ in 0..15 {
                pts.push(vec![b as f64 * 10.0 + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
            }
        }
        let r = kmeans(&pts, 2, 7).unwrap();
        for i in 0..30 {
            assert_eq!(r.assignment[i] == r.assignment[0], i < 15);
        }
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            kmeans(&rand_points(2, 2, 0), 3, 0),
            Err(PahError::InsufficientPoints { points: 2, k: 3 })
        ));
    }

    #[test]
    fn duplicate_points_get_repaired_clusters() {
        let mut pts = vec![vec![0.0, 0.0]; 10];
        pts.push(vec![1.0, 0.0]);
        let r = kmeans(&pts, 3, 0).unwrap();
        let mut counts = [0; 3];
        for &a in &r.assignment {
            counts[a] += 1;
        }
        assert!(r.inertia.is_finite());
        assert_eq!(counts.iter().sum::<usize>(), 11);
    }

    #[test]
    fn foreground_picks_high_norm_half() {
        let mut f = Tensor::zeros(&[4, 4, 3]);
        for i in 0..16 {
            let v = if i % 2 == 0 { 1.0 } else { 0.1 };
            f.data_mut()[i * 3 + 1] = v;
        }
        let s = foreground_split(&f, 0).unwrap();
        for i in 0..16 {
            assert_eq!(s.foreground[i], i % 2 == 0);
        }
        assert_eq!(s.magnitude.iter().cloned().fold(0.0, f64::max), 1.0);
        assert!(matches!(
            foreground_split(&Tensor::zeros(&[2, 2, 3]), 0),
            Err(PahError::DegenerateFeatures(_))
        ));
    }

    #[test]
    fn identical_features_fall_back() {
        let f = Tensor::full(&[6, 4, 5], 0.3);
        let m = generate_pseudo_labels(&f, 7, 0).unwrap();
        assert!(m.fallback);
        assert!(m.labels.iter().all(|&l| l == 1));
        assert!(generate_pseudo_labels(&Tensor::zeros(&[6, 4, 5]), 7, 0).is_err());
    }

    #[test]
    fn one_hot_and_flip() {
        let m = PseudoLabelMap {
            height: 2,
            width: 3,
            parts: 3,
            labels: vec![0, 1, 2, 2, 1, 0],
            epoch_generated: 0,
            fallback: false,
        };
        let oh = m.one_hot();
        for (px, &l) in oh.data().chunks(3).zip(&m.labels) {
            assert_eq!(px.iter().sum::<f64>(), 1.0);
            assert_eq!(px[l], 1.0);
        }
        assert_eq!(m.flipped().labels, vec![2, 1, 0, 0, 1, 2]);
        assert_eq!(m.flipped().flipped(), m);
    }

    #[test]
    fn refresh_every_epoch() {
        assert!(refresh_policy(0).unwrap());
        assert!(refresh_policy(37).unwrap());
        assert!(refresh_policy(-1).is_err());
    }

    #[test]
    fn png_dump() {
        let dir = tempfile::tempdir().unwrap();
        let m = PseudoLabelMap {
            height: 2,
            width: 2,
            parts: 7,
            labels: vec![0, 1, 5, 6],
            epoch_generated: 0,
            fallback: false,
        };
        let p = dir.path().join("l.png");
        m.write_png(&p, 4).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (8, 8));
    }
}
