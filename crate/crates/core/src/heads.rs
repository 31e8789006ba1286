//! Global and head stream feature heads: max pooling, average pooling and
//! adversarial row erasing over the branch maps, each followed by batch
//! norm and an identity classifier. Also head-region cropping.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{dim_err, PahError, Result};
use crate::nn::ClassifierHead;
use crate::params::ParamStore;
use crate::tensor::{BnMode, Graph, Tensor, Var};

fn map_dims(f: &Tensor) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [h, w, c] if h > 0 && w > 0 => Ok((h, w, c)),
        ref s => dim_err(format!("expected a non-empty [h, w, c] map, got {s:?}")),
    }
}

/// Per-channel max over all positions.
pub fn gmp(f: &Tensor) -> Result<Vec<f64>> {
    let (_, _, c) = map_dims(f)?;
    let mut out = vec![f64::NEG_INFINITY; c];
    for px in f.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Per-channel mean over all positions.
pub fn gap(f: &Tensor) -> Result<Vec<f64>> {
    let (h, w, c) = map_dims(f)?;
    let mut out = vec![0.0; c];
    for px in f.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Number of rows erased from an `h`-row map.
pub fn erased_rows(h: usize, fraction: f64) -> usize {
    ((h as f64 * fraction - 1e-9).ceil() as usize).clamp(1, h.saturating_sub(1).max(1))
}

/// Row mask for adversarial erasing: the row with the largest sum of
/// squared activations (lowest index on ties) anchors a contiguous band of
/// `erased_rows(h, fraction)` zero rows, centred on it and shifted to stay
/// inside the map.
pub fn erase_mask(f: &Tensor, fraction: f64) -> Result<Vec<f64>> {
    let (h, w, c) = map_dims(f)?;
    if h < 2 {
        return Err(PahError::DegenerateMap(format!(
            "adversarial erasing needs at least 2 rows, got {h}"
        )));
    }
    let row_len = w * c;
    let mut best = 0;
    let mut best_e = f64::NEG_INFINITY;
    for i in 0..h {
        let e: f64 = f.data()[i * row_len..(i + 1) * row_len].iter().map(|v| v * v).sum();
        if e > best_e {
            best_e = e;
            best = i;
        }
    }
    let r = erased_rows(h, fraction);
    let start = best.saturating_sub(r / 2).min(h - r);
    Ok((0..h)
        .map(|i| if (start..start + r).contains(&i) { 0.0 } else { 1.0 })
        .collect())
}

/// `(mask, f_ae)` where `f_ae[c] = max_ij (F ⊙ mask)[i, j, c]`.
pub fn adversarial_erase(f: &Tensor, fraction: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mask = erase_mask(f, fraction)?;
    let mut g = Graph::no_grad();
    let x = g.input(f.clone());
    let v = g.masked_max_pool(x, &mask)?;
    Ok((mask, g.value(v).data().to_vec()))
}

/// Pre-BN vectors of one image from one stream.
#[derive(Debug, Clone, Copy)]
pub struct PooledStream {
    pub f_gmp: Var,
    pub f_ae: Var,
    pub f_gap: Var,
}

/// Batch outputs of a stream head.
#[derive(Debug, Clone)]
pub struct StreamHeadOutput {
    pub f_gmp: Var,
    pub f_ae: Var,
    pub f_gap: Var,
    pub t_gmp: Var,
    pub t_ae: Var,
    pub t_gap: Var,
    pub p_gmp: Var,
    pub p_ae: Var,
    pub p_gap: Var,
    pub erase_masks: Vec<Vec<f64>>,
}

/// Three independent BN + classifier heads for the GMP, AE and GAP vectors
/// of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamHead {
    pub gmp: ClassifierHead,
    pub ae: ClassifierHead,
    pub gap: ClassifierHead,
    pub erase_fraction: f64,
}

impl StreamHead {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.branch_channels;
        let c = cfg.num_classes;
        let mk = |store: &mut ParamStore, name: &str, rng: &mut _| {
            ClassifierHead::new(store, &format!("{prefix}.{name}"), d, c, cfg.bn_eps, cfg.bn_momentum, rng)
        };
        Ok(StreamHead {
            gmp: mk(store, "gmp", rng)?,
            ae: mk(store, "ae", rng)?,
            gap: mk(store, "gap", rng)?,
            erase_fraction: cfg.erase_fraction,
        })
    }

    /// Pooling for one image: GMP over branch a, AE and GAP over branch b.
    /// The erase mask is computed from values and treated as a constant.
    pub fn pool(&self, g: &mut Graph, f21: Var, f22: Var) -> Result<(PooledStream, Vec<f64>)> {
        if g.shape(f21) != g.shape(f22) {
            return dim_err("branch maps differ in shape");
        }
        let f_gmp = g.global_max_pool(f21)?;
        let mask = erase_mask(g.value(f22), self.erase_fraction)?;
        let f_ae = g.masked_max_pool(f22, &mask)?;
        let f_gap = g.global_avg_pool(f22)?;
        Ok((PooledStream { f_gmp, f_ae, f_gap }, mask))
    }

    /// Full head over a batch of branch map pairs recorded on one tape.
    pub fn forward(
        &mut self,
        g: &mut Graph,
        store: &ParamStore,
        maps: &[(Var, Var)],
        mode: BnMode,
    ) -> Result<StreamHeadOutput> {
        let mut gm = Vec::new();
        let mut ae = Vec::new();
        let mut ga = Vec::new();
        let mut masks = Vec::new();
        for &(a, b) in maps {
            let (p, m) = self.pool(g, a, b)?;
            gm.push(p.f_gmp);
            ae.push(p.f_ae);
            ga.push(p.f_gap);
            masks.push(m);
        }
        let f_gmp = g.stack_rows(&gm)?;
        let f_ae = g.stack_rows(&ae)?;
        let f_gap = g.stack_rows(&ga)?;
        let (t_gmp, p_gmp) = self.gmp.forward(g, store, f_gmp, mode)?;
        let (t_ae, p_ae) = self.ae.forward(g, store, f_ae, mode)?;
        let (t_gap, p_gap) = self.gap.forward(g, store, f_gap, mode)?;
        Ok(StreamHeadOutput {
            f_gmp,
            f_ae,
            f_gap,
            t_gmp,
            t_ae,
            t_gap,
            p_gmp,
            p_ae,
            p_gap,
            erase_masks: masks,
        })
    }

    pub fn heads(&self) -> [&ClassifierHead; 3] {
        [&self.gmp, &self.ae, &self.gap]
    }

    pub fn heads_mut(&mut self) -> [&mut ClassifierHead; 3] {
        [&mut self.gmp, &mut self.ae, &mut self.gap]
    }
}

/// Head region in source-image pixel coordinates, half-open on the right
/// and bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl HeadBox {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(PahError::InvalidBox(format!("zero-area box {self:?}")));
        }
        if self.x1 > width || self.y1 > height {
            return Err(PahError::InvalidBox(format!(
                "box {self:?} exceeds image {width}x{height}"
            )));
        }
        Ok(())
    }

    /// Box after mirroring an image of the given width.
    pub fn flipped(&self, width: usize) -> HeadBox {
        HeadBox {
            x0: width - self.x1,
            x1: width - self.x0,
            ..*self
        }
    }

    /// The top fifth of the image, full width.
    pub fn fallback(width: usize, height: usize) -> HeadBox {
        let y1 = ((height as f64 * 0.2).round() as usize).clamp(1, height.max(1));
        HeadBox {
            x0: 0,
            y0: 0,
            x1: width,
            y1,
        }
    }
}

/// Crop the head box and resize it bilinearly back to the image size.
/// Sampling is corner-aligned: output corners land exactly on the box's
/// corner pixels. Returns the crop and whether the fallback box was used.
pub fn crop_head(image: &Tensor, head: Option<HeadBox>) -> Result<(Tensor, bool)> {
    let (h, w, c) = map_dims(image)?;
    let (b, fallback) = match head {
        Some(b) => (b, false),
        None => (HeadBox::fallback(w, h), true),
    };
    b.validate(w, h)?;
    let src = |len_out: usize, lo: usize, hi: usize| -> Vec<(usize, usize, f64)> {
        (0..len_out)
            .map(|o| {
                let s = if len_out > 1 {
                    lo as f64 + o as f64 * (hi - 1 - lo) as f64 / (len_out - 1) as f64
                } else {
                    lo as f64
                };
                let i0 = (s.floor() as usize).min(hi - 1);
                let i1 = (i0 + 1).min(hi - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = src(h, b.y0, b.y1);
    let xs = src(w, b.x0, b.x1);
    let d = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            for ch in 0..c {
                let p = |y: usize, x: usize| d[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Ok((Tensor::new(&[h, w, c], out)?, fallback))
}
