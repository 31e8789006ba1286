use rand::Rng;

use crate::heads::HeadBox;
use crate::tensor::Tensor;

/// Erased-area bounds as fractions of the image area.
pub const ERASE_AREA: (f64, f64) = (0.02, 0.4);
/// Erased-rectangle height / width bounds.
pub const ERASE_ASPECT: (f64, f64) = (0.3, 3.33);

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub pixels: Tensor,
    pub head_box: Option<HeadBox>,
    pub flipped: bool,
    /// `(y0, x0, height, width)` of the erased rectangle.
    pub erased: Option<(usize, usize, usize, usize)>,
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(img.len());
    for row in img.data().chunks(w * c) {
        for px in row.chunks(c).rev() {
            out.extend_from_slice(px);
        }
    }
    Tensor::new(&[h, w, c], out).expect("shape")
}

/// Samples a rectangle for random erasing, `None` after 100 failed draws.
pub fn random_erase_rect(h: usize, w: usize, rng: &mut impl Rng) -> Option<(usize, usize, usize, usize)> {
    let area = (h * w) as f64;
    for _ in 0..100 {
        let target = rng.gen_range(ERASE_AREA.0..ERASE_AREA.1) * area;
        let aspect = rng.gen_range(ERASE_ASPECT.0.ln()..ERASE_ASPECT.1.ln()).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        let a = (eh * ew) as f64;
        let ratio = eh as f64 / ew.max(1) as f64;
        if eh == 0
            || ew == 0
            || eh >= h
            || ew >= w
            || a < ERASE_AREA.0 * area
            || a > ERASE_AREA.1 * area
            || !(ERASE_ASPECT.0..=ERASE_ASPECT.1).contains(&ratio)
        {
            continue;
        }
        return Some((rng.gen_range(0..=h - eh), rng.gen_range(0..=w - ew), eh, ew));
    }
    None
}

/// Training augmentation: horizontal flip with probability 0.5 (head box
/// mirrored), then with probability 0.5 a random rectangle refilled with
/// uniform noise.
pub fn augment(pixels: &Tensor, head_box: Option<HeadBox>, rng: &mut impl Rng) -> Augmented {
    let (h, w, c) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    let flipped = rng.gen_bool(0.5);
    let (mut img, head_box) = if flipped {
        (flip_horizontal(pixels), head_box.map(|b| b.flipped(w)))
    } else {
        (pixels.clone(), head_box)
    };
    let mut erased = None;
    if rng.gen_bool(0.5) {
        erased = random_erase_rect(h, w, rng);
        if let Some((y0, x0, eh, ew)) = erased {
            let d = img.data_mut();
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    for ch in 0..c {
                        d[(y * w + x) * c + ch] = rng.gen::<f64>();
                    }
                }
            }
        }
    }
    Augmented {
        pixels: img,
        head_box,
        flipped,
        erased,
    }
}
