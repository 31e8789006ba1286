//! Small strided convolution stacks: a stem shared by two branches for the
//! global and head streams (16x downsampling), and a dense extractor for
//! the part stream (4x downsampling). Every layer is conv + bias + ReLU, so
//! all outputs are non-negative.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub stride: usize,
}

impl ConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let size = 3;
        let kernel = store.add(
            format!("{name}.kernel"),
            kaiming_uniform(&[size, size, cin, cout], size * size * cin, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(ConvLayer {
            kernel,
            bias,
            in_channels: cin,
            out_channels: cout,
            size,
            stride,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(self.kernel, store.get(self.kernel));
        let b = g.param(self.bias, store.get(self.bias));
        let y = g.conv2d(x, k, self.stride, self.size / 2)?;
        let y = g.add_bias(y, b)?;
        g.relu(y)
    }

    fn describe(&self) -> String {
        format!(
            "conv{}x{}/s{} {}->{} relu",
            self.size, self.size, self.stride, self.in_channels, self.out_channels
        )
    }
}

fn run(layers: &[ConvLayer], g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
    for l in layers {
        x = l.forward(g, store, x)?;
    }
    Ok(x)
}

fn describe(layers: &[ConvLayer]) -> String {
    layers.iter().map(ConvLayer::describe).collect::<Vec<_>>().join("; ")
}

fn check_image(g: &Graph, image: Var, cfg_h: usize, cfg_w: usize) -> Result<()> {
    if g.shape(image) != [cfg_h, cfg_w, 3] {
        return dim_err(format!(
            "expected image [{cfg_h}, {cfg_w}, 3], got {:?}",
            g.shape(image)
        ));
    }
    Ok(())
}

/// Stem followed by two branches with identical architecture and separate
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBackbone {
    pub stem: Vec<ConvLayer>,
    pub branch_a: Vec<ConvLayer>,
    pub branch_b: Vec<ConvLayer>,
    input_h: usize,
    input_w: usize,
}

impl StreamBackbone {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let stem = vec![
            ConvLayer::new(store, &format!("{prefix}.stem.0"), 3, cfg.stem_c1, 2, rng)?,
            ConvLayer::new(store, &format!("{prefix}.stem.1"), cfg.stem_c1, cfg.stem_c2, 2, rng)?,
        ];
        let mut branch = |name: &str| -> Result<Vec<ConvLayer>> {
            Ok(vec![
                ConvLayer::new(store, &format!("{prefix}.{name}.0"), cfg.stem_c2, cfg.branch_c1, 2, rng)?,
                ConvLayer::new(
                    store,
                    &format!("{prefix}.{name}.1"),
                    cfg.branch_c1,
                    cfg.branch_channels,
                    2,
                    rng,
                )?,
            ])
        };
        let branch_a = branch("branch_a")?;
        let branch_b = branch("branch_b")?;
        Ok(StreamBackbone {
            stem,
            branch_a,
            branch_b,
            input_h: cfg.input_h,
            input_w: cfg.input_w,
        })
    }

    /// Returns the two branch maps `(F21, F22)`, each `[H/16, W/16, Cb]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<(Var, Var)> {
        check_image(g, image, self.input_h, self.input_w)?;
        let shared = run(&self.stem, g, store, image)?;
        let a = run(&self.branch_a, g, store, shared)?;
        let b = run(&self.branch_b, g, store, shared)?;
        Ok((a, b))
    }

    pub fn branch_a_descriptor(&self) -> String {
        describe(&self.branch_a)
    }

    pub fn branch_b_descriptor(&self) -> String {
        describe(&self.branch_b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stem
            .iter()
            .chain(&self.branch_a)
            .chain(&self.branch_b)
            .flat_map(|l| [l.kernel, l.bias])
            .collect()
    }

    pub fn branch_param_ids(&self, which_a: bool) -> Vec<ParamId> {
        let layers = if which_a { &self.branch_a } else { &self.branch_b };
        layers.iter().flat_map(|l| [l.kernel, l.bias]).collect()
    }
}

/// Dense feature extractor at 1/4 input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBackbone {
    pub layers: Vec<ConvLayer>,
    input_h: usize,
    input_w: usize,
}

impl DenseBackbone {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let layers = vec![
            ConvLayer::new(store, &format!("{prefix}.dense.0"), 3, cfg.dense_c1, 2, rng)?,
            ConvLayer::new(store, &format!("{prefix}.dense.1"), cfg.dense_c1, cfg.dense_c2, 2, rng)?,
            ConvLayer::new(store, &format!("{prefix}.dense.2"), cfg.dense_c2, cfg.dense_channels, 1, rng)?,
        ];
        Ok(DenseBackbone {
            layers,
            input_h: cfg.input_h,
            input_w: cfg.input_w,
        })
    }

    /// `[H/4, W/4, Cd]` dense map.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        check_image(g, image, self.input_h, self.input_w)?;
        run(&self.layers, g, store, image)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.kernel, l.bias]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[h, w, 3], (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn setup() -> (ModelConfig, ParamStore, StreamBackbone, DenseBackbone) {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = StreamBackbone::new(&mut store, "global", &cfg, &mut rng).unwrap();
        let d = DenseBackbone::new(&mut store, "part", &cfg, &mut rng).unwrap();
        (cfg, store, s, d)
    }

    #[test]
    fn output_shapes_follow_strides() {
        let (cfg, store, s, d) = setup();
        let mut g = Graph::no_grad();
        let x = g.input(random_image(64, 32, 1));
        let (a, b) = s.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(a), [4, 2, cfg.branch_channels]);
        assert_eq!(g.shape(a), g.shape(b));
        let dm = d.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(dm), [16, 8, cfg.dense_channels]);
        let bad = g.input(random_image(32, 32, 1));
        assert!(s.forward(&mut g, &store, bad).is_err());
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_maps() {
        let (_, store, s, d) = setup();
        let mut g = Graph::no_grad();
        let x = g.input(Tensor::zeros(&[64, 32, 3]));
        let (a, b) = s.forward(&mut g, &store, x).unwrap();
        let dm = d.forward(&mut g, &store, x).unwrap();
        for v in [a, b, dm] {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn deterministic_and_nonnegative() {
        let (_, store, s, d) = setup();
        let run = || {
            let mut g = Graph::no_grad();
            let x = g.input(random_image(64, 32, 5));
            let (a, b) = s.forward(&mut g, &store, x).unwrap();
            let dm = d.forward(&mut g, &store, x).unwrap();
            (g.value(a).clone(), g.value(b).clone(), g.value(dm).clone())
        };
        let first = run();
        assert_eq!(first, run());
        for seed in 0..4 {
            let mut g = Graph::no_grad();
            let x = g.input(random_image(64, 32, seed));
            let dm = d.forward(&mut g, &store, x).unwrap();
            assert!(g.value(dm).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn perturbing_one_branch_changes_only_that_branch() {
        let (_, mut store, s, _) = setup();
        let img = random_image(64, 32, 9);
        let eval = |store: &ParamStore| {
            let mut g = Graph::no_grad();
            let x = g.input(img.clone());
            let (a, b) = s.forward(&mut g, store, x).unwrap();
            (g.value(a).clone(), g.value(b).clone())
        };
        let (a0, b0) = eval(&store);
        let id = s.branch_a[1].bias;
        store.get_mut(id).data_mut()[0] += 0.5;
        let (a1, b1) = eval(&store);
        assert_ne!(a0, a1);
        assert_eq!(b0, b1);
    }

    #[test]
    fn branches_share_architecture_not_storage() {
        let (_, _, s, _) = setup();
        assert_eq!(s.branch_a_descriptor(), s.branch_b_descriptor());
        let a = s.branch_param_ids(true);
        let b = s.branch_param_ids(false);
        assert!(a.iter().all(|id| !b.contains(id)));
    }
}
