//! Model and run configuration, stored as flat `key = value` text.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{PahError, Result};

/// Which of the three streams a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSet {
    pub global: bool,
    pub part: bool,
    pub head: bool,
}

impl StreamSet {
    pub const ALL: StreamSet = StreamSet {
        global: true,
        part: true,
        head: true,
    };
    pub const GLOBAL: StreamSet = StreamSet {
        global: true,
        part: false,
        head: false,
    };
    pub const PART: StreamSet = StreamSet {
        global: false,
        part: true,
        head: false,
    };
    pub const HEAD: StreamSet = StreamSet {
        global: false,
        part: false,
        head: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.global || self.part || self.head)
    }
}

impl FromStr for StreamSet {
    type Err = PahError;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = StreamSet {
            global: false,
            part: false,
            head: false,
        };
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "global" => set.global = true,
                "part" => set.part = true,
                "head" => set.head = true,
                other => return Err(PahError::Config(format!("unknown stream {other:?}"))),
            }
        }
        if set.is_empty() {
            return Err(PahError::Config("at least one stream must be enabled".into()));
        }
        Ok(set)
    }
}

impl std::fmt::Display for StreamSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = [(self.global, "global"), (self.part, "part"), (self.head, "head")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub stem_c1: usize,
    pub stem_c2: usize,
    pub branch_c1: usize,
    /// Channels of each stream branch output (and of each pooled vector).
    pub branch_channels: usize,
    pub dense_c1: usize,
    pub dense_c2: usize,
    /// Channels of the dense map.
    pub dense_channels: usize,
    /// Part clusters including background.
    pub parts: usize,
    /// Identity count; 0 until derived from the training set.
    pub num_classes: usize,
    pub lambda_pair: f64,
    pub lambda_psd: f64,
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    pub ms_margin: f64,
    pub erase_fraction: f64,
    pub batch_p: usize,
    pub batch_k: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    pub streams: StreamSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_h: 64,
            input_w: 32,
            stem_c1: 16,
            stem_c2: 24,
            branch_c1: 32,
            branch_channels: 32,
            dense_c1: 16,
            dense_c2: 32,
            dense_channels: 48,
            parts: 7,
            num_classes: 0,
            lambda_pair: 1.0,
            lambda_psd: 0.1,
            alpha_pos: 2.0,
            alpha_neg: 40.0,
            ms_margin: 0.5,
            erase_fraction: 1.0 / 3.0,
            batch_p: 6,
            batch_k: 7,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            seed: 0,
            streams: StreamSet::ALL,
        }
    }
}

/// Total downsampling of the global/head stream backbones.
pub const STREAM_STRIDE: usize = 16;
/// Total downsampling of the dense backbone.
pub const DENSE_STRIDE: usize = 4;

impl ModelConfig {
    /// Full-size shapes: 384x128 input, 512-channel branches, 1920 dense
    /// channels.
    pub fn full_scale() -> Self {
        ModelConfig {
            input_h: 384,
            input_w: 128,
            stem_c1: 64,
            stem_c2: 256,
            branch_c1: 384,
            branch_channels: 512,
            dense_c1: 64,
            dense_c2: 64,
            dense_channels: 1920,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PahError::Config(m));
        if self.parts < 2 {
            return bad(format!("parts must be >= 2, got {}", self.parts));
        }
        if self.num_classes != 0 && self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !self.input_h.is_multiple_of(STREAM_STRIDE) || !self.input_w.is_multiple_of(STREAM_STRIDE) {
            return bad(format!(
                "input {}x{} must be divisible by {STREAM_STRIDE}",
                self.input_h, self.input_w
            ));
        }
        if self.alpha_pos <= 0.0 || self.alpha_neg <= 0.0 {
            return bad("alpha_pos and alpha_neg must be positive".into());
        }
        if self.lambda_pair < 0.0 || self.lambda_psd < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.erase_fraction > 0.0 && self.erase_fraction < 1.0) {
            return bad("erase_fraction must lie in (0, 1)".into());
        }
        if self.batch_p < 1 || self.batch_k < 1 {
            return bad("batch_p and batch_k must be >= 1".into());
        }
        if self.streams.is_empty() {
            return bad("no stream enabled".into());
        }
        let widths = [
            self.stem_c1,
            self.stem_c2,
            self.branch_c1,
            self.branch_channels,
            self.dense_c1,
            self.dense_c2,
            self.dense_channels,
        ];
        if widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }

    /// Spatial size of the stream branch maps.
    pub fn stream_map_dims(&self) -> (usize, usize) {
        (self.input_h / STREAM_STRIDE, self.input_w / STREAM_STRIDE)
    }

    pub fn dense_map_dims(&self) -> (usize, usize) {
        (self.input_h / DENSE_STRIDE, self.input_w / DENSE_STRIDE)
    }

    /// Length of the concatenated inference descriptor.
    pub fn descriptor_len(&self) -> usize {
        let s = self.streams;
        let mut n = 0;
        if s.global {
            n += 3 * self.branch_channels;
        }
        if s.part {
            n += (self.parts - 1) * self.dense_channels;
        }
        if s.head {
            n += 3 * self.branch_channels;
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = PahError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            o => Err(PahError::Config(format!("unknown optimizer {o:?}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs_warmup: usize,
    pub epochs_main: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    /// Evaluate on query/gallery every this many epochs (0 disables).
    pub eval_every: usize,
    /// Permit query/gallery identities that also occur in training.
    pub allow_shared_identities: bool,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            epochs_warmup: 3,
            epochs_main: 30,
            lr_init: 6e-5,
            lr_peak: 6e-4,
            lr_final: 6e-7,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: true,
            eval_every: 0,
            allow_shared_identities: false,
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// The full-length schedule: 10 warmup epochs then 150 cosine epochs.
    pub fn full_scale() -> Self {
        RunConfig {
            model: ModelConfig::full_scale(),
            epochs_warmup: 10,
            epochs_main: 150,
            ..Default::default()
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_warmup + self.epochs_main
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.lr_init > self.lr_peak || self.lr_final > self.lr_peak {
            return Err(PahError::Config(
                "learning rates must satisfy lr_init <= lr_peak and lr_final <= lr_peak".into(),
            ));
        }
        if self.lr_init < 0.0 || self.lr_final < 0.0 {
            return Err(PahError::Config("learning rates must be non-negative".into()));
        }
        if self.total_epochs() < 1 {
            return Err(PahError::Config("at least one epoch required".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| PahError::Parse {
                path: origin.to_path_buf(),
                line: n as u64 + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v.trim()).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| PahError::Config(format!("bad value {v:?} for {key}")))
        }
        let m = &mut self.model;
        match key {
            "input_h" => m.input_h = p(key, value)?,
            "input_w" => m.input_w = p(key, value)?,
            "stem_c1" => m.stem_c1 = p(key, value)?,
            "stem_c2" => m.stem_c2 = p(key, value)?,
            "branch_c1" => m.branch_c1 = p(key, value)?,
            "branch_channels" => m.branch_channels = p(key, value)?,
            "dense_c1" => m.dense_c1 = p(key, value)?,
            "dense_c2" => m.dense_c2 = p(key, value)?,
            "dense_channels" => m.dense_channels = p(key, value)?,
            "parts" => m.parts = p(key, value)?,
            "num_classes" => m.num_classes = p(key, value)?,
            "lambda_pair" => m.lambda_pair = p(key, value)?,
            "lambda_psd" => m.lambda_psd = p(key, value)?,
            "alpha_pos" => m.alpha_pos = p(key, value)?,
            "alpha_neg" => m.alpha_neg = p(key, value)?,
            "ms_margin" => m.ms_margin = p(key, value)?,
            "erase_fraction" => m.erase_fraction = p(key, value)?,
            "batch_p" => m.batch_p = p(key, value)?,
            "batch_k" => m.batch_k = p(key, value)?,
            "bn_eps" => m.bn_eps = p(key, value)?,
            "bn_momentum" => m.bn_momentum = p(key, value)?,
            "seed" => m.seed = p(key, value)?,
            "streams" => m.streams = value.parse()?,
            "epochs_warmup" => self.epochs_warmup = p(key, value)?,
            "epochs_main" => self.epochs_main = p(key, value)?,
            "lr_init" => self.lr_init = p(key, value)?,
            "lr_peak" => self.lr_peak = p(key, value)?,
            "lr_final" => self.lr_final = p(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "momentum" => self.momentum = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "augment" => self.augment = p(key, value)?,
            "eval_every" => self.eval_every = p(key, value)?,
            "allow_shared_identities" => self.allow_shared_identities = p(key, value)?,
            "dataset" => self.dataset = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(PahError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key, one per line, in a stable order. Floats use Rust's
    /// shortest round-trip formatting so parsing the text back is exact.
    pub fn to_kv_string(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("input_h", m.input_h.to_string());
        kv("input_w", m.input_w.to_string());
        kv("stem_c1", m.stem_c1.to_string());
        kv("stem_c2", m.stem_c2.to_string());
        kv("branch_c1", m.branch_c1.to_string());
        kv("branch_channels", m.branch_channels.to_string());
        kv("dense_c1", m.dense_c1.to_string());
        kv("dense_c2", m.dense_c2.to_string());
        kv("dense_channels", m.dense_channels.to_string());
        kv("parts", m.parts.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("lambda_pair", format!("{:?}", m.lambda_pair));
        kv("lambda_psd", format!("{:?}", m.lambda_psd));
        kv("alpha_pos", format!("{:?}", m.alpha_pos));
        kv("alpha_neg", format!("{:?}", m.alpha_neg));
        kv("ms_margin", format!("{:?}", m.ms_margin));
        kv("erase_fraction", format!("{:?}", m.erase_fraction));
        kv("batch_p", m.batch_p.to_string());
        kv("batch_k", m.batch_k.to_string());
        kv("bn_eps", format!("{:?}", m.bn_eps));
        kv("bn_momentum", format!("{:?}", m.bn_momentum));
        kv("seed", m.seed.to_string());
        kv("streams", m.streams.to_string());
        kv("epochs_warmup", self.epochs_warmup.to_string());
        kv("epochs_main", self.epochs_main.to_string());
        kv("lr_init", format!("{:?}", self.lr_init));
        kv("lr_peak", format!("{:?}", self.lr_peak));
        kv("lr_final", format!("{:?}", self.lr_final));
        kv("optimizer", self.optimizer.to_string());
        kv("momentum", format!("{:?}", self.momentum));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("augment", self.augment.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("allow_shared_identities", self.allow_shared_identities.to_string());
        kv("dataset", self.dataset.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip_is_exact() {
        let mut c = RunConfig::default();
        c.model.streams = StreamSet::HEAD;
        c.model.seed = 99;
        c.lr_peak = 1.0 / 3.0;
        let text = c.to_kv_string();
        let mut d = RunConfig::default();
        d.apply_text(&text, Path::new("mem")).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn bad_lines_report_line_numbers() {
        let mut c = RunConfig::default();
        let e = c
            .apply_text("seed = 1\n# c\nnot_a_key = 3\n", Path::new("x.cfg"))
            .unwrap_err();
        assert!(e.to_string().contains("x.cfg:3"), "{e}");
        let e = c.apply_text("seed\n", Path::new("y.cfg")).unwrap_err();
        assert!(e.to_string().contains("y.cfg:1"), "{e}");
    }

    #[test]
    fn validation_rules() {
        let mut m = ModelConfig::default();
        assert!(m.validate().is_ok());
        m.parts = 1;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.input_h = 60;
        assert!(m.validate().is_err());
        let mut r = RunConfig::default();
        r.lr_init = 1.0;
        assert!(r.validate().is_err());
        assert!("".parse::<StreamSet>().is_err());
        assert_eq!("head, global".parse::<StreamSet>().unwrap().to_string(), "global,head");
    }

    #[test]
    fn descriptor_length() {
        let m = ModelConfig::default();
        assert_eq!(m.descriptor_len(), 6 * 32 + 6 * 48);
        assert_eq!(ModelConfig::full_scale().stream_map_dims(), (24, 8));
        assert_eq!(ModelConfig::full_scale().dense_map_dims(), (96, 32));
    }
}
