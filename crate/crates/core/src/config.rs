//! Run configuration with a flat `key = value` text overlay.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// What supervises one position (a stack output or the final features).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    None,
    /// A single 1x1 heatmap head at the feature scale.
    Plain,
    /// One MLS block: two heads.
    Mls,
    /// Two chained MLS blocks: four heads.
    Cmls,
}

impl Supervision {
    pub fn name(self) -> &'static str {
        match self {
            Supervision::None => "none",
            Supervision::Plain => "plain",
            Supervision::Mls => "mls",
            Supervision::Cmls => "cmls",
        }
    }

    pub fn head_count(self) -> usize {
        match self {
            Supervision::None => 0,
            Supervision::Plain => 1,
            Supervision::Mls => 2,
            Supervision::Cmls => 4,
        }
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Supervision::None),
            "plain" => Ok(Supervision::Plain),
            "mls" => Ok(Supervision::Mls),
            "cmls" => Ok(Supervision::Cmls),
            other => Err(Error::Config(format!("unknown supervision kind `{other}`"))),
        }
    }
}

/// Named supervision layouts. The ablation layouts leave the last stack
/// unsupervised and place blocks after the first stack, the second stack and
/// the final (post-mixer) features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Default,
    Baseline,
    AllMls,
    Start,
    Middle,
    Final,
    All,
}

impl Placement {
    pub const ABLATIONS: [Placement; 4] = [
        Placement::Start,
        Placement::Middle,
        Placement::Final,
        Placement::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placement::Default => "default",
            Placement::Baseline => "baseline",
            Placement::AllMls => "all-mls",
            Placement::Start => "start",
            Placement::Middle => "middle",
            Placement::Final => "final",
            Placement::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Placement> {
        [
            Placement::Default,
            Placement::Baseline,
            Placement::AllMls,
            Placement::Start,
            Placement::Middle,
            Placement::Final,
            Placement::All,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }

    /// Supervision per position (`stacks` entries, then the final one) and
    /// whether the mixer is enabled.
    pub fn layout(self, stacks: usize) -> Result<(Vec<Supervision>, bool)> {
        use Supervision::{Cmls, Mls, Plain};
        let fixed = |first: Supervision, second: Supervision, last: Supervision| {
            if stacks != 3 {
                return Err(Error::Config(format!(
                    "placement `{}` needs exactly 3 stacks, got {stacks}",
                    self.name()
                )));
            }
            Ok((vec![first, second, Supervision::None, last], true))
        };
        match self {
            Placement::Default => Ok((vec![Cmls; stacks + 1], true)),
            Placement::Baseline => {
                let mut v = vec![Plain; stacks];
                v.push(Supervision::None);
                Ok((v, false))
            }
            Placement::AllMls => fixed(Mls, Mls, Mls),
            Placement::Start => fixed(Cmls, Mls, Mls),
            Placement::Middle => fixed(Mls, Cmls, Mls),
            Placement::Final => fixed(Mls, Mls, Cmls),
            Placement::All => fixed(Cmls, Cmls, Cmls),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stacks: usize,
    pub hourglass_depth: usize,
    pub width: usize,
    pub keypoints: usize,
    pub in_channels: usize,
    pub input_w: usize,
    pub input_h: usize,
    pub heatmap_stride: usize,
    pub scm: bool,
    pub scm_width: usize,
    pub scm_kernel: usize,
    pub scm_iterations: usize,
    pub scm_shared: bool,
    pub scm_message_gain: f64,
    /// One entry per stack followed by the final position.
    pub supervision: Vec<Supervision>,
    /// Gaussian target width in input-image pixels.
    pub sigma: f64,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Per-head loss weights in head order; empty means all ones.
    pub head_weights: Vec<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stacks: 3,
            hourglass_depth: 2,
            width: 32,
            keypoints: 4,
            in_channels: 1,
            input_w: 64,
            input_h: 64,
            heatmap_stride: 4,
            scm: true,
            scm_width: 16,
            scm_kernel: 3,
            scm_iterations: 2,
            scm_shared: true,
            scm_message_gain: 0.1,
            supervision: vec![Supervision::Cmls; 4],
            sigma: 4.0,
            seed: 0,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            head_weights: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn with_placement(mut self, placement: Placement) -> Result<Self> {
        let (sup, scm) = placement.layout(self.stacks)?;
        self.supervision = sup;
        self.scm = scm;
        Ok(self)
    }

    pub fn head_count(&self) -> usize {
        let mixer = if self.scm { self.keypoints } else { 0 };
        self.supervision
            .iter()
            .map(|s| s.head_count())
            .sum::<usize>()
            + mixer
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stacks == 0 {
            return bad("stacks must be at least 1".into());
        }
        if self.width < 2 || self.keypoints == 0 || self.in_channels == 0 {
            return bad("width must be >= 2 and keypoints, in_channels >= 1".into());
        }
        if self.heatmap_stride != 4 {
            return bad(format!(
                "heatmap_stride is fixed by the stem at 4, got {}",
                self.heatmap_stride
            ));
        }
        let unit = 1usize << (self.hourglass_depth + 2);
        if !self.input_w.is_multiple_of(unit)
            || !self.input_h.is_multiple_of(unit)
            || self.input_w == 0
            || self.input_h == 0
        {
            return bad(format!(
                "input {}x{} must be divisible by {unit} for hourglass depth {}",
                self.input_w, self.input_h, self.hourglass_depth
            ));
        }
        if self.supervision.len() != self.stacks + 1 {
            return bad(format!(
                "supervision lists {} positions, expected stacks + 1 = {}",
                self.supervision.len(),
                self.stacks + 1
            ));
        }
        if self.scm
            && (self.scm_iterations == 0
                || self.scm_kernel.is_multiple_of(2)
                || self.scm_width == 0)
        {
            return bad("scm needs iterations >= 1, odd kernel and positive width".into());
        }
        if !(self.sigma > 0.0) || !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("sigma and bn_eps must be positive, bn_momentum in [0, 1)".into());
        }
        if self.head_count() == 0 {
            return bad("configuration has no supervision heads".into());
        }
        if !self.head_weights.is_empty() && self.head_weights.len() != self.head_count() {
            return bad(format!(
                "head_weights has {} entries for {} heads",
                self.head_weights.len(),
                self.head_count()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateMode {
    Coordinates,
    Heatmaps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Synthetic samples generated when no annotation file is given.
    pub samples: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub data: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            samples: 250,
            train_fraction: 0.8,
            val_fraction: 0.0,
            test_fraction: 0.2,
            data: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub mlka: bool,
    pub mlka_threshold: f64,
    pub mlka_mode: AggregateMode,
    /// OKS falloff per part as a fraction of max(image_w, image_h).
    pub oks_k_factor: f64,
    pub pck_threshold: f64,
    /// Fixed PCK normalization; `None` uses each image's (w, h).
    pub pck_norm: Option<(f64, f64)>,
    pub curve_steps: usize,
    pub curve_max: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mlka: true,
            mlka_threshold: 0.2,
            mlka_mode: AggregateMode::Coordinates,
            oks_k_factor: 0.05,
            pck_threshold: 0.2,
            pck_norm: None,
            curve_steps: 20,
            curve_max: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "expected true/false for `{key}`, got `{value}`"
        ))),
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Keys that define the network architecture; a checkpoint only loads into a
/// model that agrees on all of them.
pub const MODEL_KEYS: [&str; 19] = [
    "stacks",
    "hourglass_depth",
    "width",
    "keypoints",
    "in_channels",
    "input_w",
    "input_h",
    "heatmap_stride",
    "scm",
    "scm_width",
    "scm_kernel",
    "scm_iterations",
    "scm_shared",
    "scm_message_gain",
    "supervision",
    "sigma",
    "bn_momentum",
    "bn_eps",
    "head_weights",
];

impl Config {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t, e) = (&mut self.model, &mut self.train, &mut self.eval);
        match key {
            "stacks" => m.stacks = parse(key, value)?,
            "hourglass_depth" => m.hourglass_depth = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "keypoints" => m.keypoints = parse(key, value)?,
            "in_channels" => m.in_channels = parse(key, value)?,
            "input_w" => m.input_w = parse(key, value)?,
            "input_h" => m.input_h = parse(key, value)?,
            "heatmap_stride" => m.heatmap_stride = parse(key, value)?,
            "scm" => m.scm = parse_bool(key, value)?,
            "scm_width" => m.scm_width = parse(key, value)?,
            "scm_kernel" => m.scm_kernel = parse(key, value)?,
            "scm_iterations" => m.scm_iterations = parse(key, value)?,
            "scm_shared" => m.scm_shared = parse_bool(key, value)?,
            "scm_message_gain" => m.scm_message_gain = parse(key, value)?,
            "supervision" => {
                m.supervision = value.split(',').map(str::parse).collect::<Result<_>>()?;
            }
            "placement" => {
                let p = Placement::parse(value.trim())
                    .ok_or_else(|| Error::Config(format!("unknown placement `{value}`")))?;
                let (sup, scm) = p.layout(m.stacks)?;
                m.supervision = sup;
                m.scm = scm;
            }
            "sigma" => m.sigma = parse(key, value)?,
            "seed" => m.seed = parse(key, value)?,
            "bn_momentum" => m.bn_momentum = parse(key, value)?,
            "bn_eps" => m.bn_eps = parse(key, value)?,
            "head_weights" => {
                m.head_weights = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse(key, v))
                        .collect::<Result<_>>()?
                };
            }
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "samples" => t.samples = parse(key, value)?,
            "train_fraction" => t.train_fraction = parse(key, value)?,
            "val_fraction" => t.val_fraction = parse(key, value)?,
            "test_fraction" => t.test_fraction = parse(key, value)?,
            "data" => t.data = Some(value.trim().to_string()).filter(|s| !s.is_empty()),
            "mlka" => e.mlka = parse_bool(key, value)?,
            "mlka_threshold" => e.mlka_threshold = parse(key, value)?,
            "mlka_mode" => {
                e.mlka_mode = match value.trim() {
                    "coordinates" => AggregateMode::Coordinates,
                    "heatmaps" => AggregateMode::Heatmaps,
                    other => return Err(Error::Config(format!("unknown mlka_mode `{other}`"))),
                }
            }
            "oks_k_factor" => e.oks_k_factor = parse(key, value)?,
            "pck_threshold" => e.pck_threshold = parse(key, value)?,
            "pck_norm" => {
                e.pck_norm =
                    match value.trim() {
                        "image" => None,
                        v => {
                            let parts: Vec<f64> =
                                v.split(',').map(|p| parse(key, p)).collect::<Result<_>>()?;
                            match parts[..] {
                                [cx, cy] if cx > 0.0 && cy > 0.0 => Some((cx, cy)),
                                _ => return Err(Error::Config(format!(
                                    "pck_norm must be `image` or two positive numbers, got `{v}`"
                                ))),
                            }
                        }
                    }
            }
            "curve_steps" => e.curve_steps = parse(key, value)?,
            "curve_max" => e.curve_max = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Overlays a config file body: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                ))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let total = t.train_fraction + t.val_fraction + t.test_fraction;
        if (total - 1.0).abs() > 1e-9
            || [t.train_fraction, t.val_fraction, t.test_fraction]
                .iter()
                .any(|&f| f < 0.0)
        {
            return Err(Error::Config(format!(
                "split fractions must be nonnegative and sum to 1, got {total}"
            )));
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.mlka_threshold)
            || !(e.oks_k_factor > 0.0)
            || e.pck_threshold < 0.0
        {
            return Err(Error::Config(
                "mlka_threshold must lie in [0, 1], oks_k_factor > 0, pck_threshold >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Every setting as `(key, value)` in a fixed order; feeding the pairs
    /// back through [`Config::set`] reproduces the config.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let (m, t, e) = (&self.model, &self.train, &self.eval);
        let sup: Vec<&str> = m.supervision.iter().map(|s| s.name()).collect();
        vec![
            ("stacks", m.stacks.to_string()),
            ("hourglass_depth", m.hourglass_depth.to_string()),
            ("width", m.width.to_string()),
            ("keypoints", m.keypoints.to_string()),
            ("in_channels", m.in_channels.to_string()),
            ("input_w", m.input_w.to_string()),
            ("input_h", m.input_h.to_string()),
            ("heatmap_stride", m.heatmap_stride.to_string()),
            ("scm", m.scm.to_string()),
            ("scm_width", m.scm_width.to_string()),
            ("scm_kernel", m.scm_kernel.to_string()),
            ("scm_iterations", m.scm_iterations.to_string()),
            ("scm_shared", m.scm_shared.to_string()),
            ("scm_message_gain", format!("{:?}", m.scm_message_gain)),
            ("supervision", sup.join(",")),
            ("sigma", format!("{:?}", m.sigma)),
            ("seed", m.seed.to_string()),
            ("bn_momentum", format!("{:?}", m.bn_momentum)),
            ("bn_eps", format!("{:?}", m.bn_eps)),
            ("head_weights", join(&m.head_weights)),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", format!("{:?}", t.lr)),
            ("beta1", format!("{:?}", t.beta1)),
            ("beta2", format!("{:?}", t.beta2)),
            ("adam_eps", format!("{:?}", t.adam_eps)),
            ("samples", t.samples.to_string()),
            ("train_fraction", format!("{:?}", t.train_fraction)),
            ("val_fraction", format!("{:?}", t.val_fraction)),
            ("test_fraction", format!("{:?}", t.test_fraction)),
            ("data", t.data.clone().unwrap_or_default()),
            ("mlka", e.mlka.to_string()),
            ("mlka_threshold", format!("{:?}", e.mlka_threshold)),
            (
                "mlka_mode",
                match e.mlka_mode {
                    AggregateMode::Coordinates => "coordinates",
                    AggregateMode::Heatmaps => "heatmaps",
                }
                .to_string(),
            ),
            ("oks_k_factor", format!("{:?}", e.oks_k_factor)),
            ("pck_threshold", format!("{:?}", e.pck_threshold)),
            (
                "pck_norm",
                e.pck_norm
                    .map_or_else(|| "image".to_string(), |(x, y)| format!("{x:?},{y:?}")),
            ),
            ("curve_steps", e.curve_steps.to_string()),
            ("curve_max", format!("{:?}", e.curve_max)),
        ]
    }

    /// The resolved config as config-file text.
    pub fn to_text(&self) -> String {
        self.pairs()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.apply_text("# toy\nlr = 0.002  # faster\nplacement = final\nhead_weights = \nmlka = off\npck_norm = 10,20\n")
            .unwrap();
        assert_eq!(c.train.lr, 0.002);
        assert_eq!(c.model.supervision[2], Supervision::None);
        assert_eq!(c.eval.pck_norm, Some((10.0, 20.0)));
        let mut back = Config::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        let mut c = Config::default();
        assert!(c.apply_text("colour = blue").is_err());
        assert!(c.apply_text("stacks").is_err());
        assert!(c.apply_text("stacks = many").is_err());
        assert!(c.apply_text("supervision = cmls,huge").is_err());
    }

    #[test]
    fn default_head_count_and_layouts() {
        let m = ModelConfig::default();
        m.validate().unwrap();
        assert_eq!(m.head_count(), 20);
        let base = m.clone().with_placement(Placement::Baseline).unwrap();
        assert_eq!(base.head_count(), 3);
        assert!(!base.scm);
        let profiles: Vec<Vec<usize>> = Placement::ABLATIONS
            .iter()
            .map(|&p| {
                m.clone()
                    .with_placement(p)
                    .unwrap()
                    .supervision
                    .iter()
                    .map(|s| s.head_count())
                    .collect()
            })
            .collect();
        assert_eq!(
            profiles,
            vec![
                vec![4, 2, 0, 2],
                vec![2, 4, 0, 2],
                vec![2, 2, 0, 4],
                vec![4, 4, 0, 4]
            ]
        );
    }

    #[test]
    fn validation_catches_geometry() {
        let mut m = ModelConfig {
            input_w: 60,
            ..ModelConfig::default()
        };
        assert!(m.validate().is_err());
        m.input_w = 64;
        m.supervision.pop();
        assert!(m.validate().is_err());
        let mut c = Config::default();
        c.train.test_fraction = 0.5;
        assert!(c.validate().is_err());
    }
}
