//! Network and training configuration, plus the flat `key = value` config
//! file format used by the CLI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stride of the backbone: the feature grid side is `input_size / BACKBONE_STRIDE`.
pub const BACKBONE_STRIDE: usize = 16;

/// Per-channel input normalization applied before the backbone:
/// `(x / 255 - NORM_MEAN) / NORM_STD`. Recorded in every checkpoint.
pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.25;

/// Architecture hyperparameters. The parameter schema is a pure function of
/// this struct, so two equal configs always describe interchangeable
/// checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Side of the (square) input image in pixels.
    pub input_size: usize,
    /// Channel width of the encoder feature map; backbone stages use
    /// `embed/4, embed/4, embed/2, embed` and the decoders halve from it.
    pub embed_channels: usize,
    /// Number of (local attention, global attention) pairs in the encoder.
    /// Zero disables the attention stack.
    pub encoder_depth: usize,
    /// Attention heads; must divide `embed_channels`.
    pub num_heads: usize,
    /// Side of a local-attention window, in feature-grid cells.
    pub window: usize,
    /// Channel widths of the four decoder stages, derived from `embed_channels`.
    pub decoder_channels: [usize; 4],
    /// When false the encoder skips the attention stack entirely and only
    /// applies the convolutional refinement block.
    pub use_transformer: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::with_width(256, 256)
    }
}

impl NetworkConfig {
    /// Config for a given input side and embed width, with default
    /// depth/heads/window. Widths below 256 scale the whole network down,
    /// which is how the test suite keeps CPU runs cheap.
    pub fn with_width(input_size: usize, embed_channels: usize) -> Self {
        NetworkConfig {
            input_size,
            embed_channels,
            encoder_depth: 1,
            num_heads: 8,
            window: 4,
            decoder_channels: derive_decoder_channels(embed_channels),
            use_transformer: true,
        }
    }

    /// Side of the feature grid produced by the backbone.
    pub fn feature_side(&self) -> usize {
        self.input_size / BACKBONE_STRIDE
    }

    /// Channel widths of the three backbone stages.
    pub fn backbone_channels(&self) -> [usize; 3] {
        [
            self.embed_channels / 4,
            self.embed_channels / 2,
            self.embed_channels,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % BACKBONE_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {BACKBONE_STRIDE}",
                self.input_size
            )));
        }
        if self.embed_channels == 0 || self.embed_channels % 16 != 0 {
            return Err(Error::Config(format!(
                "embed_channels {} must be a positive multiple of 16",
                self.embed_channels
            )));
        }
        if self.num_heads == 0 || self.embed_channels % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_channels {} must be divisible by num_heads {}",
                self.embed_channels, self.num_heads
            )));
        }
        if self.window == 0 || self.feature_side() % self.window != 0 {
            return Err(Error::Config(format!(
                "feature side {} must be divisible by window {}",
                self.feature_side(),
                self.window
            )));
        }
        if self.decoder_channels != derive_decoder_channels(self.embed_channels) {
            return Err(Error::Config(format!(
                "decoder_channels {:?} must be the successive halvings of embed_channels {}",
                self.decoder_channels, self.embed_channels
            )));
        }
        Ok(())
    }
}

fn derive_decoder_channels(embed: usize) -> [usize; 4] {
    [embed / 2, embed / 4, embed / 8, embed / 16]
}

/// Optimization protocol: Adam with a polynomial learning-rate decay,
/// fixed-epoch termination, and best-validation-score checkpoint selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    /// Exponent of the polynomial decay `lr0 * (1 - iter/maxiter)^power`.
    pub power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the cross-branch consistency term in the total loss.
    pub gamma: f64,
    pub seed: u64,
    /// Validate every this many epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            weight_decay: 0.0005,
            power: 0.9,
            epochs: 30,
            batch_size: 64,
            gamma: 1000.0,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 {} must be > 0", self.lr0)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// The full configuration of one run: architecture plus optimization.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()
    }

    /// Parse the flat `key = value` config format. Lines starting with `#`
    /// and blank lines are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one field by its config key. Used both by the file parser and by
    /// CLI `--set key=value` overrides, so flag > file > default holds.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("key '{key}': invalid {what} '{value}'"));
        match key {
            "lr0" => self.train.lr0 = value.parse().map_err(|_| bad("number"))?,
            "weight_decay" => self.train.weight_decay = value.parse().map_err(|_| bad("number"))?,
            "power" => self.train.power = value.parse().map_err(|_| bad("number"))?,
            "epochs" => self.train.epochs = value.parse().map_err(|_| bad("integer"))?,
            "batch_size" => self.train.batch_size = value.parse().map_err(|_| bad("integer"))?,
            "gamma" => self.train.gamma = value.parse().map_err(|_| bad("number"))?,
            "seed" => self.train.seed = value.parse().map_err(|_| bad("integer"))?,
            "eval_every" => self.train.eval_every = value.parse().map_err(|_| bad("integer"))?,
            "input_size" => self.net.input_size = value.parse().map_err(|_| bad("integer"))?,
            "embed_channels" => {
                self.net.embed_channels = value.parse().map_err(|_| bad("integer"))?;
                self.net.decoder_channels = derive_decoder_channels(self.net.embed_channels);
            }
            "encoder_depth" => self.net.encoder_depth = value.parse().map_err(|_| bad("integer"))?,
            "num_heads" => self.net.num_heads = value.parse().map_err(|_| bad("integer"))?,
            "window" => self.net.window = value.parse().map_err(|_| bad("integer"))?,
            "use_transformer" => {
                self.net.use_transformer = value.parse().map_err(|_| bad("boolean"))?
            }
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Render back to the flat file format, one key per line.
    pub fn to_text(&self) -> String {
        format!(
            "lr0 = {}\nweight_decay = {}\npower = {}\nepochs = {}\nbatch_size = {}\ngamma = {}\nseed = {}\neval_every = {}\ninput_size = {}\nembed_channels = {}\nencoder_depth = {}\nnum_heads = {}\nwindow = {}\nuse_transformer = {}\n",
            self.train.lr0,
            self.train.weight_decay,
            self.train.power,
            self.train.epochs,
            self.train.batch_size,
            self.train.gamma,
            self.train.seed,
            self.train.eval_every,
            self.net.input_size,
            self.net.embed_channels,
            self.net.encoder_depth,
            self.net.num_heads,
            self.net.window,
            self.net.use_transformer,
        )
    }
}
