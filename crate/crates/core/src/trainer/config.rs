use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::losses::LossConfig;
use crate::masking::{MaskStrategy, TextMaskConfig};
use crate::model::ModelConfig;
use crate::synthdata::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Clean inputs, supervised loss only.
    Baseline,
    /// Single path; each sample is masked with probability `aug_prob`.
    Augment,
    /// Clean path with supervised loss plus masked path distilled toward it.
    MaskRis,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Baseline, TrainMode::Augment, TrainMode::MaskRis];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Augment => "augment",
            TrainMode::MaskRis => "maskris",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode {s:?} (baseline|augment|maskris)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMaskConfig {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub patch: usize,
}

impl Default for ImageMaskConfig {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::PatchWise,
            ratio: 0.75,
            patch: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate multiplier for the input encoders.
    pub encoder_lr_mult: f64,
    pub image_mask: ImageMaskConfig,
    pub text_mask: TextMaskConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub dcl_enabled: bool,
    pub aug_only_mode: bool,
    /// Per-sample masking probability in augment mode.
    pub aug_prob: f64,
    pub embed_dim: usize,
    pub fusion_layers: usize,
    pub model_patch: usize,
    pub model_pool: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr_base: 1e-2,
            weight_decay: 0.01,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            encoder_lr_mult: 1.0,
            image_mask: ImageMaskConfig::default(),
            text_mask: TextMaskConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            dcl_enabled: true,
            aug_only_mode: false,
            aug_prob: 0.5,
            embed_dim: 16,
            fusion_layers: 2,
            model_patch: 8,
            model_pool: 2,
        }
    }
}

impl TrainConfig {
    pub fn for_mode(mode: TrainMode) -> Self {
        let mut c = Self::default();
        c.set_mode(mode);
        c
    }

    pub fn set_mode(&mut self, mode: TrainMode) {
        self.dcl_enabled = mode == TrainMode::MaskRis;
        self.aug_only_mode = mode == TrainMode::Augment;
    }

    pub fn mode(&self) -> Result<TrainMode> {
        match (self.dcl_enabled, self.aug_only_mode) {
            (true, true) => Err(Error::invalid("dcl_enabled and aug_only_mode are mutually exclusive")),
            (true, false) => Ok(TrainMode::MaskRis),
            (false, true) => Ok(TrainMode::Augment),
            (false, false) => Ok(TrainMode::Baseline),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mode()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        let positive = [self.lr_base, self.poly_power, self.eps, self.encoder_lr_mult];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("lr_base, poly_power, eps and encoder_lr_mult must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.image_mask.ratio) || !(0.0..=1.0).contains(&self.aug_prob) {
            return Err(Error::invalid("image_mask.ratio and aug_prob must lie in [0, 1]"));
        }
        if self.image_mask.patch == 0 {
            return Err(Error::invalid("image_mask.patch must be at least 1"));
        }
        self.text_mask.validate()?;
        self.loss.validate()
    }

    /// Network shape for a dataset's image size and vocabulary.
    pub fn model_config(&self, data: &Dataset) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            fusion_layers: self.fusion_layers,
            patch_size: self.model_patch,
            pool: self.model_pool,
            vocab_size: data.vocab.len(),
            image_height: data.height,
            image_width: data.width,
        }
    }

    /// `key = value` text; keys are the field names, nested fields dotted.
    pub fn to_kv(&self) -> String {
        let lines = [
            ("version", "1".to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_base", self.lr_base.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("encoder_lr_mult", self.encoder_lr_mult.to_string()),
            ("image_mask.strategy", self.image_mask.strategy.name().to_string()),
            ("image_mask.ratio", self.image_mask.ratio.to_string()),
            ("image_mask.patch", self.image_mask.patch.to_string()),
            ("text_mask.select_ratio", self.text_mask.select_ratio.to_string()),
            ("text_mask.p_mask", self.text_mask.p_mask.to_string()),
            ("text_mask.p_random", self.text_mask.p_random.to_string()),
            ("text_mask.p_unchanged", self.text_mask.p_unchanged.to_string()),
            ("loss.lambda", self.loss.lambda.to_string()),
            ("loss.full_bce", self.loss.full_bce.to_string()),
            ("seed", self.seed.to_string()),
            ("dcl_enabled", self.dcl_enabled.to_string()),
            ("aug_only_mode", self.aug_only_mode.to_string()),
            ("aug_prob", self.aug_prob.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("fusion_layers", self.fusion_layers.to_string()),
            ("model_patch", self.model_patch.to_string()),
            ("model_pool", self.model_pool.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses [`TrainConfig::to_kv`] output. Missing keys keep their defaults.
    pub fn from_kv(text: &str, origin: &str) -> Result<Self> {
        let mut f = KvFile::parse(text, origin)?;
        let mut c = Self::default();
        f.take("epochs", &mut c.epochs)?;
        f.take("batch_size", &mut c.batch_size)?;
        f.take("lr_base", &mut c.lr_base)?;
        f.take("weight_decay", &mut c.weight_decay)?;
        f.take("poly_power", &mut c.poly_power)?;
        f.take("beta1", &mut c.beta1)?;
        f.take("beta2", &mut c.beta2)?;
        f.take("eps", &mut c.eps)?;
        f.take("encoder_lr_mult", &mut c.encoder_lr_mult)?;
        f.take("image_mask.strategy", &mut c.image_mask.strategy)?;
        f.take("image_mask.ratio", &mut c.image_mask.ratio)?;
        f.take("image_mask.patch", &mut c.image_mask.patch)?;
        f.take("text_mask.select_ratio", &mut c.text_mask.select_ratio)?;
        f.take("text_mask.p_mask", &mut c.text_mask.p_mask)?;
        f.take("text_mask.p_random", &mut c.text_mask.p_random)?;
        f.take("text_mask.p_unchanged", &mut c.text_mask.p_unchanged)?;
        f.take("loss.lambda", &mut c.loss.lambda)?;
        f.take("loss.full_bce", &mut c.loss.full_bce)?;
        f.take("seed", &mut c.seed)?;
        f.take("dcl_enabled", &mut c.dcl_enabled)?;
        f.take("aug_only_mode", &mut c.aug_only_mode)?;
        f.take("aug_prob", &mut c.aug_prob)?;
        f.take("embed_dim", &mut c.embed_dim)?;
        f.take("fusion_layers", &mut c.fusion_layers)?;
        f.take("model_patch", &mut c.model_patch)?;
        f.take("model_pool", &mut c.model_pool)?;
        f.finish()?;
        c.validate()?;
        Ok(c)
    }
}
