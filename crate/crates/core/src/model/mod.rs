//! The segmentation network: patch projection, word embeddings, cross-
//! attention fusion layers and a per-patch head, with an exact hand-written
//! backward pass.
//!
//! All parameters live in one flat `f64` buffer. [`ParamLayout`] names the
//! slices; the order of the fields below is the declared checkpoint order.

mod checkpoint;
mod net;

use std::ops::Range;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{backward, backward_into, forward, ForwardCache, PredMask, LOGIT_CLAMP};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub fusion_layers: usize,
    pub patch_size: usize,
    /// Side of the square pixel blocks averaged before the patch projection.
    pub pool: usize,
    pub vocab_size: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            fusion_layers: 2,
            patch_size: 8,
            pool: 2,
            vocab_size: crate::text::Vocabulary::standard().len(),
            image_height: 64,
            image_width: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::invalid("embed_dim must be at least 2"));
        }
        if self.fusion_layers < 1 {
            return Err(Error::invalid("fusion_layers must be at least 1"));
        }
        if self.vocab_size <= crate::text::RESERVED {
            return Err(Error::invalid("vocab_size must exceed the reserved ids"));
        }
        if self.pool == 0 || self.patch_size % self.pool != 0 {
            return Err(Error::invalid(format!("pool {} does not divide patch size {}", self.pool, self.patch_size)));
        }
        if self.patch_size == 0
            || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return Err(Error::invalid(format!(
                "patch size {} does not divide {}x{}",
                self.patch_size, self.image_height, self.image_width
            )));
        }
        Ok(())
    }

    pub fn grid_rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Pooled cells along one side of a patch.
    pub fn cells_per_side(&self) -> usize {
        self.patch_size / self.pool
    }

    /// Values in one flattened, pooled patch.
    pub fn patch_len(&self) -> usize {
        self.cells_per_side() * self.cells_per_side() * 3
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub query: Range<usize>,
    pub key: Range<usize>,
    pub value: Range<usize>,
    pub output: Range<usize>,
    pub neighbor: Range<usize>,
    pub bias: Range<usize>,
    /// Four `D × D` maps for the left, right, above and below context.
    pub direction: Range<usize>,
    /// Four sentence-gate vectors and their four offsets.
    pub gate_u: Range<usize>,
    pub gate_c: Range<usize>,
}

/// Named slices of the flat parameter buffer.
///
/// Matrices applied to embeddings (`query` … `neighbor`, `gate_w`) are
/// row-major `out × in`; `patch_w` is stored input-major (`patch_len × D`)
/// so the projection accumulates contiguous rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub patch_w: Range<usize>,
    pub patch_b: Range<usize>,
    pub pos: Range<usize>,
    pub word_emb: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub gate_w: Range<usize>,
    pub gate_b: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let mut at = 0usize;
        let mut next = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let patch_w = next(cfg.patch_len() * d);
        let patch_b = next(d);
        let pos = next(cfg.patches() * d);
        let word_emb = next(cfg.vocab_size * d);
        let layers = (0..cfg.fusion_layers)
            .map(|_| LayerLayout {
                query: next(d * d),
                key: next(d * d),
                value: next(d * d),
                output: next(d * d),
                neighbor: next(d * d),
                bias: next(d),
                direction: next(4 * d * d),
                gate_u: next(4 * d),
                gate_c: next(4),
            })
            .collect();
        let head_w = next(d);
        let head_b = next(1);
        let gate_w = next(3 * d);
        let gate_b = next(3);
        Self {
            patch_w,
            patch_b,
            pos,
            word_emb,
            layers,
            head_w,
            head_b,
            gate_w,
            gate_b,
            total: at,
        }
    }

    /// Ranges of the input encoders (patch projection, positions, words),
    /// the group that can take a separate learning-rate multiplier.
    pub fn encoder_ranges(&self) -> [Range<usize>; 4] {
        [self.patch_w.clone(), self.patch_b.clone(), self.pos.clone(), self.word_emb.clone()]
    }
}

/// Flat gradient aligned with [`ModelState::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<f64>);

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Parameters, AdamW moments and the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl ModelState {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let n = layout.total;
        Ok(Self {
            config,
            layout,
            params: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .chain(&self.first_moment)
            .chain(&self.second_moment)
            .all(|v| v.is_finite())
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, embeddings uniform in `±0.02`,
/// biases and moments zero.
pub fn init_params(config: ModelConfig, rng: &mut RngStream) -> Result<ModelState> {
    let mut state = ModelState::zeros(config)?;
    let d = config.embed_dim;
    let layout = state.layout.clone();
    let mut fill = |range: Range<usize>, scale: f64| {
        for p in &mut state.params[range] {
            *p = rng.uniform_range(-scale, scale);
        }
    };
    let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    fill(layout.patch_w.clone(), inv(config.patch_len()));
    fill(layout.pos.clone(), 0.02);
    fill(layout.word_emb.clone(), 0.02);
    for l in &layout.layers {
        for r in [&l.query, &l.key, &l.value, &l.output, &l.neighbor, &l.direction, &l.gate_u] {
            fill(r.clone(), inv(d));
        }
    }
    fill(layout.head_w.clone(), inv(d));
    fill(layout.gate_w.clone(), inv(d));
    Ok(state)
}
