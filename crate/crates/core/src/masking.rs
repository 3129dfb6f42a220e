//! Image and text masking.
//!
//! Image masks are sampled on a patch grid (patch-wise, grid-wise and
//! block-wise strategies) or directly at pixel resolution (cutout), then
//! rasterized and applied as `x_masked = (1 - M) * x`: masked pixels become
//! exactly zero. Text masking follows the MLM recipe: each valid position is
//! selected independently and a selected word is replaced by `[MASK]`, by a
//! random non-reserved word, or kept.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng::RngStream;
use crate::text::{TokenSequence, Vocabulary, MASK, RESERVED};

/// `round(x)` with halves rounded up, used for every masked-cell count.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    image_height: usize,
    image_width: usize,
    patch_size: usize,
}

impl PatchGrid {
    pub fn new(image_height: usize, image_width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || image_height == 0 || image_width == 0 {
            return Err(Error::invalid("patch grid dimensions must be positive"));
        }
        if image_height % patch_size != 0 || image_width % patch_size != 0 {
            return Err(Error::invalid(format!(
                "patch size {patch_size} does not divide {image_height}x{image_width}"
            )));
        }
        Ok(Self {
            image_height,
            image_width,
            patch_size,
        })
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn cells(&self) -> usize {
        self.rows() * self.cols()
    }
}

/// Patch-granularity mask; `true` marks a masked cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    grid: PatchGrid,
    masked: Vec<bool>,
    ratio: f64,
}

impl PatchMask {
    pub fn new(grid: PatchGrid, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != grid.cells() {
            return Err(Error::invalid("patch mask length does not match grid"));
        }
        let ratio = masked.iter().filter(|&&m| m).count() as f64 / grid.cells() as f64;
        Ok(Self { grid, masked, ratio })
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn cells(&self) -> &[bool] {
        &self.masked
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.masked[row * self.grid.cols() + col]
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Requested ratio for patch-wise and grid-wise masks, achieved fraction
    /// for block-wise masks.
    pub fn ratio(&self) -> f64 {
        self.ratio
    }
}

/// Pixel-resolution binary mask, also used for ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PixelMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::invalid("pixel mask length does not match dimensions"));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Smallest `(y0, x0, y1, x1)` box (exclusive ends) containing all set
    /// pixels, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                    });
                }
            }
        }
        bb
    }

    /// Binary PGM (`P5`), 255 for set pixels.
    pub fn to_pgm(&self) -> Vec<u8> {
        let gray: Vec<u8> = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        pgm_bytes(self.width, self.height, &gray)
    }
}

/// Encodes 8-bit gray values as a binary PGM file.
pub fn pgm_bytes(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    assert_eq!(gray.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskStrategy {
    PatchWise,
    GridWise,
    BlockWise,
    Cutout,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 4] = [
        MaskStrategy::PatchWise,
        MaskStrategy::GridWise,
        MaskStrategy::BlockWise,
        MaskStrategy::Cutout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::PatchWise => "patch",
            MaskStrategy::GridWise => "grid",
            MaskStrategy::BlockWise => "block",
            MaskStrategy::Cutout => "cutout",
        }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" | "patch-wise" => Ok(MaskStrategy::PatchWise),
            "grid" | "grid-wise" => Ok(MaskStrategy::GridWise),
            "block" | "block-wise" => Ok(MaskStrategy::BlockWise),
            "cutout" => Ok(MaskStrategy::Cutout),
            other => Err(Error::invalid(format!("unknown mask strategy {other:?}"))),
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Partial Fisher-Yates: after the call `order[..k]` is a uniformly random
/// `k`-subset of `0..order.len()`. `order` must hold a permutation.
fn choose_without_replacement(order: &mut [usize], k: usize, rng: &mut RngStream) {
    let n = order.len();
    for i in 0..k.min(n) {
        let j = i + rng.below(n - i);
        order.swap(i, j);
    }
}

/// Masks exactly `round(ratio * cells)` cells chosen uniformly without
/// replacement.
pub fn sample_patch_mask(grid: PatchGrid, ratio: f64, rng: &mut RngStream) -> Result<PatchMask> {
    check_ratio(ratio)?;
    let n = grid.cells();
    let k = round_half_up(ratio * n as f64).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    choose_without_replacement(&mut order, k, rng);
    let mut masked = vec![false; n];
    for &i in &order[..k] {
        masked[i] = true;
    }
    Ok(PatchMask { grid, masked, ratio })
}

/// Grid-wise mask with a random tile phase; see [`grid_mask_with_phase`].
pub fn sample_grid_mask(grid: PatchGrid, ratio: f64, rng: &mut RngStream) -> Result<PatchMask> {
    let phase = (rng.below(2), rng.below(2));
    grid_mask_with_phase(grid, ratio, phase)
}

/// Periodic 2×2-tile pattern. Per tile, 0.75 keeps one cell, 0.5 keeps one
/// row, 0.25 masks one cell. `phase` shifts the tile by (row, col).
pub fn grid_mask_with_phase(grid: PatchGrid, ratio: f64, phase: (usize, usize)) -> Result<PatchMask> {
    #[derive(Clone, Copy)]
    enum Pattern {
        KeepOne,
        KeepRow,
        MaskOne,
    }
    let pattern = if (ratio - 0.75).abs() < 1e-12 {
        Pattern::KeepOne
    } else if (ratio - 0.5).abs() < 1e-12 {
        Pattern::KeepRow
    } else if (ratio - 0.25).abs() < 1e-12 {
        Pattern::MaskOne
    } else {
        return Err(Error::invalid(format!(
            "grid-wise masking supports ratios 0.25, 0.5, 0.75; got {ratio}"
        )));
    };
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut masked = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let anchor_row = (r + phase.0) % 2 == 0;
            let anchor = anchor_row && (c + phase.1) % 2 == 0;
            masked[r * cols + c] = match pattern {
                Pattern::KeepOne => !anchor,
                Pattern::KeepRow => !anchor_row,
                Pattern::MaskOne => anchor,
            };
        }
    }
    Ok(PatchMask { grid, masked, ratio })
}

const BLOCK_MIN_CELLS: usize = 16;
const ASPECT_MIN: f64 = 0.3;
const ASPECT_MAX: f64 = 1.0 / 0.3;
const BLOCK_ATTEMPTS: usize = 1000;

/// Block-wise mask: rectangular blocks of at least `min(16, cells / 4)`
/// cells with aspect ratio in `[0.3, 1/0.3]` are added until at least
/// `round(ratio * cells)` cells are covered. Each block's target area is
/// drawn up to the number of cells still needed, so the final count
/// overshoots by less than one block.
pub fn sample_block_mask(grid: PatchGrid, ratio: f64, rng: &mut RngStream) -> Result<PatchMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("block mask ratio {ratio} outside (0, 1]")));
    }
    let (rows, cols) = (grid.rows(), grid.cols());
    let cells = rows * cols;
    if cells < 16 {
        return Err(Error::invalid(format!("block masking needs >= 16 cells, grid has {cells}")));
    }
    let min_area = BLOCK_MIN_CELLS.min(cells / 4);
    let target = round_half_up(ratio * cells as f64).min(cells);
    let (log_lo, log_hi) = (ASPECT_MIN.ln(), ASPECT_MAX.ln());
    let mut masked = vec![false; cells];
    let mut count = 0usize;

    // Draws block dimensions honoring the area and aspect bounds.
    let draw_dims = |rng: &mut RngStream, max_area: usize| -> Option<(usize, usize)> {
        let area = if max_area > min_area {
            rng.uniform_range(min_area as f64, max_area as f64)
        } else {
            min_area as f64
        };
        let aspect = rng.uniform_range(log_lo, log_hi).exp();
        let h = (area * aspect).sqrt().round() as usize;
        let w = (area / aspect).sqrt().round() as usize;
        let ok = h >= 1
            && w >= 1
            && h <= rows
            && w <= cols
            && h * w >= min_area
            && (ASPECT_MIN - 1e-9..=ASPECT_MAX + 1e-9).contains(&(h as f64 / w as f64));
        ok.then_some((h, w))
    };

    while count < target {
        let max_area = min_area.max(target - count);
        let mut placed = false;
        for _ in 0..BLOCK_ATTEMPTS {
            let Some((h, w)) = draw_dims(rng, max_area) else { continue };
            let top = rng.between(0, rows - h);
            let left = rng.between(0, cols - w);
            let fresh = (top..top + h)
                .flat_map(|r| (left..left + w).map(move |c| r * cols + c))
                .filter(|&i| !masked[i])
                .count();
            if fresh == 0 {
                continue;
            }
            for r in top..top + h {
                for c in left..left + w {
                    masked[r * cols + c] = true;
                }
            }
            count += fresh;
            placed = true;
            break;
        }
        if !placed {
            // Anchor a block on a random unmasked cell so the loop always
            // makes progress when few scattered cells remain.
            let free: Vec<usize> = (0..cells).filter(|&i| !masked[i]).collect();
            let anchor = free[rng.below(free.len())];
            let (ar, ac) = (anchor / cols, anchor % cols);
            let (h, w) = loop {
                if let Some(d) = draw_dims(rng, min_area) {
                    break d;
                }
            };
            let top = rng.between(ar.saturating_sub(h - 1), ar.min(rows - h));
            let left = rng.between(ac.saturating_sub(w - 1), ac.min(cols - w));
            for r in top..top + h {
                for c in left..left + w {
                    if !masked[r * cols + c] {
                        masked[r * cols + c] = true;
                        count += 1;
                    }
                }
            }
        }
    }
    let achieved = count as f64 / cells as f64;
    Ok(PatchMask {
        grid,
        masked,
        ratio: achieved,
    })
}

pub const CUTOUT_AREA_MIN: f64 = 0.02;
pub const CUTOUT_AREA_MAX: f64 = 1.0 / 3.0;

/// One axis-aligned rectangle whose area fraction is uniform in
/// `[0.02, 1/3]` and whose aspect ratio is log-uniform in `[0.3, 1/0.3]`;
/// draws that do not fit strictly inside the image are redrawn.
pub fn sample_cutout_mask(height: usize, width: usize, rng: &mut RngStream) -> Result<PixelMask> {
    if height < 8 || width < 8 {
        return Err(Error::invalid(format!("cutout needs an image of at least 8x8, got {height}x{width}")));
    }
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (ASPECT_MIN.ln(), ASPECT_MAX.ln());
    let (h, w) = loop {
        let target = rng.uniform_range(CUTOUT_AREA_MIN, CUTOUT_AREA_MAX) * area;
        let aspect = rng.uniform_range(log_lo, log_hi).exp();
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h >= 1 && w >= 1 && h < height && w < width {
            break (h, w);
        }
    };
    let top = rng.between(0, height - h);
    let left = rng.between(0, width - w);
    let mut mask = PixelMask::empty(height, width);
    for y in top..top + h {
        for x in left..left + w {
            mask.set(y, x, true);
        }
    }
    Ok(mask)
}

/// Samples a pixel mask for any strategy. `ratio` is ignored by cutout.
pub fn sample_image_mask(
    strategy: MaskStrategy,
    height: usize,
    width: usize,
    patch_size: usize,
    ratio: f64,
    rng: &mut RngStream,
) -> Result<PixelMask> {
    if strategy == MaskStrategy::Cutout {
        return sample_cutout_mask(height, width, rng);
    }
    let grid = PatchGrid::new(height, width, patch_size)?;
    let mask = match strategy {
        MaskStrategy::PatchWise => sample_patch_mask(grid, ratio, rng)?,
        MaskStrategy::GridWise => sample_grid_mask(grid, ratio, rng)?,
        MaskStrategy::BlockWise => sample_block_mask(grid, ratio, rng)?,
        MaskStrategy::Cutout => unreachable!(),
    };
    Ok(rasterize(&mask))
}

pub fn rasterize(mask: &PatchMask) -> PixelMask {
    let g = mask.grid;
    let mut out = PixelMask::empty(g.image_height, g.image_width);
    let p = g.patch_size;
    for y in 0..g.image_height {
        for x in 0..g.image_width {
            if mask.is_masked(y / p, x / p) {
                out.set(y, x, true);
            }
        }
    }
    out
}

/// `(1 - M) * x`: masked pixels become 0 in every channel, others are
/// copied bit for bit.
pub fn apply_image_mask(image: &ImageBuffer, mask: &PixelMask) -> Result<ImageBuffer> {
    if image.height() != mask.height || image.width() != mask.width {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height,
            mask.width,
            image.height(),
            image.width()
        )));
    }
    let mut out = image.clone();
    for (px, &m) in out.data_mut().chunks_exact_mut(3).zip(&mask.bits) {
        if m {
            px.fill(0.0);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextMaskConfig {
    pub select_ratio: f64,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_unchanged: f64,
}

impl Default for TextMaskConfig {
    fn default() -> Self {
        Self {
            select_ratio: 0.15,
            p_mask: 0.8,
            p_random: 0.1,
            p_unchanged: 0.1,
        }
    }
}

impl TextMaskConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.select_ratio, self.p_mask, self.p_random, self.p_unchanged];
        if all.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("text mask probabilities outside [0, 1]: {self:?}")));
        }
        let sum = self.p_mask + self.p_random + self.p_unchanged;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("text mask branch probabilities sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// What happened to one selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenAction {
    Kept,
    Masked,
    Randomized,
    Unchanged,
}

/// MLM-style corruption of the valid positions of `tokens`.
///
/// Returns the corrupted sequence and one [`TokenAction`] per position;
/// `Kept` marks unselected positions (including padding).
pub fn mask_tokens_detailed(
    tokens: &TokenSequence,
    cfg: &TextMaskConfig,
    vocab: &Vocabulary,
    rng: &mut RngStream,
) -> Result<(TokenSequence, Vec<TokenAction>)> {
    cfg.validate()?;
    if vocab.len() <= RESERVED {
        return Err(Error::invalid("vocabulary has no non-reserved words"));
    }
    let mut out = tokens.clone();
    let mut actions = vec![TokenAction::Kept; tokens.max_len()];
    let regular = vocab.len() - RESERVED;
    for pos in 0..tokens.valid_len() {
        if !rng.bernoulli(cfg.select_ratio) {
            continue;
        }
        let u = rng.uniform();
        actions[pos] = if u < cfg.p_mask {
            out.set(pos, MASK);
            TokenAction::Masked
        } else if u < cfg.p_mask + cfg.p_random {
            out.set(pos, (RESERVED + rng.below(regular)) as u16);
            TokenAction::Randomized
        } else {
            TokenAction::Unchanged
        };
    }
    Ok((out, actions))
}

/// Like [`mask_tokens_detailed`] but reports only selection flags.
pub fn mask_tokens(
    tokens: &TokenSequence,
    cfg: &TextMaskConfig,
    vocab: &Vocabulary,
    rng: &mut RngStream,
) -> Result<(TokenSequence, Vec<bool>)> {
    let (out, actions) = mask_tokens_detailed(tokens, cfg, vocab, rng)?;
    Ok((out, actions.iter().map(|a| *a != TokenAction::Kept).collect()))
}

/// Probability that all `object_cells` cells covering an object are among
/// `masked` cells chosen uniformly without replacement from `cells`:
/// `prod_{i < object_cells} (masked - i) / (cells - i)`.
pub fn exact_full_mask_prob(cells: usize, masked: usize, object_cells: usize) -> Result<f64> {
    if masked > cells || object_cells > cells {
        return Err(Error::invalid(format!(
            "need object_cells, masked <= cells; got ({cells}, {masked}, {object_cells})"
        )));
    }
    if object_cells > masked {
        return Ok(0.0);
    }
    Ok((0..object_cells).fold(1.0, |p, i| p * (masked - i) as f64 / (cells - i) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub p: f64,
    pub std_err: f64,
    pub draws: usize,
}

/// Monte-Carlo estimate of [`exact_full_mask_prob`] using the same
/// without-replacement sampler as [`sample_patch_mask`]. The object is the
/// first `object_cells` cells.
pub fn mc_full_mask_prob(
    cells: usize,
    masked: usize,
    object_cells: usize,
    draws: usize,
    rng: &mut RngStream,
) -> Result<McEstimate> {
    if draws == 0 {
        return Err(Error::invalid("need at least one draw"));
    }
    if masked > cells || object_cells > cells {
        return Err(Error::invalid("need object_cells, masked <= cells"));
    }
    let mut order: Vec<usize> = (0..cells).collect();
    let mut hits = 0usize;
    for _ in 0..draws {
        for (i, o) in order.iter_mut().enumerate() {
            *o = i;
        }
        choose_without_replacement(&mut order, masked, rng);
        let covered = order[..masked].iter().filter(|&&i| i < object_cells).count();
        if covered == object_cells {
            hits += 1;
        }
    }
    let p = hits as f64 / draws as f64;
    Ok(McEstimate {
        p,
        std_err: (p * (1.0 - p) / draws as f64).sqrt(),
        draws,
    })
}
