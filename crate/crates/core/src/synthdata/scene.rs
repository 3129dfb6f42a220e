//! Colored-shape scenes and their referring expressions.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::kv::KvFile;
use crate::masking::PixelMask;
use crate::rng::RngStream;
use crate::text::{tokenize, TokenSequence, Vocabulary, COLORS, KINDS, ORDINALS, POSITIONS};

/// Minimum coordinate gap, in pixels, between the referent and its nearest
/// competitor for positional and ordinal expressions to count as unambiguous.
pub const RESOLVE_MARGIN: f64 = 8.0;

/// Occluded-area fraction at which a referent is tagged as occluded.
pub const OCCLUSION_TAG_FRACTION: f64 = 0.2;

pub const OCCLUDER_GRAY: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        KINDS[self as usize]
    }

    fn from_word(w: &str) -> Option<Self> {
        KINDS.iter().position(|k| *k == w).map(|i| Self::ALL[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ShapeColor {
    pub const ALL: [ShapeColor; 4] = [ShapeColor::Red, ShapeColor::Green, ShapeColor::Blue, ShapeColor::Yellow];

    pub fn word(self) -> &'static str {
        COLORS[self as usize]
    }

    fn from_word(w: &str) -> Option<Self> {
        COLORS.iter().position(|c| *c == w).map(|i| Self::ALL[i])
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            ShapeColor::Red => [0.9, 0.12, 0.12],
            ShapeColor::Green => [0.12, 0.85, 0.15],
            ShapeColor::Blue => [0.15, 0.25, 0.95],
            ShapeColor::Yellow => [0.95, 0.9, 0.1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: ShapeColor,
    /// Center as (row, column) in pixel coordinates.
    pub center: (f64, f64),
    /// Side length, diameter, or base/height of the upward triangle.
    pub size: f64,
}

impl Shape {
    /// Point-in-shape test for a point given in continuous pixel
    /// coordinates (pixel `(y, x)` has its center at `(y + 0.5, x + 0.5)`).
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let half = self.size / 2.0;
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        match self.kind {
            ShapeKind::Square => dy.abs() < half && dx.abs() < half,
            ShapeKind::Circle => dy * dy + dx * dx < half * half,
            ShapeKind::Triangle => {
                // Apex at the top, base at the bottom edge of the box.
                let depth = dy + half;
                (0.0..self.size).contains(&depth) && dx.abs() < depth / 2.0
            }
        }
    }

    /// Continuous bounding box `(y0, x0, y1, x1)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let half = self.size / 2.0;
        (self.center.0 - half, self.center.1 - half, self.center.0 + half, self.center.1 + half)
    }

    pub fn raster(&self, height: usize, width: usize) -> PixelMask {
        let mut m = PixelMask::empty(height, width);
        for y in 0..height {
            for x in 0..width {
                if self.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }
}

/// Gray rectangle `[y0, y1) × [x0, x1)` painted over the scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Occluder {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Occluder {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: f32,
    pub shapes: Vec<Shape>,
    pub occluders: Vec<Occluder>,
    pub referent_index: usize,
}

/// Linguistic tags carried by a sample, packed as a bit set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Tags(u8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Occlusion,
    RelativePosition,
    Ordering,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::Occlusion, Tag::RelativePosition, Tag::Ordering];

    fn bit(self) -> u8 {
        match self {
            Tag::Occlusion => 1,
            Tag::RelativePosition => 2,
            Tag::Ordering => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::Occlusion => "occlusion",
            Tag::RelativePosition => "relative_position",
            Tag::Ordering => "ordering",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Tags {
    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits & !7 != 0 {
            return Err(Error::invalid(format!("unknown tag bits {bits:#x}")));
        }
        Ok(Self(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, tag: Tag) -> bool {
        self.0 & tag.bit() != 0
    }

    pub fn insert(&mut self, tag: Tag) {
        self.0 |= tag.bit();
    }

    /// Keyword tags implied by an expression's words.
    pub fn from_expression(expression: &str) -> Self {
        let mut t = Tags::default();
        for w in expression.split_whitespace() {
            if POSITIONS.contains(&w) {
                t.insert(Tag::RelativePosition);
            }
            if ORDINALS.contains(&w) {
                t.insert(Tag::Ordering);
            }
        }
        t
    }
}

/// One referring-segmentation example.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image: ImageBuffer,
    pub expression: String,
    pub tokens: TokenSequence,
    pub gt_mask: PixelMask,
    pub tags: Tags,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub max_len: usize,
    /// Probability of placing an occluder that covers 20-60% of the referent.
    pub referent_occlusion_prob: f64,
    /// Probability of placing an occluder anywhere in the scene.
    pub distractor_occluder_prob: f64,
    /// Relative weights of the three expression templates
    /// (color-kind, position, ordinal).
    pub template_weights: [f64; 3],
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            patch_size: 8,
            min_shapes: 2,
            max_shapes: 5,
            min_size: 12.0,
            max_size: 20.0,
            max_len: crate::text::DEFAULT_MAX_LEN,
            referent_occlusion_prob: 0.35,
            distractor_occluder_prob: 0.3,
            template_weights: [0.5, 0.3, 0.2],
            max_attempts: 500,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if !(2..=5).contains(&self.min_shapes) || !(self.min_shapes..=5).contains(&self.max_shapes) {
            return Err(Error::invalid("shape count bounds must lie in [2, 5]"));
        }
        if !(self.min_size > 2.0 && self.min_size <= self.max_size) {
            return Err(Error::invalid("bad shape size range"));
        }
        if self.max_size + 2.0 > self.height.min(self.width) as f64 {
            return Err(Error::invalid("shapes do not fit the image"));
        }
        if self.max_len < 4 {
            return Err(Error::invalid("max_len must hold the longest template (4 words)"));
        }
        if self.template_weights.iter().any(|w| *w < 0.0) || self.template_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("template weights must be non-negative with a positive sum"));
        }
        Ok(())
    }

    /// `key = value` lines without the leading version key.
    pub fn kv_lines(&self) -> String {
        let w = self.template_weights;
        let lines = [
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("min_shapes", self.min_shapes.to_string()),
            ("max_shapes", self.max_shapes.to_string()),
            ("min_size", self.min_size.to_string()),
            ("max_size", self.max_size.to_string()),
            ("max_len", self.max_len.to_string()),
            ("referent_occlusion_prob", self.referent_occlusion_prob.to_string()),
            ("distractor_occluder_prob", self.distractor_occluder_prob.to_string()),
            ("template_weights", format!("{},{},{}", w[0], w[1], w[2])),
            ("max_attempts", self.max_attempts.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn to_kv(&self) -> String {
        format!("version = 1\n{}", self.kv_lines())
    }

    /// Parses [`SceneConfig::to_kv`] output. Missing keys keep their defaults.
    pub fn from_kv(text: &str, origin: &str) -> Result<Self> {
        let mut f = KvFile::parse(text, origin)?;
        let mut c = Self::default();
        f.take("height", &mut c.height)?;
        f.take("width", &mut c.width)?;
        f.take("patch_size", &mut c.patch_size)?;
        f.take("min_shapes", &mut c.min_shapes)?;
        f.take("max_shapes", &mut c.max_shapes)?;
        f.take("min_size", &mut c.min_size)?;
        f.take("max_size", &mut c.max_size)?;
        f.take("max_len", &mut c.max_len)?;
        f.take("referent_occlusion_prob", &mut c.referent_occlusion_prob)?;
        f.take("distractor_occluder_prob", &mut c.distractor_occluder_prob)?;
        f.take("max_attempts", &mut c.max_attempts)?;
        if let Some(v) = f.take_str("template_weights") {
            let parts: Vec<f64> = v
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::invalid(format!("{origin}: bad template_weights {v:?}")))?;
            c.template_weights = parts
                .try_into()
                .map_err(|_| Error::invalid(format!("{origin}: template_weights needs 3 values")))?;
        }
        f.finish()?;
        c.validate()?;
        Ok(c)
    }
}

/// Finds the shape an expression denotes, or `None` when the expression is
/// malformed or does not pick out exactly one shape.
///
/// Semantics: `<color> <kind>` needs a unique color-kind match;
/// `<position> <color> <kind>` takes the extreme match in that direction
/// (`middle` is the horizontal median of an odd group); `<ordinal> <kind>
/// from <side>` counts shapes of that kind from the given side. Positional
/// choices need a [`RESOLVE_MARGIN`] gap to the runner-up.
pub fn resolve(expression: &str, shapes: &[Shape]) -> Option<usize> {
    let words: Vec<&str> = expression.split_whitespace().collect();
    match words.as_slice() {
        [c, k] => {
            let (c, k) = (ShapeColor::from_word(c)?, ShapeKind::from_word(k)?);
            let hits: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i].color == c && shapes[i].kind == k).collect();
            (hits.len() == 1).then(|| hits[0])
        }
        [p, c, k] => {
            let (c, k) = (ShapeColor::from_word(c)?, ShapeKind::from_word(k)?);
            let group: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i].color == c && shapes[i].kind == k).collect();
            if group.is_empty() {
                return None;
            }
            let (axis, descending) = match *p {
                "left" | "middle" => (1, false),
                "right" => (1, true),
                "top" => (0, false),
                "bottom" => (0, true),
                _ => return None,
            };
            let sorted = sort_along(shapes, &group, axis, descending)?;
            if *p == "middle" {
                (sorted.len() % 2 == 1 && sorted.len() >= 3).then(|| sorted[sorted.len() / 2])
            } else {
                Some(sorted[0])
            }
        }
        [o, k, from, side] if *from == "from" => {
            let rank = ORDINALS.iter().position(|w| w == o)?;
            let k = ShapeKind::from_word(k)?;
            let group: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i].kind == k).collect();
            let (axis, descending) = match *side {
                "left" => (1, false),
                "right" => (1, true),
                "top" => (0, false),
                "bottom" => (0, true),
                _ => return None,
            };
            let sorted = sort_along(shapes, &group, axis, descending)?;
            sorted.get(rank).copied()
        }
        _ => None,
    }
}

/// Sorts `group` by center coordinate; `None` if any two neighbors are
/// closer than the resolve margin.
fn sort_along(shapes: &[Shape], group: &[usize], axis: usize, descending: bool) -> Option<Vec<usize>> {
    let coord = |i: usize| if axis == 0 { shapes[i].center.0 } else { shapes[i].center.1 };
    let mut sorted = group.to_vec();
    sorted.sort_by(|&a, &b| coord(a).total_cmp(&coord(b)));
    if descending {
        sorted.reverse();
    }
    if sorted.windows(2).any(|w| (coord(w[0]) - coord(w[1])).abs() < RESOLVE_MARGIN) {
        return None;
    }
    Some(sorted)
}

fn weighted_choice(rng: &mut RngStream, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn pick<T: Copy>(rng: &mut RngStream, items: &[T]) -> T {
    items[rng.below(items.len())]
}

/// Tries to place a shape of the given identity without overlapping the
/// existing ones (bounding boxes kept 2 px apart).
fn place(cfg: &SceneConfig, rng: &mut RngStream, shapes: &[Shape], kind: ShapeKind, color: ShapeColor) -> Option<Shape> {
    for _ in 0..50 {
        let size = rng.uniform_range(cfg.min_size, cfg.max_size).round();
        let half = size / 2.0;
        let cy = rng.uniform_range(half + 1.0, cfg.height as f64 - half - 1.0).round();
        let cx = rng.uniform_range(half + 1.0, cfg.width as f64 - half - 1.0).round();
        let s = Shape {
            kind,
            color,
            center: (cy, cx),
            size,
        };
        let (a0, b0, a1, b1) = s.bounds();
        let clear = shapes.iter().all(|o| {
            let (c0, d0, c1, d1) = o.bounds();
            a1 + 2.0 <= c0 || c1 + 2.0 <= a0 || b1 + 2.0 <= d0 || d1 + 2.0 <= b0
        });
        if clear {
            return Some(s);
        }
    }
    None
}

struct Draft {
    shapes: Vec<Shape>,
    referent: usize,
    expression: String,
}

fn draft_color_kind(cfg: &SceneConfig, rng: &mut RngStream, n: usize) -> Option<Draft> {
    let (kind, color) = (pick(rng, &ShapeKind::ALL), pick(rng, &ShapeColor::ALL));
    let mut shapes = vec![place(cfg, rng, &[], kind, color)?];
    while shapes.len() < n {
        let (k, c) = (pick(rng, &ShapeKind::ALL), pick(rng, &ShapeColor::ALL));
        if (k, c) == (kind, color) {
            continue;
        }
        shapes.push(place(cfg, rng, &shapes, k, c)?);
    }
    Some(Draft {
        shapes,
        referent: 0,
        expression: format!("{} {}", color.word(), kind.word()),
    })
}

fn draft_position(cfg: &SceneConfig, rng: &mut RngStream, n: usize) -> Option<Draft> {
    let position = pick(rng, &POSITIONS);
    let group = if position == "middle" { 3 } else { 2 + rng.below(2) };
    let n = n.max(group);
    let (kind, color) = (pick(rng, &ShapeKind::ALL), pick(rng, &ShapeColor::ALL));
    let mut shapes = Vec::new();
    for _ in 0..group {
        shapes.push(place(cfg, rng, &shapes, kind, color)?);
    }
    while shapes.len() < n {
        let (k, c) = (pick(rng, &ShapeKind::ALL), pick(rng, &ShapeColor::ALL));
        if (k, c) == (kind, color) {
            continue;
        }
        shapes.push(place(cfg, rng, &shapes, k, c)?);
    }
    let expression = format!("{position} {} {}", color.word(), kind.word());
    let referent = resolve(&expression, &shapes)?;
    Some(Draft {
        shapes,
        referent,
        expression,
    })
}

fn draft_ordinal(cfg: &SceneConfig, rng: &mut RngStream, n: usize) -> Option<Draft> {
    let rank = rng.below(3);
    let side = pick(rng, &["left", "right", "top", "bottom"]);
    let group = (rank + 1 + rng.below(2)).min(cfg.max_shapes).max(rank + 1);
    let n = n.max(group);
    let kind = pick(rng, &ShapeKind::ALL);
    let mut shapes = Vec::new();
    for _ in 0..group {
        let c = pick(rng, &ShapeColor::ALL);
        shapes.push(place(cfg, rng, &shapes, kind, c)?);
    }
    while shapes.len() < n {
        let k = pick(rng, &ShapeKind::ALL);
        if k == kind {
            continue;
        }
        let c = pick(rng, &ShapeColor::ALL);
        shapes.push(place(cfg, rng, &shapes, k, c)?);
    }
    let expression = format!("{} {} from {side}", ORDINALS[rank], kind.word());
    let referent = resolve(&expression, &shapes)?;
    Some(Draft {
        shapes,
        referent,
        expression,
    })
}

fn random_occluder(cfg: &SceneConfig, rng: &mut RngStream) -> Occluder {
    let h = rng.between(6, 20);
    let w = rng.between(6, 20);
    let y0 = rng.between(0, cfg.height - h);
    let x0 = rng.between(0, cfg.width - w);
    Occluder {
        y0,
        x0,
        y1: y0 + h,
        x1: x0 + w,
    }
}

/// Fraction of `mask` pixels covered by any occluder.
fn occluded_fraction(mask: &PixelMask, occluders: &[Occluder]) -> f64 {
    let total = mask.count();
    if total == 0 {
        return 0.0;
    }
    let mut covered = 0usize;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) && occluders.iter().any(|o| o.covers(y, x)) {
                covered += 1;
            }
        }
    }
    covered as f64 / total as f64
}

/// Places an occluder over 20-60% of the referent by sliding a rectangle in
/// from a random side of its bounding box.
fn referent_occluder(rng: &mut RngStream, mask: &PixelMask, existing: &[Occluder]) -> Option<Occluder> {
    let (y0, x0, y1, x1) = mask.bounding_box()?;
    for _ in 0..20 {
        let frac = rng.uniform_range(0.25, 0.55);
        let (bh, bw) = (y1 - y0, x1 - x0);
        let o = match rng.below(4) {
            0 => Occluder { y0: y0.saturating_sub(2), x0: x0.saturating_sub(2), y1: y0 + (frac * bh as f64).round() as usize, x1: (x1 + 2).min(mask.width()) },
            1 => Occluder { y0: y1 - (frac * bh as f64).round() as usize, x0: x0.saturating_sub(2), y1: (y1 + 2).min(mask.height()), x1: (x1 + 2).min(mask.width()) },
            2 => Occluder { y0: y0.saturating_sub(2), x0: x0.saturating_sub(2), y1: (y1 + 2).min(mask.height()), x1: x0 + (frac * bw as f64).round() as usize },
            _ => Occluder { y0: y0.saturating_sub(2), x0: x1 - (frac * bw as f64).round() as usize, y1: (y1 + 2).min(mask.height()), x1: (x1 + 2).min(mask.width()) },
        };
        if o.y1 <= o.y0 || o.x1 <= o.x0 {
            continue;
        }
        let mut all = existing.to_vec();
        all.push(o);
        let f = occluded_fraction(mask, &all);
        if (OCCLUSION_TAG_FRACTION..=0.6).contains(&f) {
            return Some(o);
        }
    }
    None
}

/// Renders a scene: background with mild per-pixel noise, shapes in their
/// colors, occluders in flat gray on top.
pub fn render(spec: &SceneSpec, rng: &mut RngStream) -> ImageBuffer {
    let mut img = ImageBuffer::new(spec.height, spec.width);
    let rasters: Vec<PixelMask> = spec.shapes.iter().map(|s| s.raster(spec.height, spec.width)).collect();
    for y in 0..spec.height {
        for x in 0..spec.width {
            let mut rgb = [spec.background; 3];
            for (s, r) in spec.shapes.iter().zip(&rasters) {
                if r.get(y, x) {
                    rgb = s.color.rgb();
                }
            }
            for v in rgb.iter_mut() {
                *v += (rng.uniform() as f32 - 0.5) * 0.08;
            }
            if spec.occluders.iter().any(|o| o.covers(y, x)) {
                rgb = [OCCLUDER_GRAY; 3];
            }
            img.set_pixel(y, x, rgb);
        }
    }
    img
}

/// Visible pixels of the referent.
pub fn ground_truth(spec: &SceneSpec) -> PixelMask {
    let mut m = spec.shapes[spec.referent_index].raster(spec.height, spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            if spec.occluders.iter().any(|o| o.covers(y, x)) {
                m.set(y, x, false);
            }
        }
    }
    m
}

/// Builds a sample from an explicit scene and expression. Fails if the
/// expression does not resolve to the scene's referent.
pub fn sample_from_scene(
    spec: &SceneSpec,
    expression: &str,
    vocab: &Vocabulary,
    max_len: usize,
    rng: &mut RngStream,
) -> Result<SampleRecord> {
    if resolve(expression, &spec.shapes) != Some(spec.referent_index) {
        return Err(Error::invalid(format!("expression {expression:?} does not resolve to the referent")));
    }
    let image = render(spec, rng);
    let gt_mask = ground_truth(spec);
    let full = spec.shapes[spec.referent_index].raster(spec.height, spec.width);
    let mut tags = Tags::from_expression(expression);
    if occluded_fraction(&full, &spec.occluders) >= OCCLUSION_TAG_FRACTION {
        tags.insert(Tag::Occlusion);
    }
    Ok(SampleRecord {
        image,
        expression: expression.to_string(),
        tokens: tokenize(expression, vocab, max_len),
        gt_mask,
        tags,
    })
}

/// Generates one scene and sample. Retries internally up to
/// `cfg.max_attempts` times before reporting failure.
pub fn generate_scene(cfg: &SceneConfig, vocab: &Vocabulary, rng: &mut RngStream) -> Result<(SceneSpec, SampleRecord)> {
    cfg.validate()?;
    for _ in 0..cfg.max_attempts {
        let n = rng.between(cfg.min_shapes, cfg.max_shapes);
        let draft = match weighted_choice(rng, &cfg.template_weights) {
            0 => draft_color_kind(cfg, rng, n),
            1 => draft_position(cfg, rng, n),
            _ => draft_ordinal(cfg, rng, n),
        };
        let Some(draft) = draft else { continue };
        if draft.shapes.len() > cfg.max_shapes {
            continue;
        }
        let referent_raster = draft.shapes[draft.referent].raster(cfg.height, cfg.width);
        let mut occluders = Vec::new();
        if rng.bernoulli(cfg.distractor_occluder_prob) {
            let o = random_occluder(cfg, rng);
            if occluded_fraction(&referent_raster, &[o]) <= 0.6 {
                occluders.push(o);
            }
        }
        if rng.bernoulli(cfg.referent_occlusion_prob) {
            if let Some(o) = referent_occluder(rng, &referent_raster, &occluders) {
                occluders.push(o);
            }
        }
        let spec = SceneSpec {
            height: cfg.height,
            width: cfg.width,
            background: rng.uniform_range(0.0, 0.2) as f32,
            shapes: draft.shapes,
            occluders,
            referent_index: draft.referent,
        };
        let sample = sample_from_scene(&spec, &draft.expression, vocab, cfg.max_len, rng)?;
        if sample.gt_mask.count() == 0 {
            continue;
        }
        return Ok((spec, sample));
    }
    Err(Error::GenerationFailed {
        attempts: cfg.max_attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_kv_round_trip() {
        let mut c = SceneConfig::default();
        c.template_weights = [0.25, 0.5, 0.25];
        c.max_shapes = 4;
        assert_eq!(SceneConfig::from_kv(&c.to_kv(), "t").unwrap(), c);
        assert!(SceneConfig::from_kv("version = 1\ntemplate_weights = 1,2\n", "t").is_err());
        assert!(SceneConfig::from_kv("version = 1\ncolor = red\n", "t").is_err());
    }

    fn sq(color: ShapeColor, cy: f64, cx: f64) -> Shape {
        Shape {
            kind: ShapeKind::Square,
            color,
            center: (cy, cx),
            size: 12.0,
        }
    }

    #[test]
    fn resolve_color_kind() {
        let shapes = [
            sq(ShapeColor::Red, 20.0, 20.0),
            Shape {
                kind: ShapeKind::Circle,
                color: ShapeColor::Blue,
                center: (40.0, 40.0),
                size: 12.0,
            },
        ];
        assert_eq!(resolve("red square", &shapes), Some(0));
        assert_eq!(resolve("blue circle", &shapes), Some(1));
        assert_eq!(resolve("red circle", &shapes), None);
    }

    #[test]
    fn resolve_positions() {
        let shapes = [sq(ShapeColor::Red, 20.0, 40.0), sq(ShapeColor::Red, 45.0, 10.0), sq(ShapeColor::Red, 10.0, 25.0)];
        assert_eq!(resolve("red square", &shapes), None);
        assert_eq!(resolve("left red square", &shapes), Some(1));
        assert_eq!(resolve("right red square", &shapes), Some(0));
        assert_eq!(resolve("top red square", &shapes), Some(2));
        assert_eq!(resolve("bottom red square", &shapes), Some(1));
        assert_eq!(resolve("middle red square", &shapes), Some(2));
        assert_eq!(resolve("second square from left", &shapes), Some(2));
        assert_eq!(resolve("third square from right", &shapes), Some(1));
        assert_eq!(resolve("first circle from left", &shapes), None);
    }

    #[test]
    fn resolve_needs_margin() {
        let shapes = [sq(ShapeColor::Red, 20.0, 20.0), sq(ShapeColor::Red, 40.0, 22.0)];
        assert_eq!(resolve("left red square", &shapes), None);
        assert_eq!(resolve("top red square", &shapes), Some(0));
    }

    #[test]
    fn two_shape_scene_ground_truth() {
        let spec = SceneSpec {
            height: 64,
            width: 64,
            background: 0.1,
            shapes: vec![
                sq(ShapeColor::Red, 20.0, 20.0),
                Shape {
                    kind: ShapeKind::Circle,
                    color: ShapeColor::Blue,
                    center: (44.0, 44.0),
                    size: 14.0,
                },
            ],
            occluders: vec![],
            referent_index: 0,
        };
        let v = Vocabulary::standard();
        let s = sample_from_scene(&spec, "red square", &v, 20, &mut RngStream::new(0, "r")).unwrap();
        assert_eq!(s.gt_mask.count(), 144);
        assert_eq!(s.gt_mask.bounding_box(), Some((14, 14, 26, 26)));
        assert!(s.tags == Tags::default());
        assert!(sample_from_scene(&spec, "blue square", &v, 20, &mut RngStream::new(0, "r")).is_err());
    }

    #[test]
    fn half_occluded_referent() {
        let spec = SceneSpec {
            height: 64,
            width: 64,
            background: 0.1,
            shapes: vec![
                Shape {
                    kind: ShapeKind::Square,
                    color: ShapeColor::Green,
                    center: (30.0, 30.0),
                    size: 20.0,
                },
                sq(ShapeColor::Red, 55.0, 55.0),
            ],
            occluders: vec![Occluder {
                y0: 0,
                x0: 0,
                y1: 64,
                x1: 30,
            }],
            referent_index: 0,
        };
        let v = Vocabulary::standard();
        let s = sample_from_scene(&spec, "green square", &v, 20, &mut RngStream::new(0, "r")).unwrap();
        assert_eq!(s.gt_mask.count(), 200);
        assert!(s.tags.contains(Tag::Occlusion));
        for y in 0..64 {
            for x in 0..30 {
                assert_eq!(s.image.pixel(y, x), [OCCLUDER_GRAY; 3]);
            }
        }
    }

    #[test]
    fn tags_follow_keywords() {
        let t = Tags::from_expression("second circle from left");
        assert!(t.contains(Tag::Ordering) && t.contains(Tag::RelativePosition));
        assert!(!t.contains(Tag::Occlusion));
        assert_eq!(Tags::from_expression("red square"), Tags::default());
        assert!(Tags::from_bits(8).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SceneConfig::default();
        assert!(c.validate().is_ok());
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let c = SceneConfig {
            max_shapes: 6,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
