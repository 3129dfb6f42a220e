//! Image corruptions at five severities, and evaluation-time occlusion.
//!
//! Severity tables (index = severity - 1):
//!
//! | kind           | parameter                  | 1    | 2    | 3    | 4    | 5    |
//! |----------------|----------------------------|------|------|------|------|------|
//! | gaussian_noise | noise std                  | 0.04 | 0.08 | 0.12 | 0.18 | 0.26 |
//! | shot_noise     | photons per unit intensity | 60   | 25   | 12   | 5    | 3    |
//! | gaussian_blur  | kernel sigma (pixels)      | 0.5  | 1.0  | 1.5  | 2.0  | 3.0  |
//! | brightness     | additive shift             | 0.1  | 0.2  | 0.3  | 0.4  | 0.5  |
//! | contrast       | contrast factor            | 0.75 | 0.6  | 0.45 | 0.3  | 0.15 |

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal, Poisson};

use super::scene::{SampleRecord, Tag, OCCLUDER_GRAY};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng::RngStream;

const GAUSSIAN_STD: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const BLUR_SIGMA: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 3.0];
const CONTRAST: [f32; 5] = [0.75, 0.6, 0.45, 0.3, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    GaussianBlur,
    Brightness,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind {s:?}")))
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| (w / total) as f32).collect()
}

/// Separable blur with clamp-to-edge borders.
fn blur(image: &ImageBuffer, sigma: f64) -> ImageBuffer {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = (image.height() as i64, image.width() as i64);
    let src = image.data();
    let mut tmp = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0f32;
                for (t, kw) in k.iter().enumerate() {
                    let xx = (x + t as i64 - r).clamp(0, w - 1);
                    acc += kw * src[((y * w + xx) * 3 + c) as usize];
                }
                tmp[((y * w + x) * 3 + c) as usize] = acc;
            }
        }
    }
    let mut out = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0f32;
                for (t, kw) in k.iter().enumerate() {
                    let yy = (y + t as i64 - r).clamp(0, h - 1);
                    acc += kw * tmp[((yy * w + x) * 3 + c) as usize];
                }
                out[((y * w + x) * 3 + c) as usize] = acc.clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::from_raw(image.height(), image.width(), out).expect("blur preserves shape and range")
}

/// Applies corruption `kind` at `severity` (1..=5). Output is clamped to
/// `[0, 1]`.
pub fn corrupt(image: &ImageBuffer, kind: CorruptionKind, severity: u8, rng: &mut RngStream) -> Result<ImageBuffer> {
    if !(1..=5).contains(&severity) {
        return Err(Error::invalid(format!("severity {severity} outside 1..=5")));
    }
    let s = severity as usize - 1;
    Ok(match kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, GAUSSIAN_STD[s]).expect("positive std");
            image.map_values(|v| v + normal.sample(rng) as f32)
        }
        CorruptionKind::ShotNoise => {
            let photons = SHOT_PHOTONS[s];
            image.map_values(|v| {
                let lambda = v as f64 * photons;
                if lambda <= 0.0 {
                    return 0.0;
                }
                let n: f64 = Poisson::new(lambda).expect("positive rate").sample(rng);
                (n / photons) as f32
            })
        }
        CorruptionKind::GaussianBlur => blur(image, BLUR_SIGMA[s]),
        CorruptionKind::Brightness => {
            let shift = 0.1 * severity as f32;
            image.map_values(|v| v + shift)
        }
        CorruptionKind::Contrast => {
            let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / image.data().len() as f64;
            let (mean, c) = (mean as f32, CONTRAST[s]);
            image.map_values(|v| (v - mean) * c + mean)
        }
    })
}

/// Result of [`occlude_eval`]; `applied` is false when the referent was too
/// small to occlude and the input came back unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Occluded {
    pub sample: SampleRecord,
    pub applied: bool,
}

/// Paints a gray band over `fraction` of the referent's bounding box,
/// entering from a random side. The ground truth is left unchanged so the
/// evaluation measures recovery of the full referent.
pub fn occlude_eval(sample: &SampleRecord, fraction: f64, rng: &mut RngStream) -> Result<Occluded> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("occlusion fraction {fraction} outside (0, 1)")));
    }
    let unchanged = || Occluded {
        sample: sample.clone(),
        applied: false,
    };
    let Some((y0, x0, y1, x1)) = sample.gt_mask.bounding_box() else {
        return Ok(unchanged());
    };
    let (bh, bw) = (y1 - y0, x1 - x0);
    let side = rng.below(4);
    let (ry0, rx0, ry1, rx1) = match side {
        0 | 1 => {
            let band = (fraction * bh as f64).round() as usize;
            if band == 0 || band >= bh {
                return Ok(unchanged());
            }
            if side == 0 {
                (y0, x0, y0 + band, x1)
            } else {
                (y1 - band, x0, y1, x1)
            }
        }
        _ => {
            let band = (fraction * bw as f64).round() as usize;
            if band == 0 || band >= bw {
                return Ok(unchanged());
            }
            if side == 2 {
                (y0, x0, y1, x0 + band)
            } else {
                (y0, x1 - band, y1, x1)
            }
        }
    };
    let mut out = sample.clone();
    for y in ry0..ry1 {
        for x in rx0..rx1 {
            out.image.set_pixel(y, x, [OCCLUDER_GRAY; 3]);
        }
    }
    out.tags.insert(Tag::Occlusion);
    Ok(Occluded {
        sample: out,
        applied: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::PixelMask;
    use crate::synthdata::scene::Tags;
    use crate::text::{tokenize, Vocabulary};

    fn gradient_image() -> ImageBuffer {
        let data = (0..16 * 16 * 3).map(|i| ((i * 7) % 97) as f32 / 96.0).collect();
        ImageBuffer::from_raw(16, 16, data).unwrap()
    }

    #[test]
    fn brightness_definition() {
        let img = ImageBuffer::filled(8, 8, [0.2, 0.5, 0.95]);
        let out = corrupt(&img, CorruptionKind::Brightness, 3, &mut RngStream::new(0, "c")).unwrap();
        assert_eq!(out.pixel(0, 0), [0.2 + 0.3, 0.5 + 0.3, 1.0]);
    }

    #[test]
    fn severity_bounds() {
        let img = gradient_image();
        let mut rng = RngStream::new(0, "c");
        assert!(corrupt(&img, CorruptionKind::Contrast, 0, &mut rng).is_err());
        assert!(corrupt(&img, CorruptionKind::Contrast, 6, &mut rng).is_err());
        assert!("fog".parse::<CorruptionKind>().is_err());
        assert_eq!("shot_noise".parse::<CorruptionKind>().unwrap(), CorruptionKind::ShotNoise);
    }

    #[test]
    fn outputs_stay_in_unit_range_and_distortion_grows() {
        let img = gradient_image();
        for kind in CorruptionKind::ALL {
            let mut prev = 0.0;
            for s in 1..=5 {
                let out = corrupt(&img, kind, s, &mut RngStream::with_counter(1, kind.name(), s as u64)).unwrap();
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
                let d = img.mean_abs_diff(&out);
                assert!(d > prev, "{kind} severity {s}: {d} <= {prev}");
                prev = d;
            }
        }
    }

    #[test]
    fn deterministic_noise() {
        let img = gradient_image();
        let a = corrupt(&img, CorruptionKind::ShotNoise, 2, &mut RngStream::new(4, "n")).unwrap();
        let b = corrupt(&img, CorruptionKind::ShotNoise, 2, &mut RngStream::new(4, "n")).unwrap();
        assert_eq!(a, b);
    }

    fn square_sample() -> SampleRecord {
        let mut gt = PixelMask::empty(64, 64);
        let mut img = ImageBuffer::filled(64, 64, [0.1; 3]);
        for y in 20..40 {
            for x in 10..30 {
                gt.set(y, x, true);
                img.set_pixel(y, x, [0.9, 0.1, 0.1]);
            }
        }
        let v = Vocabulary::standard();
        SampleRecord {
            image: img,
            expression: "red square".into(),
            tokens: tokenize("red square", &v, 20),
            gt_mask: gt,
            tags: Tags::default(),
        }
    }

    #[test]
    fn occlusion_covers_half_of_square() {
        let s = square_sample();
        for seed in 0..8 {
            let o = occlude_eval(&s, 0.5, &mut RngStream::new(seed, "o")).unwrap();
            assert!(o.applied);
            let painted = (0..64)
                .flat_map(|y| (0..64).map(move |x| (y, x)))
                .filter(|&(y, x)| s.gt_mask.get(y, x) && o.sample.image.pixel(y, x) == [OCCLUDER_GRAY; 3])
                .count();
            assert_eq!(painted, 200);
            assert_eq!(o.sample.gt_mask, s.gt_mask);
            assert!(o.sample.tags.contains(Tag::Occlusion));
        }
        let a = occlude_eval(&s, 0.3, &mut RngStream::new(9, "o")).unwrap();
        let b = occlude_eval(&s, 0.3, &mut RngStream::new(9, "o")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_referent_left_alone() {
        let mut s = square_sample();
        s.gt_mask = PixelMask::empty(64, 64);
        s.gt_mask.set(5, 5, true);
        let o = occlude_eval(&s, 0.5, &mut RngStream::new(0, "o")).unwrap();
        assert!(!o.applied);
        assert_eq!(o.sample, s);
        assert!(occlude_eval(&s, 1.0, &mut RngStream::new(0, "o")).is_err());
    }
}
