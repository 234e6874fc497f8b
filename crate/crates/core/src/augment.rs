//! Probabilistic two-operation augmentation policies.
//!
//! Magnitude bins 0..=10 map linearly onto each operation's range:
//!
//! | op                 | per bin            | bin 10        |
//! |--------------------|--------------------|---------------|
//! | rotate             | 3°                 | 30°           |
//! | shear_x, shear_y   | 0.03               | 0.3           |
//! | translate_x/_y     | 1 px               | 10 px         |
//! | flip_horizontal    | any bin > 0 flips  |               |
//! | brightness         | factor + 0.09      | ×1.9          |
//! | contrast           | factor + 0.09      | ×1.9          |
//! | cutout             | 2 px of side       | 20×20 square  |
//!
//! All geometry is integer arithmetic with nearest-neighbour sampling and
//! zero fill, so results are identical on every platform.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::image::{Image, SIDE};

pub const MAX_MAGNITUDE: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    FlipHorizontal,
    Brightness,
    Contrast,
    Cutout,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Rotate,
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::FlipHorizontal,
        OpKind::Brightness,
        OpKind::Contrast,
        OpKind::Cutout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Rotate => "rotate",
            OpKind::ShearX => "shear_x",
            OpKind::ShearY => "shear_y",
            OpKind::TranslateX => "translate_x",
            OpKind::TranslateY => "translate_y",
            OpKind::FlipHorizontal => "flip_horizontal",
            OpKind::Brightness => "brightness",
            OpKind::Contrast => "contrast",
            OpKind::Cutout => "cutout",
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::Config(format!("unknown augmentation op '{s}'")))
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugOp {
    pub kind: OpKind,
    pub probability: f64,
    pub magnitude: u8,
}

impl AugOp {
    pub fn new(kind: OpKind, probability: f64, magnitude: u8) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            bail!(Config, "probability {} outside [0, 1] for {}", probability, kind);
        }
        if magnitude > MAX_MAGNITUDE {
            bail!(Config, "magnitude {} outside 0..={} for {}", magnitude, MAX_MAGNITUDE, kind);
        }
        Ok(Self { kind, probability, magnitude })
    }
}

pub type SubPolicy = [AugOp; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct AugPolicy {
    sub_policies: Vec<SubPolicy>,
}

impl AugPolicy {
    pub fn new(sub_policies: Vec<SubPolicy>) -> Result<Self> {
        if sub_policies.is_empty() {
            bail!(Config, "augmentation policy has no sub-policies");
        }
        for op in sub_policies.iter().flatten() {
            AugOp::new(op.kind, op.probability, op.magnitude)?;
        }
        Ok(Self { sub_policies })
    }

    pub fn sub_policies(&self) -> &[SubPolicy] {
        &self.sub_policies
    }

    pub fn len(&self) -> usize {
        self.sub_policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub_policies.is_empty()
    }
}

impl fmt::Display for AugPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for [a, b] in &self.sub_policies {
            writeln!(f, "({},{},{});({},{},{})", a.kind, a.probability, a.magnitude, b.kind, b.probability, b.magnitude)?;
        }
        Ok(())
    }
}

fn parse_op(text: &str, line: usize) -> Result<AugOp> {
    let inner = text
        .trim()
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| Error::Parse(format!("line {line}: expected '(op,probability,magnitude)', got '{}'", text.trim())))?;
    let fields: Vec<&str> = inner.split(',').map(str::trim).collect();
    let [name, p, m] = fields[..] else {
        bail!(Parse, "line {}: expected 3 fields, got {}", line, fields.len());
    };
    let probability: f64 = p.parse().map_err(|_| Error::Parse(format!("line {line}: bad probability '{p}'")))?;
    let magnitude: i64 = m.parse().map_err(|_| Error::Parse(format!("line {line}: bad magnitude '{m}'")))?;
    let kind: OpKind = name.parse()?;
    if !(0..=MAX_MAGNITUDE as i64).contains(&magnitude) {
        bail!(Config, "line {}: magnitude {} outside 0..={}", line, magnitude, MAX_MAGNITUDE);
    }
    AugOp::new(kind, probability, magnitude as u8)
}

/// Parses policy text: one `(op,p,m);(op,p,m)` sub-policy per line,
/// with `#` comments and blank lines ignored.
pub fn load_policy(source: &str) -> Result<AugPolicy> {
    let mut subs = Vec::new();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(';').collect();
        let [a, b] = parts[..] else {
            bail!(Parse, "line {}: a sub-policy needs exactly two ops, got {}", i + 1, parts.len());
        };
        subs.push([parse_op(a, i + 1)?, parse_op(b, i + 1)?]);
    }
    AugPolicy::new(subs)
}

/// Rounded `a / d` for `d > 0`, halves rounding up.
#[inline]
fn div_round(a: i64, d: i64) -> i64 {
    (2 * a + d).div_euclid(2 * d)
}

const COS_Q16: [i64; 11] = [65536, 65446, 65177, 64729, 64104, 63303, 62328, 61183, 59870, 58393, 56756];
const SIN_Q16: [i64; 11] = [0, 3430, 6850, 10252, 13626, 16962, 20252, 23486, 26656, 29753, 32768];
const Q16: i64 = 1 << 16;

/// Builds the output by sampling `src(row, col)` for each output pixel.
fn resample(image: &Image, src: impl Fn(i64, i64) -> (i64, i64)) -> Image {
    let mut out = Image::zeros();
    let side = SIDE as i64;
    for r in 0..side {
        for c in 0..side {
            let (sr, sc) = src(r, c);
            if (0..side).contains(&sr) && (0..side).contains(&sc) {
                for ch in 0..3 {
                    out.set(ch, r as usize, c as usize, image.get(ch, sr as usize, sc as usize));
                }
            }
        }
    }
    out
}

fn scale_pixels(image: &Image, f: impl Fn(i64) -> i64) -> Image {
    let mut out = image.clone();
    for b in out.bytes_mut() {
        *b = f(*b as i64).clamp(0, 255) as u8;
    }
    out
}

/// Applies one operation at magnitude bin `magnitude`; bin 0 is the identity.
pub fn apply_transform(image: &Image, kind: OpKind, magnitude: u8) -> Result<Image> {
    if magnitude > MAX_MAGNITUDE {
        bail!(Config, "magnitude {} outside 0..={}", magnitude, MAX_MAGNITUDE);
    }
    if magnitude == 0 {
        return Ok(image.clone());
    }
    let m = magnitude as i64;
    let last = SIDE as i64 - 1;
    // Offsets from the image centre, doubled so the centre sits on an integer.
    let centred = |v: i64| 2 * v - last;
    let out = match kind {
        OpKind::TranslateX => resample(image, |r, c| (r, c - m)),
        OpKind::TranslateY => resample(image, |r, c| (r - m, c)),
        OpKind::FlipHorizontal => resample(image, |r, c| (r, last - c)),
        OpKind::ShearX => resample(image, |r, c| (r, c + div_round(3 * m * centred(r), 200))),
        OpKind::ShearY => resample(image, |r, c| (r + div_round(3 * m * centred(c), 200), c)),
        OpKind::Rotate => {
            let (cos, sin) = (COS_Q16[m as usize], SIN_Q16[m as usize]);
            resample(image, |r, c| {
                let (x, y) = (centred(c), centred(r));
                let sx = cos * x + sin * y;
                let sy = cos * y - sin * x;
                (div_round(sy + last * Q16, 2 * Q16), div_round(sx + last * Q16, 2 * Q16))
            })
        }
        OpKind::Brightness => {
            let factor = 100 + 9 * m;
            scale_pixels(image, |v| div_round(v * factor, 100))
        }
        OpKind::Contrast => {
            let factor = 100 + 9 * m;
            let sum: i64 = image.bytes().iter().map(|&b| b as i64).sum();
            let mean = div_round(sum, image.bytes().len() as i64);
            scale_pixels(image, |v| mean + div_round((v - mean) * factor, 100))
        }
        OpKind::Cutout => {
            let mut out = image.clone();
            let half = SIDE / 2;
            let lo = half.saturating_sub(m as usize);
            let hi = (half + m as usize).min(SIDE);
            for ch in 0..3 {
                for r in lo..hi {
                    for c in lo..hi {
                        out.set(ch, r, c, 0);
                    }
                }
            }
            out
        }
    };
    Ok(out)
}

/// Applies each op of `sub` in order when a fresh uniform draw falls below its probability.
pub fn apply_subpolicy<R: Rng + ?Sized>(image: &Image, sub: &SubPolicy, rng: &mut R) -> Image {
    let mut out = image.clone();
    for op in sub {
        let u: f64 = rng.gen();
        if u < op.probability {
            out = apply_transform(&out, op.kind, op.magnitude).expect("validated op");
        }
    }
    out
}

/// Augments every image with one uniformly chosen sub-policy each.
pub fn augment_batch<R: Rng + ?Sized>(images: &[Image], policy: &AugPolicy, rng: &mut R) -> Vec<Image> {
    images
        .iter()
        .map(|img| {
            let sub = &policy.sub_policies[rng.gen_range(0..policy.len())];
            apply_subpolicy(img, sub, rng)
        })
        .collect()
}

/// Zero-pads by `pad` pixels, takes a random 32×32 crop and mirrors it with probability ½.
pub fn random_crop_flip<R: Rng + ?Sized>(image: &Image, pad: usize, rng: &mut R) -> Image {
    let pad = pad as i64;
    let dr = rng.gen_range(-pad..=pad);
    let dc = rng.gen_range(-pad..=pad);
    let flip = rng.gen_bool(0.5);
    let last = SIDE as i64 - 1;
    resample(image, |r, c| {
        let c = if flip { last - c } else { c };
        (r + dr, c + dc)
    })
}
