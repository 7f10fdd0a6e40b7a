//! Augmentation kernels over 8-bit interleaved images.
//!
//! Every transform is a pure function of `(image, param, fill)`. Geometric
//! transforms use nearest-neighbour sampling so results are byte-exact across
//! platforms; pixels uncovered by motion are set to the fill value.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fill value used for vacated pixels unless configured otherwise.
pub const DEFAULT_FILL: u8 = 128;

/// Row-major, channel-interleaved 8-bit image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "buffer length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// An image with every byte set to `value`.
    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    fn blank_like(&self, fill: u8) -> Self {
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: vec![fill; self.data.len()],
        }
    }

    fn map_bytes(&self, f: impl Fn(u8) -> u8) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// The fifteen transform kinds. The first fourteen, in declaration order, are
/// the dimensions of the transform vector; `Cutout` only exists in the
/// destruction space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransformKind {
    Invert,
    AutoContrast,
    Equalize,
    Rotate,
    Solarize,
    Color,
    Posterize,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Cutout,
}

impl TransformKind {
    pub const ALL: [TransformKind; 15] = [
        Self::Invert,
        Self::AutoContrast,
        Self::Equalize,
        Self::Rotate,
        Self::Solarize,
        Self::Color,
        Self::Posterize,
        Self::Contrast,
        Self::Brightness,
        Self::Sharpness,
        Self::ShearX,
        Self::ShearY,
        Self::TranslateX,
        Self::TranslateY,
        Self::Cutout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Invert => "invert",
            Self::AutoContrast => "autoContrast",
            Self::Equalize => "equalize",
            Self::Rotate => "rotate",
            Self::Solarize => "solarize",
            Self::Color => "color",
            Self::Posterize => "posterize",
            Self::Contrast => "contrast",
            Self::Brightness => "brightness",
            Self::Sharpness => "sharpness",
            Self::ShearX => "shear-x",
            Self::ShearY => "shear-y",
            Self::TranslateX => "translate-x",
            Self::TranslateY => "translate-y",
            Self::Cutout => "cutout",
        }
    }

    /// Parses a kind name. Matching ignores case, `-` and `_`, so
    /// `shear-x`, `shearX` and `shear_x` are all accepted.
    pub fn from_name(name: &str) -> Option<Self> {
        let norm = |s: &str| {
            s.chars()
                .filter(|c| *c != '-' && *c != '_')
                .flat_map(char::to_lowercase)
                .collect::<String>()
        };
        let wanted = norm(name);
        Self::ALL.into_iter().find(|k| norm(k.name()) == wanted)
    }

    /// Dimension of this kind in the 14-dimensional transform vector.
    pub fn tau_index(self) -> Option<usize> {
        match self {
            Self::Cutout => None,
            k => Some(k as usize),
        }
    }

    /// Kinds with no strength: their parameter is an on/off switch.
    pub fn is_switch(self) -> bool {
        matches!(self, Self::Invert | Self::AutoContrast | Self::Equalize)
    }

    /// Kinds whose parameter has a direction that the sampler may flip.
    pub fn is_signed(self) -> bool {
        matches!(
            self,
            Self::Rotate
                | Self::ShearX
                | Self::ShearY
                | Self::TranslateX
                | Self::TranslateY
                | Self::Color
                | Self::Contrast
                | Self::Brightness
                | Self::Sharpness
        )
    }

    fn is_blend(self) -> bool {
        matches!(
            self,
            Self::Color | Self::Contrast | Self::Brightness | Self::Sharpness
        )
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentSpace {
    /// The fourteen-operator AutoAugment space, 31 magnitude levels.
    Full14,
    /// Geometric destruction space: shears, translations and cutout, 11 levels.
    Destruction,
}

impl AugmentSpace {
    pub fn kinds(self) -> &'static [TransformKind] {
        match self {
            Self::Full14 => &TransformKind::ALL[..14],
            Self::Destruction => &[
                TransformKind::ShearX,
                TransformKind::ShearY,
                TransformKind::TranslateX,
                TransformKind::TranslateY,
                TransformKind::Cutout,
            ],
        }
    }

    pub fn max_level(self) -> u32 {
        match self {
            Self::Full14 => 30,
            Self::Destruction => 10,
        }
    }

    pub fn contains(self, kind: TransformKind) -> bool {
        self.kinds().contains(&kind)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full14 => "full14",
            Self::Destruction => "destruction",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "full14" => Some(Self::Full14),
            "destruction" => Some(Self::Destruction),
            _ => None,
        }
    }
}

impl fmt::Display for AugmentSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A concrete transform.
///
/// Units of `value` by kind:
///
/// | kind | value |
/// |------|-------|
/// | invert, autoContrast, equalize | switch, 0 = off, 1 = on |
/// | rotate | degrees, positive is counter-clockwise |
/// | solarize | threshold in 0..=256; pixels `>= threshold` are inverted |
/// | posterize | bits kept, 1..=8 |
/// | color, contrast, brightness, sharpness | blend factor `>= 0`, 1 is identity |
/// | shear-x, shear-y | signed fraction of a right-angle shear, in -1..=1 |
/// | translate-x, translate-y | signed fraction of the image side, in -1..=1 |
/// | cutout | square side as a fraction of the shorter image side, in 0..=1 |
///
/// `anchor` is the cutout centre as fractions of width and height; other
/// kinds ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParam {
    pub kind: TransformKind,
    pub value: f64,
    pub anchor: (f64, f64),
}

impl TransformParam {
    pub fn new(kind: TransformKind, value: f64) -> Result<Self> {
        let p = Self {
            kind,
            value,
            anchor: (0.5, 0.5),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn cutout(side: f64, anchor: (f64, f64)) -> Result<Self> {
        let p = Self {
            kind: TransformKind::Cutout,
            value: side,
            anchor,
        };
        p.validate()?;
        Ok(p)
    }

    /// The parameter that leaves every image unchanged.
    pub fn identity(kind: TransformKind) -> Self {
        use TransformKind::*;
        let value = match kind {
            Solarize => 256.0,
            Posterize => 8.0,
            Color | Contrast | Brightness | Sharpness => 1.0,
            _ => 0.0,
        };
        Self {
            kind,
            value,
            anchor: (0.5, 0.5),
        }
    }

    pub fn with_anchor(self, anchor: (f64, f64)) -> Self {
        Self { anchor, ..self }
    }

    /// Flips the direction of a signed transform. Blend factors are mirrored
    /// around 1 (`1 + d` becomes `1 - d`); unsigned kinds are returned as is.
    pub fn negated(self) -> Self {
        let value = if self.kind.is_blend() {
            2.0 - self.value
        } else if self.kind.is_signed() {
            -self.value
        } else {
            self.value
        };
        Self { value, ..self }
    }

    /// Non-negative distance from the identity parameter, in the kind's unit.
    pub fn strength(&self) -> f64 {
        use TransformKind::*;
        match self.kind {
            Invert | AutoContrast | Equalize => self.value.abs(),
            Solarize => 256.0 - self.value,
            Posterize => 8.0 - self.value,
            Color | Contrast | Brightness | Sharpness => (self.value - 1.0).abs(),
            Rotate | ShearX | ShearY | TranslateX | TranslateY | Cutout => self.value.abs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        use TransformKind::*;
        let v = self.value;
        let bad = |why: &str| {
            Err(Error::InvalidParam(format!(
                "{} value {v}: {why}",
                self.kind.name()
            )))
        };
        if !v.is_finite() {
            return bad("not finite");
        }
        match self.kind {
            Invert | AutoContrast | Equalize if v != 0.0 && v != 1.0 => bad("switch must be 0 or 1"),
            Rotate if v.abs() > 360.0 => bad("must be within ±360 degrees"),
            Solarize if !(0.0..=256.0).contains(&v) => bad("threshold must be in 0..=256"),
            Posterize if !(1.0..=8.0).contains(&v) || v.fract() != 0.0 => {
                bad("bits must be an integer in 1..=8")
            }
            Color | Contrast | Brightness | Sharpness if v < 0.0 => bad("blend factor must be >= 0"),
            ShearX | ShearY | TranslateX | TranslateY if v.abs() > 1.0 => {
                bad("fraction must be within ±1")
            }
            Cutout if !(0.0..=1.0).contains(&v) => bad("side fraction must be in 0..=1"),
            Cutout
                if !(0.0..=1.0).contains(&self.anchor.0) || !(0.0..=1.0).contains(&self.anchor.1) =>
            {
                bad("anchor must lie inside the image")
            }
            _ => Ok(()),
        }
    }
}

/// Maximum-strength parameter for magnitude level `level` in `space`.
///
/// The destruction space is linear in tenths: translate and shear fraction and
/// cutout side are all `level / 10`. The full space interpolates linearly over
/// levels 0..=30 from the identity to rotate 30°, shear 0.3, translate 0.45,
/// solarize threshold 0, posterize 4 bits and blend factor 1.9. Switch kinds
/// are off at level 0 and on otherwise. The returned value is unsigned (or, for
/// blends, above 1); use [`TransformParam::negated`] to flip it.
pub fn magnitude_to_param(
    kind: TransformKind,
    level: u32,
    space: AugmentSpace,
) -> Result<TransformParam> {
    if !space.contains(kind) {
        return Err(Error::KindNotInSpace {
            kind: kind.name(),
            space: space.name(),
        });
    }
    let max = space.max_level();
    if level > max {
        return Err(Error::MagnitudeOutOfRange { level, max });
    }
    let frac = f64::from(level) / f64::from(max);
    use TransformKind::*;
    let value = match space {
        AugmentSpace::Destruction => frac,
        AugmentSpace::Full14 => match kind {
            Invert | AutoContrast | Equalize => {
                if level == 0 {
                    0.0
                } else {
                    1.0
                }
            }
            Rotate => 30.0 * frac,
            Solarize => 256.0 * (1.0 - frac),
            Posterize => 8.0 - (4.0 * frac).round(),
            Color | Contrast | Brightness | Sharpness => 1.0 + 0.9 * frac,
            ShearX | ShearY => 0.3 * frac,
            TranslateX | TranslateY => 0.45 * frac,
            Cutout => unreachable!("cutout is not in the full space"),
        },
    };
    TransformParam::new(kind, value)
}

/// Applies one transform, returning a new image of the same dimensions.
pub fn apply(img: &Image, param: &TransformParam, fill: u8) -> Result<Image> {
    param.validate()?;
    use TransformKind::*;
    let v = param.value;
    let out = match param.kind {
        Invert | AutoContrast | Equalize if v == 0.0 => img.clone(),
        Invert => img.map_bytes(|b| 255 - b),
        AutoContrast => per_channel_lut(img, autocontrast_lut),
        Equalize => equalize(img),
        Rotate => rotate(img, v, fill),
        Solarize => img.map_bytes(|b| if f64::from(b) >= v { 255 - b } else { b }),
        Posterize => {
            let mask = 0xFFu8 << (8 - v as u32);
            img.map_bytes(|b| b & mask)
        }
        Color => {
            if img.channels == 1 {
                img.clone()
            } else {
                blend(img, &grayscale_rgb(img), v)
            }
        }
        Contrast => {
            let mean = luminance_mean(img);
            blend(img, &img.blank_like(mean), v)
        }
        Brightness => blend(img, &img.blank_like(0), v),
        Sharpness => blend(img, &smooth(img), v),
        ShearX => shear(img, v, true, fill),
        ShearY => shear(img, v, false, fill),
        TranslateX => translate(img, v, true, fill),
        TranslateY => translate(img, v, false, fill),
        Cutout => cutout(img, v, param.anchor, fill),
    };
    Ok(out)
}

/// Fraction of pixels whose every channel equals `fill`.
pub fn blank_fraction(img: &Image, fill: u8) -> f64 {
    let blank = img
        .data
        .chunks_exact(img.channels)
        .filter(|px| px.iter().all(|&b| b == fill))
        .count();
    blank as f64 / (img.width * img.height) as f64
}

fn translate(img: &Image, frac: f64, horizontal: bool, fill: u8) -> Image {
    let side = if horizontal { img.width } else { img.height };
    let shift = (frac * side as f64).round() as i64;
    let mut out = img.blank_like(fill);
    let (w, h, c) = (img.width as i64, img.height as i64, img.channels);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = if horizontal { (x - shift, y) } else { (x, y - shift) };
            if sx >= 0 && sx < w && sy >= 0 && sy < h {
                let src = ((sy * w + sx) as usize) * c;
                let dst = ((y * w + x) as usize) * c;
                out.data[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
            }
        }
    }
    out
}

/// Shear by `frac` of a right angle. The pivot line sits one pixel outside
/// the leading edge, so line `i` (row for shear-x, column for shear-y) moves
/// by `tan(frac * 90°) * (i + 1)` pixels and a full right angle removes every
/// pixel from view.
fn shear(img: &Image, frac: f64, horizontal: bool, fill: u8) -> Image {
    if frac.abs() >= 1.0 {
        return img.blank_like(fill);
    }
    let slope = (frac * FRAC_PI_2).tan();
    let (w, h, c) = (img.width as i64, img.height as i64, img.channels);
    let (lines, span) = if horizontal { (h, w) } else { (w, h) };
    let offsets: Vec<Option<i64>> = (0..lines)
        .map(|i| {
            let d = (slope * (i + 1) as f64).round();
            (d.abs() < span as f64).then_some(d as i64)
        })
        .collect();
    let mut out = img.blank_like(fill);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = if horizontal {
                match offsets[y as usize] {
                    Some(d) => (x - d, y),
                    None => continue,
                }
            } else {
                match offsets[x as usize] {
                    Some(d) => (x, y - d),
                    None => continue,
                }
            };
            if sx >= 0 && sx < w && sy >= 0 && sy < h {
                let src = ((sy * w + sx) as usize) * c;
                let dst = ((y * w + x) as usize) * c;
                out.data[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
            }
        }
    }
    out
}

fn rotate(img: &Image, degrees: f64, fill: u8) -> Image {
    let (w, h, c) = (img.width, img.height, img.channels);
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = img.blank_like(fill);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // inverse map: rotate the destination point by -theta (y axis points down)
            let sx = (cx + cos * dx - sin * dy).floor();
            let sy = (cy + sin * dx + cos * dy).floor();
            if sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 {
                let src = (sy as usize * w + sx as usize) * c;
                let dst = (y * w + x) * c;
                out.data[dst..dst + c].copy_from_slice(&img.data[src..src + c]);
            }
        }
    }
    out
}

fn cutout(img: &Image, side_frac: f64, anchor: (f64, f64), fill: u8) -> Image {
    let side = (side_frac * img.width.min(img.height) as f64).round() as i64;
    if side == 0 {
        return img.clone();
    }
    let x0 = (anchor.0 * img.width as f64 - side as f64 / 2.0).round() as i64;
    let y0 = (anchor.1 * img.height as f64 - side as f64 / 2.0).round() as i64;
    let clip = |lo: i64, n: usize| (lo.max(0) as usize, ((lo + side).max(0) as usize).min(n));
    let (xa, xb) = clip(x0, img.width);
    let (ya, yb) = clip(y0, img.height);
    let mut out = img.clone();
    let c = img.channels;
    for y in ya..yb {
        let row = y * img.width * c;
        out.data[row + xa * c..row + xb * c].fill(fill);
    }
    out
}

fn per_channel_lut(img: &Image, make_lut: fn(&[u32; 256]) -> [u8; 256]) -> Image {
    let c = img.channels;
    let luts: Vec<[u8; 256]> = (0..c)
        .map(|ch| make_lut(&channel_histogram(img, ch)))
        .collect();
    let mut out = img.clone();
    for (i, b) in out.data.iter_mut().enumerate() {
        *b = luts[i % c][*b as usize];
    }
    out
}

fn channel_histogram(img: &Image, ch: usize) -> [u32; 256] {
    let mut hist = [0u32; 256];
    for px in img.data.chunks_exact(img.channels) {
        hist[px[ch] as usize] += 1;
    }
    hist
}

fn identity_lut() -> [u8; 256] {
    std::array::from_fn(|i| i as u8)
}

/// Linear stretch of `[min, max]` onto `[0, 255]`, truncating.
fn autocontrast_lut(hist: &[u32; 256]) -> [u8; 256] {
    let lo = hist.iter().position(|&n| n > 0);
    let hi = hist.iter().rposition(|&n| n > 0);
    match (lo, hi) {
        (Some(lo), Some(hi)) if hi > lo => std::array::from_fn(|i| {
            let i = i.clamp(lo, hi);
            ((i - lo) * 255 / (hi - lo)) as u8
        }),
        _ => identity_lut(),
    }
}

/// CDF mapping `(cdf(v) - cdf(min)) * 255 / (n - cdf(min))`, truncating.
/// Returns `None` when the channel holds a single value.
fn equalize_lut(hist: &[u32; 256]) -> Option<[u8; 256]> {
    let n: u64 = hist.iter().map(|&h| u64::from(h)).sum();
    let first = hist.iter().position(|&h| h > 0)?;
    let cdf_min = u64::from(hist[first]);
    let denom = n - cdf_min;
    if denom == 0 {
        return None;
    }
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    for (i, &h) in hist.iter().enumerate() {
        cdf += u64::from(h);
        lut[i] = (cdf.saturating_sub(cdf_min) * 255 / denom) as u8;
    }
    Some(lut)
}

/// Histogram equalization iterated to its fixed point.
///
/// A single CDF pass can merge neighbouring bins, after which a second pass
/// would move values again. Once a pass maps the occupied bins injectively the
/// next pass is the identity, so iterating until that happens makes the
/// operator idempotent. Each merging pass removes at least one distinct value,
/// bounding the loop at 256 passes.
fn equalize(img: &Image) -> Image {
    let c = img.channels;
    let mut out = img.clone();
    for ch in 0..c {
        loop {
            let hist = channel_histogram(&out, ch);
            let Some(lut) = equalize_lut(&hist) else {
                break;
            };
            let mut seen = [false; 256];
            let mut injective = true;
            let mut changed = false;
            for (v, &h) in hist.iter().enumerate() {
                if h == 0 {
                    continue;
                }
                let m = lut[v] as usize;
                injective &= !seen[m];
                seen[m] = true;
                changed |= m != v;
            }
            if changed {
                for px in out.data.chunks_exact_mut(c) {
                    px[ch] = lut[px[ch] as usize];
                }
            }
            if injective {
                break;
            }
        }
    }
    out
}

/// ITU-R 601-2 luma, fixed point with rounding.
fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((u32::from(r) * 19595 + u32::from(g) * 38470 + u32::from(b) * 7471 + 0x8000) >> 16) as u8
}

fn grayscale_rgb(img: &Image) -> Image {
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        let l = luma(px[0], px[1], px[2]);
        px.fill(l);
    }
    out
}

fn luminance_mean(img: &Image) -> u8 {
    let sum: u64 = if img.channels == 3 {
        img.data
            .chunks_exact(3)
            .map(|px| u64::from(luma(px[0], px[1], px[2])))
            .sum()
    } else {
        img.data.iter().map(|&b| u64::from(b)).sum()
    };
    let n = (img.width * img.height) as f64;
    (sum as f64 / n + 0.5) as u8
}

/// 3x3 smoothing with centre weight 5 and neighbour weight 1; the one-pixel
/// border is copied unchanged.
fn smooth(img: &Image) -> Image {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut out = img.clone();
    if w < 3 || h < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for ch in 0..c {
                let mut acc = 0u32;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let v = u32::from(img.data[((y + dy - 1) * w + (x + dx - 1)) * c + ch]);
                        acc += if dx == 1 && dy == 1 { 5 * v } else { v };
                    }
                }
                out.data[(y * w + x) * c + ch] = ((acc + 6) / 13) as u8;
            }
        }
    }
    out
}

/// `factor * img + (1 - factor) * degenerate`, rounded and clamped.
fn blend(img: &Image, degenerate: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    for (o, (&a, &d)) in out
        .data
        .iter_mut()
        .zip(img.data.iter().zip(degenerate.data.iter()))
    {
        let v = factor * f64::from(a) + (1.0 - factor) * f64::from(d);
        *o = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}
