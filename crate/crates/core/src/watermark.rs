//! Pixel-space watermark compositing for the visual-layer probe.
//!
//! The watermark center is placed at a fractional anchor of the base image
//! (bottom-right by default). While the centered extent spills past the
//! right or bottom border the offending dimension is shrunk to
//! `min(d_w / 2, d_o - d_w)`, floored to one pixel. Blending is additive
//! (`I_o + alpha * I_w`) and clamped to `[0, 255]`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{decode_png, ImageBuffer};

pub const DEFAULT_ALPHA: f64 = 0.8;
pub const DEFAULT_ANCHOR: (f64, f64) = (0.9, 0.9);
pub const DEFAULT_PROBE_QUESTION: &str = "What is the last captcha number in the image?";
pub const DEFAULT_EXPECTED_ANSWER: &str = "8";

/// Shrink iterations allowed before placement is declared impossible.
pub const MAX_SHRINK_ITERATIONS: usize = 32;

static CAPTCHA_PNG: &[u8] = include_bytes!("../assets/captcha_f6ww8.png");

/// The bundled "f6ww8" CAPTCHA watermark.
pub fn default_watermark_image() -> &'static ImageBuffer {
    static IMG: OnceLock<ImageBuffer> = OnceLock::new();
    IMG.get_or_init(|| decode_png(CAPTCHA_PNG).expect("bundled watermark asset decodes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    /// `orig + alpha * wm`
    #[default]
    Additive,
    /// `(1 - alpha) * orig + alpha * wm`
    Convex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkSpec {
    pub image: ImageBuffer,
    pub alpha: f64,
    pub anchor_fraction: (f64, f64),
    pub scale: f64,
    pub probe_question: String,
    pub expected_answer: String,
    pub blend: BlendMode,
}

impl Default for WatermarkSpec {
    fn default() -> Self {
        Self::with_image(default_watermark_image().clone())
    }
}

impl WatermarkSpec {
    pub fn with_image(image: ImageBuffer) -> Self {
        Self {
            image,
            alpha: DEFAULT_ALPHA,
            anchor_fraction: DEFAULT_ANCHOR,
            scale: 1.0,
            probe_question: DEFAULT_PROBE_QUESTION.to_owned(),
            expected_answer: DEFAULT_EXPECTED_ANSWER.to_owned(),
            blend: BlendMode::Additive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param(
                "alpha",
                format!("{} not in [0, 1]", self.alpha),
            ));
        }
        let (ax, ay) = self.anchor_fraction;
        if !(ax > 0.0 && ax <= 1.0 && ay > 0.0 && ay <= 1.0) {
            return Err(Error::param(
                "anchor",
                format!("({ax}, {ay}) must lie in (0, 1]"),
            ));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::param(
                "scale",
                format!("{} must be positive", self.scale),
            ));
        }
        if self.expected_answer.is_empty() {
            return Err(Error::param("expected_answer", "must not be empty"));
        }
        Ok(())
    }
}

/// Where the (resized) watermark lands on the base image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    /// Watermark center in base-image coordinates.
    pub center: (u32, u32),
    /// Final watermark size after scaling and border shrinking.
    pub size: (u32, u32),
    /// Unclipped top-left corner; may be negative.
    pub origin: (i64, i64),
    /// Overlay rectangle clipped to the base image, `[x0, x1) x [y0, y1)`.
    pub rect: OverlayRect,
    pub shrink_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlayRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl OverlayRect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }
}

/// Computes the anchor, the shrink loop and the clipped overlay rectangle.
pub fn place_watermark(
    base: (u32, u32),
    watermark: (u32, u32),
    anchor_fraction: (f64, f64),
    scale: f64,
) -> Result<Placement> {
    let (xo, yo) = base;
    let cx = (anchor_fraction.0 * f64::from(xo)).floor() as u32;
    let cy = (anchor_fraction.1 * f64::from(yo)).floor() as u32;
    let scaled = |d: u32| ((f64::from(d) * scale).round().max(1.0)).min(f64::from(u32::MAX)) as u32;
    let (mut xw, mut yw) = (scaled(watermark.0), scaled(watermark.1));

    let overflows =
        |c: u32, d: u32, limit: u32| f64::from(c) + f64::from(d) / 2.0 > f64::from(limit);
    let shrink = |d: u32, limit: u32| -> u32 {
        let half = i64::from(d / 2);
        let room = i64::from(limit) - i64::from(d);
        half.min(room).max(1) as u32
    };

    let mut iterations = 0;
    while overflows(cx, xw, xo) || overflows(cy, yw, yo) {
        iterations += 1;
        if iterations > MAX_SHRINK_ITERATIONS {
            return Err(Error::Composition(format!(
                "watermark centered at ({cx}, {cy}) cannot fit a {xo}x{yo} image"
            )));
        }
        if overflows(cx, xw, xo) {
            xw = shrink(xw, xo);
        }
        if overflows(cy, yw, yo) {
            yw = shrink(yw, yo);
        }
    }

    let origin = (
        i64::from(cx) - i64::from(xw / 2),
        i64::from(cy) - i64::from(yw / 2),
    );
    let clip = |v: i64, hi: u32| v.clamp(0, i64::from(hi)) as u32;
    let rect = OverlayRect {
        x0: clip(origin.0, xo),
        y0: clip(origin.1, yo),
        x1: clip(origin.0 + i64::from(xw), xo),
        y1: clip(origin.1 + i64::from(yw), yo),
    };
    Ok(Placement {
        center: (cx, cy),
        size: (xw, yw),
        origin,
        rect,
        shrink_iterations: iterations,
    })
}

/// Composites `spec.image` onto `original`, returning the new image and its placement.
pub fn embed_watermark_placed(
    original: &ImageBuffer,
    spec: &WatermarkSpec,
) -> Result<(ImageBuffer, Placement)> {
    spec.validate()?;
    let wm = &spec.image;
    let placement = place_watermark(
        (original.width(), original.height()),
        (wm.width(), wm.height()),
        spec.anchor_fraction,
        spec.scale,
    )?;
    let mut out = original.clone();
    let (fw, fh) = placement.size;
    let base_color = 3usize;
    let rect = placement.rect;
    for y in rect.y0..rect.y1 {
        let dy = (i64::from(y) - placement.origin.1) as u64;
        let sy = (dy * u64::from(wm.height()) / u64::from(fh)) as u32;
        for x in rect.x0..rect.x1 {
            let dx = (i64::from(x) - placement.origin.0) as u64;
            let sx = (dx * u64::from(wm.width()) / u64::from(fw)) as u32;
            let wpx = wm.pixel(sx, sy);
            let alpha = if wm.has_alpha() {
                spec.alpha * f64::from(wpx[3]) / 255.0
            } else {
                spec.alpha
            };
            let off = out.offset(x, y);
            let dst = &mut out.data_mut()[off..off + base_color];
            for (d, &w) in dst.iter_mut().zip(&wpx[..base_color]) {
                *d = blend(*d, w, alpha, spec.blend);
            }
        }
    }
    Ok((out, placement))
}

pub fn embed_watermark(original: &ImageBuffer, spec: &WatermarkSpec) -> Result<ImageBuffer> {
    embed_watermark_placed(original, spec).map(|(img, _)| img)
}

fn blend(orig: u8, wm: u8, alpha: f64, mode: BlendMode) -> u8 {
    let (o, w) = (f64::from(orig), f64::from(wm));
    let v = match mode {
        BlendMode::Additive => o + alpha * w,
        BlendMode::Convex => (1.0 - alpha) * o + alpha * w,
    };
    // f64::round is half-away-from-zero
    v.round().clamp(0.0, 255.0) as u8
}
