//! Synthetic moving-shape videos and objectness images.
//!
//! Every frame is a smooth textured background with a few static clutter
//! objects, a striped target object and, depending on the scenario, a
//! distractor or an occluding bar. Frames are quantised to 8-bit levels so
//! the on-disk PPM round trip is exact, and ground-truth masks are the
//! visible target pixels.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{read_mask, write_mask, RgbImage};
use crate::maskops::{distance_transform, BinaryMask};
use crate::rng::{self, Rng};

/// Per-pixel Gaussian sensor noise added to every frame.
const NOISE_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioKind {
    AppearanceDrift,
    DistractorEntry,
    Occlusion,
    StaticControl,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] =
        [ScenarioKind::AppearanceDrift, ScenarioKind::DistractorEntry, ScenarioKind::Occlusion, ScenarioKind::StaticControl];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::AppearanceDrift => "appearance_drift",
            ScenarioKind::DistractorEntry => "distractor_entry",
            ScenarioKind::Occlusion => "occlusion",
            ScenarioKind::StaticControl => "static_control",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("ScenarioKind", format!("unknown scenario `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Scenario {
    /// 40 frames at 96x96.
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        Scenario { kind, frames: 40, height: 96, width: 96, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid("Scenario", format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.kind == ScenarioKind::Occlusion && self.frames < 16 {
            return Err(Error::invalid("Scenario", format!("occlusion needs at least 16 frames, got {}", self.frames)));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::invalid("Scenario", format!("resolution {}x{} below 32x32", self.height, self.width)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub name: String,
    pub frames: Vec<RgbImage>,
    pub gt_masks: Vec<BinaryMask>,
    /// Visible distractor pixels per frame, when the scenario has one.
    pub distractor_masks: Option<Vec<BinaryMask>>,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |detail: String| Err(Error::Sequence { name: self.name.clone(), detail });
        if self.frames.is_empty() {
            return err("no frames".into());
        }
        if self.gt_masks.len() != self.frames.len() {
            return err(format!("{} frames but {} masks", self.frames.len(), self.gt_masks.len()));
        }
        let dims = self.dims();
        if let Some(i) = self.frames.iter().position(|f| f.dims() != dims) {
            return err(format!("frame {i} is {:?}, expected {dims:?}", self.frames[i].dims()));
        }
        if let Some(i) = self.gt_masks.iter().position(|m| m.dims() != dims) {
            return err(format!("mask {i} is {:?}, expected {dims:?}", self.gt_masks[i].dims()));
        }
        if let Some(d) = &self.distractor_masks {
            if d.len() != self.frames.len() || d.iter().any(|m| m.dims() != dims) {
                return err("distractor masks do not match the frames".into());
            }
        }
        Ok(())
    }
}

/// `h` in degrees, `s` and `v` in `[0, 1]`.
fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Clone, Copy, Debug)]
enum ShapeClass {
    Ellipse,
    Rect,
    Triangle,
    Blob,
}

impl ShapeClass {
    fn random(rng: &mut Rng) -> Self {
        [ShapeClass::Ellipse, ShapeClass::Rect, ShapeClass::Triangle, ShapeClass::Blob][rng.random_range(0..4)]
    }
}

/// Striped surface colour in object-local coordinates.
#[derive(Clone, Copy, Debug)]
struct Texture {
    hue: f64,
    sat: f64,
    val: f64,
    stripe_amp: f64,
    stripe_period: f64,
    stripe_angle: f64,
}

impl Texture {
    fn random(rng: &mut Rng, hue: f64) -> Self {
        Texture {
            hue,
            sat: rng.random_range(0.55..0.9),
            val: rng.random_range(0.6..0.92),
            stripe_amp: rng.random_range(0.12..0.25),
            stripe_period: rng.random_range(5.0..9.0),
            stripe_angle: rng.random_range(0.0..PI),
        }
    }

    fn shade(&self, u: f64, v: f64) -> [f64; 3] {
        let phase = 2.0 * PI * (u * self.stripe_angle.cos() + v * self.stripe_angle.sin()) / self.stripe_period;
        let k = 1.0 + self.stripe_amp * phase.sin();
        hsv(self.hue, self.sat, self.val).map(|c| (c * k).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: ShapeClass,
    cx: f64,
    cy: f64,
    /// Half extents in pixels.
    rx: f64,
    ry: f64,
    angle: f64,
    /// Radial harmonics of blob outlines: amplitude/phase of the 2nd and 3rd.
    blob: [f64; 4],
}

impl Shape {
    fn random(rng: &mut Rng, class: ShapeClass, cx: f64, cy: f64, radius: f64) -> Self {
        let aspect: f64 = rng.random_range(0.7..1.3);
        Shape {
            class,
            cx,
            cy,
            rx: radius * aspect.sqrt(),
            ry: radius / aspect.sqrt(),
            angle: rng.random_range(0.0..PI),
            blob: [rng.random_range(0.1..0.25), rng.random_range(0.0..2.0 * PI), rng.random_range(0.05..0.2), rng.random_range(0.0..2.0 * PI)],
        }
    }

    /// Pixel-centre offset in the rotated object frame, in pixels.
    fn local(&self, y: usize, x: usize) -> (f64, f64) {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.angle.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let (u, v) = self.local(y, x);
        let (a, b) = (u / self.rx, v / self.ry);
        match self.class {
            ShapeClass::Ellipse => a * a + b * b <= 1.0,
            ShapeClass::Rect => a.abs() <= 0.85 && b.abs() <= 0.85,
            ShapeClass::Triangle => {
                // Equilateral triangle inscribed in a circle of radius 1.25.
                b >= -0.625 && b <= 1.25 - 3f64.sqrt() * a.abs()
            }
            ShapeClass::Blob => {
                let theta = b.atan2(a);
                let r = 1.0 + self.blob[0] * (2.0 * theta + self.blob[1]).cos() + self.blob[2] * (3.0 * theta + self.blob[3]).cos();
                (a * a + b * b).sqrt() <= 0.9 * r
            }
        }
    }

    fn bounding_radius(&self) -> f64 {
        self.rx.max(self.ry) * 1.5
    }

    fn mask(&self, h: usize, w: usize) -> BinaryMask {
        let r = self.bounding_radius();
        let (y0, y1) = span(self.cy, r, h);
        let (x0, x1) = span(self.cx, r, w);
        let mut m = BinaryMask::empty(h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(y, x) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }
}

fn span(c: f64, r: f64, n: usize) -> (usize, usize) {
    let lo = (c - r).floor().max(0.0) as usize;
    let hi = ((c + r).ceil().max(0.0) as usize + 1).min(n);
    (lo.min(n), hi)
}

/// Smooth colour field: base colour plus a few plane waves.
struct Background {
    base: [f64; 3],
    waves: Vec<([f64; 2], f64, [f64; 3])>,
}

impl Background {
    fn random(rng: &mut Rng) -> Self {
        let base = hsv(rng.random_range(0.0..360.0), rng.random_range(0.1..0.35), rng.random_range(0.35..0.7));
        let waves = (0..3)
            .map(|_| {
                let len = rng.random_range(12.0..40.0);
                let dir = rng.random_range(0.0..2.0 * PI);
                let k = [2.0 * PI * dir.cos() / len, 2.0 * PI * dir.sin() / len];
                let amp = [0, 1, 2].map(|_| rng.random_range(0.03..0.1));
                (k, rng.random_range(0.0..2.0 * PI), amp)
            })
            .collect();
        Background { base, waves }
    }

    fn render(&self, h: usize, w: usize) -> RgbImage {
        let mut img = RgbImage::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let mut rgb = self.base;
                for (k, phase, amp) in &self.waves {
                    let s = (k[0] * x as f64 + k[1] * y as f64 + phase).sin();
                    for c in 0..3 {
                        rgb[c] += amp[c] * s;
                    }
                }
                img.set_pixel(y, x, rgb.map(|v| v.clamp(0.0, 1.0)));
            }
        }
        img
    }
}

fn paint(img: &mut RgbImage, shape: &Shape, tex: &Texture) -> BinaryMask {
    let (h, w) = img.dims();
    let mask = shape.mask(h, w);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                let (u, v) = shape.local(y, x);
                img.set_pixel(y, x, tex.shade(u, v));
            }
        }
    }
    mask
}

fn add_noise_and_quantize(img: &mut RgbImage, rng: &mut Rng) {
    let normal = Normal::new(0.0, NOISE_STD).expect("valid std");
    for v in img.data_mut() {
        *v += normal.sample(rng);
    }
    img.quantize();
}

/// Reflects `x` into `[lo, hi]` (triangle wave), for bouncing motion.
fn bounce(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (x - lo).rem_euclid(2.0 * span);
    lo + if m <= span { m } else { 2.0 * span - m }
}

/// A moving, optionally morphing textured object.
struct Actor {
    class: ShapeClass,
    base: Shape,
    tex: Texture,
    start: [f64; 2],
    vel: [f64; 2],
    wobble: [f64; 3],
    bounds: [f64; 4],
    hue_drift: f64,
    scale_drift: f64,
    aspect_drift: f64,
    spin: f64,
}

impl Actor {
    fn at(&self, t: usize, tau: f64) -> (Shape, Texture) {
        let tf = t as f64;
        let x = self.start[0] + self.vel[0] * tf + self.wobble[0] * (self.wobble[1] * tf + self.wobble[2]).sin();
        let y = self.start[1] + self.vel[1] * tf + self.wobble[0] * (self.wobble[1] * tf * 0.7 + self.wobble[2] * 1.3).cos();
        let mut s = self.base;
        s.class = self.class;
        s.cx = bounce(x, self.bounds[0], self.bounds[1]);
        s.cy = bounce(y, self.bounds[2], self.bounds[3]);
        let scale = 1.0 + self.scale_drift * tau;
        let aspect = 1.0 + self.aspect_drift * tau;
        s.rx *= scale * aspect.sqrt();
        s.ry *= scale / aspect.sqrt();
        s.angle += self.spin * tau;
        let mut tex = self.tex;
        tex.hue += self.hue_drift * tau;
        tex.stripe_angle += self.spin * tau;
        (s, tex)
    }
}

struct Clutter {
    shape: Shape,
    tex: Texture,
}

fn random_clutter(rng: &mut Rng, count: usize, h: usize, w: usize, unit: f64, avoid_hue: f64) -> Vec<Clutter> {
    (0..count)
        .map(|_| {
            let mut hue = rng.random_range(0.0..360.0);
            while hue_distance(hue, avoid_hue) < 70.0 {
                hue = rng.random_range(0.0..360.0);
            }
            let r = rng.random_range(5.0..9.0) * unit;
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let class = ShapeClass::random(rng);
            Clutter { shape: Shape::random(rng, class, cx, cy, r), tex: Texture::random(rng, hue) }
        })
        .collect()
}

/// Generates one deterministic video for `sc`.
pub fn generate_sequence(sc: &Scenario) -> Result<VideoSequence> {
    sc.validate()?;
    let name = format!("{}_{:016x}", sc.kind, sc.seed);
    // Rejection loop: a few layouts violate the scenario's geometric
    // guarantees and are redrawn from the next attempt's stream.
    for attempt in 0..1000u64 {
        let mut rng = rng::stream(sc.seed, &[sc.kind.tag(), attempt]);
        if let Some(seq) = try_generate(sc, &mut rng, &name) {
            return Ok(seq);
        }
    }
    Err(Error::Sequence { name, detail: "could not satisfy scenario constraints".into() })
}

/// Minimum clearance between target and distractor, as a fraction of the
/// image diagonal; slightly above the default hard-negative distance.
pub const DISTRACTOR_CLEARANCE_REL: f64 = 0.25;

fn try_generate(sc: &Scenario, rng: &mut Rng, name: &str) -> Option<VideoSequence> {
    let (h, w, t_len) = (sc.height, sc.width, sc.frames);
    let (hf, wf) = (h as f64, w as f64);
    let unit = hf.min(wf) / 96.0;
    let bg = Background::random(rng);
    let hue0 = rng.random_range(0.0..360.0);
    let class = ShapeClass::random(rng);
    let radius = rng.random_range(9.0..13.0) * unit;
    let margin = radius * 0.6;
    let mut target = Actor {
        class,
        base: Shape::random(rng, class, 0.0, 0.0, radius),
        tex: Texture::random(rng, hue0),
        start: [rng.random_range(margin..wf - margin), rng.random_range(margin..hf - margin)],
        vel: {
            let speed = rng.random_range(0.5..1.1) * unit;
            let dir = rng.random_range(0.0..2.0 * PI);
            [speed * dir.cos(), speed * dir.sin()]
        },
        wobble: [rng.random_range(0.5..2.0) * unit, rng.random_range(0.15..0.4), rng.random_range(0.0..2.0 * PI)],
        bounds: [margin, wf - margin, margin, hf - margin],
        hue_drift: 0.0,
        scale_drift: 0.0,
        aspect_drift: 0.0,
        spin: 0.0,
    };
    let mut clutter_count = rng.random_range(2..=3);
    let mut distractor = None;
    let mut occluder = None;
    match sc.kind {
        ScenarioKind::AppearanceDrift => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            target.hue_drift = sign * rng.random_range(100.0..160.0);
            target.scale_drift = rng.random_range(-0.3..0.4);
            target.aspect_drift = rng.random_range(-0.35..0.5);
            target.spin = rng.random_range(-1.5..1.5);
        }
        ScenarioKind::StaticControl => {
            target.vel = target.vel.map(|v| v * 0.3);
        }
        ScenarioKind::DistractorEntry => {
            // Target and distractor keep to opposite corners.
            let corner = rng.random_range(0..4);
            let (tx, ty) = ([0.25, 0.75][corner % 2], [0.25, 0.75][corner / 2]);
            let box_half = 0.1;
            target.bounds = [(tx - box_half) * wf, (tx + box_half) * wf, (ty - box_half) * hf, (ty + box_half) * hf];
            target.start = [tx * wf, ty * hf];
            target.vel = target.vel.map(|v| v * 0.5);
            target.base.rx = target.base.rx.min(10.0 * unit);
            target.base.ry = target.base.ry.min(10.0 * unit);
            let (dx, dy) = (1.0 - tx, 1.0 - ty);
            let mut d = Actor {
                class,
                base: Shape::random(rng, class, 0.0, 0.0, radius * 0.85),
                tex: Texture { hue: hue0 + rng.random_range(25.0..40.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }, ..target.tex },
                start: [0.0; 2],
                vel: [0.0; 2],
                wobble: [rng.random_range(0.5..1.5) * unit, rng.random_range(0.15..0.4), rng.random_range(0.0..2.0 * PI)],
                bounds: [0.0, wf, 0.0, hf],
                hue_drift: 0.0,
                scale_drift: 0.0,
                aspect_drift: 0.0,
                spin: 0.0,
            };
            d.base.rx = d.base.rx.min(9.0 * unit);
            d.base.ry = d.base.ry.min(9.0 * unit);
            let entry = rng.random_range(t_len / 4..=t_len / 3).max(1);
            distractor = Some((d, entry, [dx * wf, dy * hf], [tx, ty]));
            clutter_count = rng.random_range(1..=2);
        }
        ScenarioKind::Occlusion => {
            let speed = rng.random_range(1.3..1.8) * unit;
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let extent = target.base.bounding_radius() * 2.0;
            let hidden = rng.random_range(4..=6) as f64;
            let band = extent + speed * hidden;
            let t_c = rng.random_range(0.35..0.5) * t_len as f64;
            let xc = wf / 2.0;
            target.vel = [dir * speed, 0.0];
            target.start = [xc - dir * speed * t_c, rng.random_range(0.3..0.7) * hf];
            target.wobble[0] = 0.5 * unit;
            target.bounds = [-wf, 2.0 * wf, margin, hf - margin];
            occluder = Some((xc - band / 2.0, xc + band / 2.0, hsv(rng.random_range(0.0..360.0), 0.15, rng.random_range(0.3..0.6))));
        }
    }
    let clutter = random_clutter(rng, clutter_count, h, w, unit, hue0);
    let mut bg_img = bg.render(h, w);
    for c in &clutter {
        paint(&mut bg_img, &c.shape, &c.tex);
    }
    let clearance = DISTRACTOR_CLEARANCE_REL * hf.hypot(wf);
    let mut frames = Vec::with_capacity(t_len);
    let mut masks = Vec::with_capacity(t_len);
    let mut distractor_masks = distractor.as_ref().map(|_| Vec::with_capacity(t_len));
    for t in 0..t_len {
        let tau = t as f64 / (t_len - 1) as f64;
        let mut img = bg_img.clone();
        let mut dmask = None;
        if let Some((d, entry, home, _)) = &distractor {
            if t >= *entry {
                // Slides in from outside the frame towards its home corner.
                let k = ((t - entry) as f64 / 6.0).min(1.0);
                let (sx, sy) = (home[0] + (home[0] - wf / 2.0) * 1.2 * (1.0 - k), home[1] + (home[1] - hf / 2.0) * 1.2 * (1.0 - k));
                let (mut s, tex) = d.at(t, tau);
                s.cx = sx + d.wobble[0] * (d.wobble[1] * t as f64 + d.wobble[2]).sin();
                s.cy = sy + d.wobble[0] * (d.wobble[1] * t as f64).cos();
                dmask = Some(paint(&mut img, &s, &tex));
            }
        }
        let (shape, tex) = target.at(t, tau);
        let mut gt = paint(&mut img, &shape, &tex);
        if let Some((x0, x1, rgb)) = occluder {
            for y in 0..h {
                for x in 0..w {
                    let xc = x as f64 + 0.5;
                    if xc >= x0 && xc <= x1 {
                        let shade = 1.0 + 0.08 * ((y as f64) * 0.9).sin();
                        img.set_pixel(y, x, rgb.map(|c| (c * shade).clamp(0.0, 1.0)));
                        gt.set(y, x, false);
                    }
                }
            }
        }
        if gt.count() == 0 && t == 0 {
            return None;
        }
        if let (Some(dm), Some(all)) = (dmask, distractor_masks.as_mut()) {
            if !dm.is_empty() {
                let dt = distance_transform(&gt);
                let min_d = dm.bits().iter().zip(dt.values()).filter(|(b, _)| **b).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
                if min_d <= clearance {
                    return None;
                }
            }
            all.push(dm.minus(&gt).ok()?);
        } else if let Some(all) = distractor_masks.as_mut() {
            all.push(BinaryMask::empty(h, w));
        }
        let mut noise = rng::stream(sc.seed, &[sc.kind.tag(), 1 << 32 | t as u64]);
        add_noise_and_quantize(&mut img, &mut noise);
        frames.push(img);
        masks.push(gt);
    }
    if masks[0].count() < (40.0 * unit * unit) as usize {
        return None;
    }
    if sc.kind == ScenarioKind::Occlusion {
        let hidden = masks.iter().filter(|m| m.is_empty()).count();
        if hidden < 3 || masks.last().is_none_or(|m| m.count() < masks[0].count() / 2) {
            return None;
        }
    }
    Some(VideoSequence { name: name.to_string(), frames, gt_masks: masks, distractor_masks })
}

/// Images with one to four objects of mixed shape classes; every object is
/// foreground. Foreground covers between 5% and 60% of each image.
pub fn generate_objectness_dataset(seed: u64, count: usize, height: usize, width: usize) -> Result<Vec<(RgbImage, BinaryMask)>> {
    if count == 0 {
        return Err(Error::EmptyDataset("generate_objectness_dataset"));
    }
    if height < 32 || width < 32 {
        return Err(Error::invalid("generate_objectness_dataset", format!("resolution {height}x{width} below 32x32")));
    }
    let unit = height.min(width) as f64 / 96.0;
    Ok((0..count)
        .map(|i| {
            for attempt in 0u64.. {
                let mut rng = rng::stream(seed, &[rng::tag::OBJECTNESS_DATA, i as u64, attempt]);
                let mut img = Background::random(&mut rng).render(height, width);
                let mut mask = BinaryMask::empty(height, width);
                for _ in 0..rng.random_range(1..=4) {
                    let r = rng.random_range(6.0..20.0) * unit;
                    let cx = rng.random_range(0.0..width as f64);
                    let cy = rng.random_range(0.0..height as f64);
                    let class = ShapeClass::random(&mut rng);
                    let shape = Shape::random(&mut rng, class, cx, cy, r);
                    let hue = rng.random_range(0.0..360.0);
                    let tex = Texture::random(&mut rng, hue);
                    mask = mask.or(&paint(&mut img, &shape, &tex)).expect("same dims");
                }
                let frac = mask.count() as f64 / (height * width) as f64;
                if (0.05..=0.6).contains(&frac) {
                    add_noise_and_quantize(&mut img, &mut rng);
                    return (img, mask);
                }
            }
            unreachable!("attempt loop is unbounded")
        })
        .collect())
}

/// Geometric and photometric augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub gamma: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { flip: false, scale: 1.0, gamma: 1.0 };

    /// Flip with probability 0.5, scale ~ U[0.7, 1.3], gamma log-uniform
    /// in [0.7, 1.4].
    pub fn sample(rng: &mut Rng) -> Self {
        AugmentParams {
            flip: rng.random_bool(0.5),
            scale: rng.random_range(0.7..=1.3),
            gamma: rng.random_range(0.7f64.ln()..=1.4f64.ln()).exp(),
        }
    }

    /// Source coordinate (in pixel units, centre convention) sampled by
    /// output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let x = if self.flip { w - 1 - x } else { x };
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        ((y as f64 + 0.5 - cy) / self.scale + cy - 0.5, (x as f64 + 0.5 - cx) / self.scale + cx - 0.5)
    }

    /// Output coordinate at which source pixel `(y, x)` lands.
    fn target(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let ty = (y as f64 + 0.5 - cy) * self.scale + cy - 0.5;
        let tx = (x as f64 + 0.5 - cx) * self.scale + cx - 0.5;
        (ty, if self.flip { w as f64 - 1.0 - tx } else { tx })
    }
}

/// Bilinear sample of a single plane with edge clamping.
fn sample_bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn nearest(v: f64, n: usize) -> usize {
    ((v + 0.5).floor().max(0.0) as usize).min(n - 1)
}

pub fn augment_image(image: &RgbImage, p: &AugmentParams) -> RgbImage {
    if *p == AugmentParams::IDENTITY {
        return image.clone();
    }
    let (h, w) = image.dims();
    let mut out = RgbImage::filled(h, w, [0.0; 3]);
    for c in 0..3 {
        let plane = &image.data()[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = p.source(y, x, h, w);
                let v = sample_bilinear(plane, h, w, sy, sx).clamp(0.0, 1.0);
                out.set(c, y, x, v.powf(p.gamma));
            }
        }
    }
    out
}

pub fn augment_mask(mask: &BinaryMask, p: &AugmentParams) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(h, w, |y, x| {
        let (sy, sx) = p.source(y, x, h, w);
        mask.get(nearest(sy, h), nearest(sx, w))
    })
}

/// Applies `p` to an aligned image/mask pair.
pub fn augment_with(image: &RgbImage, mask: &BinaryMask, p: &AugmentParams) -> (RgbImage, BinaryMask) {
    (augment_image(image, p), augment_mask(mask, p))
}

/// Samples parameters from the stream named by `seed` and applies them.
pub fn augment(image: &RgbImage, mask: &BinaryMask, seed: u64) -> (RgbImage, BinaryMask) {
    let p = AugmentParams::sample(&mut rng::stream(seed, &[]));
    augment_with(image, mask, &p)
}

/// Maps a per-pixel map computed on an augmented image back to the original
/// geometry (bilinear, edge-clamped). Gamma has no geometric effect.
pub fn unwarp_plane(plane: &[f64], h: usize, w: usize, p: &AugmentParams) -> Vec<f64> {
    if !p.flip && p.scale == 1.0 {
        return plane.to_vec();
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = p.target(y, x, h, w);
            out.push(sample_bilinear(plane, h, w, ty, tx));
        }
    }
    out
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:05}.{ext}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `dir/frames/00000.ppm`, `dir/masks/00000.pgm` and, when present,
/// `dir/distractors/00000.pgm`.
pub fn export_sequence(seq: &VideoSequence, dir: &Path) -> Result<()> {
    seq.validate()?;
    let frames = dir.join("frames");
    let masks = dir.join("masks");
    create_dir(&frames)?;
    create_dir(&masks)?;
    for (i, (f, m)) in seq.frames.iter().zip(&seq.gt_masks).enumerate() {
        f.write_ppm(&frames.join(frame_name(i, "ppm")))?;
        write_mask(m, &masks.join(frame_name(i, "pgm")))?;
    }
    if let Some(ds) = &seq.distractor_masks {
        let dd = dir.join("distractors");
        create_dir(&dd)?;
        for (i, m) in ds.iter().enumerate() {
            write_mask(m, &dd.join(frame_name(i, "pgm")))?;
        }
    }
    Ok(())
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads a sequence in the layout written by [`export_sequence`]; the
/// sequence name is the directory name.
pub fn load_sequence(dir: &Path) -> Result<VideoSequence> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let frames = sorted_files(&dir.join("frames"), "ppm")?.iter().map(|p| RgbImage::read_ppm(p)).collect::<Result<Vec<_>>>()?;
    let gt_masks = sorted_files(&dir.join("masks"), "pgm")?.iter().map(|p| read_mask(p)).collect::<Result<Vec<_>>>()?;
    let dd = dir.join("distractors");
    let distractor_masks = if dd.is_dir() {
        Some(sorted_files(&dd, "pgm")?.iter().map(|p| read_mask(p)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let seq = VideoSequence { name, frames, gt_masks, distractor_masks };
    seq.validate()?;
    Ok(seq)
}

/// Loads every sequence directory under `dir`, sorted by name.
pub fn load_split(dir: &Path) -> Result<Vec<VideoSequence>> {
    let mut dirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_sequence(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskops::iou;

    #[test]
    fn sequences_are_deterministic() {
        for kind in ScenarioKind::ALL {
            let frames = if kind == ScenarioKind::Occlusion { 20 } else { 12 };
            let sc = Scenario { frames, ..Scenario::new(kind, 5) };
            let a = generate_sequence(&sc).unwrap();
            assert_eq!(a, generate_sequence(&sc).unwrap());
            a.validate().unwrap();
            assert_eq!(a.len(), frames);
            assert!(a.frames.iter().all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
            assert!(!a.gt_masks[0].is_empty());
        }
        let a = generate_sequence(&Scenario::new(ScenarioKind::AppearanceDrift, 1)).unwrap();
        let b = generate_sequence(&Scenario::new(ScenarioKind::AppearanceDrift, 2)).unwrap();
        assert_ne!(a.frames[0], b.frames[0]);
        assert!(generate_sequence(&Scenario { frames: 10, ..Scenario::new(ScenarioKind::Occlusion, 1) }).is_err());
        assert!(generate_sequence(&Scenario { frames: 1, ..Scenario::new(ScenarioKind::StaticControl, 1) }).is_err());
    }

    #[test]
    fn occlusion_hides_target_for_three_frames() {
        for seed in 0..6 {
            let seq = generate_sequence(&Scenario::new(ScenarioKind::Occlusion, seed)).unwrap();
            let hidden: Vec<usize> = (0..seq.len()).filter(|&t| seq.gt_masks[t].is_empty()).collect();
            assert!(hidden.len() >= 3, "seed {seed}: {hidden:?}");
            // Hidden frames are contiguous and the target comes back.
            assert_eq!(hidden.last().unwrap() - hidden[0] + 1, hidden.len());
            assert!(!seq.gt_masks.last().unwrap().is_empty());
        }
    }

    #[test]
    fn distractor_enters_beyond_the_negative_distance() {
        let d = 220.0 / 854f64.hypot(480.0) * 96f64.hypot(96.0);
        for seed in 0..6 {
            let seq = generate_sequence(&Scenario::new(ScenarioKind::DistractorEntry, seed)).unwrap();
            let dm = seq.distractor_masks.as_ref().unwrap();
            let entry = dm.iter().position(|m| !m.is_empty()).expect("distractor appears");
            assert!(entry > 0);
            let centroid = |m: &BinaryMask| {
                let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
                for y in 0..m.height() {
                    for x in 0..m.width() {
                        if m.get(y, x) {
                            sy += y as f64;
                            sx += x as f64;
                            n += 1.0;
                        }
                    }
                }
                (sy / n, sx / n)
            };
            let (a, b) = (centroid(&dm[entry]), centroid(&seq.gt_masks[entry]));
            assert!((a.0 - b.0).hypot(a.1 - b.1) > d, "seed {seed}");
            for t in entry..seq.len() {
                let dt = distance_transform(&seq.gt_masks[t]);
                for y in 0..96 {
                    for x in 0..96 {
                        if dm[t].get(y, x) {
                            assert!(dt.get(y, x) > d, "seed {seed} frame {t}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn objectness_dataset_properties() {
        let one = generate_objectness_dataset(3, 1, 96, 96).unwrap();
        assert_eq!(one.len(), 1);
        let set = generate_objectness_dataset(3, 40, 96, 96).unwrap();
        assert_eq!(set[0], one[0]);
        assert_eq!(set, generate_objectness_dataset(3, 40, 96, 96).unwrap());
        for (img, mask) in &set {
            let frac = mask.count() as f64 / (96.0 * 96.0);
            assert!((0.05..=0.6).contains(&frac), "{frac}");
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(generate_objectness_dataset(3, 0, 96, 96).is_err());
    }

    #[test]
    fn identity_and_double_flip() {
        let seq = generate_sequence(&Scenario { frames: 2, ..Scenario::new(ScenarioKind::StaticControl, 9) }).unwrap();
        let (img, mask) = (&seq.frames[0], &seq.gt_masks[0]);
        let (i2, m2) = augment_with(img, mask, &AugmentParams::IDENTITY);
        assert_eq!((&i2, &m2), (img, mask));
        let flip = AugmentParams { flip: true, ..AugmentParams::IDENTITY };
        let (fi, fm) = augment_with(img, mask, &flip);
        assert_ne!(&fm, mask);
        assert_eq!(augment_with(&fi, &fm, &flip), (img.clone(), mask.clone()));
    }

    #[test]
    fn warped_mask_matches_rendered_shape() {
        // Rendering a shape at scale s about the centre equals warping its
        // mask, up to pixels whose centres sit on the outline.
        let mut rng = rng::stream(1, &[]);
        let shape = Shape::random(&mut rng, ShapeClass::Ellipse, 48.0, 48.0, 16.0);
        let mask = shape.mask(96, 96);
        for p in [AugmentParams { flip: true, scale: 1.25, gamma: 0.8 }, AugmentParams { flip: false, scale: 0.75, gamma: 1.2 }] {
            let warped = augment_mask(&mask, &p);
            let mut analytic = shape;
            analytic.rx *= p.scale;
            analytic.ry *= p.scale;
            if p.flip {
                analytic.angle = PI - analytic.angle;
            }
            let a = analytic.mask(96, 96);
            assert!(iou(&warped, &a).unwrap() > 0.93, "{p:?}");
        }
    }

    #[test]
    fn augmentation_stays_binary_and_in_range() {
        let seq = generate_sequence(&Scenario { frames: 2, ..Scenario::new(ScenarioKind::AppearanceDrift, 4) }).unwrap();
        for seed in 0..10 {
            let (img, mask) = augment(&seq.frames[0], &seq.gt_masks[0], seed);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(mask.dims(), (96, 96));
        }
        let mut rng = rng::stream(2, &[]);
        for _ in 0..200 {
            let p = AugmentParams::sample(&mut rng);
            assert!((0.7..=1.3).contains(&p.scale) && (0.7..=1.4 + 1e-12).contains(&p.gamma));
        }
    }

    #[test]
    fn unwarp_inverts_geometry_on_smooth_maps() {
        let (h, w) = (48, 48);
        let plane: Vec<f64> = (0..h * w).map(|i| ((i / w) as f64 * 0.1).sin() * ((i % w) as f64 * 0.07).cos()).collect();
        let img = RgbImage::new(h, w, plane.iter().chain(&plane).chain(&plane).map(|v| 0.5 + 0.4 * v).collect()).unwrap();
        let p = AugmentParams { flip: true, scale: 1.2, gamma: 1.0 };
        let warped = augment_image(&img, &p);
        let back = unwarp_plane(&warped.data()[..h * w], h, w, &p);
        for y in 8..40 {
            for x in 8..40 {
                assert!((back[y * w + x] - img.get(0, y, x)).abs() < 0.02);
            }
        }
    }

    #[test]
    fn export_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut seq = generate_sequence(&Scenario { frames: 4, ..Scenario::new(ScenarioKind::DistractorEntry, 3) }).unwrap();
        let path = dir.path().join(&seq.name);
        export_sequence(&seq, &path).unwrap();
        assert!(path.join("frames/00003.ppm").is_file());
        let back = load_sequence(&path).unwrap();
        assert_eq!(back, seq);
        seq.distractor_masks = None;
        assert_eq!(load_split(dir.path()).unwrap().len(), 1);
    }
}
