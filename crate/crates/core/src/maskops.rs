//! Binary mask geometry: erosion, exact Euclidean distance transform,
//! positive/negative example selection and intersection-over-union.

use crate::error::{Error, Result};
use crate::posteriors::Posteriors;

/// `height x width` foreground map, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("BinaryMask", format!("dimensions must be positive, got {height}x{width}")));
        }
        if bits.len() != height * width {
            return Err(Error::shape(
                "BinaryMask",
                format!("{height}x{width} mask needs {} bits, got {}", height * width, bits.len()),
            ));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        BinaryMask { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        let mut m = Self::empty(height, width);
        m.bits.fill(true);
        m
    }

    /// Builds a mask by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(height, width);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(y, x);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
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

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn same_dims(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.height, self.width, other.height, other.width),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, other: &BinaryMask, op: &'static str, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.same_dims(other, op)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Ok(BinaryMask { height: self.height, width: self.width, bits })
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, "and", |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, "or", |a, b| a || b)
    }

    /// Set difference `self \ other`.
    pub fn minus(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, "minus", |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Nearest-neighbour resampling to `height x width` (pixel centers).
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
            self.get(sy, sx)
        })
    }
}

/// Per-pixel Euclidean distance to the nearest foreground pixel of a mask;
/// `+inf` everywhere when the mask is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DistanceMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Erosion with a `size x size` square centered on each pixel. Pixels
/// outside the image count as background.
pub fn erode(mask: &BinaryMask, size: usize) -> Result<BinaryMask> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::invalid("erode", format!("structuring element size must be odd and >= 1, got {size}")));
    }
    let r = size / 2;
    let (h, w) = mask.dims();
    // Separable: a window is all-foreground iff each of its rows' horizontal
    // runs is, so erode rows first and then columns.
    let horizontal = erode_lines(&mask.bits, h, w, r, true);
    let bits = erode_lines(&horizontal, h, w, r, false);
    Ok(BinaryMask { height: h, width: w, bits })
}

fn erode_lines(bits: &[bool], h: usize, w: usize, r: usize, rows: bool) -> Vec<bool> {
    let (lines, len) = if rows { (h, w) } else { (w, h) };
    let at = |line: usize, i: usize| if rows { line * w + i } else { i * w + line };
    let mut out = vec![false; bits.len()];
    let mut prefix = vec![0usize; len + 1];
    for line in 0..lines {
        for i in 0..len {
            prefix[i + 1] = prefix[i] + bits[at(line, i)] as usize;
        }
        for i in 0..len {
            if i < r || i + r >= len {
                continue;
            }
            out[at(line, i)] = prefix[i + r + 1] - prefix[i - r] == 2 * r + 1;
        }
    }
    out
}

/// Exact Euclidean distance transform using the separable lower-envelope
/// method on squared distances (columns, then rows).
pub fn distance_transform(mask: &BinaryMask) -> DistanceMap {
    let (h, w) = mask.dims();
    let mut sq: Vec<f64> = mask.bits.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let mut f = vec![0.0; h.max(w)];
    let mut d = vec![0.0; h.max(w)];
    let mut env = Envelope::with_capacity(h.max(w));
    for x in 0..w {
        for y in 0..h {
            f[y] = sq[y * w + x];
        }
        env.transform(&f[..h], &mut d[..h]);
        for y in 0..h {
            sq[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&sq[y * w..(y + 1) * w]);
        env.transform(&f[..w], &mut d[..w]);
        sq[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    DistanceMap { height: h, width: w, values: sq.into_iter().map(f64::sqrt).collect() }
}

/// Scratch space for the 1-D squared-distance transform
/// `d[q] = min_p (q - p)^2 + f[p]`.
struct Envelope {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope { sites: Vec::with_capacity(n), bounds: Vec::with_capacity(n + 1) }
    }

    fn transform(&mut self, f: &[f64], d: &mut [f64]) {
        self.sites.clear();
        self.bounds.clear();
        let key = |q: usize| f[q] + (q * q) as f64;
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                let Some(&v) = self.sites.last() else {
                    self.sites.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let s = (key(q) - key(v)) / (2.0 * (q as f64 - v as f64));
                if s <= *self.bounds.last().unwrap() {
                    self.sites.pop();
                    self.bounds.pop();
                } else {
                    self.sites.push(q);
                    self.bounds.push(s);
                    break;
                }
            }
        }
        if self.sites.is_empty() {
            d.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, out) in d.iter_mut().enumerate() {
            while k + 1 < self.sites.len() && self.bounds[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.sites[k];
            let dq = q as f64 - p as f64;
            *out = dq * dq + f[p];
        }
    }
}

/// Pixels strictly farther than `d` from the source foreground.
pub fn select_negatives(dt: &DistanceMap, d: f64) -> Result<BinaryMask> {
    if d.is_nan() || d < 0.0 {
        return Err(Error::invalid("select_negatives", format!("distance threshold must be >= 0, got {d}")));
    }
    let bits = dt.values.iter().map(|&v| v > d).collect();
    Ok(BinaryMask { height: dt.height, width: dt.width, bits })
}

/// `(posteriors > alpha) \ negatives`.
pub fn select_positives(post: &Posteriors, alpha: f64, negatives: &BinaryMask) -> Result<BinaryMask> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("select_positives", format!("alpha must lie in (0, 1), got {alpha}")));
    }
    threshold_excluding(post, alpha, negatives, "select_positives")
}

/// `(posteriors > 0.5) \ negatives`.
pub fn threshold_minus_negatives(post: &Posteriors, negatives: &BinaryMask) -> Result<BinaryMask> {
    threshold_excluding(post, 0.5, negatives, "threshold_minus_negatives")
}

fn threshold_excluding(post: &Posteriors, t: f64, negatives: &BinaryMask, op: &'static str) -> Result<BinaryMask> {
    if post.dims() != negatives.dims() {
        return Err(Error::shape(
            op,
            format!("posteriors {:?} vs negatives {:?}", post.dims(), negatives.dims()),
        ));
    }
    let bits = post
        .foreground()
        .iter()
        .zip(&negatives.bits)
        .map(|(&p, &neg)| p > t && !neg)
        .collect();
    Ok(BinaryMask { height: negatives.height, width: negatives.width, bits })
}

/// Plain `posteriors > 0.5`.
pub fn threshold(post: &Posteriors) -> BinaryMask {
    let (h, w) = post.dims();
    BinaryMask { height: h, width: w, bits: post.foreground().iter().map(|&p| p > 0.5).collect() }
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b, "iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_erode(m: &BinaryMask, size: usize) -> BinaryMask {
        let r = (size / 2) as isize;
        BinaryMask::from_fn(m.height(), m.width(), |y, x| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= m.height() as isize || xx >= m.width() as isize {
                        return false;
                    }
                    if !m.get(yy as usize, xx as usize) {
                        return false;
                    }
                }
            }
            true
        })
    }

    fn brute_dt(m: &BinaryMask) -> Vec<f64> {
        let fg: Vec<(usize, usize)> =
            (0..m.height()).flat_map(|y| (0..m.width()).map(move |x| (y, x))).filter(|&(y, x)| m.get(y, x)).collect();
        (0..m.height())
            .flat_map(|y| (0..m.width()).map(move |x| (y, x)))
            .map(|(y, x)| {
                fg.iter()
                    .map(|&(fy, fx)| {
                        let (dy, dx) = (fy as f64 - y as f64, fx as f64 - x as f64);
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    fn mask_strategy(max: usize) -> impl Strategy<Value = BinaryMask> {
        (1..=max, 1..=max, 0.0f64..1.0).prop_flat_map(|(h, w, density)| {
            proptest::collection::vec(proptest::bool::weighted(density), h * w)
                .prop_map(move |bits| BinaryMask::new(h, w, bits).unwrap())
        })
    }

    #[test]
    fn erode_size_one_is_identity() {
        let m = BinaryMask::from_fn(6, 7, |y, x| (y * 7 + x) % 3 == 0);
        assert_eq!(erode(&m, 1).unwrap(), m);
    }

    #[test]
    fn erode_empty_stays_empty() {
        assert!(erode(&BinaryMask::empty(5, 5), 3).unwrap().is_empty());
    }

    #[test]
    fn erode_full_5x5_keeps_interior() {
        let e = erode(&BinaryMask::full(5, 5), 3).unwrap();
        let expected = BinaryMask::from_fn(5, 5, |y, x| (1..4).contains(&y) && (1..4).contains(&x));
        assert_eq!(e, expected);
        assert_eq!(e, brute_erode(&BinaryMask::full(5, 5), 3));
    }

    #[test]
    fn erode_rejects_even_or_zero_size() {
        let m = BinaryMask::full(3, 3);
        assert!(erode(&m, 0).is_err());
        assert!(erode(&m, 4).is_err());
    }

    #[test]
    fn single_pixel_distance() {
        let m = BinaryMask::from_fn(5, 5, |y, x| y == 2 && x == 2);
        let dt = distance_transform(&m);
        assert!((dt.get(0, 0) - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((dt.get(0, 0) - 2.8284).abs() < 1e-4);
        assert_eq!(dt.get(2, 2), 0.0);
    }

    #[test]
    fn full_mask_distance_is_zero_and_empty_is_infinite() {
        assert!(distance_transform(&BinaryMask::full(4, 6)).values().iter().all(|&v| v == 0.0));
        assert!(distance_transform(&BinaryMask::empty(4, 6)).values().iter().all(|&v| v == f64::INFINITY));
    }

    #[test]
    fn negatives_threshold_edges() {
        let dt = distance_transform(&BinaryMask::from_fn(6, 6, |y, x| y < 2 && x < 2));
        assert!(select_negatives(&dt, f64::INFINITY).unwrap().is_empty());
        assert!(select_negatives(&distance_transform(&BinaryMask::full(3, 3)), 0.0).unwrap().is_empty());
        assert!(select_negatives(&dt, -1.0).is_err());
        let all = select_negatives(&distance_transform(&BinaryMask::empty(3, 3)), 1e9).unwrap();
        assert_eq!(all.count(), 9);
    }

    #[test]
    fn negatives_at_default_distance_match_elementwise() {
        let (h, w) = (480, 854);
        let m = BinaryMask::from_fn(h, w, |y, x| {
            let (dy, dx) = (y as f64 - 240.0, x as f64 - 427.0);
            dy * dy / (60.0 * 60.0) + dx * dx / (90.0 * 90.0) <= 1.0
        });
        let dt = distance_transform(&m);
        let neg = select_negatives(&dt, 220.0).unwrap();
        // Oracle: a pixel is negative iff no foreground pixel lies within 220.
        let fg: Vec<(i64, i64)> = (0..h as i64)
            .flat_map(|y| (0..w as i64).map(move |x| (y, x)))
            .filter(|&(y, x)| m.get(y as usize, x as usize))
            .collect();
        for y in (0..h).step_by(7) {
            for x in (0..w).step_by(5) {
                let near = fg.iter().any(|&(fy, fx)| {
                    let (dy, dx) = (fy - y as i64, fx - x as i64);
                    dy * dy + dx * dx <= 220 * 220
                });
                assert_eq!(neg.get(y, x), !near, "pixel ({y},{x})");
            }
        }
        assert!(neg.get(0, 0) && !neg.get(240, 427) && neg.count() > 0);
    }

    #[test]
    fn positives_follow_alpha_and_exclude_negatives() {
        let post = Posteriors::from_foreground(1, 3, vec![0.98, 0.98, 0.5]).unwrap();
        let negs = BinaryMask::new(1, 3, vec![false, true, false]).unwrap();
        let pos = select_positives(&post, 0.97, &negs).unwrap();
        assert_eq!(pos.bits(), &[true, false, false]);
        assert!(select_positives(&post, 1.0, &negs).is_err());
        assert!(select_positives(&post, 0.0, &negs).is_err());
        let near_one = select_positives(&post, 1.0 - 1e-12, &BinaryMask::empty(1, 3)).unwrap();
        assert!(near_one.is_empty());
    }

    #[test]
    fn threshold_is_strict_and_drops_hard_negatives() {
        let half = Posteriors::from_foreground(2, 2, vec![0.5; 4]).unwrap();
        assert!(threshold_minus_negatives(&half, &BinaryMask::empty(2, 2)).unwrap().is_empty());
        let post = Posteriors::from_foreground(1, 4, vec![0.9, 0.2, 0.7, 0.9]).unwrap();
        let none = threshold_minus_negatives(&post, &BinaryMask::empty(1, 4)).unwrap();
        assert_eq!(none, threshold(&post));
        let negs = BinaryMask::new(1, 4, vec![false, false, false, true]).unwrap();
        let out = threshold_minus_negatives(&post, &negs).unwrap();
        assert_eq!(out.bits(), &[true, false, true, false]);
    }

    #[test]
    fn iou_examples() {
        let a = BinaryMask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let far = BinaryMask::from_fn(4, 4, |y, x| y >= 2 && x >= 2);
        assert_eq!(iou(&a, &far).unwrap(), 0.0);
        let shifted = BinaryMask::from_fn(4, 4, |y, x| (1..3).contains(&y) && (1..3).contains(&x));
        assert!((iou(&a, &shifted).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2)).unwrap(), 1.0);
        assert!(iou(&a, &BinaryMask::empty(3, 4)).is_err());
    }

    proptest! {
        #[test]
        fn erode_matches_brute_force_and_shrinks(m in mask_strategy(14), half in 0usize..4) {
            let size = 2 * half + 1;
            let e = erode(&m, size).unwrap();
            prop_assert_eq!(&e, &brute_erode(&m, size));
            prop_assert!(e.is_subset_of(&m));
        }

        #[test]
        fn distance_transform_matches_brute_force(m in mask_strategy(16)) {
            let dt = distance_transform(&m);
            for (a, b) in dt.values().iter().zip(brute_dt(&m)) {
                if b.is_infinite() {
                    prop_assert!(a.is_infinite());
                } else {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
            for (v, &fg) in dt.values().iter().zip(m.bits()) {
                prop_assert_eq!(fg, *v == 0.0);
            }
        }

        #[test]
        fn distance_transform_is_lipschitz(m in mask_strategy(16)) {
            prop_assume!(!m.is_empty());
            let dt = distance_transform(&m);
            for y in 0..m.height() {
                for x in 0..m.width() {
                    if x + 1 < m.width() {
                        prop_assert!((dt.get(y, x) - dt.get(y, x + 1)).abs() <= 1.0 + 1e-12);
                    }
                    if y + 1 < m.height() {
                        prop_assert!((dt.get(y, x) - dt.get(y + 1, x)).abs() <= 1.0 + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn positives_and_negatives_are_disjoint(
            m in mask_strategy(12),
            seed in 0u64..1000,
            d in 0.0f64..6.0,
            alpha in 0.05f64..0.99,
        ) {
            let (h, w) = m.dims();
            let fg: Vec<f64> = (0..h * w).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0).collect();
            let post = Posteriors::from_foreground(h, w, fg).unwrap();
            let negs = select_negatives(&distance_transform(&m), d).unwrap();
            let pos = select_positives(&post, alpha, &negs).unwrap();
            prop_assert!(pos.and(&negs).unwrap().is_empty());
        }

        #[test]
        fn iou_is_symmetric_and_one_only_when_equal(a in mask_strategy(8), seed in 0u64..64) {
            let b = BinaryMask::from_fn(a.height(), a.width(), |y, x| (y * 31 + x * 17 + seed as usize).is_multiple_of(5));
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            if !a.is_empty() || !b.is_empty() {
                prop_assert_eq!(ab == 1.0, a == b);
            }
        }
    }
}
