//! RGB frames and the binary Netpbm formats used on disk: frames as PPM
//! (`P6`) and masks as PGM (`P5`, foreground 255, background 0).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maskops::BinaryMask;
use crate::tensor::Tensor;

/// Planar RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    /// `[3][height][width]`.
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::shape(
                "RgbImage",
                format!("{height}x{width} image needs {} values, got {}", 3 * height * width, data.len()),
            ));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        RgbImage { height, width, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// Rounds every value to the nearest multiple of 1/255 so the image
    /// survives an 8-bit round trip unchanged.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Network input `[1, 3, H, W]`, values shifted to `[-0.5, 0.5]`.
    pub fn to_input_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|v| v - 0.5).collect();
        Tensor::new(vec![1, 3, self.height, self.width], data).expect("consistent dims")
    }

    /// Reflect-pads bottom and right edges to `height x width`.
    pub fn reflect_pad(&self, height: usize, width: usize) -> RgbImage {
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n { m } else { period - m }
        };
        let mut out = RgbImage::filled(height, width, [0.0; 3]);
        for c in 0..3 {
            for y in 0..height {
                let sy = reflect(y, self.height);
                for x in 0..width {
                    out.set(c, y, x, self.get(c, sy, reflect(x, self.width)));
                }
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    bytes.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (magic, w, h, body) = parse_netpbm(&bytes).map_err(|detail| Error::ImageFormat { path: path.into(), detail })?;
        if magic != "P6" {
            return Err(Error::ImageFormat { path: path.into(), detail: format!("expected P6, found {magic}") });
        }
        if body.len() < 3 * w * h {
            return Err(Error::ImageFormat { path: path.into(), detail: "truncated pixel data".into() });
        }
        let mut img = RgbImage::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    img.set(c, y, x, body[(y * w + x) * 3 + c] as f64 / 255.0);
                }
            }
        }
        Ok(img)
    }
}

/// PGM `P5` encoding of a mask: maxval 255, foreground 255, background 0.
pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    bytes.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    bytes
}

/// Decodes a PGM `P5` mask; any non-zero sample is foreground.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<BinaryMask, String> {
    let (magic, w, h, body) = parse_netpbm(bytes)?;
    if magic != "P5" {
        return Err(format!("expected P5, found {magic}"));
    }
    if body.len() < w * h {
        return Err("truncated pixel data".into());
    }
    BinaryMask::new(h, w, body[..w * h].iter().map(|&v| v != 0).collect()).map_err(|e| e.to_string())
}

pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|detail| Error::ImageFormat { path: path.into(), detail })
}

/// Parses a binary Netpbm header (maxval must be 255) and returns
/// `(magic, width, height, pixel bytes)`.
fn parse_netpbm(bytes: &[u8]) -> std::result::Result<(String, usize, usize, &[u8]), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if w == 0 || h == 0 {
        return Err("zero-sized image".into());
    }
    Ok((fields[0].clone(), w, h, bytes.get(pos..).unwrap_or(&[])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_layout_is_exact() {
        let m = BinaryMask::new(2, 3, vec![true, false, false, false, true, true]).unwrap();
        let bytes = encode_pgm(&m);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], &[255, 0, 0, 0, 255, 255]);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0, 7]);
        assert_eq!(decode_pgm(&bytes).unwrap().bits(), &[false, true]);
    }

    #[test]
    fn ppm_round_trip_after_quantize() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::filled(3, 4, [0.1, 0.52, 0.9]);
        img.set(1, 2, 3, 0.3337);
        img.quantize();
        let path = dir.path().join("f.ppm");
        img.write_ppm(&path).unwrap();
        assert_eq!(RgbImage::read_ppm(&path).unwrap(), img);
    }

    #[test]
    fn reflect_pad_mirrors_edges() {
        let mut img = RgbImage::filled(1, 3, [0.0; 3]);
        for x in 0..3 {
            img.set(0, 0, x, x as f64);
        }
        let p = img.reflect_pad(2, 5);
        let row: Vec<f64> = (0..5).map(|x| p.get(0, 0, x)).collect();
        assert_eq!(row, vec![0.0, 1.0, 2.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn pgm_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let m = BinaryMask::from_fn(h, w, |y, x| (seed >> ((y * w + x) % 64)) & 1 == 1);
            let bytes = encode_pgm(&m);
            prop_assert_eq!(decode_pgm(&bytes).unwrap(), m.clone());
            prop_assert_eq!(encode_pgm(&decode_pgm(&bytes).unwrap()), bytes);
        }
    }
}
