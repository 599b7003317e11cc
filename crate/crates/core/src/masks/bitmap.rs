use std::fmt;
use std::path::Path;

use super::MaskError;

/// Bit-packed binary image, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BinaryMask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

/// Grey levels at or above this are foreground.
pub const FOREGROUND_LEVEL: u8 = 128;

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, words: vec![0; n.div_ceil(64)] }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Thresholds an 8-bit grey buffer at [`FOREGROUND_LEVEL`].
    pub fn from_luma(width: u32, height: u32, pixels: &[u8]) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize);
        let mut m = Self::new(width, height);
        for (i, &p) in pixels.iter().enumerate() {
            if p >= FOREGROUND_LEVEL {
                m.words[i / 64] |= 1 << (i % 64);
            }
        }
        m
    }

    pub fn to_luma(&self) -> Vec<u8> {
        (0..self.len()).map(|i| if self.get_index(i) { 255 } else { 0 }).collect()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.get_index(y as usize * self.width as usize + x as usize)
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = y as usize * self.width as usize + x as usize;
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    fn check_same(&self, other: &Self) -> Result<(), MaskError> {
        if self.dimensions() != other.dimensions() {
            return Err(MaskError::DimensionMismatch {
                expected: self.dimensions(),
                found: other.dimensions(),
                context: String::from("mask comparison"),
            });
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Self) -> Result<u64, MaskError> {
        self.check_same(other)?;
        Ok(self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones() as u64).sum())
    }

    pub fn union_count(&self, other: &Self) -> Result<u64, MaskError> {
        self.check_same(other)?;
        Ok(self.words.iter().zip(&other.words).map(|(a, b)| (a | b).count_ones() as u64).sum())
    }

    /// Inclusive `[x0, y0, x1, y1]` of the foreground, if any.
    pub fn bounding_box(&self) -> Option<[u32; 4]> {
        let mut bb: Option<[u32; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => [x, y, x, y],
                        Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x), y1.max(y)],
                    });
                }
            }
        }
        bb
    }

    /// Square-structuring-element dilation by `radius` pixels.
    pub fn dilate(&self, radius: u32) -> Self {
        let r = radius as i64;
        let (w, h) = (self.width as i64, self.height as i64);
        Self::from_fn(self.width, self.height, |x, y| {
            let (x, y) = (x as i64, y as i64);
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                    if self.get(xx as u32, yy as u32) {
                        return true;
                    }
                }
            }
            false
        })
    }

    /// Decodes an encoded image (PNG or any enabled format), thresholding
    /// its luma channel.
    pub fn decode(bytes: &[u8]) -> Result<Self, image::ImageError> {
        let img = image::load_from_memory(bytes)?.into_luma8();
        Ok(Self::from_luma(img.width(), img.height(), img.as_raw()))
    }

    pub fn load(path: &Path) -> Result<Self, MaskError> {
        let image_err = |message: String| MaskError::Image { path: path.to_path_buf(), message };
        let bytes = std::fs::read(path).map_err(|e| image_err(e.to_string()))?;
        Self::decode(&bytes).map_err(|e| image_err(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), MaskError> {
        let img = image::GrayImage::from_raw(self.width, self.height, self.to_luma()).expect("buffer sized to mask");
        img.save(path).map_err(|e| MaskError::Image { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// Intersection over union; 0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    let union = a.union_count(b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_count(b)? as f64 / union as f64)
}
