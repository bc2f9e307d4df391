use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense binary grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Bitmap {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::InvalidRaster(format!(
                "bitmap of {}x{} needs {} cells, got {}",
                width,
                height,
                width as usize * height as usize,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn is_empty_grid(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    /// Coordinates of set cells in row-major order.
    pub fn ones(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width.max(1);
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i as u32 % w, i as u32 / w))
    }
}

/// Row-major run lengths alternating background / foreground, starting with
/// a (possibly zero-length) background run.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rle {
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn foreground(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }
}

pub fn rle_encode(bitmap: &Bitmap) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in &bitmap.bits {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    Rle { counts }
}

pub fn rle_decode(rle: &Rle, width: u32, height: u32) -> Result<Bitmap> {
    let n = width as u64 * height as u64;
    if rle.total() != n {
        return Err(Error::InvalidRaster(format!(
            "rle covers {} pixels, frame is {}x{}",
            rle.total(),
            width,
            height
        )));
    }
    let mut bits = Vec::with_capacity(n as usize);
    let mut value = false;
    for &c in &rle.counts {
        bits.extend(std::iter::repeat_n(value, c as usize));
        value = !value;
    }
    Ok(Bitmap { width, height, bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_scan(bits: &[bool]) -> Vec<u32> {
        // independent oracle: count transitions pixel by pixel
        let mut out = vec![0u32];
        let mut fg = false;
        for &b in bits {
            if b == fg {
                *out.last_mut().unwrap() += 1;
            } else {
                fg = b;
                out.push(1);
            }
        }
        out
    }

    #[test]
    fn empty_and_full() {
        assert_eq!(rle_encode(&Bitmap::new(2, 2)).counts, vec![4]);
        let full = Bitmap::from_fn(2, 2, |_, _| true);
        assert_eq!(rle_encode(&full).counts, vec![0, 4]);
    }

    #[test]
    fn top_left_block() {
        let bm = Bitmap::from_fn(4, 4, |x, y| x < 2 && y < 2);
        let expected = naive_scan(bm.as_slice());
        assert_eq!(expected, vec![0, 2, 2, 2, 10]);
        assert_eq!(rle_encode(&bm).counts, expected);
    }

    #[test]
    fn decode_rejects_wrong_total() {
        let rle = Rle { counts: vec![1, 2] };
        assert!(rle_decode(&rle, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(w in 1u32..12, h in 1u32..12, seed in any::<u64>()) {
            let mut s = seed;
            let bm = Bitmap::from_fn(w, h, |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 33) & 1 == 1
            });
            let rle = rle_encode(&bm);
            prop_assert_eq!(&rle.counts, &naive_scan(bm.as_slice()));
            prop_assert_eq!(rle.foreground(), bm.count());
            prop_assert_eq!(rle_decode(&rle, w, h).unwrap(), bm);
        }
    }
}
