use crate::error::{Error, Result};

pub const DAPI: &str = "DAPI";
pub const PAN_HISTONE: &str = "PanHistone";

/// Lowercase, alphanumerics only: "Pan-Histone" and "panhistone" name the same channel.
fn normalize(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Multi-channel 16-bit raster, stored channel-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelStack {
    width: u32,
    height: u32,
    names: Vec<String>,
    samples: Vec<u16>,
}

impl ChannelStack {
    pub fn new(width: u32, height: u32, names: Vec<String>, samples: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster("zero-sized raster".into()));
        }
        if names.is_empty() {
            return Err(Error::InvalidRaster("no channels".into()));
        }
        let plane = width as usize * height as usize;
        if samples.len() != plane * names.len() {
            return Err(Error::InvalidRaster(format!(
                "{} channels of {}x{} need {} samples, got {}",
                names.len(),
                width,
                height,
                plane * names.len(),
                samples.len()
            )));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].iter().any(|b| normalize(a) == normalize(b)) {
                return Err(Error::InvalidRaster(format!("duplicate channel name `{a}`")));
            }
        }
        Ok(Self {
            width,
            height,
            names,
            samples,
        })
    }

    pub fn zeros(width: u32, height: u32, names: Vec<String>) -> Result<Self> {
        let n = width as usize * height as usize * names.len();
        Self::new(width, height, names, vec![0; n])
    }

    /// Builds a stack from one plane per channel.
    pub fn from_planes(width: u32, height: u32, planes: Vec<(String, Vec<u16>)>) -> Result<Self> {
        let plane = width as usize * height as usize;
        let mut names = Vec::with_capacity(planes.len());
        let mut samples = Vec::with_capacity(plane * planes.len());
        for (name, p) in planes {
            if p.len() != plane {
                return Err(Error::InvalidRaster(format!(
                    "channel `{name}` has {} samples, expected {plane}",
                    p.len()
                )));
            }
            names.push(name);
            samples.extend(p);
        }
        Self::new(width, height, names, samples)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn plane_len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn channel(&self, c: usize) -> &[u16] {
        let n = self.plane_len();
        &self.samples[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [u16] {
        let n = self.plane_len();
        &mut self.samples[c * n..(c + 1) * n]
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let key = normalize(name);
        self.names.iter().position(|n| normalize(n) == key)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::MissingChannel(name.to_string()))
    }

    #[inline]
    pub fn get(&self, c: usize, x: u32, y: u32) -> u16 {
        self.samples[c * self.plane_len() + y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: u32, y: u32, v: u16) {
        let i = c * self.plane_len() + y as usize * self.width as usize + x as usize;
        self.samples[i] = v;
    }

    /// Window with top-left `(x, y)` (may be negative or run past the edge);
    /// pixels outside the raster are zero.
    pub fn crop(&self, x: i64, y: i64, w: u32, h: u32) -> ChannelStack {
        let mut samples = vec![0u16; w as usize * h as usize * self.channels()];
        let plane = w as usize * h as usize;
        for c in 0..self.channels() {
            let src = self.channel(c);
            for j in 0..h as i64 {
                let sy = y + j;
                if sy < 0 || sy >= self.height as i64 {
                    continue;
                }
                let x0 = x.max(0);
                let x1 = (x + w as i64).min(self.width as i64);
                if x0 >= x1 {
                    continue;
                }
                let row = sy as usize * self.width as usize;
                let dst = c * plane + j as usize * w as usize + (x0 - x) as usize;
                let len = (x1 - x0) as usize;
                samples[dst..dst + len].copy_from_slice(&src[row + x0 as usize..row + x0 as usize + len]);
            }
        }
        ChannelStack {
            width: w,
            height: h,
            names: self.names.clone(),
            samples,
        }
    }

    /// Subset of channels, in the requested order.
    pub fn select(&self, names: &[&str]) -> Result<ChannelStack> {
        let mut planes = Vec::with_capacity(names.len());
        for &n in names {
            let c = self.require(n)?;
            planes.push((self.names[c].clone(), self.channel(c).to_vec()));
        }
        Self::from_planes(self.width, self.height, planes)
    }

    /// Per-pixel `max(DAPI, PanHistone)`.
    pub fn nuclear_max(&self) -> Result<Vec<u16>> {
        let d = self.channel(self.require(DAPI)?);
        let h = self.channel(self.require(PAN_HISTONE)?);
        Ok(d.iter().zip(h).map(|(&a, &b)| a.max(b)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack() -> ChannelStack {
        let names = vec![DAPI.to_string(), "Pan-Histone".to_string()];
        let samples: Vec<u16> = (0..2 * 4 * 3).map(|v| v as u16).collect();
        ChannelStack::new(4, 3, names, samples).unwrap()
    }

    #[test]
    fn lookup_is_normalized() {
        let s = stack();
        assert_eq!(s.index_of("panhistone"), Some(1));
        assert_eq!(s.require(PAN_HISTONE).unwrap(), 1);
        assert!(s.require("NeuN").is_err());
    }

    #[test]
    fn rejects_mismatched_sizes_and_duplicates() {
        assert!(ChannelStack::new(2, 2, vec!["a".into()], vec![0; 3]).is_err());
        assert!(ChannelStack::new(1, 1, vec!["a".into(), "A".into()], vec![0; 2]).is_err());
        assert!(ChannelStack::new(0, 1, vec!["a".into()], vec![]).is_err());
    }

    #[test]
    fn crop_pads_with_zero() {
        let s = stack();
        let c = s.crop(-1, -1, 3, 3);
        assert_eq!(c.get(0, 0, 0), 0);
        assert_eq!(c.get(0, 1, 1), s.get(0, 0, 0));
        assert_eq!(c.get(1, 2, 2), s.get(1, 1, 1));
        let inside = s.crop(1, 1, 2, 2);
        assert_eq!(inside.get(1, 1, 1), s.get(1, 2, 2));
    }

    #[test]
    fn nuclear_max_takes_brighter_channel() {
        let s = stack();
        let m = s.nuclear_max().unwrap();
        assert_eq!(m[0], 12);
        assert_eq!(m.len(), 12);
    }
}
