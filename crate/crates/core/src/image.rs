//! 32×32 RGB images stored channel-planar, as in the CIFAR binaries.

use std::fmt;

use crate::error::{bail, Result};

pub const SIDE: usize = 32;
pub const PLANE: usize = SIDE * SIDE;
pub const IMAGE_BYTES: usize = 3 * PLANE;

#[derive(Clone, PartialEq, Eq)]
pub struct Image(Box<[u8; IMAGE_BYTES]>);

impl Image {
    pub fn zeros() -> Self {
        Self(Box::new([0; IMAGE_BYTES]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let Ok(arr) = <[u8; IMAGE_BYTES]>::try_from(bytes) else {
            bail!(Format, "expected {} image bytes, got {}", IMAGE_BYTES, bytes.len());
        };
        Ok(Self(Box::new(arr)))
    }

    pub fn bytes(&self) -> &[u8] {
        &self.0[..]
    }

    pub fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.0[..]
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> u8 {
        self.0[channel * PLANE + row * SIDE + col]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, v: u8) {
        self.0[channel * PLANE + row * SIDE + col] = v;
    }

    /// Binary portable pixmap (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{SIDE} {SIDE}\n255\n").into_bytes();
        for p in 0..PLANE {
            out.extend((0..3).map(|ch| self.0[ch * PLANE + p]));
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = [0usize; 3];
        if bytes.get(..2) != Some(b"P6") {
            bail!(Format, "not a binary pixmap (missing P6 magic)");
        }
        pos += 2;
        for field in &mut fields {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
            *field = text.parse().map_err(|_| crate::Error::Format(format!("bad pixmap header near byte {start}")))?;
        }
        let [w, h, max] = fields;
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            bail!(Format, "bad pixmap header terminator");
        }
        pos += 1;
        if (w, h) != (SIDE, SIDE) {
            bail!(Format, "expected a {}x{} image, got {}x{}", SIDE, SIDE, w, h);
        }
        if max != 255 {
            bail!(Format, "only maxval 255 is supported, got {}", max);
        }
        let body = &bytes[pos..];
        if body.len() != IMAGE_BYTES {
            bail!(Format, "expected {} pixel bytes, got {}", IMAGE_BYTES, body.len());
        }
        let mut img = Self::zeros();
        for p in 0..PLANE {
            for ch in 0..3 {
                img.0[ch * PLANE + p] = body[3 * p + ch];
            }
        }
        Ok(img)
    }

    /// Reads either a raw planar file of exactly 3072 bytes or a P6 pixmap.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(b"P6") {
            Self::from_ppm(bytes)
        } else {
            Self::from_bytes(bytes)
        }
    }
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sum: u64 = self.0.iter().map(|&b| b as u64).sum();
        write!(f, "Image(32x32x3, byte sum {sum})")
    }
}
