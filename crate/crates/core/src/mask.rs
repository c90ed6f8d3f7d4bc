//! Integer label maps.

use crate::error::{Error, Result};

/// Label map with extents `[n, height, width]`, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: [usize; 3],
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(shape: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("mask extents must be positive, got {shape:?}")));
        }
        if shape.iter().product::<usize>() != labels.len() {
            return Err(Error::Config(format!(
                "mask shape {shape:?} does not match {} labels",
                labels.len()
            )));
        }
        Ok(Self { shape, labels })
    }

    /// Single-slice mask.
    pub fn from_slice(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        Self::new([1, height, width], labels)
    }

    pub fn filled(shape: [usize; 3], label: u8) -> Self {
        Self { shape, labels: vec![label; shape.iter().product()] }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.labels[(n * self.shape[1] + y) * self.shape[2] + x]
    }

    /// Highest label value present.
    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Pixel count of `label`.
    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Stacks single-slice masks along the batch axis.
    pub fn stack<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<Mask> {
        let mut shape: Option<[usize; 3]> = None;
        let mut labels = Vec::new();
        let mut n = 0;
        for m in masks {
            match shape {
                None => shape = Some(m.shape),
                Some(s) if s[1] != m.shape[1] || s[2] != m.shape[2] => {
                    return Err(Error::Config(format!(
                        "cannot stack masks {:?} and {:?}",
                        s, m.shape
                    )))
                }
                _ => {}
            }
            n += m.shape[0];
            labels.extend_from_slice(&m.labels);
        }
        let s = shape.ok_or_else(|| Error::Usage("stacking zero masks".into()))?;
        Mask::new([n, s[1], s[2]], labels)
    }

    /// The `n`-th slice as its own mask.
    pub fn slice(&self, n: usize) -> Mask {
        let plane = self.shape[1] * self.shape[2];
        Mask {
            shape: [1, self.shape[1], self.shape[2]],
            labels: self.labels[n * plane..(n + 1) * plane].to_vec(),
        }
    }
}
