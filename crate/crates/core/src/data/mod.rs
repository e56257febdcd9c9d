//! Annotated images, datasets, manifest I/O and synthetic crowd scenes.

mod io;
mod synth;

pub use io::{
    decode_image, encode_pgm8, load_dataset, read_dataset, write_dataset, ManifestRecord,
    MANIFEST_NAME,
};
pub use synth::{synth_generate, SynthSpec, DISC_DIP, DISC_RADIUS, MIN_SEPARATION};

use crate::density::HeadPoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A grayscale image in `[0, 1]` with its head annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    image: Tensor,
    heads: Vec<HeadPoint>,
}

impl AnnotatedImage {
    pub fn new(id: impl Into<String>, image: Tensor, heads: Vec<HeadPoint>) -> Result<Self> {
        let id = id.into();
        let s = image.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::Data(format!(
                "{id}: image must be (1, 1, H, W), got {s}"
            )));
        }
        if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("{id}: pixel value {v} outside [0, 1]")));
        }
        if let Some((i, p)) = heads
            .iter()
            .enumerate()
            .find(|(_, p)| !p.in_bounds(s.h, s.w))
        {
            return Err(Error::Data(format!(
                "{id}: head #{i} at ({}, {}) outside the {}x{} image",
                p.x, p.y, s.w, s.h
            )));
        }
        Ok(AnnotatedImage { id, image, heads })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn heads(&self) -> &[HeadPoint] {
        &self.heads
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    pub fn count(&self) -> usize {
        self.heads.len()
    }

    /// Sub-window with heads translated into it; heads outside are dropped.
    pub fn crop(
        &self,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    ) -> Result<AnnotatedImage> {
        let image = self.image.crop(top, left, height, width)?;
        let heads = self
            .heads
            .iter()
            .map(|p| HeadPoint::new(p.x - left as f64, p.y - top as f64))
            .filter(|p| p.in_bounds(height, width))
            .collect();
        Ok(AnnotatedImage {
            id: self.id.clone(),
            image,
            heads,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<AnnotatedImage>,
    /// Where the records came from: a manifest path or a synthesis seed.
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn expect_non_empty(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::Data(format!(
                "dataset is empty ({})",
                self.provenance
            )));
        }
        Ok(())
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            provenance: format!("{} (subset of {})", self.provenance, indices.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn validation() {
        let img = Tensor::fill(Shape::new(1, 1, 4, 6).unwrap(), 0.5);
        assert!(AnnotatedImage::new("a", img.clone(), vec![HeadPoint::new(5.9, 3.9)]).is_ok());
        assert!(AnnotatedImage::new("a", img.clone(), vec![HeadPoint::new(6.0, 0.0)]).is_err());
        assert!(AnnotatedImage::new("a", img.map(|v| v * 3.0), vec![]).is_err());
    }

    #[test]
    fn crop_translates_and_drops() {
        let img = Tensor::fill(Shape::new(1, 1, 64, 64).unwrap(), 0.5);
        let rec = AnnotatedImage::new(
            "a",
            img,
            vec![HeadPoint::new(10.0, 10.0), HeadPoint::new(3.0, 50.0)],
        )
        .unwrap();
        let patch = rec.crop(8, 8, 32, 32).unwrap();
        assert_eq!(patch.heads(), &[HeadPoint::new(2.0, 2.0)]);
        assert_eq!((patch.height(), patch.width()), (32, 32));
    }
}
