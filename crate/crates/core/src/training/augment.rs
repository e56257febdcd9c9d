//! Random quarter-area patch crops.

use crate::data::AnnotatedImage;
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const PATCHES_PER_IMAGE: usize = 9;
/// Patch sides are rounded down to a multiple of this.
pub const PATCH_MULTIPLE: usize = 16;

/// Side lengths of a patch: half of each image side, rounded down to a
/// multiple of 16.
pub fn patch_size(height: usize, width: usize) -> Result<(usize, usize)> {
    if height < 2 * PATCH_MULTIPLE || width < 2 * PATCH_MULTIPLE {
        return Err(Error::Data(format!(
            "{width}x{height} image is too small for patch cropping (need at least 32x32)"
        )));
    }
    let down = |v: usize| v / 2 / PATCH_MULTIPLE * PATCH_MULTIPLE;
    Ok((down(height), down(width)))
}

/// Nine patches at uniform random offsets; heads are re-expressed in patch
/// coordinates and those falling outside are dropped.
pub fn crop_patches(record: &AnnotatedImage, rng: &mut Rng) -> Result<Vec<AnnotatedImage>> {
    let (ph, pw) = patch_size(record.height(), record.width())
        .map_err(|e| Error::Data(format!("{}: {e}", record.id)))?;
    (0..PATCHES_PER_IMAGE)
        .map(|k| {
            let top = rng.range_inclusive(0, record.height() - ph);
            let left = rng.range_inclusive(0, record.width() - pw);
            let mut patch = record.crop(top, left, ph, pw)?;
            patch.id = format!("{}#p{k}", record.id);
            Ok(patch)
        })
        .collect()
}
