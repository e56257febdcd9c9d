//! Synthetic crowd scenes: dark discs on a light, noisy background.

use crate::density::HeadPoint;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Shape, Tensor};

use super::{AnnotatedImage, Dataset};

pub const DISC_RADIUS: usize = 2;
pub const DISC_DIP: f64 = 0.5;
pub const MIN_SEPARATION: f64 = 4.0;
const BACKGROUND: f64 = 0.75;
const NOISE: f64 = 0.05;
const MAX_TRIES_PER_HEAD: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub min_count: usize,
    pub max_count: usize,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.min_count > self.max_count {
            return Err(Error::Config(format!(
                "min count {} exceeds max count {}",
                self.min_count, self.max_count
            )));
        }
        let cap = self.height * self.width / 64;
        if self.max_count > cap {
            return Err(Error::Config(format!(
                "max count {} exceeds {cap} (H·W/64) for a {}x{} image",
                self.max_count, self.width, self.height
            )));
        }
        Ok(())
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut master = Rng::seed(spec.seed);
    let mut images = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let mut rng = master.fork();
        let count = rng.range_inclusive(spec.min_count, spec.max_count);
        let heads = place_heads(&mut rng, count, spec.height, spec.width)
            .map_err(|e| Error::Data(format!("image {i}: {e}")))?;
        let image = render_scene(&mut rng, &heads, spec.height, spec.width)?;
        images.push(AnnotatedImage::new(format!("synth_{i:04}"), image, heads)?);
    }
    Ok(Dataset {
        images,
        provenance: format!("synthetic seed={} n={}", spec.seed, spec.n_images),
    })
}

/// Integer head centers at least `MIN_SEPARATION` apart, by rejection.
fn place_heads(rng: &mut Rng, count: usize, height: usize, width: usize) -> Result<Vec<HeadPoint>> {
    let mut heads: Vec<HeadPoint> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = false;
        for _ in 0..MAX_TRIES_PER_HEAD {
            let x = rng.range_inclusive(0, width - 1) as f64;
            let y = rng.range_inclusive(0, height - 1) as f64;
            let clear = heads
                .iter()
                .all(|p| (p.x - x).hypot(p.y - y) >= MIN_SEPARATION);
            if clear {
                heads.push(HeadPoint::new(x, y));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place head {} of {count} with separation {MIN_SEPARATION} px",
                k + 1
            )));
        }
    }
    Ok(heads)
}

fn render_scene(rng: &mut Rng, heads: &[HeadPoint], height: usize, width: usize) -> Result<Tensor> {
    let shape = Shape::new(1, 1, height, width)?;
    let mut img = Tensor::rand_uniform(shape, rng, BACKGROUND - NOISE, BACKGROUND + NOISE);
    let mut dark = vec![false; height * width];
    let r = DISC_RADIUS as isize;
    for p in heads {
        let (cy, cx) = (p.y as isize, p.x as isize);
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (cy + dy, cx + dx);
                if dy * dy + dx * dx > r * r
                    || y < 0
                    || x < 0
                    || y >= height as isize
                    || x >= width as isize
                {
                    continue;
                }
                dark[y as usize * width + x as usize] = true;
            }
        }
    }
    for (v, &d) in img.data_mut().iter_mut().zip(&dark) {
        if d {
            *v -= DISC_DIP;
        }
        *v = v.clamp(0.0, 1.0);
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, n: usize, lo: usize, hi: usize) -> SynthSpec {
        SynthSpec {
            seed,
            n_images: n,
            height: 64,
            width: 64,
            min_count: lo,
            max_count: hi,
        }
    }

    /// Pixels whose whole radius-2 disc is dark; only disc centers qualify.
    fn count_disc_centers(img: &AnnotatedImage) -> usize {
        let (h, w) = (img.height() as isize, img.width() as isize);
        let t = img.image();
        let dark = |y: isize, x: isize| {
            y < 0 || x < 0 || y >= h || x >= w || t.get(0, 0, y as usize, x as usize) < 0.5
        };
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                let full = (-2isize..=2)
                    .flat_map(|dy| (-2isize..=2).map(move |dx| (dy, dx)))
                    .filter(|(dy, dx)| dy * dy + dx * dx <= 4)
                    .all(|(dy, dx)| dark(y + dy, x + dx));
                if full {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn zero_count_gives_blank_scenes() {
        let d = synth_generate(&spec(1, 3, 0, 0)).unwrap();
        assert!(d.images.iter().all(|r| r.heads().is_empty()));
        assert!(d
            .images
            .iter()
            .all(|r| r.image().data().iter().all(|&v| v > 0.69)));
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            synth_generate(&spec(9, 4, 5, 15)).unwrap(),
            synth_generate(&spec(9, 4, 5, 15)).unwrap()
        );
        assert_ne!(
            synth_generate(&spec(9, 4, 5, 15)).unwrap(),
            synth_generate(&spec(10, 4, 5, 15)).unwrap()
        );
    }

    #[test]
    fn counts_in_range_and_discs_drawn_at_heads() {
        let d = synth_generate(&spec(5, 5, 5, 15)).unwrap();
        for rec in &d.images {
            assert!((5..=15).contains(&rec.count()));
            assert_eq!(count_disc_centers(rec), rec.count(), "{}", rec.id);
            for p in rec.heads() {
                assert!(rec.image().get(0, 0, p.y as usize, p.x as usize) < 0.5);
            }
            for (i, a) in rec.heads().iter().enumerate() {
                for b in &rec.heads()[i + 1..] {
                    assert!((a.x - b.x).hypot(a.y - b.y) >= MIN_SEPARATION);
                }
            }
        }
    }

    #[test]
    fn range_validation() {
        assert!(matches!(
            synth_generate(&spec(1, 1, 10, 5)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            synth_generate(&spec(1, 1, 0, 65)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unsatisfiable_separation_is_data_error() {
        // A 4x4 grid holds at most two heads 4 px apart (opposite corners).
        let err = place_heads(&mut Rng::seed(1), 5, 4, 4).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
