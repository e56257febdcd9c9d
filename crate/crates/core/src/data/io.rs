use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::density::HeadPoint;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::{AnnotatedImage, Dataset};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// One manifest line: `{"id": ..., "image": ..., "heads": [[x, y], ...]}`.
/// `image` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub heads: Vec<HeadPoint>,
}

/// Decodes PGM or PNG into a `(1, 1, H, W)` tensor in `[0, 1]`.
/// Colour images are reduced with luma weights 0.299/0.587/0.114.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: cannot decode image: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = if img.color().has_color() {
        img.to_rgb32f()
            .pixels()
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .map(|v| v.clamp(0.0, 1.0))
            .collect()
    } else {
        img.to_luma32f().pixels().map(|p| p[0] as f64).collect()
    };
    Tensor::from_vec(Shape::new(1, 1, h, w)?, data)
}

/// 8-bit binary PGM, `round(255·v)`.
pub fn encode_pgm8(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut images = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::Data(format!("{}:{lineno}: {msg}", manifest.display()));
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| at(format!("malformed record: {e}")))?;
        let path = root.join(&rec.image);
        if !path.exists() {
            return Err(at(format!("image {} not found", path.display())));
        }
        let image = decode_image(&path).map_err(|e| at(e.to_string()))?;
        let item = AnnotatedImage::new(rec.id, image, rec.heads).map_err(|e| at(e.to_string()))?;
        images.push(item);
    }
    let dataset = Dataset {
        images,
        provenance: manifest.display().to_string(),
    };
    if dataset.is_empty() {
        return Err(Error::Data(format!(
            "{}: manifest holds no records",
            manifest.display()
        )));
    }
    Ok(dataset)
}

/// Loads `<dir>/manifest.jsonl`.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    load_dataset(&dir.join(MANIFEST_NAME))
}

/// Writes `<dir>/manifest.jsonl` and one 8-bit PGM per record under
/// `<dir>/images/`. Refuses to replace an existing manifest unless `force`.
pub fn write_dataset(dataset: &Dataset, dir: &Path, force: bool) -> Result<PathBuf> {
    let manifest = dir.join(MANIFEST_NAME);
    if manifest.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; use --force to overwrite",
            manifest.display()
        )));
    }
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut lines = String::new();
    for (i, rec) in dataset.images.iter().enumerate() {
        let rel = format!("images/{i:05}.pgm");
        let path = dir.join(&rel);
        fs::write(&path, encode_pgm8(rec.image())).map_err(|e| Error::io(&path, e))?;
        let line = ManifestRecord {
            id: rec.id.clone(),
            image: rel,
            heads: rec.heads().to_vec(),
        };
        lines.push_str(&serde_json::to_string(&line).expect("manifest record serializes"));
        lines.push('\n');
    }
    fs::write(&manifest, lines).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    fn write_pgm(dir: &Path, name: &str, w: usize, h: usize) {
        let t = Tensor::fill(Shape::new(1, 1, h, w).unwrap(), 0.5);
        fs::write(dir.join(name), encode_pgm8(&t)).unwrap();
    }

    #[test]
    fn loads_two_records() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(dir.path(), "a.pgm", 8, 6);
        write_pgm(dir.path(), "b.pgm", 4, 4);
        let m = dir.path().join("m.jsonl");
        fs::write(
            &m,
            "{\"id\":\"a\",\"image\":\"a.pgm\",\"heads\":[[1,2],[7.5,5.5]]}\n\n{\"id\":\"b\",\"image\":\"b.pgm\",\"heads\":[]}\n",
        )
        .unwrap();
        let d = load_dataset(&m).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.images[0].heads()[1], HeadPoint::new(7.5, 5.5));
        assert_eq!((d.images[0].height(), d.images[0].width()), (6, 8));
        assert!((d.images[1].image().data()[0] - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn boundary_head_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(dir.path(), "a.pgm", 8, 6);
        let m = dir.path().join("m.jsonl");
        fs::write(
            &m,
            "{\"id\":\"a\",\"image\":\"a.pgm\",\"heads\":[]}\n{\"id\":\"b\",\"image\":\"a.pgm\",\"heads\":[[8,0]]}\n",
        )
        .unwrap();
        let err = load_dataset(&m).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn malformed_and_empty_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        fs::write(&m, "").unwrap();
        assert!(matches!(load_dataset(&m), Err(Error::Data(_))));
        fs::write(&m, "{\"id\": 3\n").unwrap();
        let err = load_dataset(&m).unwrap_err().to_string();
        assert!(err.contains(":1:") && err.contains("malformed"), "{err}");
        assert!(matches!(
            load_dataset(&dir.path().join("missing.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn rgb_png_uses_luma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        image::RgbImage::from_pixel(2, 2, image::Rgb([255, 0, 0]))
            .save(&path)
            .unwrap();
        let t = decode_image(&path).unwrap();
        assert!((t.data()[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn write_read_round_trip() {
        let spec = SynthSpec {
            seed: 3,
            n_images: 3,
            height: 32,
            width: 48,
            min_count: 2,
            max_count: 6,
        };
        let d = synth_generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path(), false).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), d.len());
        for (a, b) in d.images.iter().zip(&back.images) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.heads(), b.heads());
            assert!(a.image().max_abs_diff(b.image()).unwrap() <= 1.0 / 255.0);
        }
        assert!(matches!(
            write_dataset(&d, dir.path(), false),
            Err(Error::Config(_))
        ));
        assert!(write_dataset(&d, dir.path(), true).is_ok());
    }
}
