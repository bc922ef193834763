//! Dataset directory layout.
//!
//! ```text
//! root/
//!   dataset.json         reload parameters (image size, parts, split seed)
//!   images.txt           <relative_path> <class_id>        one line per image
//!   parts.txt            <image_index> <part_id> <x> <y> <visible{0,1}>
//!   bounding_boxes.txt   <image_index> <x_min> <y_min> <width> <height>
//!   images/**.png        pixels
//! ```
//!
//! `image_index` is the 1-based line number in `images.txt`; `part_id` runs
//! 1..=M. An image either lists all M parts or none. Synthetic datasets
//! serialize to exactly this layout, so loaders are source-agnostic; the
//! reference/query split is re-derived from `(refer_fraction, split_seed)`
//! recorded in `dataset.json` and per-class file order, which reproduces the
//! generating split bit for bit.

use super::split::{by_class, make_reference_query, split_classes};
use super::types::{BBox, DatasetBundle, ImageSample, Keypoint};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub image_size: usize,
    pub num_parts: usize,
    pub refer_fraction: f64,
    pub split_seed: u64,
}

pub const DATASET_META_VERSION: u32 = 1;

/// Write a bundle to `dir` in the documented layout. Samples must carry
/// relative paths (the synthetic generator assigns them).
pub fn save_bundle<T: Scalar>(
    bundle: &DatasetBundle<T>,
    dir: &Path,
    meta: &DatasetMeta,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut all: Vec<&ImageSample<T>> = bundle
        .repre
        .iter()
        .chain(&bundle.refer)
        .chain(&bundle.query)
        .collect();
    for s in &all {
        if s.path.is_none() {
            return Err(Error::data("cannot save a sample without a relative path"));
        }
    }
    // canonical order: class id, then path; per-class file order must match
    // the generator's image order for the split to re-derive identically
    all.sort_by(|a, b| {
        (a.class_id, a.path.as_ref().unwrap()).cmp(&(b.class_id, b.path.as_ref().unwrap()))
    });

    let mut images_txt = String::new();
    let mut parts_txt = String::new();
    let mut bbox_txt = String::new();
    for (i, s) in all.iter().enumerate() {
        let rel = s.path.as_ref().unwrap();
        writeln!(images_txt, "{rel} {}", s.class_id).unwrap();
        let index = i + 1;
        if let Some(kps) = &s.keypoints {
            for (p, kp) in kps.iter().enumerate() {
                writeln!(
                    parts_txt,
                    "{index} {} {} {} {}",
                    p + 1,
                    kp.x,
                    kp.y,
                    u8::from(kp.visible)
                )
                .unwrap();
            }
        }
        if let Some(b) = &s.bbox {
            writeln!(
                bbox_txt,
                "{index} {} {} {} {}",
                b.x_min,
                b.y_min,
                b.width(),
                b.height()
            )
            .unwrap();
        }
        let img_path = dir.join(rel);
        if let Some(parent) = img_path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_png(&s.image, &img_path)?;
    }
    std::fs::write(dir.join("images.txt"), images_txt)?;
    std::fs::write(dir.join("parts.txt"), parts_txt)?;
    std::fs::write(dir.join("bounding_boxes.txt"), bbox_txt)?;
    let meta_json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::data(format!("meta serialization: {e}")))?;
    std::fs::write(dir.join("dataset.json"), meta_json)?;
    Ok(())
}

/// Load a bundle from the documented layout, optionally resizing every image
/// (and its annotations) to `resize_to` pixels square.
pub fn load_bundle<T: Scalar>(dir: &Path, resize_to: Option<usize>) -> Result<DatasetBundle<T>> {
    let meta = read_meta(dir)?;
    let images_txt = std::fs::read_to_string(dir.join("images.txt"))?;
    let parts_txt = std::fs::read_to_string(dir.join("parts.txt")).unwrap_or_default();
    let bbox_txt = std::fs::read_to_string(dir.join("bounding_boxes.txt")).unwrap_or_default();

    let mut keypoints_by_image: BTreeMap<usize, Vec<(usize, Keypoint)>> = BTreeMap::new();
    for line in parts_txt.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(Error::data(format!("bad parts.txt line: {line}")));
        }
        let idx: usize = parse(f[0], line)?;
        let part_id: usize = parse(f[1], line)?;
        if part_id == 0 || part_id > meta.num_parts {
            return Err(Error::data(format!(
                "part id {part_id} outside 1..={} in line: {line}",
                meta.num_parts
            )));
        }
        let kp = Keypoint {
            x: parse(f[2], line)?,
            y: parse(f[3], line)?,
            visible: f[4] == "1",
        };
        keypoints_by_image.entry(idx).or_default().push((part_id, kp));
    }
    let mut bbox_by_image: BTreeMap<usize, BBox> = BTreeMap::new();
    for line in bbox_txt.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(Error::data(format!("bad bounding_boxes.txt line: {line}")));
        }
        let idx: usize = parse(f[0], line)?;
        let (x, y, w, h): (f64, f64, f64, f64) = (
            parse(f[1], line)?,
            parse(f[2], line)?,
            parse(f[3], line)?,
            parse(f[4], line)?,
        );
        bbox_by_image.insert(
            idx,
            BBox {
                x_min: x,
                y_min: y,
                x_max: x + w,
                y_max: y + h,
            },
        );
    }

    let mut samples = Vec::new();
    for (i, line) in images_txt.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (rel, class_str) = line
            .rsplit_once(' ')
            .ok_or_else(|| Error::data(format!("bad images.txt line: {line}")))?;
        let class_id: u32 = parse(class_str, line)?;
        let index = i + 1;
        let mut image = read_png::<T>(&dir.join(rel))?;
        let (mut h, mut w) = (image.shape()[0] as f64, image.shape()[1] as f64);
        let mut keypoints = keypoints_by_image.remove(&index).map(|mut rows| {
            rows.sort_by_key(|&(pid, _)| pid);
            rows
        });
        if let Some(rows) = &keypoints {
            if rows.len() != meta.num_parts {
                return Err(Error::data(format!(
                    "image {index} lists {} parts, expected {}",
                    rows.len(),
                    meta.num_parts
                )));
            }
        }
        let mut bbox = bbox_by_image.remove(&index);
        if let Some(target) = resize_to {
            if image.shape()[0] != target || image.shape()[1] != target {
                let (sy, sx) = (target as f64 / h, target as f64 / w);
                image = resize_image(&image, target, target);
                if let Some(rows) = keypoints.as_mut() {
                    for (_, kp) in rows.iter_mut() {
                        kp.x *= sx;
                        kp.y *= sy;
                    }
                }
                if let Some(b) = bbox.as_mut() {
                    b.x_min *= sx;
                    b.x_max *= sx;
                    b.y_min *= sy;
                    b.y_max *= sy;
                }
                h = target as f64;
                w = target as f64;
            }
        }
        let _ = (h, w);
        let sample = ImageSample {
            image,
            class_id,
            keypoints: keypoints.map(|rows| rows.into_iter().map(|(_, kp)| kp).collect()),
            bbox,
            path: Some(rel.to_string()),
        };
        sample.validate()?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::data(format!(
            "no images listed under {}",
            dir.display()
        )));
    }

    let ids: Vec<u32> = {
        let mut set: Vec<u32> = samples.iter().map(|s| s.class_id).collect();
        set.sort_unstable();
        set.dedup();
        set
    };
    let splits = split_classes(&ids)?;
    let mut repre = Vec::new();
    let mut eval_pool = Vec::new();
    for s in samples {
        if splits.base.contains(&s.class_id) {
            repre.push(s);
        } else {
            eval_pool.push(s);
        }
    }
    let (refer, query) =
        make_reference_query(by_class(eval_pool), meta.refer_fraction, meta.split_seed)?;
    Ok(DatasetBundle {
        repre,
        refer,
        query,
        num_parts: meta.num_parts,
        splits,
    })
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let text = std::fs::read_to_string(dir.join("dataset.json"))
        .map_err(|_| Error::data(format!("missing dataset.json under {}", dir.display())))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("bad dataset.json: {e}")))?;
    if meta.format_version != DATASET_META_VERSION {
        return Err(Error::data(format!(
            "unsupported dataset format version {}",
            meta.format_version
        )));
    }
    Ok(meta)
}

fn parse<F: std::str::FromStr>(s: &str, line: &str) -> Result<F> {
    s.parse()
        .map_err(|_| Error::data(format!("bad field '{s}' in line: {line}")))
}

fn write_png<T: Scalar>(image: &Array3<T>, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                to_u8(image[(y, x, 0)]),
                to_u8(image[(y, x, 1)]),
                to_u8(image[(y, x, 2)]),
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)
        .map_err(|e| Error::data(format!("png write {}: {e}", path.display())))
}

fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.to_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

fn read_png<T: Scalar>(path: &Path) -> Result<Array3<T>> {
    let img = image::open(path)
        .map_err(|e| Error::data(format!("png read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        lit::<T>(img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
    }))
}

/// Bilinear image resize with half-pixel centers, `(H, W, 3)` layout.
pub fn resize_image<T: Scalar>(image: &Array3<T>, out_h: usize, out_w: usize) -> Array3<T> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let weights = |in_len: usize, out_len: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(in_len - 1), s - i0 as f64)
            })
            .collect()
    };
    let rows = weights(h, out_h);
    let cols = weights(w, out_w);
    Array3::from_shape_fn((out_h, out_w, 3), |(y, x, c)| {
        let (y0, y1, ty) = rows[y];
        let (x0, x1, tx) = cols[x];
        let v = image[(y0, x0, c)].to_f64() * (1.0 - ty) * (1.0 - tx)
            + image[(y0, x1, c)].to_f64() * (1.0 - ty) * tx
            + image[(y1, x0, c)].to_f64() * ty * (1.0 - tx)
            + image[(y1, x1, c)].to_f64() * ty * tx;
        lit::<T>(v)
    })
}

/// Mirror a sample horizontally, flipping keypoint x coordinates and the box.
pub fn hflip_sample<T: Scalar>(sample: &ImageSample<T>) -> ImageSample<T> {
    let (h, w) = (sample.img_h(), sample.img_w());
    let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| sample.image[(y, w - 1 - x, c)]);
    let wf = w as f64;
    let keypoints = sample.keypoints.as_ref().map(|kps| {
        kps.iter()
            .map(|kp| Keypoint {
                x: (wf - 1e-6 - kp.x).max(0.0),
                y: kp.y,
                visible: kp.visible,
            })
            .collect()
    });
    let bbox = sample.bbox.map(|b| BBox {
        x_min: wf - b.x_max,
        y_min: b.y_min,
        x_max: wf - b.x_min,
        y_max: b.y_max,
    });
    ImageSample {
        image,
        class_id: sample.class_id,
        keypoints,
        bbox,
        path: sample.path.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{gen_synthetic, SyntheticConfig};

    fn cfg() -> SyntheticConfig {
        SyntheticConfig {
            num_classes: 8,
            images_per_class: 5,
            num_parts: 3,
            image_size: 48,
            part_radius: 4.5,
            ..SyntheticConfig::default()
        }
    }

    fn meta(c: &SyntheticConfig, seed: u64) -> DatasetMeta {
        DatasetMeta {
            format_version: DATASET_META_VERSION,
            image_size: c.image_size,
            num_parts: c.num_parts,
            refer_fraction: c.refer_fraction,
            split_seed: seed,
        }
    }

    #[test]
    fn bundle_round_trips_through_disk() {
        let c = cfg();
        let bundle = gen_synthetic::<f32>(&c, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle, dir.path(), &meta(&c, 11)).unwrap();
        let back: DatasetBundle<f32> = load_bundle(dir.path(), None).unwrap();

        assert_eq!(back.num_parts, bundle.num_parts);
        assert_eq!(back.splits, bundle.splits);
        assert_eq!(back.repre.len(), bundle.repre.len());
        assert_eq!(back.refer.len(), bundle.refer.len());
        assert_eq!(back.query.len(), bundle.query.len());

        let key = |v: &[ImageSample<f32>]| -> Vec<String> {
            let mut paths: Vec<String> = v.iter().map(|s| s.path.clone().unwrap()).collect();
            paths.sort();
            paths
        };
        assert_eq!(key(&back.refer), key(&bundle.refer), "same reference split");
        assert_eq!(key(&back.query), key(&bundle.query));

        // pixels and annotations survive bit-exactly (u8-quantized source)
        let find = |v: &[ImageSample<f32>], p: &str| -> ImageSample<f32> {
            v.iter().find(|s| s.path.as_deref() == Some(p)).unwrap().clone()
        };
        let orig = &bundle.repre[0];
        let path = orig.path.clone().unwrap();
        let loaded = find(&back.repre, &path);
        assert_eq!(orig.image, loaded.image);
        assert_eq!(orig.keypoints, loaded.keypoints);
        let (ob, lb) = (orig.bbox.unwrap(), loaded.bbox.unwrap());
        assert!((ob.x_min - lb.x_min).abs() < 1e-9);
        assert!((ob.x_max - lb.x_max).abs() < 1e-9);
    }

    #[test]
    fn resize_rescales_annotations() {
        let c = cfg();
        let bundle = gen_synthetic::<f32>(&c, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&bundle, dir.path(), &meta(&c, 4)).unwrap();
        let back: DatasetBundle<f32> = load_bundle(dir.path(), Some(96)).unwrap();
        let s = &back.repre[0];
        assert_eq!(s.image.shape(), &[96, 96, 3]);
        s.validate().unwrap();
        let orig = &bundle.repre[0];
        let scale = 96.0 / 48.0;
        let ok = orig.keypoints.as_ref().unwrap();
        let nk = s.keypoints.as_ref().unwrap();
        assert!((nk[0].x - ok[0].x * scale).abs() < 1e-9);
        assert!((nk[0].y - ok[0].y * scale).abs() < 1e-9);
    }

    #[test]
    fn hflip_mirrors_annotations() {
        let c = cfg();
        let bundle = gen_synthetic::<f64>(&c, 6).unwrap();
        let s = &bundle.repre[0];
        let f = hflip_sample(s);
        f.validate().unwrap();
        let (a, b) = (
            s.keypoints.as_ref().unwrap()[0],
            f.keypoints.as_ref().unwrap()[0],
        );
        assert!((a.x + b.x - (s.img_w() as f64 - 1e-6)).abs() < 1e-9);
        assert_eq!(a.y, b.y);
        // double flip restores pixels
        let ff = hflip_sample(&f);
        assert_eq!(ff.image, s.image);
    }

    #[test]
    fn missing_meta_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_bundle::<f32>(dir.path(), None).is_err());
    }
}
