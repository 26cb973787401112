//! Procedural polyp-like image/mask pairs, their on-disk layout and an
//! in-memory dataset view.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.jsonl        one JSON object per item
//! images/00000.ppm      P6, maxval 255
//! masks/00000.pgm       P5, maxval 255, values 0 or 255
//! ```
//!
//! Manifest fields, one line per item:
//!
//! * `index`: item index; train items come first, then test items.
//! * `image`, `mask`: paths relative to the dataset root.
//! * `seed`: the per-item seed, `mix(master_seed, index)`.
//! * `split`: `"train"` or `"test"`.
//! * `blob`: the [`BlobParams`] used to render the item, or `null` for items
//!   that were not procedurally generated (e.g. sampled images).

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pnm::{write_atomic, Raster};
use crate::rng::{mix, randn, RngState};
use crate::tensor::Tensor;

pub const BLUR_SIGMA: f64 = 4.0;
pub const TEXTURE_SIGMA: f64 = 1.5;
pub const AXIS_RANGE: (f64, f64) = (0.10, 0.40);
/// Width of the alpha ramp across the ellipse boundary, in pixels.
pub const EDGE_WIDTH: f64 = 2.0;
pub const MIN_RATIO: f64 = 0.01;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    /// Images are square, `size × size`.
    pub size: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { size: 32 }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("image size {} is below 8", self.size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    /// Ellipse center as fractions of the image side, `[x, y]`.
    pub center: [f64; 2],
    /// Semi-axes as fractions of the image side.
    pub axes: [f64; 2],
    /// Rotation in radians.
    pub rotation: f64,
    /// Shifts red against green inside the blob.
    pub hue_offset: f64,
    pub brightness_offset: f64,
    /// Seeds of the two background fields and the foreground texture.
    pub texture_seeds: [u64; 3],
}

impl BlobParams {
    /// Normalized elliptical radius at the center of pixel `(x, y)` and
    /// the approximate signed distance to the boundary in pixels.
    fn radius_and_distance(&self, size: usize, x: usize, y: usize) -> (f64, f64) {
        let s = size as f64;
        let dx = x as f64 + 0.5 - self.center[0] * s;
        let dy = y as f64 + 0.5 - self.center[1] * s;
        let (sin, cos) = self.rotation.sin_cos();
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        let a = self.axes[0] * s;
        let b = self.axes[1] * s;
        let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
        if rho == 0.0 {
            return (0.0, f64::NEG_INFINITY);
        }
        let grad = ((u / (a * a)).powi(2) + (v / (b * b)).powi(2)).sqrt() / rho;
        (rho, (rho - 1.0) / grad)
    }

    /// Analytic indicator of the ellipse interior on the pixel grid, as 0/255.
    pub fn mask_bytes(&self, size: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (rho, _) = self.radius_and_distance(size, x, y);
                out.push(if rho < 1.0 { 255 } else { 0 });
            }
        }
        out
    }

    /// Soft coverage with a linear ramp of [`EDGE_WIDTH`] pixels centred on the boundary.
    pub fn alpha(&self, size: usize, x: usize, y: usize) -> f64 {
        let (_, d) = self.radius_and_distance(size, x, y);
        (0.5 - d / EDGE_WIDTH).clamp(0.0, 1.0)
    }

    pub fn check(&self) -> Result<()> {
        let (lo, hi) = AXIS_RANGE;
        let ok = self.axes.iter().all(|a| (lo..=hi).contains(a))
            && self.center.iter().all(|c| (0.0..=1.0).contains(c))
            && self.rotation.is_finite();
        if !ok {
            return Err(Error::Input(format!("blob parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

/// A rendered item as 8-bit rasters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub image: Raster,
    pub mask: Raster,
    pub blob: Option<BlobParams>,
    pub seed: u64,
}

impl SynthItem {
    pub fn image_tensor(&self) -> Tensor {
        image_to_tensor(&self.image)
    }

    pub fn mask_tensor(&self) -> Tensor {
        mask_to_tensor(&self.mask)
    }
}

/// Unit-variance noise blurred by a truncated Gaussian whose taps are
/// scaled so the output variance is one as well.
pub fn smooth_field(seed: u64, size: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|t| *t /= norm);

    let big = size + 2 * radius;
    let mut rng = RngState::new(seed).generator();
    let noise = randn([1, 1, big, big], &mut rng).into_data();
    let mut rows = vec![0.0; size * big];
    for y in 0..big {
        for x in 0..size {
            rows[y * size + x] = taps.iter().enumerate().map(|(k, t)| t * noise[y * big + x + k]).sum();
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * size + x]).sum();
        }
    }
    out
}

fn draw_blob(rng: &mut ChaCha8Rng) -> BlobParams {
    let (lo, hi) = AXIS_RANGE;
    // squaring skews sizes toward small blobs
    let a = lo + (hi - lo) * rng.random::<f64>().powi(2);
    let aspect = rng.random_range(0.6..=1.0);
    let b = (a * aspect).clamp(lo, hi);
    let rotation = rng.random_range(0.0..PI);
    let (sin, cos) = rotation.sin_cos();
    let ext_x = ((a * cos).powi(2) + (b * sin).powi(2)).sqrt();
    let ext_y = ((a * sin).powi(2) + (b * cos).powi(2)).sqrt();
    // centers may sit close enough to the border for the blob to be clipped
    let cx = rng.random_range(0.25 * ext_x..=1.0 - 0.25 * ext_x);
    let cy = rng.random_range(0.25 * ext_y..=1.0 - 0.25 * ext_y);
    BlobParams {
        center: [cx, cy],
        axes: [a, b],
        rotation,
        hue_offset: rng.random_range(-0.06..=0.06),
        brightness_offset: rng.random_range(0.08..=0.18),
        texture_seeds: [rng.random(), rng.random(), rng.random()],
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders the image for `blob` (or background only when `None`) and the
/// matching mask.
pub fn render(geometry: Geometry, blob: Option<&BlobParams>, background_seeds: [u64; 2]) -> Result<(Raster, Raster)> {
    geometry.validate()?;
    let s = geometry.size;
    let f1 = smooth_field(background_seeds[0], s, BLUR_SIGMA);
    let f2 = smooth_field(background_seeds[1], s, BLUR_SIGMA);
    let tex = blob.map(|b| smooth_field(b.texture_seeds[2], s, TEXTURE_SIGMA));
    let mut rgb = Vec::with_capacity(3 * s * s);
    let mut mask = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            let k = y * s + x;
            let bg = [
                0.80 + 0.07 * f1[k] + 0.03 * f2[k],
                0.45 + 0.05 * f1[k] - 0.04 * f2[k],
                0.38 + 0.04 * f1[k] - 0.03 * f2[k],
            ];
            let mut px = bg;
            if let (Some(b), Some(tex)) = (blob, &tex) {
                let alpha = b.alpha(s, x, y);
                let t = 0.06 * tex[k];
                let fg = [
                    0.86 + b.brightness_offset + b.hue_offset + t,
                    0.50 + b.brightness_offset - b.hue_offset + t,
                    0.40 + b.brightness_offset + 0.5 * t,
                ];
                for c in 0..3 {
                    px[c] = (1.0 - alpha) * bg[c] + alpha * fg[c];
                }
                let (rho, _) = b.radius_and_distance(s, x, y);
                mask[k] = if rho < 1.0 { 255 } else { 0 };
            }
            rgb.extend(px.iter().map(|&v| quantize(v)));
        }
    }
    Ok((
        Raster {
            width: s,
            height: s,
            channels: 3,
            data: rgb,
        },
        Raster {
            width: s,
            height: s,
            channels: 1,
            data: mask,
        },
    ))
}

pub fn item_seed(master_seed: u64, index: u64) -> u64 {
    mix(master_seed, index)
}

/// Deterministically generates item `index`. Blobs covering less than
/// [`MIN_RATIO`] of the image are redrawn from the same stream.
pub fn gen_item(master_seed: u64, index: u64, geometry: Geometry) -> Result<SynthItem> {
    geometry.validate()?;
    let seed = item_seed(master_seed, index);
    let mut rng = RngState::new(seed).generator();
    let min_pixels = (MIN_RATIO * (geometry.size * geometry.size) as f64).ceil() as usize;
    loop {
        let blob = draw_blob(&mut rng);
        let covered = blob.mask_bytes(geometry.size).iter().filter(|&&m| m > 0).count();
        if covered < min_pixels {
            continue;
        }
        let seeds = [blob.texture_seeds[0], blob.texture_seeds[1]];
        let (image, mask) = render(geometry, Some(&blob), seeds)?;
        return Ok(SynthItem {
            image,
            mask,
            blob: Some(blob),
            seed,
        });
    }
}

/// Background-only item with an empty mask, for degenerate-input tests.
pub fn gen_empty_item(master_seed: u64, index: u64, geometry: Geometry) -> Result<SynthItem> {
    let seed = item_seed(master_seed, index);
    let mut rng = RngState::new(seed).generator();
    let (image, mask) = render(geometry, None, [rng.random(), rng.random()])?;
    Ok(SynthItem {
        image,
        mask,
        blob: None,
        seed,
    })
}

pub fn image_to_tensor(r: &Raster) -> Tensor {
    let (h, w) = (r.height, r.width);
    let mut t = Tensor::zeros([1, 3, h, w]);
    let d = t.data_mut();
    for k in 0..h * w {
        for c in 0..3 {
            d[c * h * w + k] = f64::from(r.data[3 * k + c]) / 127.5 - 1.0;
        }
    }
    t
}

pub fn mask_to_tensor(r: &Raster) -> Tensor {
    let data = r.data.iter().map(|&v| if v > 127 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec([1, 1, r.height, r.width], data).expect("length matches shape")
}

/// Quantizes item `n` of an image batch in [-1, 1] to an 8-bit raster.
pub fn tensor_to_image(t: &Tensor, n: usize) -> Raster {
    let [_, c, h, w] = t.shape();
    let src = t.item_slice(n);
    let mut data = Vec::with_capacity(3 * h * w);
    for k in 0..h * w {
        for ch in 0..3 {
            let v = src[ch.min(c - 1) * h * w + k];
            data.push(quantize((v + 1.0) / 2.0));
        }
    }
    Raster {
        width: w,
        height: h,
        channels: 3,
        data,
    }
}

pub fn tensor_to_mask(t: &Tensor, n: usize) -> Raster {
    let [_, _, h, w] = t.shape();
    Raster {
        width: w,
        height: h,
        channels: 1,
        data: t.item_slice(n)[..h * w].iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect(),
    }
}

/// SHA-256 over the raw image samples followed by the raw mask samples.
pub fn item_digest(image: &Raster, mask: &Raster) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(&image.data);
    h.update(&mask.data);
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub index: u64,
    pub image: String,
    pub mask: String,
    pub seed: u64,
    pub split: Split,
    pub blob: Option<BlobParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub geometry: Geometry,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        let mut items = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: ManifestItem = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.display().to_string(),
                reason: format!("line {}: {e}", line_no + 1),
            })?;
            items.push(item);
        }
        let first = items.first().ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: "manifest lists no items".into(),
        })?;
        let probe = Raster::read(&root.join(&first.image))?;
        Ok(Self {
            root: root.to_path_buf(),
            geometry: Geometry { size: probe.width },
            items,
        })
    }

    pub fn count(&self, split: Split) -> usize {
        self.items.iter().filter(|i| i.split == split).count()
    }

    /// SHA-256 of the manifest file contents.
    pub fn digest(&self) -> Result<String> {
        let bytes = fs::read(self.root.join(MANIFEST_FILE))?;
        Ok(hex(&Sha256::digest(&bytes)))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fails on a non-empty `out_dir` unless `overwrite` is set, in which case
/// the directory is cleared first.
pub fn prepare_out_dir(out_dir: &Path, overwrite: bool) -> Result<()> {
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::Input(format!(
                    "output directory {} is not empty (pass overwrite to replace it)",
                    out_dir.display()
                )));
            }
            fs::remove_dir_all(out_dir)?;
        }
    }
    fs::create_dir_all(out_dir)?;
    Ok(())
}

/// Writes rasters and the manifest for `items` into a prepared directory.
pub fn write_items(out_dir: &Path, items: &[(SynthItem, u64, Split)]) -> Result<DatasetManifest> {
    let mut manifest = Vec::with_capacity(items.len());
    let mut size = 0;
    for (item, index, split) in items {
        let image = format!("images/{index:05}.ppm");
        let mask = format!("masks/{index:05}.pgm");
        item.image.write_atomic(&out_dir.join(&image))?;
        item.mask.write_atomic(&out_dir.join(&mask))?;
        size = item.image.width;
        manifest.push(ManifestItem {
            index: *index,
            image,
            mask,
            seed: item.seed,
            split: *split,
            blob: item.blob.clone(),
        });
    }
    let mut text = String::new();
    for m in &manifest {
        text.push_str(&serde_json::to_string(m)?);
        text.push('\n');
    }
    write_atomic(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(DatasetManifest {
        root: out_dir.to_path_buf(),
        geometry: Geometry { size },
        items: manifest,
    })
}

pub fn gen_dataset(
    master_seed: u64,
    n_train: usize,
    n_test: usize,
    geometry: Geometry,
    out_dir: &Path,
    overwrite: bool,
) -> Result<DatasetManifest> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config(format!(
            "need at least one train and one test item (got {n_train}/{n_test})"
        )));
    }
    geometry.validate()?;
    prepare_out_dir(out_dir, overwrite)?;
    let mut items = Vec::with_capacity(n_train + n_test);
    for index in 0..(n_train + n_test) as u64 {
        let split = if (index as usize) < n_train { Split::Train } else { Split::Test };
        items.push((gen_item(master_seed, index, geometry)?, index, split));
    }
    write_items(out_dir, &items)
}

/// Images and masks held in memory as `[1, C, S, S]` tensors.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub digests: Vec<[u8; 32]>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, split: Option<Split>) -> Result<Self> {
        let mut ds = Self::default();
        for item in &manifest.items {
            if split.is_some_and(|s| s != item.split) {
                continue;
            }
            let image = Raster::read(&manifest.root.join(&item.image))?;
            let mask = Raster::read(&manifest.root.join(&item.mask))?;
            ds.push_rasters(&image, &mask)?;
        }
        Ok(ds)
    }

    pub fn from_items(items: &[SynthItem]) -> Result<Self> {
        let mut ds = Self::default();
        for it in items {
            ds.push_rasters(&it.image, &it.mask)?;
        }
        Ok(ds)
    }

    pub fn push_rasters(&mut self, image: &Raster, mask: &Raster) -> Result<()> {
        if image.channels != 3 || mask.channels != 1 || image.width != mask.width || image.height != mask.height {
            return Err(Error::Input("image/mask raster mismatch".into()));
        }
        if let Some(first) = self.images.first() {
            if first.height() != image.height || first.width() != image.width {
                return Err(Error::Input("dataset items differ in size".into()));
            }
        }
        self.images.push(image_to_tensor(image));
        self.masks.push(mask_to_tensor(mask));
        self.digests.push(item_digest(image, mask));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn extend(&mut self, other: &Dataset) {
        self.images.extend(other.images.iter().cloned());
        self.masks.extend(other.masks.iter().cloned());
        self.digests.extend(other.digests.iter().copied());
    }

    /// Stacks the listed items into `([N,3,S,S], [N,1,S,S])`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let images: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        let masks: Vec<Tensor> = indices.iter().map(|&i| self.masks[i].clone()).collect();
        Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ratio(item: &SynthItem) -> f64 {
        item.mask.data.iter().filter(|&&m| m > 0).count() as f64 / item.mask.data.len() as f64
    }

    #[test]
    fn same_seed_and_index_give_identical_items() {
        let g = Geometry::default();
        assert_eq!(gen_item(7, 3, g).unwrap(), gen_item(7, 3, g).unwrap());
        assert_ne!(gen_item(7, 3, g).unwrap().image, gen_item(7, 4, g).unwrap().image);
    }

    #[test]
    fn ratio_bounds_over_1000_items() {
        let g = Geometry::default();
        let (mut lo, mut hi) = (1.0f64, 0.0f64);
        for i in 0..1000 {
            let r = ratio(&gen_item(11, i, g).unwrap());
            assert!((0.01..=0.55).contains(&r), "item {i}: r = {r}");
            lo = lo.min(r);
            hi = hi.max(r);
        }
        assert!(lo <= 0.02 && hi >= 0.4, "span [{lo}, {hi}]");
    }

    #[test]
    fn mask_matches_analytic_ellipse() {
        let g = Geometry { size: 40 };
        for i in 0..50 {
            let item = gen_item(5, i, g).unwrap();
            let blob = item.blob.as_ref().unwrap();
            blob.check().unwrap();
            // independent point-in-ellipse test in the blob's rotated frame
            let s = g.size as f64;
            let (sin, cos) = blob.rotation.sin_cos();
            for y in 0..g.size {
                for x in 0..g.size {
                    let px = (x as f64 + 0.5) / s - blob.center[0];
                    let py = (y as f64 + 0.5) / s - blob.center[1];
                    let u = (px * cos + py * sin) / blob.axes[0];
                    let v = (-px * sin + py * cos) / blob.axes[1];
                    let inside = u * u + v * v < 1.0;
                    let stored = item.mask.data[y * g.size + x] > 0;
                    let alpha = blob.alpha(g.size, x, y);
                    if (u * u + v * v - 1.0).abs() > 1e-9 {
                        assert_eq!(inside, stored, "item {i} pixel ({x},{y})");
                        assert_eq!(alpha > 0.5, stored);
                    }
                }
            }
        }
    }

    #[test]
    fn smooth_field_has_unit_variance() {
        let f = smooth_field(3, 256, BLUR_SIGMA);
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64;
        // the field is strongly correlated, so the sample variance is noisy
        assert!((var - 1.0).abs() < 0.3, "var {var}");
    }

    #[test]
    fn tensor_conversions_round_trip() {
        let item = gen_item(1, 0, Geometry::default()).unwrap();
        let t = item.image_tensor();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(tensor_to_image(&t, 0), item.image);
        assert_eq!(tensor_to_mask(&item.mask_tensor(), 0), item.mask);
    }

    #[test]
    fn empty_item_has_empty_mask() {
        let item = gen_empty_item(1, 0, Geometry::default()).unwrap();
        assert!(item.mask.data.iter().all(|&m| m == 0));
        assert!(item.blob.is_none());
    }

    #[test]
    fn degenerate_geometry_is_rejected() {
        assert!(gen_item(1, 0, Geometry { size: 2 }).is_err());
    }
}
