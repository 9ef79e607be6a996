//! Synthetic attribute-conditioned images and retrieval splits.
//!
//! A rendered person is a stack of colored bands, one per identity-level
//! category. The scene-level categories set the background color, the
//! illumination (brightness and color cast), background stripes, and corner
//! marks. Per-image jitter, exposure, background clutter, and pixel noise are
//! drawn from a seed, so the same record seen under different seeds gives
//! different pixels with the same attribute colors.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeRecord, AttributeSchema, Level};
use crate::error::{Error, Result};
use crate::tape::Mat;

const PALETTE: [[f32; 3]; 10] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.30, 0.90],
    [0.95, 0.95, 0.95],
    [0.10, 0.70, 0.20],
    [0.08, 0.08, 0.08],
    [0.95, 0.80, 0.10],
    [0.60, 0.20, 0.70],
    [0.55, 0.35, 0.15],
    [0.10, 0.80, 0.80],
    [0.95, 0.50, 0.70],
];

const BACKGROUNDS: [[f32; 3]; 6] = [
    [0.45, 0.45, 0.45],
    [0.35, 0.55, 0.35],
    [0.60, 0.55, 0.45],
    [0.30, 0.35, 0.50],
    [0.55, 0.40, 0.40],
    [0.50, 0.50, 0.30],
];

/// Per-channel color cast of each illumination value.
const CASTS: [[f32; 3]; 3] = [[1.0, 1.0, 1.0], [0.85, 0.95, 1.15], [1.15, 0.9, 0.7]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Maximum shift of the person glyph in pixels, each axis.
    pub jitter: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
    /// Palette-colored distractor patches drawn in the background.
    pub clutter: usize,
    /// Maximum relative deviation of the per-image exposure gain.
    pub exposure: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            jitter: 3,
            noise: 0.15,
            clutter: 10,
            exposure: 0.04,
        }
    }
}

/// A `(channels, height, width)` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Dimension(format!(
                "{} values for a 3x{height}x{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Range("image values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Channel-major `(3, height * width)` matrix for the backbone.
    pub fn to_mat(&self) -> Mat {
        Mat::from_shape_fn((Self::CHANNELS, self.height * self.width), |(c, i)| {
            self.data[c * self.height * self.width + i] as f64
        })
    }

    /// Mean color inside `rect`.
    pub fn region_mean(&self, rect: Rect) -> [f32; 3] {
        let mut acc = [0.0f32; 3];
        let n = (rect.area()).max(1) as f32;
        for (c, a) in acc.iter_mut().enumerate() {
            for y in rect.top..rect.bottom {
                for x in rect.left..rect.right {
                    *a += self.get(c, y, x);
                }
            }
            *a /= n;
        }
        acc
    }

    pub fn save(&self, path: &Path, lineage: Option<&serde_json::Value>) -> Result<()> {
        let header = serde_json::json!({
            "shape": [Self::CHANNELS, self.height, self.width],
            "dtype": "f32-le",
            "lineage": lineage,
        });
        let mut buf = serde_json::to_vec(&header)?;
        buf.push(b'\n');
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Render(format!("{}: missing header", path.display())))?;
        #[derive(Deserialize)]
        struct Header {
            shape: [usize; 3],
            dtype: String,
        }
        let header: Header = serde_json::from_slice(&bytes[..nl])?;
        if header.dtype != "f32-le" || header.shape[0] != Self::CHANNELS {
            return Err(Error::Render(format!("{}: unsupported image header", path.display())));
        }
        let body = &bytes[nl + 1..];
        let expected = header.shape.iter().product::<usize>() * 4;
        if body.len() != expected {
            return Err(Error::Render(format!(
                "{}: {} data bytes, expected {expected}",
                path.display(),
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_data(header.shape[1], header.shape[2], data)
    }
}

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.bottom).contains(&y) && (self.left..self.right).contains(&x)
    }

    /// Shrinks by `m` pixels on every side.
    pub fn inset(&self, m: usize) -> Rect {
        Rect {
            top: self.top + m,
            bottom: self.bottom.saturating_sub(m).max(self.top + m),
            left: self.left + m,
            right: self.right.saturating_sub(m).max(self.left + m),
        }
    }

    /// Grows by `m` pixels on every side, clipped to `h × w`.
    pub fn outset(&self, m: usize, h: usize, w: usize) -> Rect {
        Rect {
            top: self.top.saturating_sub(m),
            bottom: (self.bottom + m).min(h),
            left: self.left.saturating_sub(m),
            right: (self.right + m).min(w),
        }
    }
}

/// Where each identity-level category is drawn, before jitter.
pub fn category_regions(schema: &AttributeSchema, config: &RenderConfig) -> BTreeMap<String, Rect> {
    let body = body_rect(config);
    let cats: Vec<_> = schema
        .categories
        .iter()
        .filter(|c| c.level == Level::Identity)
        .collect();
    let n = cats.len().max(1);
    let band = (body.bottom - body.top) / n;
    cats.iter()
        .enumerate()
        .map(|(i, c)| {
            let rect = Rect {
                top: body.top + i * band,
                bottom: body.top + (i + 1) * band,
                left: body.left,
                right: body.right,
            };
            (c.name.clone(), rect)
        })
        .collect()
}

fn body_rect(config: &RenderConfig) -> Rect {
    let margin_y = config.height / 16 + config.jitter;
    let margin_x = config.width / 8 + config.jitter;
    Rect {
        top: margin_y,
        bottom: config.height - margin_y,
        left: margin_x,
        right: config.width - margin_x,
    }
}

fn image_rng(record: &AttributeRecord, seed: u64) -> ChaCha8Rng {
    let mix = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(record.identity_id.wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add(record.camera_id.wrapping_mul(0x1656_67B1_9E37_79F9));
    ChaCha8Rng::seed_from_u64(mix)
}

/// Renders `record` deterministically from `(record, seed, config)`.
pub fn render_image(
    record: &AttributeRecord,
    seed: u64,
    schema: &AttributeSchema,
    config: &RenderConfig,
) -> Result<ImageTensor> {
    let (h, w) = (config.height, config.width);
    let mut ids = Vec::new();
    let mut scene = Vec::new();
    for cat in &schema.categories {
        let value = record
            .value(&cat.name)
            .ok_or_else(|| Error::Render(format!("record lacks `{}`", cat.name)))?;
        let vi = cat
            .value_index(value)
            .ok_or_else(|| Error::Render(format!("unknown value `{value}` for `{}`", cat.name)))?;
        match cat.level {
            Level::Identity => ids.push((cat.name.as_str(), vi)),
            Level::Scene => scene.push(vi),
        }
    }
    if ids.iter().any(|&(_, vi)| vi >= PALETTE.len()) {
        return Err(Error::Render(format!("at most {} values per category", PALETTE.len())));
    }

    let mut rng = image_rng(record, seed);
    let j = config.jitter as i64;
    let dy = rng.random_range(-j..=j);
    let dx = rng.random_range(-j..=j);

    let e = config.exposure.abs();
    let gain = if e > 0.0 { 1.0 + rng.random_range(-e..=e) } else { 1.0 };
    let free = body_rect(config).outset(config.jitter, h, w);
    let patches: Vec<(Rect, [f32; 3])> = (0..config.clutter)
        .map(|_| {
            let (ph, pw) = (rng.random_range(2..=4usize), rng.random_range(2..=4usize));
            let top = rng.random_range(0..=h - ph);
            let left = rng.random_range(0..=w - pw);
            let color = PALETTE[rng.random_range(0..PALETTE.len())];
            let rect = Rect {
                top,
                bottom: top + ph,
                left,
                right: left + pw,
            };
            (rect, color)
        })
        .collect();

    // scene: 0 background color, 1 illumination (brightness and color cast),
    // 2 background stripes, 3+ corner marks
    let background = BACKGROUNDS[scene.first().copied().unwrap_or(0) % BACKGROUNDS.len()];
    let illumination = scene.get(1).copied().unwrap_or(0);
    let brightness = (1.0 - 0.2 * illumination as f32) * gain;
    let cast = CASTS[illumination % CASTS.len()];
    let stripes = scene.get(2).copied().unwrap_or(0);
    let marks: Vec<usize> = scene.iter().skip(3).copied().collect();

    let regions = category_regions(schema, config);
    let shifted: Vec<(Rect, [f32; 3])> = ids
        .iter()
        .map(|&(name, vi)| {
            let r = regions[name];
            let shift = |v: usize, d: i64| (v as i64 + d) as usize;
            (
                Rect {
                    top: shift(r.top, dy),
                    bottom: shift(r.bottom, dy),
                    left: shift(r.left, dx),
                    right: shift(r.right, dx),
                },
                PALETTE[vi],
            )
        })
        .collect();

    let noise = Normal::new(0.0f32, config.noise.max(0.0)).expect("finite std");
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut color = background;
            if stripes > 0 && (y + x * stripes) % (2 + 2 * stripes) < 2 {
                color = color.map(|v| (v * 0.6).min(1.0));
            }
            for (rect, c) in &patches {
                if rect.contains(y, x) && !free.contains(y, x) {
                    color = *c;
                }
            }
            for (mi, &m) in marks.iter().enumerate() {
                let corner_x = if mi % 2 == 0 { 0 } else { w - 3 };
                if y < 3 && (corner_x..corner_x + 3).contains(&x) {
                    color = PALETTE[(m + 2 * mi) % PALETTE.len()];
                }
            }
            for (rect, c) in &shifted {
                if rect.contains(y, x) {
                    color = *c;
                }
            }
            for c in 0..3 {
                let n = if config.noise > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data[(c * h + y) * w + x] = (color[c] * cast[c] * brightness + n).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::from_data(h, w, data)
}

/// One image: an annotation record rendered under a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageRef {
    pub record: usize,
    pub seed: u64,
}

impl ImageRef {
    /// Seed passed to [`render_image`] for this shot within a run.
    pub fn render_seed(&self, run_seed: u64) -> u64 {
        run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ self.seed
    }

    pub fn file_name(&self) -> String {
        format!("r{:05}_s{}.bin", self.record, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of identities reserved for caption pretraining only.
    pub pretrain_fraction: f64,
    /// Fraction of the remaining identities used for fine-tuning; the rest
    /// form the test split.
    pub train_fraction: f64,
    /// Images rendered per record (seeds `0..shots`).
    pub shots: u64,
    /// Leading shots of each test record that become queries.
    pub query_shots: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            pretrain_fraction: 0.0,
            train_fraction: 0.5,
            shots: 4,
            query_shots: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub domain: String,
    /// Annotation file, relative to the manifest.
    pub annotations: String,
    /// Image directory, relative to the manifest.
    pub images: String,
    /// Caption corpus, relative to the manifest.
    #[serde(default)]
    pub captions: String,
    /// Attribute schema, relative to the manifest.
    #[serde(default)]
    pub schema: String,
    pub seed: u64,
    /// Images of identities seen only during caption pretraining.
    #[serde(default)]
    pub pretrain: Vec<ImageRef>,
    pub train: Vec<ImageRef>,
    pub query: Vec<ImageRef>,
    pub gallery: Vec<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<serde_json::Value>,
}

impl SplitManifest {
    pub fn train_identities(&self, records: &[AttributeRecord]) -> BTreeSet<u64> {
        self.train.iter().map(|r| records[r.record].identity_id).collect()
    }

    pub fn test_identities(&self, records: &[AttributeRecord]) -> BTreeSet<u64> {
        self.query
            .iter()
            .chain(&self.gallery)
            .map(|r| records[r.record].identity_id)
            .collect()
    }

    pub fn pretrain_identities(&self, records: &[AttributeRecord]) -> BTreeSet<u64> {
        self.pretrain.iter().map(|r| records[r.record].identity_id).collect()
    }

    pub fn all_refs(&self) -> impl Iterator<Item = &ImageRef> {
        self.pretrain
            .iter()
            .chain(&self.train)
            .chain(&self.query)
            .chain(&self.gallery)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Identity-disjoint pretrain/train/test split with camera-aware
/// query/gallery roles. Identities are shuffled by `seed`, so domains sharing
/// identity ids and a seed get the same roles.
pub fn make_split(records: &[AttributeRecord], config: &SplitConfig, seed: u64, domain: &str) -> Result<SplitManifest> {
    if !(0.0..=1.0).contains(&config.train_fraction) {
        return Err(Error::config("split.train_fraction", "must lie in [0, 1]"));
    }
    if !(0.0..1.0).contains(&config.pretrain_fraction) {
        return Err(Error::config("split.pretrain_fraction", "must lie in [0, 1)"));
    }
    if config.query_shots == 0 || config.query_shots >= config.shots {
        return Err(Error::config(
            "split.query_shots",
            "need at least one query shot and one gallery shot per record",
        ));
    }
    let mut identities: Vec<u64> = records
        .iter()
        .map(|r| r.identity_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    identities.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_pre = (config.pretrain_fraction * identities.len() as f64).round() as usize;
    let rest = identities.len() - n_pre.min(identities.len());
    let n_train = (config.train_fraction * rest as f64).round() as usize;
    if n_train >= rest {
        return Err(Error::Split("no identities left for the test split".into()));
    }
    let pre_ids: BTreeSet<u64> = identities[..n_pre].iter().copied().collect();
    let train_ids: BTreeSet<u64> = identities[n_pre..n_pre + n_train].iter().copied().collect();

    let mut cameras: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for r in records {
        cameras.entry(r.identity_id).or_default().insert(r.camera_id);
    }

    let mut manifest = SplitManifest {
        domain: domain.to_string(),
        annotations: String::new(),
        images: String::new(),
        captions: String::new(),
        schema: String::new(),
        seed,
        pretrain: Vec::new(),
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
        lineage: None,
    };
    for (idx, r) in records.iter().enumerate() {
        if pre_ids.contains(&r.identity_id) {
            manifest
                .pretrain
                .extend((0..config.shots).map(|seed| ImageRef { record: idx, seed }));
            continue;
        }
        if train_ids.contains(&r.identity_id) {
            manifest
                .train
                .extend((0..config.shots).map(|seed| ImageRef { record: idx, seed }));
            continue;
        }
        if cameras[&r.identity_id].len() < 2 {
            return Err(Error::Split(format!(
                "identity {} is seen by a single camera and cannot be queried",
                r.identity_id
            )));
        }
        for seed in 0..config.shots {
            let image = ImageRef { record: idx, seed };
            if seed < config.query_shots {
                manifest.query.push(image);
            } else {
                manifest.gallery.push(image);
            }
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::Category;

    fn schema() -> AttributeSchema {
        AttributeSchema {
            categories: vec![
                Category::new("hair", Level::Identity, &["short hair", "long hair", "ponytail"]),
                Category::new("upper", Level::Identity, &["red shirt", "blue shirt"]),
                Category::new("lower", Level::Identity, &["black pants", "blue jeans"]),
                Category::new("background", Level::Scene, &["street", "park"]),
                Category::new("illumination", Level::Scene, &["bright", "dim"]),
            ],
        }
    }

    fn record(id: u64, cam: u64, hair: &str) -> AttributeRecord {
        AttributeRecord {
            identity_id: id,
            camera_id: cam,
            values: [
                ("hair", hair),
                ("upper", "red shirt"),
                ("lower", "blue jeans"),
                ("background", "park"),
                ("illumination", "bright"),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = RenderConfig::default();
        let r = record(1, 2, "long hair");
        let a = render_image(&r, 5, &schema(), &cfg).unwrap();
        let b = render_image(&r, 5, &schema(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn seeds_change_pixels_not_region_colors() {
        let cfg = RenderConfig::default();
        let r = record(1, 2, "long hair");
        let a = render_image(&r, 1, &schema(), &cfg).unwrap();
        let b = render_image(&r, 2, &schema(), &cfg).unwrap();
        assert_ne!(a, b);
        for rect in category_regions(&schema(), &cfg).values() {
            let inner = rect.inset(cfg.jitter);
            let (ma, mb) = (a.region_mean(inner), b.region_mean(inner));
            for c in 0..3 {
                assert!((ma[c] - mb[c]).abs() < 0.1, "{ma:?} vs {mb:?}");
            }
        }
    }

    #[test]
    fn one_attribute_changes_one_region() {
        let cfg = RenderConfig::default();
        let a = render_image(&record(1, 0, "long hair"), 3, &schema(), &cfg).unwrap();
        let b = render_image(&record(1, 0, "ponytail"), 3, &schema(), &cfg).unwrap();
        let hair = category_regions(&schema(), &cfg)["hair"].outset(cfg.jitter, cfg.height, cfg.width);
        let mut changed_inside = 0;
        for c in 0..3 {
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let diff = (a.get(c, y, x) - b.get(c, y, x)).abs();
                    if hair.contains(y, x) {
                        changed_inside += (diff > 0.0) as usize;
                    } else {
                        assert_eq!(diff, 0.0, "pixel ({c},{y},{x}) outside the hair band changed");
                    }
                }
            }
        }
        assert!(changed_inside > 0);
    }

    #[test]
    fn unknown_value_fails_to_render() {
        let mut r = record(1, 0, "long hair");
        r.values.insert("hair".into(), "mohawk".into());
        assert!(matches!(
            render_image(&r, 0, &schema(), &RenderConfig::default()),
            Err(Error::Render(_))
        ));
    }

    #[test]
    fn image_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = render_image(&record(1, 0, "long hair"), 0, &schema(), &RenderConfig::default()).unwrap();
        let path = dir.path().join("img.bin");
        img.save(&path, None).unwrap();
        assert_eq!(ImageTensor::load(&path).unwrap(), img);
    }

    fn population(ids: u64, cams: u64) -> Vec<AttributeRecord> {
        (0..ids)
            .flat_map(|id| (0..cams).map(move |cam| record(id, cam, "short hair")))
            .collect()
    }

    #[test]
    fn split_is_identity_disjoint_with_cross_camera_matches() {
        let records = population(40, 4);
        let m = make_split(&records, &SplitConfig::default(), 11, "a").unwrap();
        let train = m.train_identities(&records);
        let test = m.test_identities(&records);
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 20);
        assert!(train.is_disjoint(&test));
        for q in &m.query {
            let qr = &records[q.record];
            assert!(m.gallery.iter().any(|g| {
                let gr = &records[g.record];
                gr.identity_id == qr.identity_id && gr.camera_id != qr.camera_id
            }));
        }
        let again = make_split(&records, &SplitConfig::default(), 11, "a").unwrap();
        assert_eq!(serde_json::to_vec(&m).unwrap(), serde_json::to_vec(&again).unwrap());
    }

    #[test]
    fn pretrain_identities_are_a_third_role() {
        let records = population(40, 4);
        let config = SplitConfig {
            pretrain_fraction: 0.5,
            ..SplitConfig::default()
        };
        let m = make_split(&records, &config, 3, "a").unwrap();
        let pre = m.pretrain_identities(&records);
        let train = m.train_identities(&records);
        let test = m.test_identities(&records);
        assert_eq!((pre.len(), train.len(), test.len()), (20, 10, 10));
        assert!(pre.is_disjoint(&train) && pre.is_disjoint(&test) && train.is_disjoint(&test));
        assert_eq!(m.all_refs().count(), 40 * 4 * config.shots as usize);
    }

    #[test]
    fn degenerate_splits_fail() {
        let records = population(10, 2);
        let all_train = SplitConfig {
            train_fraction: 1.0,
            ..SplitConfig::default()
        };
        assert!(matches!(make_split(&records, &all_train, 0, "a"), Err(Error::Split(_))));

        let single_cam = population(10, 1);
        assert!(matches!(
            make_split(&single_cam, &SplitConfig::default(), 0, "a"),
            Err(Error::Split(_))
        ));
    }
}
