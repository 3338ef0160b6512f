//! Feature providers standing in for pretrained image/text encoders.
//!
//! Features either come from `.ten` fixture files described by JSON
//! manifests, or are synthesised with planted class structure: orthonormal
//! class embeddings, pixels inside a layout box carrying their class's
//! embedding plus Gaussian noise, and FPN-like features obtained by a fixed
//! seeded linear projection of the pixel features.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{ten, Tensor};
use crate::pgm;
use crate::proposals::BBox;

/// Class embeddings `D×C` and their names.
#[derive(Clone, Debug, PartialEq)]
pub struct TextBank {
    pub embeddings: Tensor,
    pub class_names: Vec<String>,
}

impl TextBank {
    pub fn new(embeddings: Tensor, class_names: Vec<String>) -> Result<Self> {
        if embeddings.ndim() != 2 {
            return Err(dim_err("text bank", embeddings.shape(), &[]));
        }
        if class_names.is_empty() || embeddings.dim(1) != class_names.len() {
            return Err(Error::Manifest(format!(
                "text bank has {} columns but {} class names",
                embeddings.dim(1),
                class_names.len()
            )));
        }
        Ok(Self {
            embeddings,
            class_names,
        })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim(0)
    }

    pub fn classes(&self) -> usize {
        self.embeddings.dim(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtMask {
    pub mask: Tensor,
    pub class_id: usize,
}

/// One image worth of encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    /// `H×W×D`
    pub pixel_features: Tensor,
    /// `D'×H×W`
    pub fpn_features: Tensor,
    /// Used only for evaluation.
    pub gt_masks: Vec<GtMask>,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.pixel_features.dim(0)
    }

    pub fn width(&self) -> usize {
        self.pixel_features.dim(1)
    }

    pub fn text_dim(&self) -> usize {
        self.pixel_features.dim(2)
    }

    pub fn fpn_dim(&self) -> usize {
        self.fpn_features.dim(0)
    }

    /// FPN features flattened to `D'×(H·W)`.
    pub fn fpn_matrix(&self) -> Tensor {
        self.fpn_features
            .reshape([self.fpn_dim(), self.height() * self.width()])
            .expect("fpn features are D'×H×W")
    }

    fn validate(&self, classes: usize) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.fpn_features.ndim() != 3 || self.fpn_features.shape()[1..] != [h, w] {
            return Err(dim_err(
                "scene fpn features",
                self.pixel_features.shape(),
                self.fpn_features.shape(),
            ));
        }
        for gt in &self.gt_masks {
            if gt.mask.shape() != [h, w] {
                return Err(dim_err("gt mask", gt.mask.shape(), &[h, w]));
            }
            if gt.class_id >= classes {
                return Err(Error::Manifest(format!(
                    "gt class id {} with only {classes} classes",
                    gt.class_id
                )));
            }
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `C` orthonormal `D`-dimensional class embeddings (Gram–Schmidt over
/// seeded Gaussian draws).
pub fn synth_text_bank(classes: usize, dim: usize, seed: u64) -> Result<TextBank> {
    if classes == 0 {
        return Err(Error::Capacity("text bank needs at least one class".into()));
    }
    if classes > dim {
        return Err(Error::Capacity(format!(
            "{classes} orthogonal classes do not fit in {dim} dimensions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while columns.len() < classes {
        let mut v = gaussian_matrix(&mut rng, dim);
        // two passes keep the basis orthogonal to f64 precision
        for _ in 0..2 {
            for q in &columns {
                let proj: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        columns.push(v);
    }
    let embeddings = Tensor::from_fn([dim, classes], |i| columns[i % classes][i / classes] as f32);
    let names = (0..classes).map(|c| format!("class_{c}")).collect();
    TextBank::new(embeddings, names)
}

/// Fixed linear map from pixel features to FPN-like features.
#[derive(Clone, Debug, PartialEq)]
pub struct FpnProjection {
    /// `D'×D`
    pub matrix: Tensor,
}

impl FpnProjection {
    /// Gaussian entries with standard deviation `gain / sqrt(D)`.
    pub fn seeded(text_dim: usize, fpn_dim: usize, gain: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = gain as f64 / (text_dim.max(1) as f64).sqrt();
        let m = gaussian_matrix(&mut rng, fpn_dim * text_dim);
        Self {
            matrix: Tensor::from_fn([fpn_dim, text_dim], |i| (m[i] * std) as f32),
        }
    }

    /// `H×W×D` → `D'×H×W`.
    pub fn project(&self, pixel_features: &Tensor) -> Result<Tensor> {
        let (h, w, d) = (
            pixel_features.dim(0),
            pixel_features.dim(1),
            pixel_features.dim(2),
        );
        let flat = pixel_features.reshape([h * w, d])?.transpose()?;
        self.matrix.matmul(&flat)?.reshape([self.matrix.dim(0), h, w])
    }
}

/// One planted object: a box filled with a class embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutItem {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Synthesises one scene. Later layout entries overwrite earlier ones.
#[allow(clippy::too_many_arguments)]
pub fn synth_scene(
    id: impl Into<String>,
    bank: &TextBank,
    projection: &FpnProjection,
    height: usize,
    width: usize,
    layout: &[LayoutItem],
    noise_sigma: f32,
    seed: u64,
) -> Result<Scene> {
    let d = bank.dim();
    if projection.matrix.dim(1) != d {
        return Err(dim_err("fpn projection", projection.matrix.shape(), bank.embeddings.shape()));
    }
    let mut owner: Vec<Option<usize>> = vec![None; height * width];
    for (k, item) in layout.iter().enumerate() {
        if !item.bbox.fits(height, width) {
            return Err(Error::Bounds(format!(
                "{:?} outside {height}x{width}",
                item.bbox
            )));
        }
        if item.class_id >= bank.classes() {
            return Err(Error::Bounds(format!(
                "class {} of {}",
                item.class_id,
                bank.classes()
            )));
        }
        for r in item.bbox.row_min..=item.bbox.row_max {
            for c in item.bbox.col_min..=item.bbox.col_max {
                owner[r * width + c] = Some(k);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = bank.embeddings.data();
    let classes = bank.classes();
    let mut pixels = Vec::with_capacity(height * width * d);
    for o in &owner {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            let noise = (z * noise_sigma as f64) as f32;
            let base = o.map_or(0.0, |k| emb[j * classes + layout[k].class_id]);
            pixels.push(base + noise);
        }
    }
    let pixel_features = Tensor::new([height, width, d], pixels)?;
    let fpn_features = projection.project(&pixel_features)?;

    let gt_masks = layout
        .iter()
        .enumerate()
        .filter_map(|(k, item)| {
            let m: Vec<f32> = owner
                .iter()
                .map(|&o| if o == Some(k) { 1.0 } else { 0.0 })
                .collect();
            m.iter().any(|&v| v > 0.0).then(|| GtMask {
                mask: Tensor::new([height, width], m).expect("mask shape"),
                class_id: item.class_id,
            })
        })
        .collect();

    Ok(Scene {
        id: id.into(),
        pixel_features,
        fpn_features,
        gt_masks,
        seed,
    })
}

/// Settings of a seeded collection of synthetic scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureConfig {
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub text_dim: usize,
    pub fpn_dim: usize,
    pub classes: usize,
    pub noise_sigma: f32,
    pub fpn_gain: f32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    /// The reference desk-scale fixture.
    fn default() -> Self {
        Self {
            scenes: 8,
            height: 32,
            width: 32,
            text_dim: 16,
            fpn_dim: 16,
            classes: 4,
            noise_sigma: 0.05,
            fpn_gain: 3.0,
            min_objects: 1,
            max_objects: 3,
            min_side: 6,
            max_side: 12,
            seed: 20240517,
        }
    }
}

/// Text bank plus scenes, all sharing the bank's class space.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub bank: TextBank,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn new(bank: TextBank, scenes: Vec<Scene>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Config("dataset needs at least one scene".into()));
        }
        let first = &scenes[0];
        for s in &scenes {
            if s.text_dim() != bank.dim() {
                return Err(dim_err("scene vs text bank", s.pixel_features.shape(), bank.embeddings.shape()));
            }
            if (s.height(), s.width(), s.fpn_dim()) != (first.height(), first.width(), first.fpn_dim()) {
                return Err(dim_err("scene geometry", first.fpn_features.shape(), s.fpn_features.shape()));
            }
            s.validate(bank.classes())?;
        }
        Ok(Self { bank, scenes })
    }

    /// SHA-256 over the `.ten` encodings of every tensor, in order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(ten::encode(&self.bank.embeddings));
        for name in &self.bank.class_names {
            h.update(name.as_bytes());
            h.update([0]);
        }
        for s in &self.scenes {
            h.update(s.id.as_bytes());
            h.update([0]);
            h.update(ten::encode(&s.pixel_features));
            h.update(ten::encode(&s.fpn_features));
            for gt in &s.gt_masks {
                h.update((gt.class_id as u64).to_le_bytes());
                h.update(ten::encode(&gt.mask));
            }
        }
        hex::encode(h.finalize())
    }
}

/// Draws up to `max_objects` boxes that neither overlap nor touch.
pub fn random_layout(rng: &mut impl Rng, cfg: &FixtureConfig) -> Vec<LayoutItem> {
    let target = rng.random_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    let max_side = cfg.max_side.min(cfg.height).min(cfg.width);
    let min_side = cfg.min_side.clamp(1, max_side);
    let mut items: Vec<LayoutItem> = Vec::new();
    let mut attempts = 0;
    while items.len() < target && attempts < 200 {
        attempts += 1;
        let bh = rng.random_range(min_side..=max_side);
        let bw = rng.random_range(min_side..=max_side);
        let r = rng.random_range(0..=cfg.height - bh);
        let c = rng.random_range(0..=cfg.width - bw);
        let bbox = BBox::new(r, c, r + bh - 1, c + bw - 1);
        let grown = BBox::new(
            r.saturating_sub(1),
            c.saturating_sub(1),
            r + bh,
            c + bw,
        );
        if items.iter().any(|it| it.bbox.intersection_area(&grown) > 0) {
            continue;
        }
        items.push(LayoutItem {
            bbox,
            class_id: rng.random_range(0..cfg.classes),
        });
    }
    items
}

/// Builds the synthetic dataset described by `cfg`.
pub fn synth_dataset(cfg: &FixtureConfig) -> Result<Dataset> {
    if cfg.scenes == 0 {
        return Err(Error::Config("fixture needs at least one scene".into()));
    }
    let bank = synth_text_bank(cfg.classes, cfg.text_dim, cfg.seed)?;
    let projection = FpnProjection::seeded(cfg.text_dim, cfg.fpn_dim, cfg.fpn_gain, cfg.seed ^ 0x9e37_79b9);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let scenes = (0..cfg.scenes)
        .map(|i| {
            let layout = random_layout(&mut rng, cfg);
            let scene_seed = rng.random::<u64>();
            synth_scene(
                format!("scene_{i:03}"),
                &bank,
                &projection,
                cfg.height,
                cfg.width,
                &layout,
                cfg.noise_sigma,
                scene_seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(bank, scenes)
}

// ---------------------------------------------------------------------------
// fixture files

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextBankManifest {
    pub embeddings: PathBuf,
    pub dim: usize,
    pub classes: usize,
    pub class_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtMaskEntry {
    pub path: PathBuf,
    pub class_id: usize,
}

/// Sidecar JSON describing one scene's tensor files.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub id: String,
    pub pixel_features: PathBuf,
    pub fpn_features: PathBuf,
    pub text_bank: PathBuf,
    pub height: usize,
    pub width: usize,
    pub text_dim: usize,
    pub fpn_dim: usize,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub gt_masks: Vec<GtMaskEntry>,
    pub seed: u64,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parent_dir(path: &Path) -> &Path {
    path.parent().unwrap_or_else(|| Path::new("."))
}

fn expect_shape(what: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Manifest(format!(
            "{what} has shape {:?}, manifest says {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

pub fn load_text_bank(path: impl AsRef<Path>) -> Result<TextBank> {
    let path = path.as_ref();
    let m: TextBankManifest = serde_json::from_slice(&std::fs::read(path)?)?;
    let emb = ten::read(resolve(parent_dir(path), &m.embeddings))?;
    if m.class_names.len() != m.classes {
        return Err(Error::Manifest(format!(
            "{} class names for {} classes",
            m.class_names.len(),
            m.classes
        )));
    }
    expect_shape("text bank", &emb, &[m.dim, m.classes])?;
    TextBank::new(emb, m.class_names)
}

pub fn write_text_bank(dir: impl AsRef<Path>, bank: &TextBank) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    ten::write(dir.join("text_bank.ten"), &bank.embeddings)?;
    let m = TextBankManifest {
        embeddings: "text_bank.ten".into(),
        dim: bank.dim(),
        classes: bank.classes(),
        class_names: bank.class_names.clone(),
    };
    let path = dir.join("text_bank.json");
    std::fs::write(&path, serde_json::to_string_pretty(&m)?)?;
    Ok(path)
}

fn mask_from_pgm(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let (pw, ph, px) = pgm::read(path)?;
    if (ph, pw) != (h, w) {
        return Err(Error::Manifest(format!(
            "{} is {pw}x{ph}, manifest says {w}x{h}",
            path.display()
        )));
    }
    Tensor::new([h, w], px.iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect())
}

/// Loads one scene and the text bank its manifest points at.
pub fn load_scene_with_bank(path: impl AsRef<Path>) -> Result<(Scene, TextBank)> {
    let path = path.as_ref();
    let base = parent_dir(path);
    let m: SceneManifest = serde_json::from_slice(&std::fs::read(path)?)?;
    if m.class_names.len() != m.classes {
        return Err(Error::Manifest(format!(
            "{} class names for {} classes",
            m.class_names.len(),
            m.classes
        )));
    }
    let bank = load_text_bank(resolve(base, &m.text_bank))?;
    if bank.classes() != m.classes || bank.dim() != m.text_dim {
        return Err(Error::Manifest(format!(
            "text bank is {}x{}, scene manifest says {}x{}",
            bank.dim(),
            bank.classes(),
            m.text_dim,
            m.classes
        )));
    }
    let pixel_features = ten::read(resolve(base, &m.pixel_features))?;
    expect_shape("pixel features", &pixel_features, &[m.height, m.width, m.text_dim])?;
    let fpn_features = ten::read(resolve(base, &m.fpn_features))?;
    expect_shape("fpn features", &fpn_features, &[m.fpn_dim, m.height, m.width])?;
    let gt_masks = m
        .gt_masks
        .iter()
        .map(|g| {
            Ok(GtMask {
                mask: mask_from_pgm(&resolve(base, &g.path), m.height, m.width)?,
                class_id: g.class_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene {
        id: m.id,
        pixel_features,
        fpn_features,
        gt_masks,
        seed: m.seed,
    };
    scene.validate(m.classes)?;
    Ok((scene, bank))
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    load_scene_with_bank(path).map(|(s, _)| s)
}

/// Writes a scene's tensors, gt masks and manifest into `dir`.
/// `bank_manifest` is recorded relative to `dir`.
pub fn write_scene(
    dir: impl AsRef<Path>,
    scene: &Scene,
    bank: &TextBank,
    bank_manifest: impl AsRef<Path>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let id = &scene.id;
    let pix = format!("{id}.pixels.ten");
    let fpn = format!("{id}.fpn.ten");
    ten::write(dir.join(&pix), &scene.pixel_features)?;
    ten::write(dir.join(&fpn), &scene.fpn_features)?;
    let (h, w) = (scene.height(), scene.width());
    let mut gt_masks = Vec::new();
    for (k, gt) in scene.gt_masks.iter().enumerate() {
        let name = format!("{id}.gt{k:02}.pgm");
        let px: Vec<u8> = gt.mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
        pgm::write(dir.join(&name), w, h, &px)?;
        gt_masks.push(GtMaskEntry {
            path: name.into(),
            class_id: gt.class_id,
        });
    }
    let m = SceneManifest {
        id: id.clone(),
        pixel_features: pix.into(),
        fpn_features: fpn.into(),
        text_bank: bank_manifest.as_ref().to_path_buf(),
        height: h,
        width: w,
        text_dim: scene.text_dim(),
        fpn_dim: scene.fpn_dim(),
        classes: bank.classes(),
        class_names: bank.class_names.clone(),
        gt_masks,
        seed: scene.seed,
    };
    let path = dir.join(format!("{id}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&m)?)?;
    Ok(path)
}

/// Writes a whole dataset; returns the scene manifest paths in order.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    write_text_bank(dir, &data.bank)?;
    data.scenes
        .iter()
        .map(|s| write_scene(dir, s, &data.bank, "text_bank.json"))
        .collect()
}

/// Loads scenes from manifests; all must reference an identical bank.
pub fn load_dataset(manifests: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut bank: Option<TextBank> = None;
    let mut scenes = Vec::new();
    for p in manifests {
        let (scene, b) = load_scene_with_bank(p)?;
        match &bank {
            None => bank = Some(b),
            Some(existing) if *existing != b => {
                return Err(Error::Manifest(format!(
                    "{} references a different text bank",
                    p.as_ref().display()
                )))
            }
            Some(_) => {}
        }
        scenes.push(scene);
    }
    let bank = bank.ok_or_else(|| Error::Config("no scene manifests given".into()))?;
    Dataset::new(bank, scenes)
}
