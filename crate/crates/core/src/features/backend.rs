use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{Scene, SceneIndex};
use crate::error::{Error, Result};
use crate::metrics::ImageSide;

/// Dimensions of every raw feature field, plus the detector label dictionary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderManifest {
    pub d_dv: usize,
    pub d_dt: usize,
    pub d_sg: usize,
    pub d_g1: usize,
    pub d_g2: usize,
    pub d_g3: usize,
    pub backend_name: String,
    pub vocabulary: Vec<String>,
    /// Embedding seed of the synthetic backend that produced a cache.
    #[serde(default)]
    pub seed: u64,
}

impl ProviderManifest {
    pub fn synthetic(vocabulary: Vec<String>, seed: u64) -> Self {
        Self {
            d_dv: 32,
            d_dt: 16,
            d_sg: 32,
            d_g1: 24,
            d_g2: 32,
            d_g3: 32,
            backend_name: SyntheticBackend::NAME.into(),
            vocabulary,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_dv, self.d_dt, self.d_sg, self.d_g1, self.d_g2, self.d_g3];
        if dims.contains(&0) {
            return Err(Error::Config("manifest dimensions must be positive".into()));
        }
        if self.backend_name == SyntheticBackend::NAME && self.vocabulary.is_empty() {
            return Err(Error::Config(
                "synthetic manifest needs a non-empty vocabulary".into(),
            ));
        }
        Ok(())
    }
}

/// Pre-extracted per-image vectors standing in for external encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImageFeatures {
    pub image_id: String,
    /// K × d_dv visual vectors of detected objects.
    pub det_visual: Array2<f64>,
    /// K × d_dt label text vectors.
    pub det_label: Array2<f64>,
    pub det_label_names: Vec<String>,
    pub sgm_text: Vec<f64>,
    pub grid_single: Vec<f64>,
    pub grid_multi: Vec<f64>,
    pub grid_mllm: Vec<f64>,
}

impl RawImageFeatures {
    pub fn num_detections(&self) -> usize {
        self.det_visual.nrows()
    }

    pub fn validate(&self, m: &ProviderManifest) -> Result<()> {
        let mismatch = |field, expected, found| Error::ManifestMismatch {
            image_id: self.image_id.clone(),
            field,
            expected,
            found,
        };
        let checks: [(&'static str, usize, usize); 6] = [
            ("det_visual", m.d_dv, self.det_visual.ncols()),
            ("det_label", m.d_dt, self.det_label.ncols()),
            ("sgm_text", m.d_sg, self.sgm_text.len()),
            ("grid_single", m.d_g1, self.grid_single.len()),
            ("grid_multi", m.d_g2, self.grid_multi.len()),
            ("grid_mllm", m.d_g3, self.grid_mllm.len()),
        ];
        for (field, expected, found) in checks {
            if expected != found {
                return Err(mismatch(field, expected, found));
            }
        }
        let k = self.det_visual.nrows();
        if self.det_label.nrows() != k || self.det_label_names.len() != k {
            return Err(Error::InvalidFeatures {
                image_id: self.image_id.clone(),
                reason: format!(
                    "detection counts disagree: {} visual, {} label, {} names",
                    k,
                    self.det_label.nrows(),
                    self.det_label_names.len()
                ),
            });
        }
        let finite = self.det_visual.iter().all(|v| v.is_finite())
            && self.det_label.iter().all(|v| v.is_finite())
            && [&self.sgm_text, &self.grid_single, &self.grid_multi, &self.grid_mllm]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::InvalidFeatures {
                image_id: self.image_id.clone(),
                reason: "non-finite value".into(),
            });
        }
        Ok(())
    }
}

/// JSON form of one image record: nested row-major lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub image_id: String,
    pub det_visual: Vec<Vec<f64>>,
    pub det_label: Vec<Vec<f64>>,
    pub det_label_names: Vec<String>,
    pub sgm_text: Vec<f64>,
    pub grid_single: Vec<f64>,
    pub grid_multi: Vec<f64>,
    pub grid_mllm: Vec<f64>,
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(image_id: &str, field: &'static str, rows: &[Vec<f64>], width: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::ManifestMismatch {
                image_id: image_id.to_owned(),
                field,
                expected: width,
                found: r.len(),
            });
        }
        out.row_mut(i).assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    Ok(out)
}

impl FeatureRecord {
    pub fn from_features(f: &RawImageFeatures) -> Self {
        Self {
            image_id: f.image_id.clone(),
            det_visual: to_rows(&f.det_visual),
            det_label: to_rows(&f.det_label),
            det_label_names: f.det_label_names.clone(),
            sgm_text: f.sgm_text.clone(),
            grid_single: f.grid_single.clone(),
            grid_multi: f.grid_multi.clone(),
            grid_mllm: f.grid_mllm.clone(),
        }
    }

    pub fn into_features(self, m: &ProviderManifest) -> Result<RawImageFeatures> {
        let f = RawImageFeatures {
            det_visual: from_rows(&self.image_id, "det_visual", &self.det_visual, m.d_dv)?,
            det_label: from_rows(&self.image_id, "det_label", &self.det_label, m.d_dt)?,
            image_id: self.image_id,
            det_label_names: self.det_label_names,
            sgm_text: self.sgm_text,
            grid_single: self.grid_single,
            grid_multi: self.grid_multi,
            grid_mllm: self.grid_mllm,
        };
        f.validate(m)?;
        Ok(f)
    }
}

/// Source of raw per-image features. Implementations are immutable after
/// construction and safe to query from several threads.
pub trait FeatureBackend: Send + Sync {
    fn manifest(&self) -> &ProviderManifest;

    fn get_raw_features(&self, image_id: &str) -> Result<RawImageFeatures>;

    fn contains(&self, image_id: &str) -> bool;

    fn image_ids(&self) -> Vec<String>;
}

/// Derives features from scene attributes plus seeded noise.
pub struct SyntheticBackend {
    manifest: ProviderManifest,
    scenes: SceneIndex,
}

const NOISE_STD: f64 = 0.05;

/// Deterministic standard-normal vector keyed by (seed, salt, word).
pub fn word_embedding(seed: u64, salt: &str, word: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.as_bytes());
    h.update([0u8]);
    h.update(word.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn noise(seed: u64, salt: &str, dim: usize) -> Vec<f64> {
    word_embedding(seed, salt, "noise", dim)
        .into_iter()
        .map(|v| v * NOISE_STD)
        .collect()
}

fn mix(seed: u64, salt: &str, words: &[&str], dim: usize, noise_seed: u64) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for w in words {
        for (a, v) in acc.iter_mut().zip(word_embedding(seed, salt, w, dim)) {
            *a += v;
        }
    }
    let scale = 1.0 / (words.len().max(1) as f64).sqrt();
    acc.iter_mut()
        .zip(noise(noise_seed, salt, dim))
        .for_each(|(a, n)| *a = *a * scale + n);
    acc
}

/// Pure feature synthesis for one side of a scene.
pub fn synthesize_features(
    scene: &Scene,
    side: ImageSide,
    manifest: &ProviderManifest,
) -> RawImageFeatures {
    let seed = manifest.seed;
    let (image_id, words, objects, side_tag): (&str, Vec<&str>, Vec<(&str, Option<&str>)>, u64) =
        match side {
            ImageSide::Target => {
                let t = &scene.target;
                let mut objects = vec![
                    (t.category.as_str(), Some(t.color.as_str())),
                    (t.support_surface.as_str(), None),
                ];
                objects.extend(scene.target_distractors.iter().map(|d| (d.as_str(), None)));
                (
                    &scene.target_image_id,
                    vec![&t.color, &t.category, &t.support_surface, &t.room],
                    objects,
                    1,
                )
            }
            ImageSide::Receptacle => {
                let r = &scene.receptacle;
                let mut objects = vec![(r.category.as_str(), Some(r.material.as_str()))];
                objects.extend(scene.receptacle_distractors.iter().map(|d| (d.as_str(), None)));
                (
                    &scene.receptacle_image_id,
                    vec![&r.material, &r.category, &r.room, &r.relation],
                    objects,
                    2,
                )
            }
        };
    let noise_seed = scene.seed.wrapping_mul(31).wrapping_add(side_tag);

    let k = objects.len();
    let mut det_visual = Array2::zeros((k, manifest.d_dv));
    let mut det_label = Array2::zeros((k, manifest.d_dt));
    let mut names = Vec::with_capacity(k);
    for (i, (label, tint)) in objects.iter().enumerate() {
        let mut parts = vec![*label];
        parts.extend(tint.iter());
        let obj_seed = noise_seed.wrapping_add(1000 * (i as u64 + 1));
        let v = mix(seed, "obj_visual", &parts, manifest.d_dv, obj_seed);
        det_visual.row_mut(i).assign(&ndarray::Array1::from(v));
        let s = word_embedding(seed, "label_text", label, manifest.d_dt);
        det_label.row_mut(i).assign(&ndarray::Array1::from(s));
        names.push(label.to_string());
    }

    RawImageFeatures {
        image_id: image_id.to_owned(),
        det_visual,
        det_label,
        det_label_names: names,
        sgm_text: mix(seed, "sgm", &words, manifest.d_sg, noise_seed),
        grid_single: mix(seed, "grid_single", &words, manifest.d_g1, noise_seed),
        grid_multi: mix(seed, "grid_multi", &words, manifest.d_g2, noise_seed),
        grid_mllm: mix(seed, "grid_mllm", &words, manifest.d_g3, noise_seed),
    }
}

impl SyntheticBackend {
    pub const NAME: &'static str = "synthetic";

    pub fn new(manifest: ProviderManifest, scenes: SceneIndex) -> Result<Self> {
        manifest.validate()?;
        Ok(Self { manifest, scenes })
    }
}

impl FeatureBackend for SyntheticBackend {
    fn manifest(&self) -> &ProviderManifest {
        &self.manifest
    }

    fn get_raw_features(&self, image_id: &str) -> Result<RawImageFeatures> {
        let (scene, side) = self
            .scenes
            .lookup(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_owned()))?;
        let f = synthesize_features(scene, side, &self.manifest);
        f.validate(&self.manifest)?;
        Ok(f)
    }

    fn contains(&self, image_id: &str) -> bool {
        self.scenes.lookup(image_id).is_some()
    }

    fn image_ids(&self) -> Vec<String> {
        self.scenes
            .scenes()
            .iter()
            .flat_map(|s| [s.target_image_id.clone(), s.receptacle_image_id.clone()])
            .collect()
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Directory of `manifest.json` plus one `<image_id>.json` record per image.
pub struct FileCacheBackend {
    manifest: ProviderManifest,
    records: HashMap<String, FeatureRecord>,
}

impl FileCacheBackend {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(Error::io(&mpath))?;
        let manifest: ProviderManifest = serde_json::from_str(&text).map_err(Error::json(&mpath))?;
        manifest.validate()?;
        let mut records = HashMap::new();
        for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
            let path = entry.map_err(Error::io(dir))?.path();
            if path.extension().is_none_or(|e| e != "json") || path.ends_with(MANIFEST_FILE) {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
            let record: FeatureRecord = serde_json::from_str(&text).map_err(Error::json(&path))?;
            records.insert(record.image_id.clone(), record);
        }
        Ok(Self { manifest, records })
    }
}

impl FeatureBackend for FileCacheBackend {
    fn manifest(&self) -> &ProviderManifest {
        &self.manifest
    }

    fn get_raw_features(&self, image_id: &str) -> Result<RawImageFeatures> {
        let record = self
            .records
            .get(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_owned()))?;
        record.clone().into_features(&self.manifest)
    }

    fn contains(&self, image_id: &str) -> bool {
        self.records.contains_key(image_id)
    }

    fn image_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.records.keys().cloned().collect();
        ids.sort();
        ids
    }
}

/// Writes the manifest and one record per image id of `backend`.
pub fn write_feature_cache(backend: &dyn FeatureBackend, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(backend.manifest()).map_err(Error::json(&mpath))?;
    fs::write(&mpath, text + "\n").map_err(Error::io(&mpath))?;
    for id in backend.image_ids() {
        let features = backend.get_raw_features(&id)?;
        let path = dir.join(format!("{id}.json"));
        let text = serde_json::to_string(&FeatureRecord::from_features(&features))
            .map_err(Error::json(&path))?;
        fs::write(&path, text + "\n").map_err(Error::io(&path))?;
    }
    Ok(())
}
