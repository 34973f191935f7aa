use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::{ImageAttributes, ImageSide};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetAttributes {
    pub color: String,
    pub category: String,
    pub support_surface: String,
    pub room: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptacleAttributes {
    pub category: String,
    pub material: String,
    pub room: String,
    pub relation: String,
}

/// One fetch-and-carry situation; its two "images" are deterministic feature
/// embeddings of these attributes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub target_image_id: String,
    pub receptacle_image_id: String,
    pub target: TargetAttributes,
    pub receptacle: ReceptacleAttributes,
    /// Extra object categories visible next to the target / receptacle.
    pub target_distractors: Vec<String>,
    pub receptacle_distractors: Vec<String>,
    pub seed: u64,
}

impl Scene {
    pub fn attributes(&self, side: ImageSide) -> ImageAttributes {
        match side {
            ImageSide::Target => ImageAttributes {
                image_id: self.target_image_id.clone(),
                words: vec![
                    self.target.color.clone(),
                    self.target.category.clone(),
                    self.target.room.clone(),
                ],
            },
            ImageSide::Receptacle => ImageAttributes {
                image_id: self.receptacle_image_id.clone(),
                words: vec![
                    self.receptacle.material.clone(),
                    self.receptacle.category.clone(),
                    self.receptacle.room.clone(),
                ],
            },
        }
    }
}

/// Closed attribute vocabularies and reference templates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub colors: Vec<String>,
    pub categories: Vec<String>,
    pub supports: Vec<String>,
    pub rooms: Vec<String>,
    pub receptacles: Vec<String>,
    pub materials: Vec<String>,
    pub relations: Vec<String>,
    /// Placeholders: {color} {category} {support} {tar_room} {receptacle}
    /// {material} {relation} {rec_room}.
    pub templates: Vec<String>,
    pub min_references: usize,
    pub max_references: usize,
    pub max_distractors: usize,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            colors: strings(&["red", "blue", "green", "yellow", "white", "black"]),
            categories: strings(&[
                "cup", "bottle", "book", "towel", "toy", "plate", "bowl", "box",
            ]),
            supports: strings(&["table", "desk", "counter", "windowsill", "stool"]),
            rooms: strings(&["kitchen", "bedroom", "bathroom", "office", "hallway"]),
            receptacles: strings(&["sink", "bed", "sofa", "cabinet", "basket", "drawer"]),
            materials: strings(&["wooden", "metal", "plastic", "glass"]),
            relations: strings(&["on", "in", "beside"]),
            templates: strings(&[
                "move the {color} {category} on the {support} to the {receptacle} in the {rec_room}.",
                "pick up the {color} {category} from the {support} and put it {relation} the {material} {receptacle}.",
                "bring the {color} {category} in the {tar_room} to the {receptacle}.",
            ]),
            min_references: 1,
            max_references: 3,
            max_distractors: 2,
        }
    }
}

impl GeneratorConfig {
    /// Noun phrases a detector would be given as its label dictionary.
    pub fn noun_phrases(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .categories
            .iter()
            .chain(&self.supports)
            .chain(&self.receptacles)
            .cloned()
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn fill(&self, template: &str, scene: &Scene) -> String {
        template
            .replace("{color}", &scene.target.color)
            .replace("{category}", &scene.target.category)
            .replace("{support}", &scene.target.support_surface)
            .replace("{tar_room}", &scene.target.room)
            .replace("{receptacle}", &scene.receptacle.category)
            .replace("{material}", &scene.receptacle.material)
            .replace("{relation}", &scene.receptacle.relation)
            .replace("{rec_room}", &scene.receptacle.room)
    }
}

/// Split fractions for train / val / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    /// Sample counts per split; test takes the remainder after rounding.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !r.is_finite() || *r < 0.0) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::BadRatios(all.to_vec()));
        }
        let train = ((n as f64) * self.train).round() as usize;
        let val = (((n as f64) * self.val).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        Ok((train, val, n - train - val))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub scenes: Vec<Scene>,
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl SyntheticDataset {
    pub fn all_samples(&self) -> impl Iterator<Item = &SamplePair> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

pub fn generate_synthetic_dataset(
    config: &GeneratorConfig,
    n: usize,
    seed: u64,
    ratios: SplitRatios,
) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let (n_train, n_val, _) = ratios.counts(n)?;
    if config.min_references == 0
        || config.max_references < config.min_references
        || config.max_references > config.templates.len()
    {
        return Err(Error::Config(format!(
            "reference count range {}..={} invalid for {} templates",
            config.min_references,
            config.max_references,
            config.templates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, v: &[String]| v.choose(rng).expect("non-empty vocabulary").clone();

    let mut scenes = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let scene_id = format!("scene{i:05}");
        let target = TargetAttributes {
            color: pick(&mut rng, &config.colors),
            category: pick(&mut rng, &config.categories),
            support_surface: pick(&mut rng, &config.supports),
            room: pick(&mut rng, &config.rooms),
        };
        let receptacle = ReceptacleAttributes {
            category: pick(&mut rng, &config.receptacles),
            material: pick(&mut rng, &config.materials),
            room: pick(&mut rng, &config.rooms),
            relation: pick(&mut rng, &config.relations),
        };
        let n_td = rng.random_range(0..=config.max_distractors);
        let target_distractors = (0..n_td).map(|_| pick(&mut rng, &config.categories)).collect();
        let n_rd = rng.random_range(0..=config.max_distractors);
        let receptacle_distractors = (0..n_rd).map(|_| pick(&mut rng, &config.categories)).collect();
        let scene = Scene {
            target_image_id: format!("{scene_id}_tar"),
            receptacle_image_id: format!("{scene_id}_rec"),
            scene_id: scene_id.clone(),
            target,
            receptacle,
            target_distractors,
            receptacle_distractors,
            seed: rng.random(),
        };

        let n_refs = rng.random_range(config.min_references..=config.max_references);
        let mut order: Vec<usize> = (0..config.templates.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(n_refs);
        order.sort_unstable();
        let references = order
            .iter()
            .map(|&t| config.fill(&config.templates[t], &scene))
            .collect();
        samples.push(SamplePair {
            sample_id: scene_id,
            target_image_id: scene.target_image_id.clone(),
            receptacle_image_id: scene.receptacle_image_id.clone(),
            references,
        });
        scenes.push(scene);
    }

    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(SyntheticDataset {
        scenes,
        train: samples,
        val,
        test,
    })
}

/// Scene sidecar records keyed by image id.
#[derive(Clone, Debug, Default)]
pub struct SceneIndex {
    by_image: HashMap<String, (usize, ImageSide)>,
    scenes: Vec<Scene>,
}

impl SceneIndex {
    pub fn new(scenes: Vec<Scene>) -> Self {
        let mut by_image = HashMap::new();
        for (i, s) in scenes.iter().enumerate() {
            by_image.insert(s.target_image_id.clone(), (i, ImageSide::Target));
            by_image.insert(s.receptacle_image_id.clone(), (i, ImageSide::Receptacle));
        }
        Self { by_image, scenes }
    }

    pub fn scenes(&self) -> &[Scene] {
        &self.scenes
    }

    pub fn lookup(&self, image_id: &str) -> Option<(&Scene, ImageSide)> {
        self.by_image
            .get(image_id)
            .map(|&(i, side)| (&self.scenes[i], side))
    }

    pub fn attributes(&self, image_id: &str) -> Result<ImageAttributes> {
        self.lookup(image_id)
            .map(|(scene, side)| scene.attributes(side))
            .ok_or_else(|| Error::MissingAttributes(image_id.to_owned()))
    }

    /// Reads every `*.json` file in `dir` as a scene record.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(Error::io(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        let mut scenes = Vec::with_capacity(paths.len());
        for p in paths {
            let text = fs::read_to_string(&p).map_err(Error::io(&p))?;
            scenes.push(serde_json::from_str(&text).map_err(Error::json(&p))?);
        }
        Ok(Self::new(scenes))
    }
}

pub fn write_scene_sidecars(scenes: &[Scene], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for s in scenes {
        let path = dir.join(format!("{}.json", s.scene_id));
        let text = serde_json::to_string_pretty(s).map_err(Error::json(&path))?;
        fs::write(&path, text + "\n").map_err(Error::io(&path))?;
    }
    Ok(())
}
