use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{read_json, read_tensor, write_json, write_tensor};
use crate::mimevis::CaptionSet;
use crate::nncore::{DType, Tensor};
use crate::synthdata::{average_test_repetitions, generate_world, synthesize_sample, FmriSample, GroundTruthWorld, Stimulus, WorldConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub reps_test: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 200,
            reps_test: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub world_config: WorldConfig,
    pub world_hash: String,
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub reps_test: usize,
    /// Logical array name -> file name relative to the dataset directory.
    pub files: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        if self.world_hash != self.world_config.hash() {
            return Err(Error::format("world_hash", "does not match world_config"));
        }
        let train: BTreeSet<u64> = self.train_ids.iter().copied().collect();
        if train.len() != self.train_ids.len() {
            return Err(Error::Invariant("duplicate stimulus id in train split".into()));
        }
        let mut test = BTreeSet::new();
        for id in &self.test_ids {
            if train.contains(id) {
                return Err(Error::Invariant(format!("stimulus {id} appears in both train and test splits")));
            }
            if !test.insert(*id) {
                return Err(Error::Invariant(format!("duplicate stimulus id {id} in test split")));
            }
        }
        if self.reps_test == 0 {
            return Err(Error::format("reps_test", "must be >= 1"));
        }
        Ok(())
    }
}

/// Loaded dataset. Arrays are stored in 32-bit precision.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub world: GroundTruthWorld,
    pub root: PathBuf,
    /// `n_stimuli x side x side`, train stimuli first.
    pub pixels: Tensor<f32>,
    pub labels: Tensor<f32>,
    pub semantic_targets: Tensor<f32>,
    pub scenes: Tensor<f32>,
    /// Per subject, `n_train x Z_k`.
    pub train_voxels: Vec<Tensor<f32>>,
    /// Per subject, `n_test x reps x Z_k`.
    pub test_voxels: Vec<Tensor<f32>>,
    pub captions: BTreeMap<u64, CaptionSet>,
    rows: HashMap<u64, usize>,
}

fn name_pixels() -> &'static str {
    "stimulus_pixels"
}

fn file_for(name: &str) -> String {
    format!("{name}.bin")
}

pub fn emit_dataset(world: &GroundTruthWorld, spec: &DatasetSpec, path: &Path) -> Result<DatasetManifest> {
    if spec.n_train == 0 || spec.n_test == 0 || spec.reps_test == 0 {
        return Err(Error::config("dataset", "n_train, n_test and reps_test must all be >= 1"));
    }
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let cfg = &world.config;
    let n = spec.n_train + spec.n_test;
    let train_ids: Vec<u64> = (0..spec.n_train as u64).collect();
    let test_ids: Vec<u64> = (spec.n_train as u64..n as u64).collect();

    let mut pixels = Vec::with_capacity(n * cfg.pixels());
    let mut labels = Vec::with_capacity(n * cfg.n_categories);
    let mut targets = Vec::with_capacity(n * cfg.token_count * cfg.token_dim);
    let mut scenes = Vec::with_capacity(n * cfg.scene_dim);
    let mut train_vox: Vec<Vec<f32>> = vec![Vec::new(); cfg.n_subjects];
    let mut test_vox: Vec<Vec<f32>> = vec![Vec::new(); cfg.n_subjects];

    for &id in train_ids.iter().chain(&test_ids) {
        let is_test = id >= spec.n_train as u64;
        let (stim, first) = synthesize_sample(world, id, 0)?;
        pixels.extend(stim.pixels.iter().map(|&v| v as f32));
        labels.extend(stim.labels.iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
        targets.extend(stim.semantic_target.data().iter().map(|&v| v as f32));
        scenes.extend(stim.scene.iter().map(|&v| v as f32));
        if is_test {
            let mut reps = vec![first];
            for r in 1..spec.reps_test {
                reps.push(synthesize_sample(world, id, r as u32)?.1);
            }
            for k in 0..cfg.n_subjects {
                for rep in &reps {
                    test_vox[k].extend(rep[k].voxels.iter().map(|&v| v as f32));
                }
            }
        } else {
            for (k, s) in first.iter().enumerate() {
                train_vox[k].extend(s.voxels.iter().map(|&v| v as f32));
            }
        }
    }

    let side = cfg.image_side;
    let mut arrays: Vec<(String, Tensor<f32>)> = vec![
        (name_pixels().into(), Tensor::new(vec![n, side, side], pixels)?),
        ("stimulus_labels".into(), Tensor::new(vec![n, cfg.n_categories], labels)?),
        ("semantic_targets".into(), Tensor::new(vec![n, cfg.token_count, cfg.token_dim], targets)?),
        ("scene_codes".into(), Tensor::new(vec![n, cfg.scene_dim], scenes)?),
    ];
    for k in 0..cfg.n_subjects {
        let z = cfg.voxel_dims[k];
        arrays.push((format!("train_voxels_s{k}"), Tensor::new(vec![spec.n_train, z], std::mem::take(&mut train_vox[k]))?));
        arrays.push((
            format!("test_voxels_s{k}"),
            Tensor::new(vec![spec.n_test, spec.reps_test, z], std::mem::take(&mut test_vox[k]))?,
        ));
    }
    let mut files = BTreeMap::new();
    for (name, t) in &arrays {
        let file = file_for(name);
        write_tensor(&path.join(&file), t, DType::F32)?;
        files.insert(name.clone(), file);
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        world_config: cfg.clone(),
        world_hash: cfg.hash(),
        train_ids,
        test_ids,
        reps_test: spec.reps_test,
        files,
    };
    manifest.validate()?;
    write_json(&path.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&path.join(MANIFEST_FILE)).map_err(|e| match e {
        Error::Json { context, source } => Error::format(context, source.to_string()),
        other => other,
    })?;
    manifest.validate()?;
    let world = generate_world(&manifest.world_config)?;
    let cfg = &manifest.world_config;
    let (n_train, n_test) = (manifest.train_ids.len(), manifest.test_ids.len());
    let n = n_train + n_test;
    let load = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let file = manifest
            .files
            .get(name)
            .ok_or_else(|| Error::format(format!("files.{name}"), "missing from manifest"))?;
        let t: Tensor<f32> = read_tensor(&path.join(file))?;
        if t.shape() != shape {
            return Err(Error::format(name, format!("expected shape {shape:?}, found {:?}", t.shape())));
        }
        Ok(t)
    };
    let side = cfg.image_side;
    let pixels = load(name_pixels(), &[n, side, side])?;
    let labels = load("stimulus_labels", &[n, cfg.n_categories])?;
    let semantic_targets = load("semantic_targets", &[n, cfg.token_count, cfg.token_dim])?;
    let scenes = load("scene_codes", &[n, cfg.scene_dim])?;
    let mut train_voxels = Vec::new();
    let mut test_voxels = Vec::new();
    for k in 0..cfg.n_subjects {
        let z = cfg.voxel_dims[k];
        train_voxels.push(load(&format!("train_voxels_s{k}"), &[n_train, z])?);
        test_voxels.push(load(&format!("test_voxels_s{k}"), &[n_test, manifest.reps_test, z])?);
    }
    let rows = manifest
        .train_ids
        .iter()
        .chain(&manifest.test_ids)
        .enumerate()
        .map(|(row, &id)| (id, row))
        .collect();
    Ok(Dataset {
        root: path.to_path_buf(),
        world,
        pixels,
        labels,
        semantic_targets,
        scenes,
        train_voxels,
        test_voxels,
        captions: BTreeMap::new(),
        rows,
        manifest,
    })
}

impl Dataset {
    pub fn config(&self) -> &WorldConfig {
        &self.manifest.world_config
    }

    pub fn n_train(&self) -> usize {
        self.manifest.train_ids.len()
    }

    pub fn n_test(&self) -> usize {
        self.manifest.test_ids.len()
    }

    pub fn n_stimuli(&self) -> usize {
        self.n_train() + self.n_test()
    }

    pub fn all_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.manifest.train_ids.iter().chain(&self.manifest.test_ids).copied()
    }

    pub fn row_of(&self, id: u64) -> Result<usize> {
        self.rows.get(&id).copied().ok_or_else(|| Error::Lookup {
            kind: "stimulus",
            key: id.to_string(),
        })
    }

    pub fn pixels_of(&self, id: u64) -> Result<Vec<f64>> {
        Ok(self.pixels.row_block(self.row_of(id)?))
    }

    pub fn labels_of(&self, id: u64) -> Result<Vec<bool>> {
        let row = self.row_of(id)?;
        Ok(self.labels.row(row).iter().map(|&v| v > 0.5).collect())
    }

    pub fn target_of(&self, id: u64) -> Result<Tensor<f64>> {
        let cfg = self.config();
        let row = self.row_of(id)?;
        Tensor::new(vec![cfg.token_count, cfg.token_dim], self.semantic_targets.row_block(row))
    }

    pub fn stimulus(&self, id: u64) -> Result<Stimulus> {
        let row = self.row_of(id)?;
        Ok(Stimulus {
            id,
            pixels: self.pixels_of(id)?,
            labels: self.labels_of(id)?,
            captions: self.captions.get(&id).cloned(),
            semantic_target: self.target_of(id)?,
            scene: self.scenes.row(row).iter().map(|&v| f64::from(v)).collect(),
        })
    }

    pub fn object_names(&self, id: u64) -> Result<Vec<String>> {
        let names = self.config().category_names();
        Ok(self
            .labels_of(id)?
            .iter()
            .zip(names)
            .filter(|(on, _)| **on)
            .map(|(_, n)| n.to_string())
            .collect())
    }

    /// Training samples, stimulus-major then subject.
    pub fn train_samples(&self) -> Vec<FmriSample> {
        let mut out = Vec::with_capacity(self.n_train() * self.train_voxels.len());
        for (i, &id) in self.manifest.train_ids.iter().enumerate() {
            for (k, vox) in self.train_voxels.iter().enumerate() {
                out.push(FmriSample {
                    subject: k,
                    stimulus_id: id,
                    voxels: vox.row(i).iter().map(|&v| f64::from(v)).collect(),
                    repetition: 0,
                });
            }
        }
        out
    }

    pub fn test_repetitions(&self, subject: usize, test_index: usize) -> Result<Vec<FmriSample>> {
        let vox = self.test_voxels.get(subject).ok_or_else(|| Error::Lookup {
            kind: "subject",
            key: subject.to_string(),
        })?;
        let id = *self.manifest.test_ids.get(test_index).ok_or_else(|| Error::Lookup {
            kind: "test index",
            key: test_index.to_string(),
        })?;
        let reps = self.manifest.reps_test;
        let z = vox.cols();
        Ok((0..reps)
            .map(|r| {
                let start = (test_index * reps + r) * z;
                FmriSample {
                    subject,
                    stimulus_id: id,
                    voxels: vox.data()[start..start + z].iter().map(|&v| f64::from(v)).collect(),
                    repetition: r as u32,
                }
            })
            .collect())
    }

    /// Test responses with repetitions averaged, per the evaluation protocol.
    pub fn averaged_test(&self, subject: usize) -> Result<Vec<FmriSample>> {
        (0..self.n_test())
            .map(|i| average_test_repetitions(&self.test_repetitions(subject, i)?))
            .collect()
    }

    pub fn test_sample_count(&self) -> usize {
        self.n_test() * self.manifest.reps_test * self.test_voxels.len()
    }

    pub fn attach_captions(&mut self, captions: BTreeMap<u64, CaptionSet>) {
        self.captions = captions;
    }
}

trait RowBlock {
    fn row_block(&self, row: usize) -> Vec<f64>;
}

impl RowBlock for Tensor<f32> {
    /// All elements of the leading-axis slice `row`, widened to f64.
    fn row_block(&self, row: usize) -> Vec<f64> {
        let per = self.len() / self.shape()[0].max(1);
        self.data()[row * per..(row + 1) * per].iter().map(|&v| f64::from(v)).collect()
    }
}
