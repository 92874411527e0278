use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::config::Config;
use crate::data::PreparedScene;
use crate::par::Exec;
use crate::scene::{crop_to_limit, generate_scene, load_scene, save_scene};

pub const MANIFEST: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "file\tseed\tpoints\tinstances\tclasses";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub points: usize,
    pub instances: usize,
    pub classes: Vec<usize>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// Writes `count` generated scenes (seeds `seed + i`) and a manifest.
pub fn generate_dataset(config: &Config, dir: &Path, count: usize, exec: Exec) -> Result<Vec<ManifestEntry>, TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let seed = config.train.seed;
    let entries = exec.try_map(count, |i| {
        let s = seed.wrapping_add(i as u64);
        let scene = generate_scene(s, &config.data)?;
        let file = format!("scene_{i:05}.txt");
        save_scene(&scene, &dir.join(&file))?;
        let mut classes = scene.instance_classes();
        classes.sort_unstable();
        Ok::<_, TrainError>(ManifestEntry { file, seed: s, points: scene.len(), instances: scene.num_instances(), classes })
    })?;
    let mut text = format!("{MANIFEST_HEADER}\n");
    for e in &entries {
        let classes = e.classes.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        text.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.file, e.seed, e.points, e.instances, classes));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, TrainError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let bad = |line: usize, msg: &str| TrainError::Manifest(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        _ => return Err(bad(1, "missing header")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected 5 tab-separated fields"));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad(i + 1, "bad number"));
            let classes = if f[4].is_empty() {
                Vec::new()
            } else {
                f[4].split(',').map(|c| num(c).map(|v| v as usize)).collect::<Result<_, _>>()?
            };
            Ok(ManifestEntry {
                file: f[0].to_string(),
                seed: num(f[1])?,
                points: num(f[2])? as usize,
                instances: num(f[3])? as usize,
                classes,
            })
        })
        .collect()
}

/// Scenes of a data directory, voxelized and indexed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub files: Vec<PathBuf>,
    pub scenes: Vec<PreparedScene>,
}

impl Dataset {
    /// Loads every manifest entry. Oversized scenes are cropped with a
    /// stream derived from the run seed and the scene index.
    pub fn load(dir: &Path, config: &Config, exec: Exec) -> Result<Self, TrainError> {
        let entries = read_manifest(dir)?;
        let files: Vec<PathBuf> = entries.iter().map(|e| dir.join(&e.file)).collect();
        let t = &config.train;
        let scenes = exec.try_map(files.len(), |i| {
            let mut scene = load_scene(&files[i])?;
            if scene.num_classes != config.model.num_classes {
                return Err(TrainError::Manifest(format!(
                    "{} has {} classes, model expects {}",
                    files[i].display(),
                    scene.num_classes,
                    config.model.num_classes
                )));
            }
            if scene.len() > t.max_points {
                let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
                rng.set_stream(i as u64);
                scene = crop_to_limit(&scene, t.max_points, &mut rng);
            }
            Ok(PreparedScene::from_scene(&scene, t.voxel_size, config.model.knn, Exec::Sequential)?)
        })?;
        Ok(Self { files, scenes })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// `(train, val)`: the last `val_count` scenes are held out.
    pub fn split(&self, val_count: usize) -> (&[PreparedScene], &[PreparedScene]) {
        let cut = self.scenes.len().saturating_sub(val_count);
        self.scenes.split_at(cut)
    }
}
