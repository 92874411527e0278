//! Point-cloud scenes: data model, synthetic generation, text I/O,
//! voxel downsampling into tokens, and point-count cropping.

mod crop;
mod generate;
mod io;
mod voxel;

pub use crop::crop_to_limit;
pub use generate::{generate_scene, GenParams, ShapeKind};
pub use io::{load_scene, parse_scene, save_scene, scene_to_string, HEADER_MAGIC};
pub use voxel::{voxelize, GroundTruth, GtInstance, SceneTokens, RAW_FEATURES};

pub type Point = [f64; 3];

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid scene: {0}")]
    Validation(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate bounds: {0}")]
    Bounds(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw labelled point cloud. Label `-1` means ignore.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub points: Vec<Point>,
    pub colors: Vec<[f64; 3]>,
    pub sem_label: Vec<i32>,
    pub inst_label: Vec<i32>,
    pub num_classes: usize,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_instances(&self) -> usize {
        self.inst_label.iter().map(|&i| i + 1).max().unwrap_or(0).max(0) as usize
    }

    /// Semantic class of every instance id.
    pub fn instance_classes(&self) -> Vec<usize> {
        let mut classes = vec![0; self.num_instances()];
        for (&i, &s) in self.inst_label.iter().zip(&self.sem_label) {
            if i >= 0 {
                classes[i as usize] = s as usize;
            }
        }
        classes
    }

    /// Checks every structural invariant of a scene.
    pub fn validate(&self) -> Result<(), SceneError> {
        let m = self.points.len();
        if self.colors.len() != m || self.sem_label.len() != m || self.inst_label.len() != m {
            return Err(SceneError::Validation("column lengths differ".into()));
        }
        if self.num_classes == 0 {
            return Err(SceneError::Validation("class count must be positive".into()));
        }
        let k = self.num_classes as i32;
        let mut inst_sem: Vec<Option<i32>> = vec![None; self.num_instances()];
        for p in 0..m {
            if self.points[p].iter().any(|v| !v.is_finite()) {
                return Err(SceneError::Validation(format!("point {p} has a non-finite coordinate")));
            }
            if self.colors[p].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(SceneError::Validation(format!("point {p} color outside [0, 1]")));
            }
            let (s, i) = (self.sem_label[p], self.inst_label[p]);
            if s < -1 || s >= k {
                return Err(SceneError::Validation(format!("point {p} semantic label {s} outside [-1, {}]", k - 1)));
            }
            if i < -1 {
                return Err(SceneError::Validation(format!("point {p} instance label {i} below -1")));
            }
            if i >= 0 {
                if s < 0 {
                    return Err(SceneError::Validation(format!("point {p} belongs to instance {i} without a class")));
                }
                match inst_sem[i as usize] {
                    None => inst_sem[i as usize] = Some(s),
                    Some(prev) if prev != s => {
                        return Err(SceneError::Validation(format!("instance {i} mixes classes {prev} and {s}")))
                    }
                    Some(_) => {}
                }
            }
        }
        if let Some(missing) = inst_sem.iter().position(Option::is_none) {
            return Err(SceneError::Validation(format!("instance id {missing} labels no point")));
        }
        Ok(())
    }

    /// Keeps the points at `keep` (in order) and compacts instance ids,
    /// preserving their relative order.
    pub fn subset(&self, keep: &[usize]) -> Scene {
        let mut remap = vec![-1i32; self.num_instances()];
        for &p in keep {
            let i = self.inst_label[p];
            if i >= 0 {
                remap[i as usize] = 0;
            }
        }
        let mut next = 0;
        for r in remap.iter_mut() {
            if *r == 0 {
                *r = next;
                next += 1;
            }
        }
        Scene {
            points: keep.iter().map(|&p| self.points[p]).collect(),
            colors: keep.iter().map(|&p| self.colors[p]).collect(),
            sem_label: keep.iter().map(|&p| self.sem_label[p]).collect(),
            inst_label: keep
                .iter()
                .map(|&p| match self.inst_label[p] {
                    i if i >= 0 => remap[i as usize],
                    _ => -1,
                })
                .collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn translated(&self, v: Point) -> Scene {
        let mut s = self.clone();
        for p in &mut s.points {
            for a in 0..3 {
                p[a] += v[a];
            }
        }
        s
    }
}

/// Axis-aligned extent of a scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneBounds {
    pub p_min: Point,
    pub p_max: Point,
}

impl SceneBounds {
    pub fn new(p_min: Point, p_max: Point) -> Result<Self, SceneError> {
        if (0..3).any(|a| p_min[a] > p_max[a]) {
            return Err(SceneError::Bounds(format!("min {p_min:?} exceeds max {p_max:?}")));
        }
        if (0..3).all(|a| p_min[a] == p_max[a]) {
            return Err(SceneError::Bounds(format!("zero extent at {p_min:?}")));
        }
        Ok(Self { p_min, p_max })
    }

    pub fn of_points(points: &[Point]) -> Result<Self, SceneError> {
        let first = points.first().ok_or_else(|| SceneError::Bounds("empty scene".into()))?;
        let (mut lo, mut hi) = (*first, *first);
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        Self::new(lo, hi)
    }

    pub fn extent(&self) -> Point {
        [0, 1, 2].map(|a| self.p_max[a] - self.p_min[a])
    }

    /// Maps absolute coordinates into `[0, 1]³`; flat axes map to 0.
    pub fn normalize(&self, p: Point) -> Point {
        let e = self.extent();
        [0, 1, 2].map(|a| if e[a] > 0.0 { (p[a] - self.p_min[a]) / e[a] } else { 0.0 })
    }

    /// `q · (p_max − p_min) + p_min`.
    pub fn denormalize(&self, q: Point) -> Point {
        let e = self.extent();
        [0, 1, 2].map(|a| q[a] * e[a] + self.p_min[a])
    }
}

/// Exact componentwise min/max of a scene's points.
pub fn scene_bounds(scene: &Scene) -> Result<SceneBounds, SceneError> {
    SceneBounds::of_points(&scene.points)
}
