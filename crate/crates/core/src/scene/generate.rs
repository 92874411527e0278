use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Point, Scene, SceneError};

/// Surface primitives available to the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Box,
    Sphere,
    Cylinder,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Box, ShapeKind::Sphere, ShapeKind::Cylinder];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cylinder => "cylinder",
        }
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown shape {s:?} (expected box, sphere or cylinder)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    /// Room size in meters; the floor is `z = 0`.
    pub extent: [f64; 3],
    pub min_instances: usize,
    pub max_instances: usize,
    pub shapes: Vec<ShapeKind>,
    /// Gaussian coordinate noise in meters.
    pub noise: f64,
    /// Fraction of all points that are unlabelled floor/wall clutter.
    pub clutter_fraction: f64,
    pub num_classes: usize,
    /// Surface sampling density in points per square meter.
    pub density: f64,
    /// Free gap kept between the footprints of any two objects.
    pub min_gap: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            extent: [8.0, 8.0, 3.0],
            min_instances: 3,
            max_instances: 8,
            shapes: vec![ShapeKind::Box, ShapeKind::Sphere, ShapeKind::Cylinder],
            noise: 0.005,
            clutter_fraction: 0.15,
            num_classes: 18,
            density: 450.0,
            min_gap: 0.3,
        }
    }
}

const MIN_INSTANCE_POINTS: usize = 50;
const MAX_REJECTIONS: usize = 1000;

impl GenParams {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Parameter(m));
        if self.extent.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return bad(format!("extent must be positive, got {:?}", self.extent));
        }
        if self.min_instances > self.max_instances {
            return bad(format!("instance range [{}, {}] is empty", self.min_instances, self.max_instances));
        }
        if self.shapes.is_empty() {
            return bad("shape set is empty".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        if !(0.0..1.0).contains(&self.clutter_fraction) {
            return bad(format!("clutter fraction must lie in [0, 1), got {}", self.clutter_fraction));
        }
        if self.num_classes == 0 {
            return bad("class count must be positive".into());
        }
        if !(self.density.is_finite() && self.density > 0.0) {
            return bad(format!("density must be positive, got {}", self.density));
        }
        if !(self.min_gap.is_finite() && self.min_gap >= 0.0) {
            return bad(format!("gap must be non-negative, got {}", self.min_gap));
        }
        Ok(())
    }
}

/// Geometry of one object class. Shape cycles through the shape set,
/// size grows with `class / shapes`, and hue is spread evenly over classes.
struct ClassStyle {
    kind: ShapeKind,
    /// Half extents for boxes; `(r, r, r)` for spheres; `(r, r, h/2)` for cylinders.
    half: [f64; 3],
    color: [f64; 3],
}

fn class_style(class: usize, params: &GenParams) -> ClassStyle {
    let n_shapes = params.shapes.len();
    let kind = params.shapes[class % n_shapes];
    let levels = params.num_classes.div_ceil(n_shapes).max(2);
    let t = (class / n_shapes) as f64 / (levels - 1) as f64;
    let r = 0.2 + 0.25 * t;
    let half = match kind {
        ShapeKind::Box => [r, 0.7 * r, 0.8 * r],
        ShapeKind::Sphere => [r; 3],
        ShapeKind::Cylinder => [0.8 * r, 0.8 * r, r],
    };
    ClassStyle {
        kind,
        half,
        color: hsv(class as f64 / params.num_classes as f64, 0.75, 0.85),
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).min(5.999_999);
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn footprint_radius(style: &ClassStyle) -> f64 {
    match style.kind {
        ShapeKind::Box => style.half[0].hypot(style.half[1]),
        ShapeKind::Sphere | ShapeKind::Cylinder => style.half[0],
    }
}

fn surface_area(style: &ClassStyle) -> f64 {
    let [a, b, c] = style.half;
    match style.kind {
        ShapeKind::Box => 8.0 * (a * b + b * c + a * c),
        ShapeKind::Sphere => 4.0 * PI * a * a,
        ShapeKind::Cylinder => 2.0 * PI * a * a + 2.0 * PI * a * 2.0 * c,
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [0, 1, 2].map(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

/// One point on the surface, relative to the shape center, uniform by area.
fn sample_surface(style: &ClassStyle, rng: &mut ChaCha8Rng) -> Point {
    let [a, b, c] = style.half;
    match style.kind {
        ShapeKind::Sphere => unit_vector(rng).map(|x| x * a),
        ShapeKind::Box => {
            let faces = [b * c, b * c, a * c, a * c, a * b, a * b];
            let total: f64 = faces.iter().sum();
            let mut u = rng.gen_range(0.0..total);
            let mut face = 5;
            for (i, w) in faces.iter().enumerate() {
                if u < *w {
                    face = i;
                    break;
                }
                u -= w;
            }
            let mut p = [rng.gen_range(-a..=a), rng.gen_range(-b..=b), rng.gen_range(-c..=c)];
            let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
            p[face / 2] = sign * style.half[face / 2];
            p
        }
        ShapeKind::Cylinder => {
            let side = 2.0 * PI * a * 2.0 * c;
            let cap = PI * a * a;
            let u = rng.gen_range(0.0..side + 2.0 * cap);
            if u < side {
                let th = rng.gen_range(0.0..2.0 * PI);
                [a * th.cos(), a * th.sin(), rng.gen_range(-c..=c)]
            } else {
                let rr = a * rng.gen::<f64>().sqrt();
                let th = rng.gen_range(0.0..2.0 * PI);
                let z = if u < side + cap { -c } else { c };
                [rr * th.cos(), rr * th.sin(), z]
            }
        }
    }
}

fn jitter(color: [f64; 3], amount: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    color.map(|c| (c + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Synthetic room: labelled objects resting on the floor plus unlabelled
/// floor and wall points. Pure function of `(seed, params)`.
pub fn generate_scene(seed: u64, params: &GenParams) -> Result<Scene, SceneError> {
    generate_with_centers(seed, params).map(|(s, _)| s)
}

/// Also returns the shape center of every instance.
fn generate_with_centers(seed: u64, params: &GenParams) -> Result<(Scene, Vec<Point>), SceneError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_inst = rng.gen_range(params.min_instances..=params.max_instances);
    let noise = Normal::new(0.0, params.noise).map_err(|e| SceneError::Parameter(e.to_string()))?;

    let mut placed: Vec<(Point, f64)> = Vec::with_capacity(n_inst);
    let mut scene = Scene {
        points: Vec::new(),
        colors: Vec::new(),
        sem_label: Vec::new(),
        inst_label: Vec::new(),
        num_classes: params.num_classes,
    };
    for id in 0..n_inst {
        let class = rng.gen_range(0..params.num_classes);
        let style = class_style(class, params);
        let fr = footprint_radius(&style);
        if 2.0 * fr > params.extent[0].min(params.extent[1]) || 2.0 * style.half[2] > params.extent[2] {
            return Err(SceneError::Generation(format!("class {class} does not fit in extent {:?}", params.extent)));
        }
        let mut center = None;
        for _ in 0..MAX_REJECTIONS {
            let c = [
                rng.gen_range(fr..=params.extent[0] - fr),
                rng.gen_range(fr..=params.extent[1] - fr),
                style.half[2],
            ];
            let clear = placed.iter().all(|(q, qr)| {
                (c[0] - q[0]).hypot(c[1] - q[1]) >= fr + qr + params.min_gap
            });
            if clear {
                center = Some(c);
                break;
            }
        }
        let center = center.ok_or_else(|| {
            SceneError::Generation(format!("could not place instance {id} after {MAX_REJECTIONS} attempts"))
        })?;
        placed.push((center, fr));

        let count = ((surface_area(&style) * params.density).round() as usize).max(MIN_INSTANCE_POINTS);
        let base = jitter(style.color, 0.05, &mut rng);
        for _ in 0..count {
            let s = sample_surface(&style, &mut rng);
            let mut p = [0, 1, 2].map(|a| center[a] + s[a]);
            if params.noise > 0.0 {
                p = p.map(|x| x + noise.sample(&mut rng));
            }
            scene.points.push(p);
            scene.colors.push(jitter(base, 0.02, &mut rng));
            scene.sem_label.push(class as i32);
            scene.inst_label.push(id as i32);
        }
    }

    let labelled = scene.points.len() as f64;
    let clutter = (labelled * params.clutter_fraction / (1.0 - params.clutter_fraction)).round() as usize;
    let [ex, ey, ez] = params.extent;
    for _ in 0..clutter {
        let u: f64 = rng.gen();
        let mut p = if u < 0.7 {
            [rng.gen_range(0.0..ex), rng.gen_range(0.0..ey), 0.0]
        } else if u < 0.85 {
            [0.0, rng.gen_range(0.0..ey), rng.gen_range(0.0..ez)]
        } else {
            [rng.gen_range(0.0..ex), 0.0, rng.gen_range(0.0..ez)]
        };
        if params.noise > 0.0 {
            p = p.map(|x| x + noise.sample(&mut rng));
        }
        scene.points.push(p);
        let g = rng.gen_range(0.4..0.5);
        scene.colors.push([g, g, g]);
        scene.sem_label.push(-1);
        scene.inst_label.push(-1);
    }
    Ok((scene, placed.into_iter().map(|(c, _)| c).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let p = GenParams::default();
        assert_eq!(generate_scene(11, &p).unwrap(), generate_scene(11, &p).unwrap());
        assert_ne!(generate_scene(11, &p).unwrap(), generate_scene(12, &p).unwrap());
    }

    #[test]
    fn forced_instance_count() {
        let p = GenParams { min_instances: 3, max_instances: 3, ..GenParams::default() };
        for seed in 0..5 {
            let s = generate_scene(seed, &p).unwrap();
            assert_eq!(s.num_instances(), 3);
            s.validate().unwrap();
        }
    }

    #[test]
    fn noiseless_spheres_are_exact() {
        let p = GenParams {
            shapes: vec![ShapeKind::Sphere],
            noise: 0.0,
            ..GenParams::default()
        };
        let (s, centers) = generate_with_centers(3, &p).unwrap();
        let classes = s.instance_classes();
        for ((q, &i), _) in s.points.iter().zip(&s.inst_label).zip(&s.sem_label) {
            if i < 0 {
                continue;
            }
            let c = centers[i as usize];
            let r = class_style(classes[i as usize], &p).half[0];
            let d = ((q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2) + (q[2] - c[2]).powi(2)).sqrt();
            assert!((d - r).abs() < 1e-12, "distance {d} vs radius {r}");
        }
    }

    #[test]
    fn instances_have_enough_points_and_clearance() {
        let p = GenParams::default();
        for seed in 0..10 {
            let s = generate_scene(seed, &p).unwrap();
            s.validate().unwrap();
            let mut counts = vec![0usize; s.num_instances()];
            for &i in &s.inst_label {
                if i >= 0 {
                    counts[i as usize] += 1;
                }
            }
            assert!(counts.iter().all(|&c| c >= MIN_INSTANCE_POINTS));
            assert!((p.min_instances..=p.max_instances).contains(&counts.len()));
        }
    }

    #[test]
    fn infeasible_placement_is_reported() {
        let p = GenParams {
            extent: [1.5, 1.5, 3.0],
            min_instances: 8,
            max_instances: 8,
            ..GenParams::default()
        };
        assert!(matches!(generate_scene(0, &p), Err(SceneError::Generation(_))));
    }

    #[test]
    fn rejects_bad_parameters() {
        let p = GenParams { extent: [0.0, 1.0, 1.0], ..GenParams::default() };
        assert!(matches!(generate_scene(0, &p), Err(SceneError::Parameter(_))));
    }
}
