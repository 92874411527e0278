use std::fmt::Write as _;
use std::path::Path;

use super::{Scene, SceneError};

pub const HEADER_MAGIC: &str = "MAFT-SCENE";
const VERSION: &str = "v1";

/// Text form. `f64` display is the shortest string that parses back to the
/// same value, so a round trip is exact.
pub fn scene_to_string(scene: &Scene) -> String {
    let mut out = String::with_capacity(scene.len() * 96 + 32);
    let _ = writeln!(out, "{HEADER_MAGIC} {VERSION} {} {}", scene.len(), scene.num_classes);
    for p in 0..scene.len() {
        let [x, y, z] = scene.points[p];
        let [r, g, b] = scene.colors[p];
        let _ = writeln!(out, "{x} {y} {z} {r} {g} {b} {} {}", scene.sem_label[p], scene.inst_label[p]);
    }
    out
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    std::fs::write(path, scene_to_string(scene))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    parse_scene(&std::fs::read_to_string(path)?)
}

fn parse_err(line: usize, msg: impl Into<String>) -> SceneError {
    SceneError::Parse { line, msg: msg.into() }
}

fn field<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T, SceneError> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    tok.parse().map_err(|_| parse_err(line, format!("cannot parse {what} from {tok:?}")))
}

/// Parses and validates a scene file body.
pub fn parse_scene(text: &str) -> Result<Scene, SceneError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let mut h = header.split_whitespace();
    if h.next() != Some(HEADER_MAGIC) {
        return Err(parse_err(1, format!("expected {HEADER_MAGIC} header")));
    }
    if h.next() != Some(VERSION) {
        return Err(parse_err(1, format!("unsupported version, expected {VERSION}")));
    }
    let m: usize = field(h.next(), 1, "point count")?;
    let k: usize = field(h.next(), 1, "class count")?;
    if h.next().is_some() {
        return Err(parse_err(1, "trailing header fields"));
    }

    let mut scene = Scene {
        points: Vec::with_capacity(m),
        colors: Vec::with_capacity(m),
        sem_label: Vec::with_capacity(m),
        inst_label: Vec::with_capacity(m),
        num_classes: k,
    };
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if scene.points.len() == m {
            return Err(parse_err(n, format!("more rows than the {m} declared")));
        }
        let mut t = line.split_whitespace();
        let mut real = |what| field::<f64>(t.next(), n, what);
        let p = [real("x")?, real("y")?, real("z")?];
        let c = [real("r")?, real("g")?, real("b")?];
        let sem: i32 = field(t.next(), n, "semantic label")?;
        let inst: i32 = field(t.next(), n, "instance label")?;
        if t.next().is_some() {
            return Err(parse_err(n, "trailing fields"));
        }
        scene.points.push(p);
        scene.colors.push(c);
        scene.sem_label.push(sem);
        scene.inst_label.push(inst);
    }
    if scene.points.len() != m {
        return Err(parse_err(
            text.lines().count().max(1),
            format!("header declares {m} rows, found {}", scene.points.len()),
        ));
    }
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GenParams};

    #[test]
    fn round_trip_is_exact() {
        let s = generate_scene(5, &GenParams::default()).unwrap();
        assert_eq!(parse_scene(&scene_to_string(&s)).unwrap(), s);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        let s = generate_scene(9, &GenParams::default()).unwrap();
        save_scene(&s, &path).unwrap();
        assert_eq!(load_scene(&path).unwrap(), s);
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse_scene(""), Err(SceneError::Parse { line: 1, .. })));
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let text = "MAFT-SCENE v1 2 18\n0 0 0 0.5 0.5 0.5 -1 -1\n";
        assert!(matches!(parse_scene(text), Err(SceneError::Parse { .. })));
        let text = "MAFT-SCENE v1 0 18\n0 0 0 0.5 0.5 0.5 -1 -1\n";
        assert!(matches!(parse_scene(text), Err(SceneError::Parse { line: 2, .. })));
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = "MAFT-SCENE v1 2 18\n0 0 0 0.5 0.5 0.5 -1 -1\n0 0 zz 0.5 0.5 0.5 -1 -1\n";
        match parse_scene(text) {
            Err(SceneError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_is_a_validation_error() {
        let text = "MAFT-SCENE v1 1 18\n0 0 0 0.5 0.5 0.5 18 0\n";
        assert!(matches!(parse_scene(text), Err(SceneError::Validation(_))));
    }
}
