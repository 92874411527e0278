mod common;

use maft_core::checkpoint::Checkpoint;
use maft_core::config::Config;
use maft_core::par::Exec;
use maft_core::train::{generate_dataset, read_manifest, Dataset, TrainError, Trainer};

/// Tiny model on small synthetic scenes, so a few epochs take seconds.
fn config() -> Config {
    let mut c = Config::default();
    let text = "\
decoder.layers = 2
decoder.heads = 2
decoder.d = 16
decoder.ffn = 24
decoder.queries = 8
encoder.knn = 8
optim.lr = 1e-3
train.epochs = 3
train.batch_size = 2
train.val_count = 2
train.voxel_size = 0.12
data.extent = 3,3,2
data.min_instances = 2
data.max_instances = 3
data.density = 80
data.min_gap = 0.2
";
    for line in text.lines() {
        let (k, v) = line.split_once(" = ").unwrap();
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

fn dataset(dir: &std::path::Path, config: &Config) -> Dataset {
    generate_dataset(config, dir, 6, Exec::Parallel).unwrap();
    Dataset::load(dir, config, Exec::Parallel).unwrap()
}

fn param_bits(t: &Trainer) -> Vec<u64> {
    t.model.params.ids().flat_map(|id| t.model.params.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn generated_dataset_reloads_with_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let c = config();
    let entries = generate_dataset(&c, dir.path(), 4, Exec::Parallel).unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap(), entries);
    assert_eq!(entries.iter().map(|e| e.seed).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    let data = Dataset::load(dir.path(), &c, Exec::Sequential).unwrap();
    assert_eq!(data.len(), 4);
    let (train, val) = data.split(1);
    assert_eq!((train.len(), val.len()), (3, 1));
    for (scene, e) in data.scenes.iter().zip(&entries) {
        assert_eq!(scene.gt.instances.len(), e.instances);
    }
}

#[test]
fn mismatched_class_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = config();
    generate_dataset(&c, dir.path(), 2, Exec::Parallel).unwrap();
    let mut other = c.clone();
    other.set("decoder.num_classes", "5").unwrap();
    other.set("data.num_classes", "5").unwrap();
    assert!(Dataset::load(dir.path(), &other, Exec::Parallel).is_err());
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let c = config();
    let data = dataset(dir.path(), &c);
    let (train, _) = data.split(c.train.val_count);

    let mut straight = Trainer::new(c.clone(), Exec::Parallel).unwrap();
    let logs: Vec<_> = (0..3).map(|_| straight.train_epoch(train, &mut Vec::new()).unwrap()).collect();

    let mut first = Trainer::new(c.clone(), Exec::Parallel).unwrap();
    first.train_epoch(train, &mut Vec::new()).unwrap();
    let bytes = first.checkpoint().to_bytes();
    drop(first);
    let mut resumed = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), Exec::Sequential).unwrap();
    let rest: Vec<_> = (0..2).map(|_| resumed.train_epoch(train, &mut Vec::new()).unwrap()).collect();

    assert_eq!(param_bits(&straight), param_bits(&resumed));
    for (a, b) in logs[1..].iter().zip(&rest) {
        assert_eq!(a.tsv_row(), b.tsv_row());
    }
    assert_eq!(straight.checkpoint().to_bytes(), resumed.checkpoint().to_bytes());
}

#[test]
fn training_reduces_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config();
    c.train.epochs = 8;
    let data = dataset(dir.path(), &c);
    let (train, val) = data.split(c.train.val_count);
    let mut t = Trainer::new(c, Exec::Parallel).unwrap();
    let logs = t.run(train, val, None, |_| {}).unwrap();
    assert!(logs.last().unwrap().terms.total < logs[0].terms.total);
    assert!(logs.last().unwrap().val.is_some());
}

#[test]
fn divergence_is_reported_as_numeric() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config();
    c.optim.lr = 1e300;
    c.optim.weight_decay = 0.0;
    c.train.checkpoint_every = 1;
    let data = dataset(&dir.path().join("data"), &c);
    let (train, val) = data.split(c.train.val_count);
    let mut t = Trainer::new(c, Exec::Parallel).unwrap();
    let err = t.run(train, val, Some(&dir.path().join("run")), |_| {}).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(matches!(err, TrainError::NonFinite { .. }));
}
