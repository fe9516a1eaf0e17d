use std::time::SystemTime;

use super::*;
use crate::models::Family;
use crate::test_support::{tiny_sequences, tiny_spec};
use crate::train::{Checkpoint, BEST_CHECKPOINT};

fn budget() -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        batch_size: 2,
        seed: 4,
        ..Default::default()
    }
}

fn modified(path: &Path) -> SystemTime {
    fs::metadata(path).unwrap().modified().unwrap()
}

fn grid_over(layers: Vec<usize>) -> GridSpec {
    GridSpec {
        base: tiny_spec(Family::Fcd),
        layers_per_db: layers,
        growth: vec![],
        first_conv_features: vec![],
        learning_rate: vec![],
    }
}

#[test]
fn cells_enumerate_the_product() {
    let grid = GridSpec {
        first_conv_features: vec![6, 8, 10],
        ..grid_over(vec![2, 3])
    };
    let cells = grid.cells(0.01);
    assert_eq!(cells.len(), 6);
    assert_eq!(cells[4].spec.layers_per_db, 3);
    assert_eq!(cells[4].spec.first_conv_features, 8);
    assert_eq!(cells[4].spec.growth, 3);
    assert!(cells.iter().all(|c| c.learning_rate == 0.01));
}

#[test]
fn single_cell_matches_a_plain_training_run() {
    let data = tiny_sequences(4, 5);
    let grid = grid_over(vec![]);
    let dir = tempfile::tempdir().unwrap();
    let ranking = grid_search(&grid, &mut data.clone(), &mut data.clone(), &budget(), dir.path()).unwrap();
    let single = train(&grid.base, &mut data.clone(), &mut data.clone(), &budget(), None).unwrap();
    assert_eq!(ranking.0.len(), 1);
    assert_eq!(ranking.0[0].best_val_miou, single.best.best_val_miou);
    let saved = Checkpoint::load(&dir.path().join("cell-000").join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(saved.to_bytes().unwrap(), single.best.to_bytes().unwrap());
}

#[test]
fn two_depths_are_ranked_and_resumed() {
    let data = tiny_sequences(4, 6);
    let grid = grid_over(vec![2, 3]);
    let dir = tempfile::tempdir().unwrap();
    let first = grid_search(&grid, &mut data.clone(), &mut data.clone(), &budget(), dir.path()).unwrap();
    assert_eq!(first.0.len(), 2);
    assert!(first.0[0].best_val_miou >= first.0[1].best_val_miou);
    let table = fs::read_to_string(dir.path().join(RANKING_FILE)).unwrap();
    assert_eq!(table.lines().count(), 3);

    let ckpt0 = dir.path().join("cell-000").join(BEST_CHECKPOINT);
    let ckpt1 = dir.path().join("cell-001").join(BEST_CHECKPOINT);
    let (t0, t1) = (modified(&ckpt0), modified(&ckpt1));
    // an interrupted cell has checkpoints but no result file
    fs::remove_file(dir.path().join("cell-001").join(RESULT_FILE)).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(20));
    let second = grid_search(&grid, &mut data.clone(), &mut data.clone(), &budget(), dir.path()).unwrap();
    assert_eq!(second, first);
    assert_eq!(modified(&ckpt0), t0);
    assert_ne!(modified(&ckpt1), t1);
}
