use super::*;
use crate::train::ConfusionMatrix;

fn record(model: &str, split: &str, truth: &[u8], pred: &[u8]) -> EvalRecord {
    let mut cm = ConfusionMatrix::new(N_CLASSES);
    cm.add(truth, pred).unwrap();
    EvalRecord {
        model: model.into(),
        checkpoint: PathBuf::from("best.ckpt"),
        report: EvalReport::from_confusion(split, 1, cm),
    }
}

#[test]
fn table_has_a_row_per_class_and_a_column_per_record() {
    let recs = [
        record("fcd_s", "test", &[0, 0, 1, 1], &[0, 1, 1, 1]),
        record("fcd_s", "clean_test", &[0, 0, 1, 1], &[0, 0, 1, 1]),
    ];
    let table = iou_table(&recs);
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with('|')).collect();
    assert_eq!(rows.len(), N_CLASSES + 3);
    assert_eq!(rows[2], "| background | 50.00 | 100.00 |");
    assert_eq!(rows[3], "| border/wall | 66.67 | 100.00 |");
    assert!(rows[4].ends_with("n/a | n/a |"));
    assert_eq!(rows.last().unwrap(), &"| mean IoU | **58.33** | **100.00** |");
}

#[test]
fn chart_bars_are_proportional_to_mean_iou() {
    let recs = [
        record("a", "test", &[0, 0, 1, 1], &[0, 1, 1, 1]),
        record("a", "clean_test", &[0, 1], &[0, 1]),
    ];
    let dir = tempfile::tempdir().unwrap();
    write_report(&recs, dir.path(), true).unwrap();
    let decoder = png::Decoder::new(File::open(dir.path().join(CHART_FILE)).unwrap());
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    let w = info.width as usize;
    let column = |x: usize, color: [u8; 3]| {
        (0..info.height as usize)
            .filter(|&y| buf[3 * (y * w + x)..3 * (y * w + x) + 3] == color)
            .count()
    };
    // bar centres: margin + gap / 2 + i * (bar + gap) + bar / 2
    assert_eq!(column(16 + 6 + 12, PALETTE[0]), (200.0f64 * 7.0 / 12.0).round() as usize);
    assert_eq!(column(16 + 6 + 36 + 12, PALETTE[1]), 200);
    assert!(fs::read_to_string(dir.path().join(TABLE_FILE)).unwrap().contains("clean_test"));
}

#[test]
fn records_round_trip_through_json() {
    let r = record("rfcd_ff", "test", &[3, 4], &[3, 5]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    fs::write(&path, serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(EvalRecord::load(&path).unwrap(), r);
}
