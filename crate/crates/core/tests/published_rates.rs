//! The derived counts pushed back through `metrics`.

mod common;

use common::published::{derive, ROWS};
use occ_core::metrics;

#[test]
fn derived_counts_are_the_expected_integers() {
    let got: Vec<(u64, u64, u64, u64)> = ROWS
        .iter()
        .map(|r| {
            let c = derive(r);
            (c.tp, c.fp, c.fn_, c.tn)
        })
        .collect();
    assert_eq!(
        got,
        vec![(47, 174, 0, 0), (41, 94, 6, 80), (25, 85, 22, 89), (44, 55, 3, 119), (46, 48, 1, 126)]
    );
}

#[test]
fn metrics_reproduce_rows() {
    for row in &ROWS {
        let c = derive(row);
        let m = metrics(c).unwrap();
        assert!((m.fdr - row.fdr).abs() <= 0.001, "{} fdr {}", row.name, m.fdr);
        assert!((m.fp_per_scan - row.fp_scan).abs() <= 0.001, "{} fp/scan {}", row.name, m.fp_per_scan);
        if let (Some(s), Some(t)) = (row.sen, row.spe) {
            assert!((m.sensitivity - s).abs() <= 0.001, "{} sen", row.name);
            assert!((m.specificity - t).abs() <= 0.001, "{} spe", row.name);
        }
        if row.name != "UNet-3D" {
            if let Some(f) = row.f1 {
                assert!((m.f1 - f).abs() <= 0.001, "{} f1 {}", row.name, m.f1);
            }
        }
    }
}

#[test]
fn unet_f1_cell_disagrees_with_its_own_rates() {
    let m = metrics(derive(&ROWS[1])).unwrap();
    // 2*41 / (2*41 + 94 + 6)
    assert!((m.f1 - 82.0 / 182.0).abs() < 1e-12);
    assert!((m.f1 - 0.451).abs() <= 0.0005);
    assert!((m.f1 - 0.366).abs() > 0.05, "printed F1 is not reachable from these counts");
}
