//! Integer confusion counts recovered from the printed comparison table.

use occ_core::ConfusionCounts;

pub const N_POS: u64 = 47;
pub const N_NEG: u64 = 174;
pub const N_SCANS: u64 = 28;

/// Printed row: FDR, FP/scan, Sen, Spe, F1 (None where the table shows "-").
pub struct Printed {
    pub name: &'static str,
    pub fdr: f64,
    pub fp_scan: f64,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub f1: Option<f64>,
}

pub const ROWS: [Printed; 5] = [
    Printed { name: "Candidates", fdr: 0.787, fp_scan: 6.214, sen: None, spe: None, f1: None },
    Printed { name: "UNet-3D", fdr: 0.696, fp_scan: 3.357, sen: Some(0.872), spe: Some(0.460), f1: Some(0.366) },
    Printed { name: "ViLT", fdr: 0.773, fp_scan: 3.036, sen: Some(0.532), spe: Some(0.511), f1: Some(0.318) },
    Printed { name: "Claude3", fdr: 0.556, fp_scan: 1.964, sen: Some(0.936), spe: Some(0.684), f1: Some(0.603) },
    Printed { name: "GPT-4V", fdr: 0.511, fp_scan: 1.714, sen: Some(0.979), spe: Some(0.724), f1: Some(0.652) },
];

fn round3_eq(v: f64, printed: f64) -> bool {
    (v - printed).abs() <= 0.0005 + 1e-12
}

/// Every (tp, fp) whose rounded Sen, Spe, FDR and FP/scan equal the printed
/// cells. F1 is deliberately not used, so it can be checked independently.
pub fn invert(row: &Printed) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    for tp in 0..=N_POS {
        for fp in 0..=N_NEG {
            let (fnn, tn) = (N_POS - tp, N_NEG - fp);
            let ok = round3_eq(fp as f64 / (tp + fp).max(1) as f64, row.fdr)
                && round3_eq(fp as f64 / N_SCANS as f64, row.fp_scan)
                && row.sen.is_none_or(|s| round3_eq(tp as f64 / (tp + fnn) as f64, s))
                && row.spe.is_none_or(|s| round3_eq(tn as f64 / (tn + fp) as f64, s));
            if ok {
                out.push((tp, fp));
            }
        }
    }
    out
}

/// Candidates row: keeping everything means tp = 47, fp = 174; the search
/// must agree, and among all-kept solutions that is the only one.
pub fn derive(row: &Printed) -> ConfusionCounts {
    let sols = invert(row);
    let pick = if row.sen.is_none() {
        assert!(sols.contains(&(N_POS, N_NEG)), "{}: {sols:?}", row.name);
        (N_POS, N_NEG)
    } else {
        assert_eq!(sols.len(), 1, "{}: counts not unique: {sols:?}", row.name);
        sols[0]
    };
    let (tp, fp) = pick;
    ConfusionCounts::new(tp, fp, N_POS - tp, N_NEG - fp, N_SCANS)
}
