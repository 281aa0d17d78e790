use std::fmt::Write as _;
use std::path::Path;

use crate::adapt::StepReport;
use crate::error::Result;
use crate::scalar::Real;

pub const STEP_CSV_HEADER: &str =
    "step,align_loss_before,align_loss_after,tta_loss,accuracy,mean_concentration,max_principal_angle_deg";

/// Fixed-point decimal with nine significant digits; `nan`/`inf`/`-inf` otherwise.
pub fn format_sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0.00000000".into();
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (8 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}

fn opt<T: Real>(x: Option<T>) -> String {
    format_sig9(x.map_or(f64::NAN, Real::as_f64))
}

pub fn write_step_csv<T: Real>(reports: &[StepReport<T>], path: &Path) -> Result<()> {
    let mut out = String::from(STEP_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step,
            format_sig9(r.align_loss_before.as_f64()),
            format_sig9(r.align_loss_after.as_f64()),
            format_sig9(r.tta_loss.as_f64()),
            opt(r.batch_accuracy),
            format_sig9(r.mean_semantic_concentration.as_f64()),
            format_sig9(r.max_principal_angle_deg().as_f64()),
        );
    }
    super::atomic_write(path, out.as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnoseRow<T> {
    pub index: usize,
    pub label: Option<usize>,
    pub prediction: usize,
    pub score: T,
    pub angle_to_text_subspace: T,
    pub semantic_concentration: T,
    pub gt_similarity: Option<T>,
}

pub fn write_diagnose_csv<T: Real>(rows: &[DiagnoseRow<T>], path: &Path) -> Result<()> {
    let mut out = String::from(
        "index,label,prediction,score,angle_to_text_subspace,semantic_concentration,gt_similarity\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.index,
            r.label.map_or(String::new(), |l| l.to_string()),
            r.prediction,
            format_sig9(r.score.as_f64()),
            format_sig9(r.angle_to_text_subspace.as_f64()),
            format_sig9(r.semantic_concentration.as_f64()),
            opt(r.gt_similarity),
        );
    }
    super::atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_sig9(1.0), "1.00000000");
        assert_eq!(format_sig9(0.5), "0.500000000");
        assert_eq!(format_sig9(123.456), "123.456000");
        assert_eq!(format_sig9(-2.5e-3), "-0.00250000000");
        assert_eq!(format_sig9(0.0), "0.00000000");
        assert_eq!(format_sig9(f64::NAN), "nan");
        assert_eq!(format_sig9(1234567890.4), "1234567890");
    }
}
