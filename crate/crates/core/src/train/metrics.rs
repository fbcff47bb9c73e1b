use crate::error::{Error, Result};

/// Per-class Dice and the unweighted mean over foreground classes.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub per_class: Vec<f64>,
    pub macro_fg: f64,
}

impl DiceReport {
    fn from_per_class(per_class: Vec<f64>) -> Self {
        let fg = &per_class[1.min(per_class.len() - 1)..];
        let macro_fg = fg.iter().sum::<f64>() / fg.len() as f64;
        DiceReport { per_class, macro_fg }
    }

    /// Class-wise mean over several reports.
    pub fn mean(reports: &[DiceReport]) -> Result<DiceReport> {
        let k = reports.first().ok_or_else(|| Error::Invalid("no Dice reports to average".into()))?.per_class.len();
        let per_class = (0..k)
            .map(|c| reports.iter().map(|r| r.per_class[c]).sum::<f64>() / reports.len() as f64)
            .collect();
        Ok(DiceReport::from_per_class(per_class))
    }
}

/// `2|P∩G| / (|P|+|G|)` per class; a class absent from both counts as 1.
pub fn dice_score(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<DiceReport> {
    if pred.len() != truth.len() {
        return Err(Error::dim("dice_score", &[pred.len()], &[truth.len()]));
    }
    if num_classes == 0 {
        return Err(Error::Invalid("dice needs at least one class".into()));
    }
    let mut inter = vec![0u64; num_classes];
    let mut np = vec![0u64; num_classes];
    let mut ng = vec![0u64; num_classes];
    for (&p, &g) in pred.iter().zip(truth) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::Invalid(format!("label {} out of range for {num_classes} classes", p.max(g))));
        }
        np[p] += 1;
        ng[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let per_class = (0..num_classes)
        .map(|c| {
            let denom = np[c] + ng[c];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[c] as f64 / denom as f64
            }
        })
        .collect();
    Ok(DiceReport::from_per_class(per_class))
}
