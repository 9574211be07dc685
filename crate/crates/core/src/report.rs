//! Robustness report: per-model accuracy rows over the six adversaries,
//! rendered as an aligned text table and as CSV.

use crate::attack::AttackMethod;

/// Round half-up to two decimals (accuracy percent convention).
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5).floor() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Threat {
    WhiteBox,
    BlackBox,
}

impl Threat {
    pub fn label(&self) -> &'static str {
        match self {
            Threat::WhiteBox => "white-box",
            Threat::BlackBox => "black-box",
        }
    }
}

/// One model's row: clean accuracy plus the six attack cells, in percent.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub threat: Threat,
    pub clean: f64,
    /// Accuracy per attack in [`AttackMethod::ALL`] order.
    pub cells: [f64; 6],
    /// Fraction of evaluated samples whose loss gradient at the clean input
    /// was exactly zero, per attack; flags gradient masking.
    pub zero_grad: [f64; 6],
}

impl ReportRow {
    /// Mean over the six attack cells (clean excluded), unrounded input,
    /// half-up rounded result.
    pub fn mean(&self) -> f64 {
        round2(self.cells.iter().sum::<f64>() / 6.0)
    }
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<ReportRow>,
}

impl RobustnessReport {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    /// Aligned text table shaped like the white-box/black-box accuracy
    /// tables: model rows by attack columns plus the mean over attacks.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "Model", "Threat", "Clean", "FGSM", "BIM", "PGD", "DF", "CW_l2", "CW_linf", "Mean"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>10} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                r.model,
                r.threat.label(),
                round2(r.clean),
                round2(r.cells[0]),
                round2(r.cells[1]),
                round2(r.cells[2]),
                round2(r.cells[3]),
                round2(r.cells[4]),
                round2(r.cells[5]),
                r.mean(),
            ));
        }
        out
    }

    /// CSV: header row, one line per model, LF endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,threat,clean");
        for m in AttackMethod::ALL {
            out.push_str(&format!(",{}", m.column()));
        }
        out.push_str(",mean");
        for m in AttackMethod::ALL {
            out.push_str(&format!(",zero_grad_{}", m.name()));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.2}", r.model, r.threat.label(), round2(r.clean)));
            for c in r.cells {
                out.push_str(&format!(",{:.2}", round2(c)));
            }
            out.push_str(&format!(",{:.2}", r.mean()));
            for z in r.zero_grad {
                out.push_str(&format!(",{:.4}", z));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_half_up() {
        assert_eq!(round2(11.825), 11.83);
        assert_eq!(round2(11.824), 11.82);
        assert_eq!(round2(0.005), 0.01);
        assert_eq!(round2(99.999), 100.0);
    }

    fn row(cells: [f64; 6]) -> ReportRow {
        ReportRow {
            model: "m".into(),
            threat: Threat::WhiteBox,
            clean: 99.5,
            cells,
            zero_grad: [0.0; 6],
        }
    }

    #[test]
    fn mean_excludes_clean_and_stays_close() {
        let r = row([10.0, 20.0, 30.0, 40.0, 50.0, 60.0]);
        assert_eq!(r.mean(), 35.0);
        // mean of displayed (rounded) cells differs by at most 0.005
        let displayed_mean: f64 = r.cells.iter().map(|&c| round2(c)).sum::<f64>() / 6.0;
        assert!((r.mean() - displayed_mean).abs() <= 0.005 + 1e-12);
    }

    #[test]
    fn csv_shape() {
        let mut rep = RobustnessReport::default();
        rep.push(row([1.0; 6]));
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("model,threat,clean,FGSM"));
        assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
    }
}
