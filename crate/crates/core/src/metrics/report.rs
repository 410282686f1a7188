use serde::{Deserialize, Serialize};

use super::features::FeatureSpace;

/// One (dataset, method) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub n_tasks: usize,
    pub method: String,
    pub fid: f64,
    pub ssim: f64,
    pub n_gen: usize,
    pub n_ref: usize,
    pub feature_space: FeatureSpace,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,method,fid,ssim,n_gen,n_ref,feature_space\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{},{}\n",
                r.dataset, r.method, r.fid, r.ssim, r.n_gen, r.n_ref, r.feature_space
            ));
        }
        out
    }

    /// Aligned text table, one line per row, dataset shown once per group.
    pub fn to_table(&self) -> String {
        let header = ["Dataset", "#Tasks", "Method", "FID", "SSIM"];
        let mut cells: Vec<[String; 5]> = Vec::new();
        let mut last: Option<&str> = None;
        for r in &self.rows {
            let first = last != Some(r.dataset.as_str());
            last = Some(&r.dataset);
            cells.push([
                if first { r.dataset.clone() } else { String::new() },
                if first { r.n_tasks.to_string() } else { String::new() },
                r.method.clone(),
                format!("{:.2}", r.fid),
                format!("{:.4}", r.ssim),
            ]);
        }
        let widths: Vec<usize> = (0..5)
            .map(|i| cells.iter().map(|c| c[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |c: &[&str]| {
            let parts: Vec<String> = c
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, w))| if i < 3 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&line(&rule.iter().map(String::as_str).collect::<Vec<_>>()));
        for c in &cells {
            out.push_str(&line(&c.iter().map(String::as_str).collect::<Vec<_>>()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(dataset: &str, method: &str) -> ReportRow {
        ReportRow {
            dataset: dataset.into(),
            n_tasks: 10,
            method: method.into(),
            fid: 12.3456,
            ssim: 0.5,
            n_gen: 100,
            n_ref: 200,
            feature_space: FeatureSpace::PixelPool,
        }
    }

    #[test]
    fn csv_layout() {
        let r = MetricsReport {
            rows: vec![row("MNIST", "DDPM")],
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "dataset,method,fid,ssim,n_gen,n_ref,feature_space");
        assert_eq!(lines[1], "MNIST,DDPM,12.345600,0.500000,100,200,pixel-pool");
    }

    #[test]
    fn table_groups_dataset() {
        let r = MetricsReport {
            rows: vec![row("MNIST", "DDPM"), row("MNIST", "SR-DDPM"), row("CIFAR-10", "DDPM")],
        };
        let t = r.to_table();
        assert_eq!(t.lines().count(), 5);
        assert_eq!(t.matches("MNIST").count(), 1);
        assert!(t.lines().nth(3).unwrap().trim_start().starts_with("SR-DDPM"));
    }
}
