use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{average_precision, confusion_matrix, pr_curve, roc_auc, roc_curve, Confusion};
use crate::data::Sample;
use crate::error::{Error, Result, ResultExt};
use crate::models::Model;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Recorded in every report so readers know AP is not interpolated.
pub const AP_METHOD: &str = "step";

/// Anything that maps a study to a malignancy score.
pub trait Scorer {
    fn name(&self) -> &str;
    fn score(&mut self, sample: &Sample) -> Result<f64>;
}

/// Inference-mode scoring through a network, one study at a time.
pub struct ModelScorer<'a> {
    pub name: String,
    pub model: &'a mut Model<f32>,
}

impl Scorer for ModelScorer<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&mut self, sample: &Sample) -> Result<f64> {
        let mut shape = vec![1];
        shape.extend_from_slice(sample.image.shape());
        let x = sample.image.clone().reshape(&shape)?;
        let s = self.model.predict(&x)?;
        Ok(s.data()[0] as f64)
    }
}

/// Scores looked up by study id, e.g. aggregated segmentation maps.
pub struct FixedScorer {
    pub name: String,
    pub scores: BTreeMap<String, f64>,
}

impl Scorer for FixedScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&mut self, sample: &Sample) -> Result<f64> {
        self.scores
            .get(&sample.study_id)
            .copied()
            .ok_or_else(|| Error::Data(format!("no score for study '{}'", sample.study_id)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredStudy {
    pub study_id: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub partition: String,
    pub n: usize,
    pub auc_roc: f64,
    pub average_precision: f64,
    pub ap_method: String,
    pub threshold: f64,
    pub confusion: Confusion,
    pub scores: Vec<ScoredStudy>,
}

impl MetricsReport {
    fn split(&self) -> (Vec<f64>, Vec<u8>) {
        self.scores.iter().map(|s| (s.score, s.label)).unzip()
    }

    pub fn row(&self) -> TableRow {
        TableRow { model: self.model.clone(), auc_roc: self.auc_roc, average_precision: self.average_precision }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Scores every sample in inference mode and computes the ranking metrics
/// and the confusion matrix at `threshold`.
pub fn evaluate(scorer: &mut dyn Scorer, samples: &[Sample], threshold: f64, partition: &str) -> Result<MetricsReport> {
    let mut inner = || -> Result<MetricsReport> {
        if samples.is_empty() {
            return Err(Error::Metric("no samples to evaluate".into()));
        }
        let mut scores = Vec::with_capacity(samples.len());
        for s in samples {
            let score = scorer.score(s).context_with(|| format!("study '{}'", s.study_id))?;
            scores.push(ScoredStudy { study_id: s.study_id.clone(), label: s.label, score });
        }
        let (s, l): (Vec<f64>, Vec<u8>) = scores.iter().map(|x| (x.score, x.label)).unzip();
        Ok(MetricsReport {
            model: scorer.name().to_string(),
            partition: partition.to_string(),
            n: samples.len(),
            auc_roc: roc_auc(&s, &l)?,
            average_precision: average_precision(&s, &l)?,
            ap_method: AP_METHOD.into(),
            threshold,
            confusion: confusion_matrix(&s, &l, threshold),
            scores,
        })
    };
    inner().context_with(|| format!("partition '{partition}'"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub auc_roc: f64,
    pub average_precision: f64,
}

/// Aligned plain-text table with the columns Model, AUC ROC, AP.
pub fn render_table(rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).chain(["Model".len()]).max().unwrap_or(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>6}", "Model", "AUC ROC", "AP");
    let _ = writeln!(out, "{}", "-".repeat(width + 17));
    for r in rows {
        let _ = writeln!(out, "{:<width$}  {:>7.4}  {:>6.4}", r.model, r.auc_roc, r.average_precision);
    }
    out
}

/// Writes `<stem>_roc.csv` and `<stem>_pr.csv` next to each other.
pub fn write_curves(report: &MetricsReport, dir: &Path, stem: &str) -> Result<()> {
    let (s, l) = report.split();
    let mut roc = String::from("threshold,fpr,tpr\n");
    for (t, f, p) in roc_curve(&s, &l)? {
        let _ = writeln!(roc, "{t},{f},{p}");
    }
    let mut pr = String::from("threshold,recall,precision\n");
    for (t, r, p) in pr_curve(&s, &l)? {
        let _ = writeln!(pr, "{t},{r},{p}");
    }
    for (name, body) in [(format!("{stem}_roc.csv"), roc), (format!("{stem}_pr.csv"), pr)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom_dataset, PhantomConfig};

    struct Constant(f64);

    impl Scorer for Constant {
        fn name(&self) -> &str {
            "constant"
        }
        fn score(&mut self, _: &Sample) -> Result<f64> {
            Ok(self.0)
        }
    }

    struct Oracle;

    impl Scorer for Oracle {
        fn name(&self) -> &str {
            "oracle"
        }
        fn score(&mut self, s: &Sample) -> Result<f64> {
            Ok(s.label as f64)
        }
    }

    fn samples() -> Vec<Sample> {
        generate_phantom_dataset(&PhantomConfig::new(10, 0.5, [4, 12, 12], 5)).unwrap().samples
    }

    #[test]
    fn constant_scorer_is_chance_and_all_positive() {
        let r = evaluate(&mut Constant(0.5), &samples(), DEFAULT_THRESHOLD, "test").unwrap();
        assert_eq!(r.auc_roc, 0.5);
        assert_eq!((r.confusion.tn, r.confusion.fn_), (0, 0));
        assert_eq!(r.confusion.total(), r.n);
    }

    #[test]
    fn perfect_scorer() {
        let r = evaluate(&mut Oracle, &samples(), DEFAULT_THRESHOLD, "test").unwrap();
        assert_eq!((r.auc_roc, r.average_precision), (1.0, 1.0));
        assert_eq!((r.confusion.fp, r.confusion.fn_), (0, 0));
    }

    #[test]
    fn metric_errors_name_the_partition() {
        let one_class: Vec<Sample> = samples().into_iter().filter(|s| s.label == 0).collect();
        let err = evaluate(&mut Oracle, &one_class, 0.5, "val").unwrap_err();
        assert!(err.to_string().contains("partition 'val'"), "{err}");
        assert!(evaluate(&mut Oracle, &[], 0.5, "train").is_err());
    }

    #[test]
    fn fixed_scorer_requires_every_study() {
        let s = samples();
        let mut fixed = FixedScorer { name: "baseline".into(), scores: BTreeMap::new() };
        assert!(evaluate(&mut fixed, &s, 0.5, "test").is_err());
        fixed.scores = s.iter().map(|x| (x.study_id.clone(), 0.1 + 0.8 * x.label as f64)).collect();
        assert_eq!(evaluate(&mut fixed, &s, 0.5, "test").unwrap().auc_roc, 1.0);
    }

    #[test]
    fn table_has_one_row_per_model() {
        let rows = vec![
            TableRow { model: "ConvNet3D".into(), auc_roc: 0.5, average_precision: 0.25 },
            TableRow { model: "ResNet3D".into(), auc_roc: 0.62, average_precision: 0.46 },
            TableRow { model: "ConvNeXt3D".into(), auc_roc: 0.55, average_precision: 0.33 },
        ];
        let t = render_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("Model") && lines[0].contains("AUC ROC") && lines[0].ends_with("AP"));
        assert!(lines[3].starts_with("ResNet3D") && lines[3].contains("0.6200") && lines[3].contains("0.4600"));
        assert!(lines.iter().skip(2).all(|l| l.len() == lines[0].len()));
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = evaluate(&mut Oracle, &samples(), 0.5, "test").unwrap();
        r.save_json(&dir.path().join("r.json")).unwrap();
        let back: MetricsReport = serde_json::from_slice(&fs::read(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        write_curves(&r, dir.path(), "test").unwrap();
        let roc = fs::read_to_string(dir.path().join("test_roc.csv")).unwrap();
        assert!(roc.starts_with("threshold,fpr,tpr\ninf,0,0\n"));
        assert!(dir.path().join("test_pr.csv").exists());
    }
}
