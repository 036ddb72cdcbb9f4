//! Detection AUC, precision/recall/F1, confusion matrices and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Area under the ROC curve via the Mann-Whitney statistic; tied scores
/// count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Probability("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Empty("AUC needs both positive and negative samples".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of average ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    Macro,
    Weighted,
}

impl Prf1 {
    pub fn f1(&self, averaging: Averaging) -> f64 {
        match averaging {
            Averaging::Macro => self.macro_f1,
            Averaging::Weighted => self.weighted_f1,
        }
    }
}

fn check_classes(values: &[usize], classes: usize) -> Result<()> {
    match values.iter().find(|&&v| v >= classes) {
        Some(v) => Err(Error::Shape(format!("unknown class {v} (expected < {classes})"))),
        None => Ok(()),
    }
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.row_sums().iter().sum()
    }

    /// Sum of `counts[t][p]` over `t != p` with both in `classes`.
    pub fn off_diagonal(&self, classes: &[usize]) -> u64 {
        let mut s = 0;
        for &t in classes {
            for &p in classes {
                if t != p {
                    s += self.counts[t][p];
                }
            }
        }
        s
    }

    /// Precision/recall/F1 recomputed from the counts.
    pub fn prf1(&self) -> Prf1 {
        let c = self.classes();
        let total = self.total();
        let mut per_class = Vec::with_capacity(c);
        for k in 0..c {
            let tp = self.counts[k][k];
            let support: u64 = self.counts[k].iter().sum();
            let predicted: u64 = (0..c).map(|t| self.counts[t][k]).sum();
            let mut zero_division = false;
            let precision = if predicted == 0 {
                zero_division = true;
                0.0
            } else {
                tp as f64 / predicted as f64
            };
            let recall = if support == 0 {
                zero_division = true;
                0.0
            } else {
                tp as f64 / support as f64
            };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            per_class.push(ClassMetrics {
                precision,
                recall,
                f1,
                support: support as usize,
                predicted: predicted as usize,
                zero_division,
            });
        }
        let mean = |f: &dyn Fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
        let weighted = |f: &dyn Fn(&ClassMetrics) -> f64| {
            if total == 0 {
                0.0
            } else {
                per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
            }
        };
        let correct: u64 = (0..c).map(|k| self.counts[k][k]).sum();
        Prf1 {
            macro_precision: mean(&|m| m.precision),
            macro_recall: mean(&|m| m.recall),
            macro_f1: mean(&|m| m.f1),
            weighted_precision: weighted(&|m| m.precision),
            weighted_recall: weighted(&|m| m.recall),
            weighted_f1: weighted(&|m| m.f1),
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_class,
        }
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions vs {} labels", predictions.len(), labels.len())));
    }
    check_classes(predictions, classes)?;
    check_classes(labels, classes)?;
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

pub fn prf1(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Prf1> {
    Ok(confusion(predictions, labels, classes)?.prf1())
}

/// Metrics for one task (e.g. slide-level or patch-level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBlock {
    pub class_names: Vec<String>,
    pub samples: usize,
    pub metrics: Prf1,
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

impl EvalBlock {
    pub fn new(class_names: &[&str], predictions: &[usize], labels: &[usize]) -> Result<Self> {
        let confusion = confusion(predictions, labels, class_names.len())?;
        Ok(EvalBlock {
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
            samples: labels.len(),
            metrics: confusion.prf1(),
            confusion,
            auc: None,
        })
    }

    /// Binary block with AUC from positive-class scores thresholded at 0.5.
    pub fn binary(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let preds: Vec<usize> = scores.iter().map(|&s| (s >= 0.5) as usize).collect();
        let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let mut block = EvalBlock::new(&["negative", "positive"], &preds, &truth)?;
        block.auc = Some(auc(scores, labels)?);
        Ok(block)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub code_version: String,
    pub config_hash: String,
    pub blocks: BTreeMap<String, EvalBlock>,
}

impl EvalReport {
    pub fn new(task: impl Into<String>, config_hash: impl Into<String>) -> Self {
        EvalReport {
            task: task.into(),
            code_version: crate::CODE_VERSION.to_string(),
            config_hash: config_hash.into(),
            blocks: BTreeMap::new(),
        }
    }

    pub fn with_block(mut self, name: impl Into<String>, block: EvalBlock) -> Self {
        self.blocks.insert(name.into(), block);
        self
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `confusion.csv` and `metrics.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report)?;
    write_file(&dir.join("report.json"), &(json + "\n"))?;

    let header = format!("# {} config={}\n", report.code_version, report.config_hash);
    let mut conf = header.clone();
    conf.push_str("block,true_class");
    let max_classes = report.blocks.values().map(|b| b.class_names.len()).max().unwrap_or(0);
    for i in 0..max_classes {
        let _ = write!(conf, ",pred_{i}");
    }
    conf.push('\n');
    for (name, b) in &report.blocks {
        for (t, row) in b.confusion.counts.iter().enumerate() {
            let _ = write!(conf, "{name},{}", b.class_names[t]);
            for v in row {
                let _ = write!(conf, ",{v}");
            }
            conf.push('\n');
        }
    }
    write_file(&dir.join("confusion.csv"), &conf)?;

    let mut m = header;
    m.push_str("block,class,precision,recall,f1,support,zero_division\n");
    for (name, b) in &report.blocks {
        for (c, cm) in b.metrics.per_class.iter().enumerate() {
            let _ = writeln!(
                m,
                "{name},{},{:.6},{:.6},{:.6},{},{}",
                b.class_names[c], cm.precision, cm.recall, cm.f1, cm.support, cm.zero_division
            );
        }
        let p = &b.metrics;
        let _ = writeln!(m, "{name},macro,{:.6},{:.6},{:.6},{},", p.macro_precision, p.macro_recall, p.macro_f1, b.samples);
        let _ = writeln!(
            m,
            "{name},weighted,{:.6},{:.6},{:.6},{},",
            p.weighted_precision, p.weighted_recall, p.weighted_f1, b.samples
        );
        if let Some(a) = b.auc {
            let _ = writeln!(m, "{name},auc,,,{a:.6},{},", b.samples);
        }
    }
    write_file(&dir.join("metrics.csv"), &m)
}

pub fn load_report(dir: &Path) -> Result<EvalReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    n += 1.0;
                    s += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        s / n
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[true, true, false]).unwrap(), 1.0);
        let s = [0.8, 0.8, 0.3, 0.6];
        let l = [true, false, false, true];
        assert!((auc(&s, &l).unwrap() - 0.625).abs() < 1e-12);
        let inv: Vec<bool> = l.iter().map(|v| !v).collect();
        assert!((auc(&s, &inv).unwrap() - 0.375).abs() < 1e-12);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let n = rng.random_range(2..60);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            assert!((auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 3, 1, 2];
        let m = prf1(&y, &y, 4).unwrap();
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.accuracy, 1.0);
        let c = confusion(&y, &y, 4).unwrap();
        for (i, row) in c.counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!(i == j || v == 0);
            }
        }
    }

    #[test]
    fn never_predicted_class_flags_zero_division() {
        let m = prf1(&[0, 0, 1], &[0, 2, 1], 3).unwrap();
        assert_eq!(m.per_class[2].precision, 0.0);
        assert!(m.per_class[2].zero_division);
        assert!(!m.per_class[1].zero_division);
    }

    #[test]
    fn single_sample_orientation() {
        let c = confusion(&[0], &[2], 4).unwrap();
        assert_eq!(c.counts[2][0], 1);
        assert!(confusion(&[4], &[0], 4).is_err());
        assert!(confusion(&[0, 1], &[0], 4).is_err());
    }

    #[test]
    fn matches_naive_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let t: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let m = prf1(&p, &t, 4).unwrap();
        for k in 0..4 {
            let tp = p.iter().zip(&t).filter(|(a, b)| **a == k && **b == k).count() as f64;
            let pp = p.iter().filter(|a| **a == k).count() as f64;
            let ss = t.iter().filter(|b| **b == k).count() as f64;
            let (pr, rc) = (tp / pp, tp / ss);
            assert_eq!(m.per_class[k].precision, pr);
            assert_eq!(m.per_class[k].recall, rc);
            assert!((m.per_class[k].f1 - 2.0 * pr * rc / (pr + rc)).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariant() {
        let p = [0, 1, 1, 2, 0, 3];
        let t = [0, 1, 2, 2, 1, 3];
        let s = [0.1, 0.9, 0.4, 0.7, 0.3, 0.2];
        let l = [false, true, true, false, true, false];
        let order = [5, 3, 1, 0, 4, 2];
        let pp: Vec<_> = order.iter().map(|&i| p[i]).collect();
        let tt: Vec<_> = order.iter().map(|&i| t[i]).collect();
        let ss: Vec<_> = order.iter().map(|&i| s[i]).collect();
        let ll: Vec<_> = order.iter().map(|&i| l[i]).collect();
        assert_eq!(prf1(&p, &t, 4).unwrap(), prf1(&pp, &tt, 4).unwrap());
        assert_eq!(auc(&s, &l).unwrap(), auc(&ss, &ll).unwrap());
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let wsi = EvalBlock::new(&["ccRCC", "pRCC", "chRCC"], &[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap();
        let patch = EvalBlock::new(&["normal", "ccRCC", "pRCC", "chRCC"], &[0, 1, 2, 3, 0], &[0, 1, 2, 3, 1]).unwrap();
        let report = EvalReport::new("subtyping", "abc").with_block("wsi", wsi).with_block("patch", patch);
        write_report(&report, dir.path()).unwrap();
        assert_eq!(load_report(dir.path()).unwrap(), report);
        let csv = std::fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
        let rows: Vec<u64> = csv
            .lines()
            .skip(2)
            .filter(|l| l.starts_with("patch,"))
            .map(|l| l.split(',').skip(2).map(|v| v.parse::<u64>().unwrap()).sum())
            .collect();
        assert_eq!(rows, report.blocks["patch"].confusion.row_sums());
        assert!(report.blocks.contains_key("wsi") && report.blocks.contains_key("patch"));
    }
}
