//! AUROC, AUPR and balanced accuracy.

use serde::Serialize;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    /// `None` when only one class is present.
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub balanced_accuracy: f64,
    pub loss: f64,
    /// Recall per class; `None` for classes absent from the labels.
    pub recalls: Vec<Option<f64>>,
}

impl MetricReport {
    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.6}"));
        let mut s = format!(
            "loss={:.6}\nbalanced_accuracy={:.6}\nauroc={}\naupr={}\n",
            self.loss,
            self.balanced_accuracy,
            opt(self.auroc),
            opt(self.aupr)
        );
        for (c, r) in self.recalls.iter().enumerate() {
            s.push_str(&format!("recall_{c}={}\n", opt(*r)));
        }
        s
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        writeln!(f, "loss               {:.4}", self.loss)?;
        writeln!(f, "balanced accuracy  {:.4}", self.balanced_accuracy)?;
        writeln!(f, "AUROC              {}", opt(self.auroc))?;
        write!(f, "AUPR               {}", opt(self.aupr))
    }
}

/// `P(score_pos > score_neg)` with ties counted one half, via tie-averaged ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall curve by step interpolation:
/// `Σ (R_k − R_{k−1})·P_k` over distinct score thresholds, highest first.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Some(area)
}

/// Recall of each class `0..num_classes`; `None` where the class is absent.
pub fn recalls(preds: &[usize], labels: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    assert_eq!(preds.len(), labels.len());
    let mut hit = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        total[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    hit.iter()
        .zip(&total)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect()
}

/// Mean recall over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let r: Vec<f64> = recalls(preds, labels, num_classes).into_iter().flatten().collect();
    if r.is_empty() {
        return 0.0;
    }
    r.iter().sum::<f64>() / r.len() as f64
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_example() {
        let s = [0.2, 0.8, 0.3, 0.4];
        let l = [false, true, true, false];
        assert_eq!(auroc(&s, &l), Some(0.75));
    }

    #[test]
    fn perfect_separation() {
        let s = [0.1, 0.2, 0.9, 0.95];
        let l = [false, false, true, true];
        assert_eq!(auroc(&s, &l), Some(1.0));
        assert_eq!(aupr(&s, &l), Some(1.0));
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(aupr(&[0.5, 0.5], &[true, false]), Some(0.5));
    }

    #[test]
    fn single_class_undefined() {
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), None);
        assert_eq!(aupr(&[0.1, 0.2], &[false, false]), None);
    }

    #[test]
    fn balanced_accuracy_example() {
        assert_eq!(balanced_accuracy(&[1, 0, 0, 0], &[1, 1, 0, 0], 2), 0.75);
    }
}
