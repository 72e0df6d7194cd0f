//! Clip-level tagging metrics: micro/macro precision and macro-averaged
//! ROC AUC, with per-category reporting.
//!
//! Metrics with an empty denominator are reported as undefined rather
//! than silently substituted; substituting 0 or 1 would corrupt ablation
//! comparisons.

use thiserror::Error;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores ({scores}) and labels ({labels}) disagree with N*C = {expect}")]
    ShapeMismatch { scores: usize, labels: usize, expect: usize },
    #[error("score {value} at index {index} outside [0,1]")]
    ScoreOutOfRange { value: f64, index: usize },
    #[error("category table has {got} names for {want} categories")]
    BadCategoryTable { got: usize, want: usize },
}

/// Scores and labels for N clips over C categories, row-major.
#[derive(Debug, Clone)]
pub struct EvalBatch {
    scores: Vec<f64>,
    labels: Vec<bool>,
    n: usize,
    c: usize,
    categories: Vec<String>,
}

impl EvalBatch {
    pub fn new(
        scores: Vec<f64>,
        labels: Vec<bool>,
        n: usize,
        c: usize,
        categories: Vec<String>,
    ) -> Result<Self, MetricsError> {
        if scores.len() != n * c || labels.len() != n * c {
            return Err(MetricsError::ShapeMismatch {
                scores: scores.len(),
                labels: labels.len(),
                expect: n * c,
            });
        }
        if categories.len() != c {
            return Err(MetricsError::BadCategoryTable { got: categories.len(), want: c });
        }
        for (i, &s) in scores.iter().enumerate() {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(MetricsError::ScoreOutOfRange { value: s, index: i });
            }
        }
        Ok(Self { scores, labels, n, c, categories })
    }

    pub fn n_clips(&self) -> usize {
        self.n
    }

    pub fn n_categories(&self) -> usize {
        self.c
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    fn column(&self, cat: usize) -> impl Iterator<Item = (f64, bool)> + '_ {
        (0..self.n).map(move |i| (self.scores[i * self.c + cat], self.labels[i * self.c + cat]))
    }
}

fn counts(batch: &EvalBatch, cat: usize, threshold: f64) -> (usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    for (s, l) in batch.column(cat) {
        if s >= threshold {
            if l {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp)
}

/// TP / (TP + FP) pooled over every (clip, category) cell. `None` when
/// nothing was predicted positive.
pub fn micro_precision(batch: &EvalBatch, threshold: f64) -> Option<f64> {
    let mut tp = 0;
    let mut fp = 0;
    for cat in 0..batch.c {
        let (t, f) = counts(batch, cat, threshold);
        tp += t;
        fp += f;
    }
    if tp + fp == 0 {
        None
    } else {
        Some(tp as f64 / (tp + fp) as f64)
    }
}

/// Unweighted mean of per-category precision over categories with at
/// least one positive prediction. Returns the mean and the number of
/// excluded categories.
pub fn macro_precision(batch: &EvalBatch, threshold: f64) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut used = 0;
    let mut excluded = 0;
    for cat in 0..batch.c {
        let (tp, fp) = counts(batch, cat, threshold);
        if tp + fp == 0 {
            excluded += 1;
        } else {
            sum += tp as f64 / (tp + fp) as f64;
            used += 1;
        }
    }
    if used == 0 {
        (None, excluded)
    } else {
        (Some(sum / used as f64), excluded)
    }
}

/// Per-category precision, descending, undefined categories last.
pub fn per_category_precision(batch: &EvalBatch, threshold: f64) -> Vec<(String, Option<f64>)> {
    let mut rows: Vec<(String, Option<f64>)> = (0..batch.c)
        .map(|cat| {
            let (tp, fp) = counts(batch, cat, threshold);
            let p = if tp + fp == 0 { None } else { Some(tp as f64 / (tp + fp) as f64) };
            (batch.categories[cat].clone(), p)
        })
        .collect();
    rows.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    rows
}

fn category_auc(batch: &EvalBatch, cat: usize) -> Option<f64> {
    let pairs: Vec<(f64, bool)> = batch.column(cat).collect();
    let pos = pairs.iter().filter(|(_, l)| *l).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // rank statistic with average ranks over ties; equivalent to pair
    // counting with half credit for tied scores
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.total_cmp(&pairs[b].0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pairs[order[j + 1]].0 == pairs[order[i]].0 {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if pairs[idx].1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0) / (pos as f64 * neg as f64);
    Some(auc)
}

/// Macro-averaged ROC AUC over categories that have both a positive and a
/// negative label. Returns the mean and the number of excluded categories.
pub fn auc(batch: &EvalBatch) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut used = 0;
    let mut excluded = 0;
    for cat in 0..batch.c {
        match category_auc(batch, cat) {
            Some(a) => {
                sum += a;
                used += 1;
            }
            None => excluded += 1,
        }
    }
    if used == 0 {
        (None, excluded)
    } else {
        (Some(sum / used as f64), excluded)
    }
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub threshold: f64,
    pub micro_p: Option<f64>,
    pub macro_p: Option<f64>,
    pub auc: Option<f64>,
    pub macro_excluded: usize,
    pub auc_excluded: usize,
    pub per_category: Vec<(String, Option<f64>)>,
}

pub fn evaluate(batch: &EvalBatch, threshold: f64) -> MetricReport {
    let (macro_p, macro_excluded) = macro_precision(batch, threshold);
    let (auc_v, auc_excluded) = auc(batch);
    MetricReport {
        threshold,
        micro_p: micro_precision(batch, threshold),
        macro_p,
        auc: auc_v,
        macro_excluded,
        auc_excluded,
        per_category: per_category_precision(batch, threshold),
    }
}

pub fn format_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "undefined".to_string(),
    }
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("threshold,{}\n", self.threshold));
        out.push_str(&format!("micro_p,{}\n", format_metric(self.micro_p)));
        out.push_str(&format!("macro_p,{}\n", format_metric(self.macro_p)));
        out.push_str(&format!("auc,{}\n", format_metric(self.auc)));
        out.push_str(&format!("macro_excluded_categories,{}\n", self.macro_excluded));
        out.push_str(&format!("auc_excluded_categories,{}\n", self.auc_excluded));
        out
    }

    pub fn per_category_csv(&self) -> String {
        let mut out = String::from("category,precision\n");
        for (name, p) in &self.per_category {
            out.push_str(&format!("{name},{}\n", format_metric(*p)));
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("threshold        {}\n", self.threshold));
        out.push_str(&format!("micro precision  {}\n", format_metric(self.micro_p)));
        out.push_str(&format!(
            "macro precision  {} ({} categories excluded)\n",
            format_metric(self.macro_p),
            self.macro_excluded
        ));
        out.push_str(&format!(
            "auc              {} ({} categories excluded)\n",
            format_metric(self.auc),
            self.auc_excluded
        ));
        out.push_str("per-category precision:\n");
        for (name, p) in &self.per_category {
            out.push_str(&format!("  {name:<24} {}\n", format_metric(*p)));
        }
        out
    }
}

/// Quadratic pair-counting AUC, kept independent of the rank-statistic
/// path as its verification oracle.
pub fn auc_pair_counting_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut credit = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                credit += 1.0;
            } else if p == n {
                credit += 0.5;
            }
        }
    }
    Some(credit / (pos.len() * neg.len()) as f64)
}
