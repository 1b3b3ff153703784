//! Evaluation harness: per-dataset score distributions, relative-improvement
//! rows, prompt edit distance, word-frequency profiles and a paired t-test.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{MapoError, Result};
use crate::lm::{Backend, GenerationParams, PolicyHandle};
use crate::metrics::{normalized_edit_distance, score_for_task, TaskKind, TokenizedText};
use crate::rl::PolicySummary;
use crate::warmup::PromptPair;

/// Instruction words excluded from word-frequency profiles by default.
pub const INSTRUCTION_STOPLIST: &[&str] = &[
    "sentence", "topics", "subjects", "present", "statement", "discussed", "mentioned", "included", "following",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p10: f64,
    pub p25: f64,
    pub p75: f64,
    pub p90: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_name: String,
    pub task: TaskKind,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub quantiles: Quantiles,
    pub scores: Vec<f64>,
    /// Records whose generation failed and were scored 0.
    pub failures: usize,
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl MetricReport {
    pub fn from_scores(dataset_name: &str, task: TaskKind, scores: Vec<f64>, failures: usize) -> Result<Self> {
        if scores.is_empty() {
            return Err(MapoError::InvalidInput("cannot summarize an empty score list".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(MapoError::InvalidInput("scores must be finite".into()));
        }
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let n = scores.len();
        let mean = (sorted.iter().sum::<f64>() / n as f64).clamp(sorted[0], sorted[n - 1]);
        Ok(Self {
            dataset_name: dataset_name.to_string(),
            task,
            n,
            mean,
            median: quantile_sorted(&sorted, 0.5),
            quantiles: Quantiles {
                p10: quantile_sorted(&sorted, 0.10),
                p25: quantile_sorted(&sorted, 0.25),
                p75: quantile_sorted(&sorted, 0.75),
                p90: quantile_sorted(&sorted, 0.90),
            },
            scores,
            failures,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub prompt: String,
    pub reference: String,
}

/// Scores every prompt's target output against its reference.
pub fn evaluate_prompts(
    target: &PolicyHandle,
    dataset_name: &str,
    records: &[EvalRecord],
    task: TaskKind,
    params: &GenerationParams,
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(MapoError::InvalidInput("no records to evaluate".into()));
    }
    params.validate()?;
    let score_one = |r: &EvalRecord| match target.generate_text(&r.prompt, params) {
        Ok(output) => Some(score_for_task(task, &output, &r.reference).value()),
        Err(e) => {
            log::warn!("generation failed during evaluation: {e}");
            None
        }
    };
    let results: Vec<Option<f64>> = match &target.backend {
        Backend::Remote(client) if records.len() > 1 => {
            let workers = client.config().max_in_flight.clamp(1, records.len());
            let chunk = records.len().div_ceil(workers);
            thread::scope(|s| {
                let handles: Vec<_> = records
                    .chunks(chunk)
                    .map(|part| s.spawn(move || part.iter().map(score_one).collect::<Vec<_>>()))
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("evaluation worker panicked"))
                    .collect()
            })
        }
        _ => records.iter().map(score_one).collect(),
    };
    let failures = results.iter().filter(|r| r.is_none()).count();
    let scores = results.into_iter().map(|r| r.unwrap_or(0.0)).collect();
    MetricReport::from_scores(dataset_name, task, scores, failures)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub dataset_name: String,
    pub baseline: f64,
    pub treatment: f64,
    pub absolute_delta: f64,
    /// `None` when the baseline is 0 and a relative change is undefined.
    pub relative_pct: Option<f64>,
}

impl ImprovementRow {
    pub fn new(dataset_name: &str, baseline: f64, treatment: f64) -> Self {
        let relative_pct = (baseline > 0.0).then(|| 100.0 * (treatment - baseline) / baseline);
        Self {
            dataset_name: dataset_name.to_string(),
            baseline,
            treatment,
            absolute_delta: treatment - baseline,
            relative_pct,
        }
    }

    pub fn is_relative_undefined(&self) -> bool {
        self.relative_pct.is_none()
    }
}

/// Mean-score improvement of `treatment` over `baseline`.
pub fn compare_runs(baseline: &MetricReport, treatment: &MetricReport) -> Result<ImprovementRow> {
    if baseline.dataset_name != treatment.dataset_name || baseline.task != treatment.task {
        return Err(MapoError::InvalidInput(format!(
            "cannot compare {}/{} with {}/{}",
            baseline.dataset_name, baseline.task, treatment.dataset_name, treatment.task
        )));
    }
    Ok(ImprovementRow::new(&baseline.dataset_name, baseline.mean, treatment.mean))
}

pub fn mean_normalized_edit_distance(pairs: &[PromptPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MapoError::InvalidInput("no prompt pairs".into()));
    }
    let total: f64 = pairs
        .iter()
        .map(|p| normalized_edit_distance(&p.original, &p.optimized).value())
        .sum();
    Ok(total / pairs.len() as f64)
}

/// The `top_k` most frequent words of a corpus with their share of all
/// retained tokens. Ties are broken alphabetically.
pub fn word_frequencies(corpus: &[String], stoplist: &BTreeSet<String>, top_k: usize) -> Result<Vec<(String, f64)>> {
    if top_k == 0 {
        return Err(MapoError::InvalidInput("top_k must be at least 1".into()));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for text in corpus {
        for tok in TokenizedText::new(text).tokens {
            if !stoplist.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
                total += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .take(top_k)
        .map(|(w, c)| (w, c as f64 / total as f64))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordFrequencyReport {
    pub originals: Vec<(String, f64)>,
    pub optimized: Vec<(String, f64)>,
}

pub fn word_frequency_report(
    originals: &[String],
    optimized: &[String],
    stoplist: &BTreeSet<String>,
    top_k: usize,
) -> Result<WordFrequencyReport> {
    Ok(WordFrequencyReport {
        originals: word_frequencies(originals, stoplist, top_k)?,
        optimized: word_frequencies(optimized, stoplist, top_k)?,
    })
}

pub fn default_stoplist() -> BTreeSet<String> {
    INSTRUCTION_STOPLIST.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_difference: f64,
    pub t_statistic: f64,
    pub p_value: f64,
}

/// Two-sided paired t-test on `treatment - baseline`. With zero variance the
/// statistic is infinite (p = 0) unless the mean difference is also 0 (p = 1).
pub fn paired_t_test(baseline: &[f64], treatment: &[f64]) -> Result<PairedTTest> {
    if baseline.len() != treatment.len() {
        return Err(MapoError::InvalidInput("paired samples must have equal length".into()));
    }
    let n = baseline.len();
    if n < 2 {
        return Err(MapoError::InvalidInput("a paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = treatment.iter().zip(baseline).map(|(t, b)| t - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let (t_statistic, p_value) = if se == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
        (t, 2.0 * (1.0 - dist.cdf(t.abs())))
    };
    Ok(PairedTTest {
        n,
        mean_difference: mean,
        t_statistic,
        p_value,
    })
}

/// Reward and drift of the SFT and RL policies on the same sampled prompts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummaryPair {
    pub sft: PolicySummary,
    pub rl: PolicySummary,
}

impl PolicySummaryPair {
    /// RL mean reward over SFT mean reward; `None` when the SFT mean is not positive.
    pub fn reward_ratio(&self) -> Option<f64> {
        (self.sft.mean_reward > 0.0).then(|| self.rl.mean_reward / self.sft.mean_reward)
    }
}

pub const REPORT_HEADER: [&str; 9] = ["dataset", "task", "n", "mean", "median", "p10", "p25", "p75", "p90"];
pub const RAW_SCORES_HEADER: [&str; 3] = ["dataset", "record_index", "score"];
pub const IMPROVEMENT_HEADER: [&str; 6] = ["dataset", "method", "baseline", "score", "delta", "relative_pct"];

pub fn write_report_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        w.write_record([
            r.dataset_name.clone(),
            r.task.as_str().to_string(),
            r.n.to_string(),
            r.mean.to_string(),
            r.median.to_string(),
            r.quantiles.p10.to_string(),
            r.quantiles.p25.to_string(),
            r.quantiles.p75.to_string(),
            r.quantiles.p90.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_raw_scores_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RAW_SCORES_HEADER)?;
    for r in reports {
        for (i, s) in r.scores.iter().enumerate() {
            w.write_record([r.dataset_name.clone(), i.to_string(), s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per (dataset, method); an undefined relative change is written as `-`.
pub fn write_improvement_csv(path: &Path, rows: &[(String, ImprovementRow)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(IMPROVEMENT_HEADER)?;
    for (method, r) in rows {
        w.write_record([
            r.dataset_name.clone(),
            method.clone(),
            r.baseline.to_string(),
            r.treatment.to_string(),
            r.absolute_delta.to_string(),
            r.relative_pct.map_or_else(|| "-".to_string(), |p| format!("{p:.1}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::stub::PreferenceTarget;
    use crate::lm::PolicyRole;

    fn report(scores: &[f64]) -> MetricReport {
        MetricReport::from_scores("d", TaskKind::QuestionAnswering, scores.to_vec(), 0).unwrap()
    }

    #[test]
    fn table_row_anchor() {
        let row = ImprovementRow::new("CloseQA", 6.4, 7.8);
        assert!((row.relative_pct.unwrap() - 21.875).abs() < 1e-9);
        assert_eq!(format!("{:.1}", row.relative_pct.unwrap()), "21.9");
    }

    #[test]
    fn zero_baseline_is_undefined() {
        let row = compare_runs(&report(&[0.0, 0.0]), &report(&[0.2, 0.4])).unwrap();
        assert!(row.is_relative_undefined());
        assert!((row.absolute_delta - 0.3).abs() < 1e-12);
    }

    #[test]
    fn equal_reports_have_zero_delta() {
        let r = report(&[0.1, 0.5, 0.9]);
        let row = compare_runs(&r, &r).unwrap();
        assert_eq!(row.absolute_delta, 0.0);
        assert_eq!(row.relative_pct, Some(0.0));
    }

    #[test]
    fn mismatched_datasets_are_rejected() {
        let a = report(&[0.1]);
        let mut b = a.clone();
        b.dataset_name = "other".into();
        assert!(compare_runs(&a, &b).is_err());
    }

    #[test]
    fn single_record_report() {
        let r = report(&[0.42]);
        assert_eq!(r.mean, 0.42);
        assert_eq!(r.median, 0.42);
    }

    #[test]
    fn quantiles_match_sort_oracle() {
        let scores: Vec<f64> = (0..101).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let r = report(&scores);
        assert!((r.median - 0.5).abs() < 1e-12);
        assert!((r.quantiles.p10 - 0.1).abs() < 1e-12);
        assert!((r.quantiles.p25 - 0.25).abs() < 1e-12);
        assert!((r.quantiles.p75 - 0.75).abs() < 1e-12);
        assert!((r.quantiles.p90 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn perfect_outputs_score_one() {
        let target = PolicyHandle::new(PolicyRole::TargetLlm, Backend::Target(PreferenceTarget::default()));
        let records = vec![
            EvalRecord {
                prompt: "please answer the query regarding rain storm".into(),
                reference: "rain storm".into(),
            },
            EvalRecord {
                prompt: "please answer the query regarding moon rocket".into(),
                reference: "moon rocket".into(),
            },
        ];
        let r = evaluate_prompts(&target, "toy", &records, TaskKind::Generation, &GenerationParams::greedy(8)).unwrap();
        assert_eq!((r.mean, r.median, r.n), (1.0, 1.0, 2));
    }

    #[test]
    fn edit_distance_averages() {
        let pair = |a: &str, b: &str| PromptPair {
            task: TaskKind::Generation,
            dataset_name: "d".into(),
            reference_output: "r".into(),
            original: a.into(),
            optimized: b.into(),
            score_original: crate::metrics::Score::ZERO,
            score_optimized: crate::metrics::Score::ZERO,
        };
        assert_eq!(mean_normalized_edit_distance(&[pair("abc", "abc")]).unwrap(), 0.0);
        let v = mean_normalized_edit_distance(&[pair("abc", "abc"), pair("abc", "xyz")]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn word_frequency_anchors() {
        let none = BTreeSet::new();
        let f = word_frequencies(&["a a b".to_string()], &none, 2).unwrap();
        assert_eq!(f, vec![("a".to_string(), 2.0 / 3.0), ("b".to_string(), 1.0 / 3.0)]);
        assert!(word_frequencies(&[], &none, 3).unwrap().is_empty());
        let all: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        assert!(word_frequencies(&["a a b".to_string()], &all, 3).unwrap().is_empty());
        assert!(word_frequencies(&[], &none, 0).is_err());
    }

    #[test]
    fn t_test_matches_reference_value() {
        let base = [1.0, 2.0, 3.0, 4.0, 5.0];
        let treat = [1.5, 2.1, 3.9, 4.2, 5.8];
        let t = paired_t_test(&base, &treat).unwrap();
        // diffs 0.5 0.1 0.9 0.2 0.8: mean 0.5, sd 0.353553, t = 3.162278, df 4
        assert!((t.t_statistic - 10f64.sqrt()).abs() < 1e-6);
        assert!((t.p_value - 0.03411).abs() < 1e-4);
        let same = paired_t_test(&base, &base).unwrap();
        assert_eq!(same.p_value, 1.0);
    }

    #[test]
    fn csv_headers_are_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(&[0.1, 0.2]);
        let p = dir.path().join("report.csv");
        write_report_csv(&p, &[r.clone()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("dataset,task,n,mean,median,p10,p25,p75,p90\n"));
        let p = dir.path().join("raw.csv");
        write_raw_scores_csv(&p, &[r]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("dataset,record_index,score\n"));
        let p = dir.path().join("imp.csv");
        write_improvement_csv(&p, &[("sft".into(), ImprovementRow::new("News", 0.0, 0.3))]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().lines().nth(1).unwrap().ends_with(",-"));
    }
}
