//! Recall@K retrieval scoring, cross-language disparity statistics and the
//! learning-rate × λ grid search.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LanguageCode, View};
use crate::encoder::ImageBank;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::{AlignmentSpec, Prepare, Routine};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Text queries against the image gallery.
    #[default]
    TextToImage,
    ImageToText,
    /// Mean of the two directions.
    Both,
}

/// Percent of queries whose true item is among the `k` most similar gallery
/// items. Rows of `sim` are queries; ties rank the lower gallery index first.
pub fn recall_at_k(sim: &Tensor, truth: &[usize], k: usize) -> Result<f64> {
    if sim.rank() != 2 {
        return Err(Error::Rank {
            op: "recall_at_k",
            expected: 2,
            shape: sim.shape().to_vec(),
        });
    }
    let (nq, ng) = (sim.rows(), sim.cols());
    if k == 0 || k > ng {
        return Err(Error::InvalidValue {
            op: "recall_at_k",
            detail: format!("K = {k} outside 1..={ng}"),
        });
    }
    if truth.len() != nq {
        return Err(Error::Dimension {
            op: "recall_at_k",
            lhs: sim.shape().to_vec(),
            rhs: vec![truth.len()],
        });
    }
    if nq == 0 {
        return Err(Error::EmptyDataset("recall_at_k: no queries".into()));
    }
    let mut hits = 0usize;
    for (q, &t) in truth.iter().enumerate() {
        if t >= ng {
            return Err(Error::InvalidValue {
                op: "recall_at_k",
                detail: format!("truth index {t} outside gallery of {ng}"),
            });
        }
        let row = sim.row(q);
        let target = row[t];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > target || (s == target && j < t))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / nq as f64)
}

/// Cross-language spread of per-language scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disparity {
    pub avg: f64,
    pub avg_minus_en: f64,
    /// Sample standard deviation (n − 1) over all languages.
    pub std: f64,
    pub range: f64,
}

pub fn disparity(scores: &[(LanguageCode, f64)]) -> Result<Disparity> {
    if scores.len() < 2 {
        return Err(Error::config("disparity needs at least two languages"));
    }
    if !scores.iter().any(|(l, _)| l.is_pivot()) {
        return Err(Error::config("disparity needs the pivot language among the scores"));
    }
    let n = scores.len() as f64;
    let avg = scores.iter().map(|(_, s)| s).sum::<f64>() / n;
    let others: Vec<f64> = scores.iter().filter(|(l, _)| !l.is_pivot()).map(|(_, s)| *s).collect();
    let avg_minus_en = others.iter().sum::<f64>() / others.len() as f64;
    let var = scores.iter().map(|(_, s)| (s - avg).powi(2)).sum::<f64>() / (n - 1.0);
    let max = scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().map(|(_, s)| *s).fold(f64::INFINITY, f64::min);
    Ok(Disparity {
        avg,
        avg_minus_en,
        std: var.sqrt(),
        range: max - min,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageScore {
    pub language: LanguageCode,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub direction: Direction,
    pub mt_inference: bool,
    pub scores: Vec<LanguageScore>,
    /// Absent when fewer than two languages or no pivot were evaluated.
    pub aggregate: Option<Disparity>,
}

impl RetrievalReport {
    pub fn new(k: usize, direction: Direction, mt_inference: bool, scores: Vec<LanguageScore>) -> Self {
        let pairs: Vec<(LanguageCode, f64)> = scores.iter().map(|s| (s.language.clone(), s.recall)).collect();
        Self {
            k,
            direction,
            mt_inference,
            aggregate: disparity(&pairs).ok(),
            scores,
        }
    }

    pub fn score(&self, lang: &LanguageCode) -> Option<f64> {
        self.scores.iter().find(|s| &s.language == lang).map(|s| s.recall)
    }

    pub fn mean(&self) -> f64 {
        self.scores.iter().map(|s| s.recall).sum::<f64>() / self.scores.len().max(1) as f64
    }

    /// One row per language, then one per aggregate statistic.
    pub fn to_csv(&self) -> String {
        let mut out = format!("name,recall_at_{}\n", self.k);
        for s in &self.scores {
            let _ = writeln!(out, "{},{:.4}", s.language, s.recall);
        }
        if let Some(a) = &self.aggregate {
            for (name, v) in [
                ("avg", a.avg),
                ("avg_minus_en", a.avg_minus_en),
                ("std", a.std),
                ("range", a.range),
            ] {
                let _ = writeln!(out, "{name},{v:.4}");
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn default_k() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    #[serde(default)]
    pub direction: Direction,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Feed target-language text through translation into the pivot.
    #[serde(default)]
    pub mt_inference: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            direction: Direction::TextToImage,
            k: 1,
            mt_inference: false,
        }
    }
}

/// Warns when a model trained on translated input is evaluated on natural
/// text. Returns whether the modes agree.
pub fn check_inference_mode(trained_with: &AlignmentSpec, mt_inference: bool) -> bool {
    if trained_with.routine == Some(Routine::TargetToPivot) && !mt_inference {
        log::warn!(
            "model was trained with routine 3 on translated input but is evaluated with mt_inference=false; \
             train and evaluation inputs differ"
        );
        return false;
    }
    true
}

/// Row-normalized `[N×d]` copy of `m`.
fn normalize_rows(m: &Tensor) -> Result<Tensor> {
    let (n, d) = (m.rows(), m.cols());
    let mut out = m.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateVector { op: "evaluate" });
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(out)
}

/// Encodes every caption of `indices` in `lang` as the model would see it.
pub fn encode_language(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    lang: &LanguageCode,
    mt_inference: bool,
    prepare: &Prepare<'_>,
) -> Result<Tensor> {
    let (view, written) = if mt_inference && !lang.is_pivot() {
        (View::MtToPivot, LanguageCode::pivot())
    } else {
        (View::Natural, lang.clone())
    };
    let texts = indices
        .iter()
        .map(|&i| prepare(data.text(i, lang, view)?, &written))
        .collect::<Result<Vec<_>>>()?;
    model.encode_texts(&texts)
}

/// Recall@K of one language over the items `indices`.
pub fn evaluate_language(
    model: &Model,
    data: &Dataset,
    bank: &ImageBank,
    indices: &[usize],
    lang: &LanguageCode,
    opts: &EvalOptions,
    prepare: &Prepare<'_>,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset("evaluation split is empty".into()));
    }
    let ids: Vec<&str> = indices.iter().map(|&i| data.samples()[i].image_id.as_str()).collect();
    let images = normalize_rows(&bank.matrix(&ids)?)?;
    let texts = normalize_rows(&encode_language(model, data, indices, lang, opts.mt_inference, prepare)?)?;
    let t2i = texts.matmul(&images.transpose()?)?;
    let truth: Vec<usize> = (0..indices.len()).collect();
    match opts.direction {
        Direction::TextToImage => recall_at_k(&t2i, &truth, opts.k),
        Direction::ImageToText => recall_at_k(&t2i.transpose()?, &truth, opts.k),
        Direction::Both => {
            let a = recall_at_k(&t2i, &truth, opts.k)?;
            let b = recall_at_k(&t2i.transpose()?, &truth, opts.k)?;
            Ok(0.5 * (a + b))
        }
    }
}

pub fn evaluate(
    model: &Model,
    data: &Dataset,
    bank: &ImageBank,
    indices: &[usize],
    languages: &[LanguageCode],
    opts: &EvalOptions,
    prepare: &Prepare<'_>,
) -> Result<RetrievalReport> {
    let scores = languages
        .iter()
        .map(|l| {
            Ok(LanguageScore {
                language: l.clone(),
                recall: evaluate_language(model, data, bank, indices, l, opts, prepare)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalReport::new(opts.k, opts.direction, opts.mt_inference, scores))
}

fn default_per_language() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub learning_rates: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Select per language; otherwise one setting maximizing the mean.
    #[serde(default = "default_per_language")]
    pub per_language: bool,
}

impl SweepGrid {
    /// Learning rates for PEFT runs and log-spaced λ from 0.001 to 10.
    pub fn peft_default() -> Self {
        Self {
            learning_rates: vec![3e-5, 1e-4, 3e-4],
            lambdas: vec![0.001, 0.01, 0.1, 1.0, 10.0],
            per_language: true,
        }
    }

    pub fn full_finetune_default() -> Self {
        Self {
            learning_rates: vec![1e-6, 3e-6, 1e-5],
            ..Self::peft_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.lambdas.is_empty() {
            return Err(Error::config("sweep axes must be non-empty"));
        }
        if self.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::config("sweep learning rates must be positive"));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::config("sweep lambdas must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub language: LanguageCode,
    pub lr: f64,
    pub lambda: f64,
    pub dev_r1: Option<f64>,
    pub test_r1: Option<f64>,
    pub error: Option<String>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn selected(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(|c| c.selected)
    }

    pub fn best(&self, lang: &LanguageCode) -> Option<&SweepCell> {
        self.selected().find(|c| &c.language == lang)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,lr,lambda,dev_r1,test_r1,selected\n");
        let fmt = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |v| format!("{v:.4}"));
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.language,
                c.lr,
                c.lambda,
                fmt(c.dev_r1),
                fmt(c.test_r1),
                c.selected
            );
        }
        out
    }
}

/// Dev/test Recall@1 of one trained cell.
pub type CellScores = (f64, f64);

/// Runs every `(language, lr, λ)` cell through `run_cell` on up to `jobs`
/// threads and marks the selected cells: highest dev score, ties to the
/// smaller λ, then the smaller learning rate. Failed cells are recorded and
/// never selected.
pub fn sweep<F>(grid: &SweepGrid, languages: &[LanguageCode], jobs: usize, run_cell: F) -> Result<SweepResult>
where
    F: Fn(&LanguageCode, f64, f64) -> Result<CellScores> + Sync,
{
    grid.validate()?;
    let mut cells = Vec::new();
    for lang in languages {
        for &lr in &grid.learning_rates {
            for &lambda in &grid.lambdas {
                cells.push(SweepCell {
                    language: lang.clone(),
                    lr,
                    lambda,
                    dev_r1: None,
                    test_r1: None,
                    error: None,
                    selected: false,
                });
            }
        }
    }
    let results: Vec<Mutex<Option<Result<CellScores>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(cell) = cells.get(i) else { break };
        let r = run_cell(&cell.language, cell.lr, cell.lambda);
        if let Err(e) = &r {
            log::warn!("sweep cell {} lr={} lambda={} failed: {e}", cell.language, cell.lr, cell.lambda);
        }
        *results[i].lock().expect("result slot") = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.max(1).min(cells.len()) {
            s.spawn(worker);
        }
        worker();
    });
    for (cell, r) in cells.iter_mut().zip(results) {
        match r.into_inner().expect("result slot").expect("every cell runs") {
            Ok((dev, test)) => {
                cell.dev_r1 = Some(dev);
                cell.test_r1 = Some(test);
            }
            Err(e) => cell.error = Some(e.to_string()),
        }
    }
    select(&mut cells, grid.per_language);
    Ok(SweepResult { cells })
}

/// `a` beats `b`: higher dev, then smaller λ, then smaller lr.
fn better(a: (f64, f64, f64), b: (f64, f64, f64)) -> bool {
    let (dev_a, lam_a, lr_a) = a;
    let (dev_b, lam_b, lr_b) = b;
    dev_a > dev_b || (dev_a == dev_b && (lam_a < lam_b || (lam_a == lam_b && lr_a < lr_b)))
}

fn select(cells: &mut [SweepCell], per_language: bool) {
    if per_language {
        let mut langs: Vec<LanguageCode> = Vec::new();
        for c in cells.iter() {
            if !langs.contains(&c.language) {
                langs.push(c.language.clone());
            }
        }
        for lang in langs {
            let mut best: Option<(usize, (f64, f64, f64))> = None;
            for (i, c) in cells.iter().enumerate() {
                if c.language != lang {
                    continue;
                }
                if let Some(dev) = c.dev_r1 {
                    let key = (dev, c.lambda, c.lr);
                    if best.is_none_or(|(_, b)| better(key, b)) {
                        best = Some((i, key));
                    }
                }
            }
            if let Some((i, _)) = best {
                cells[i].selected = true;
            }
        }
    } else {
        // one (lr, λ) for all languages, scored by the mean dev over
        // languages; a setting with any failed cell is not eligible
        let mut settings: Vec<(f64, f64)> = Vec::new();
        for c in cells.iter() {
            if !settings.contains(&(c.lr, c.lambda)) {
                settings.push((c.lr, c.lambda));
            }
        }
        let mut best: Option<((f64, f64), (f64, f64, f64))> = None;
        for (lr, lambda) in settings {
            let devs: Vec<Option<f64>> = cells
                .iter()
                .filter(|c| c.lr == lr && c.lambda == lambda)
                .map(|c| c.dev_r1)
                .collect();
            if devs.iter().any(Option::is_none) {
                continue;
            }
            let mean = devs.iter().flatten().sum::<f64>() / devs.len() as f64;
            let key = (mean, lambda, lr);
            if best.is_none_or(|(_, b)| better(key, b)) {
                best = Some(((lr, lambda), key));
            }
        }
        if let Some(((lr, lambda), _)) = best {
            for c in cells.iter_mut().filter(|c| c.lr == lr && c.lambda == lambda) {
                c.selected = true;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(s: &str) -> LanguageCode {
        LanguageCode::new(s).unwrap()
    }

    #[test]
    fn recall_examples() {
        let eye = Tensor::eye(4);
        let truth: Vec<usize> = (0..4).collect();
        assert_eq!(recall_at_k(&eye, &truth, 1).unwrap(), 100.0);
        let anti = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(recall_at_k(&anti, &[0, 1], 1).unwrap(), 0.0);
        let sim = Tensor::from_rows(&[vec![0.9, 0.1, 0.2], vec![0.3, 0.8, 0.1], vec![0.2, 0.9, 0.4]]);
        let r = recall_at_k(&sim, &[0, 1, 2], 1).unwrap();
        assert!((r - 200.0 / 3.0).abs() < 1e-12);
        assert!(recall_at_k(&sim, &[0, 1, 2], 0).is_err());
        assert!(recall_at_k(&sim, &[0, 1, 2], 4).is_err());
    }

    #[test]
    fn ties_favor_lower_index() {
        let sim = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(recall_at_k(&sim, &[0, 1], 1).unwrap(), 50.0);
        assert_eq!(recall_at_k(&sim, &[0, 1], 2).unwrap(), 100.0);
    }

    #[test]
    fn disparity_examples() {
        let d = disparity(&[(lang("en"), 60.0), (lang("xx"), 50.0)]).unwrap();
        assert_eq!((d.avg, d.avg_minus_en, d.range), (55.0, 50.0, 10.0));
        assert!((d.std - 50f64.sqrt()).abs() < 1e-12);
        let flat = disparity(&[(lang("en"), 40.0), (lang("de"), 40.0), (lang("fr"), 40.0)]).unwrap();
        assert_eq!((flat.std, flat.range), (0.0, 0.0));
        assert!(disparity(&[(lang("de"), 1.0), (lang("fr"), 2.0)]).is_err());
        assert!(disparity(&[(lang("en"), 1.0)]).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let r = RetrievalReport::new(
            1,
            Direction::TextToImage,
            false,
            vec![
                LanguageScore {
                    language: lang("en"),
                    recall: 60.0,
                },
                LanguageScore {
                    language: lang("de"),
                    recall: 50.0,
                },
            ],
        );
        let csv = r.to_csv();
        assert!(csv.starts_with("name,recall_at_1\nen,60.0000\nde,50.0000\navg,55.0000\n"));
        let back: RetrievalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn one_cell_grid() {
        let grid = SweepGrid {
            learning_rates: vec![1e-3],
            lambdas: vec![0.5],
            per_language: true,
        };
        let r = sweep(&grid, &[lang("de")], 1, |_, _, _| Ok((40.0, 38.0))).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert!(r.cells[0].selected);
        assert_eq!(r.best(&lang("de")).unwrap().test_r1, Some(38.0));
    }

    #[test]
    fn sweep_ties_and_failures() {
        let grid = SweepGrid {
            learning_rates: vec![1e-3, 1e-4],
            lambdas: vec![1.0, 0.1, 10.0],
            per_language: true,
        };
        let r = sweep(&grid, &[lang("de"), lang("fr")], 3, |l, lr, lambda| {
            if l.as_str() == "fr" && lambda == 10.0 {
                return Err(Error::config("boom"));
            }
            if l.as_str() == "fr" {
                return Ok((lambda * 10.0, 0.0));
            }
            Ok((if lambda == 10.0 { 20.0 } else { 50.0 }, lr))
        })
        .unwrap();
        let de = r.best(&lang("de")).unwrap();
        assert_eq!((de.lambda, de.lr), (0.1, 1e-4));
        let fr = r.best(&lang("fr")).unwrap();
        assert_eq!((fr.lambda, fr.lr), (1.0, 1e-4));
        assert_eq!(r.cells.iter().filter(|c| c.error.is_some()).count(), 2);
        assert!(r.to_csv().contains("failed"));
    }

    #[test]
    fn shared_setting_selection() {
        let grid = SweepGrid {
            learning_rates: vec![1e-3],
            lambdas: vec![0.1, 1.0],
            per_language: false,
        };
        let r = sweep(&grid, &[lang("de"), lang("fr")], 2, |l, _, lambda| {
            let dev = match (l.as_str(), lambda == 1.0) {
                ("de", true) => 90.0,
                ("de", false) => 10.0,
                (_, true) => 10.0,
                _ => 20.0,
            };
            Ok((dev, 0.0))
        })
        .unwrap();
        let chosen: Vec<f64> = r.selected().map(|c| c.lambda).collect();
        assert_eq!(chosen, vec![1.0, 1.0]);
    }
}
