//! Accuracy metrics and report tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{ImagePool, RecordSet, TestSet};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::nets::{Backbone, EnhancedModel, MintHead, Setup, TapConfig};

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;

/// Mean of per-class recall over the two membership classes.
pub fn balanced_accuracy(predicted_member: &[bool], truth: &[u8]) -> Result<f64> {
    if predicted_member.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", predicted_member.len(), truth.len())));
    }
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in predicted_member.iter().zip(truth) {
        match t {
            1 => {
                pos += 1;
                tp += p as usize;
            }
            0 => {
                neg += 1;
                tn += !p as usize;
            }
            other => return Err(Error::Contract(format!("membership label {other} is not binary"))),
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Contract("accuracy needs both members and externals".into()));
    }
    Ok(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

/// Balanced accuracy of membership probabilities thresholded at 0.5.
pub fn mint_accuracy(probs: &[f32], truth: &[u8]) -> Result<f64> {
    let pred: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
    balanced_accuracy(&pred, truth)
}

/// Fraction of rows whose arg-max equals the label. Ties go to the lowest index.
pub fn top1_accuracy(logits: &[f32], num_classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits[i * num_classes..(i + 1) * num_classes];
            let mut best = 0;
            for c in 1..num_classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Class logits for `ids`, row-major, computed in chunks.
pub fn predict_logits(backbone: &Backbone<f32>, pool: &ImagePool, ids: &[usize]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(ids.len() * backbone.spec.num_classes);
    for chunk in ids.chunks(EVAL_CHUNK) {
        out.extend(backbone.forward(&pool.to_maps(chunk))?.values);
    }
    Ok(out)
}

/// Top-1 accuracy of the audited model on the official test split.
pub fn audited_accuracy(backbone: &Backbone<f32>, test: &TestSet) -> Result<f64> {
    accuracy_on(backbone, &test.pool, &test.ids)
}

pub fn accuracy_on(backbone: &Backbone<f32>, pool: &ImagePool, ids: &[usize]) -> Result<f64> {
    let logits = predict_logits(backbone, pool, ids)?;
    let labels: Vec<usize> = ids.iter().map(|&i| pool.label(i)).collect();
    Ok(top1_accuracy(&logits, backbone.spec.num_classes, &labels))
}

/// Evaluation-mode membership probabilities from a backbone and a head.
pub fn head_probabilities(
    backbone: &Backbone<f32>,
    head: &MintHead<f32>,
    taps: &TapConfig,
    pool: &ImagePool,
    ids: &[usize],
) -> Result<Vec<f32>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(EVAL_CHUNK) {
        let aad = backbone.extract_aad(&pool.to_maps(chunk), taps)?;
        out.extend(head.forward(&aad, Mode::Eval, &mut rng)?);
    }
    Ok(out)
}

/// Probabilities and true labels over `members ‖ externals`.
pub fn membership_predictions(
    backbone: &Backbone<f32>,
    head: &MintHead<f32>,
    taps: &TapConfig,
    members: &RecordSet,
    externals: &RecordSet,
) -> Result<(Vec<f32>, Vec<u8>)> {
    let mut probs = head_probabilities(backbone, head, taps, &members.pool, &members.ids())?;
    probs.extend(head_probabilities(backbone, head, taps, &externals.pool, &externals.ids())?);
    let mut labels = vec![1u8; members.len()];
    labels.resize(members.len() + externals.len(), 0);
    Ok((probs, labels))
}

/// MINT accuracy of a head over held-out members and externals.
pub fn head_mint_accuracy(
    backbone: &Backbone<f32>,
    head: &MintHead<f32>,
    taps: &TapConfig,
    members: &RecordSet,
    externals: &RecordSet,
) -> Result<f64> {
    let (probs, labels) = membership_predictions(backbone, head, taps, members, externals)?;
    mint_accuracy(&probs, &labels)
}

pub fn model_mint_accuracy(model: &EnhancedModel<f32>, members: &RecordSet, externals: &RecordSet) -> Result<f64> {
    head_mint_accuracy(&model.backbone, &model.head, &model.taps, members, externals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Active,
    Passive,
    MiaLoss,
    MiaConf,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Active, Method::Passive, Method::MiaLoss, Method::MiaConf];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Active => "active",
            Method::Passive => "passive",
            Method::MiaLoss => "mia_loss",
            Method::MiaConf => "mia_conf",
        }
    }

    fn label(&self) -> &'static str {
        match self {
            Method::Active => "aMINT",
            Method::Passive => "pMINT",
            Method::MiaLoss => "Loss threshold",
            Method::MiaConf => "Confidence threshold",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

/// One evaluated run. `setup` is `None` for the threshold attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: Method,
    pub setup: Option<Setup>,
    pub dataset: String,
    pub seed: u64,
    pub mint_acc: f64,
    pub audited_acc: f64,
}

impl MetricRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mint_acc", self.mint_acc), ("audited_acc", self.audited_acc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invariant(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn setup_str(s: Option<Setup>) -> &'static str {
    s.map_or("n/a", |s| s.name())
}

pub const RESULTS_HEADER: [&str; 6] = ["method", "setup", "dataset", "seed", "mint_acc", "audited_acc"];

pub fn write_results(path: &Path, records: &[MetricRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in records {
        r.validate()?;
        w.write_record([
            r.method.as_str().to_string(),
            setup_str(r.setup).to_string(),
            r.dataset.clone(),
            r.seed.to_string(),
            format!("{:.6}", r.mint_acc),
            format!("{:.6}", r.audited_acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let bad = |reason: String| Error::Ingestion { file: path.to_path_buf(), reason };
    if rdr.headers()?.iter().collect::<Vec<_>>() != RESULTS_HEADER {
        return Err(bad("unexpected results header".into()));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let f = |i: usize| row.get(i).unwrap_or_default();
        let parse_f = |i: usize| f(i).parse::<f64>().map_err(|e| bad(format!("column {}: {e}", RESULTS_HEADER[i])));
        let setup = match f(1) {
            "n/a" => None,
            s => Some(s.parse().map_err(|_| bad(format!("unknown setup `{s}`")))?),
        };
        let rec = MetricRecord {
            method: f(0).parse().map_err(|_| bad(format!("unknown method `{}`", f(0))))?,
            setup,
            dataset: f(2).to_string(),
            seed: f(3).parse().map_err(|e| bad(format!("seed: {e}")))?,
            mint_acc: parse_f(4)?,
            audited_acc: parse_f(5)?,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub spread: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let spread = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Some(Self { mean, spread, n })
    }

    fn render(stat: Option<Stat>) -> String {
        match stat {
            Some(s) => format!("{:.3} ± {:.3} (n={})", s.mean, s.spread, s.n),
            None => "—".to_string(),
        }
    }
}

pub type CellKey = (String, Method, Option<Setup>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mint: Stat,
    pub audited: Stat,
    pub seeds: usize,
}

/// Entry-vs-Output audited accuracy for one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetupCheck {
    pub entry: f64,
    pub output: f64,
    pub entry_not_worse: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub cells: BTreeMap<CellKey, Cell>,
    pub datasets: Vec<String>,
    pub setup_checks: BTreeMap<String, SetupCheck>,
    pub text: String,
    pub csv: String,
}

impl ExperimentReport {
    pub fn cell(&self, dataset: &str, method: Method, setup: Option<Setup>) -> Option<&Cell> {
        self.cells.get(&(dataset.to_string(), method, setup))
    }

    /// Whether every Active cell of the three-setup grid is filled for every dataset.
    pub fn setup_grid_complete(&self) -> bool {
        !self.datasets.is_empty()
            && self.datasets.iter().all(|d| Setup::ALL.iter().all(|&s| self.cell(d, Method::Active, Some(s)).is_some()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), &self.text)?;
        std::fs::write(dir.join("report.csv"), &self.csv)?;
        Ok(())
    }
}

fn render_table(out: &mut String, title: &str, header: &[String], rows: &[Vec<String>]) {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            let pad = widths[i] - c.chars().count();
            s.push_str(c);
            if i + 1 < cols {
                s.push_str(&" ".repeat(pad + 2));
            }
        }
        s.trim_end().to_string()
    };
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{}", line(header));
    let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    for r in rows {
        let _ = writeln!(out, "{}", line(r));
    }
    let _ = writeln!(out);
}

/// Aggregates records over seeds and renders the three comparison tables.
pub fn build_report(records: &[MetricRecord]) -> Result<ExperimentReport> {
    if records.is_empty() {
        return Err(Error::Contract("no results to report".into()));
    }
    let mut groups: BTreeMap<CellKey, BTreeMap<u64, (f64, f64)>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        let prev = groups.entry((r.dataset.clone(), r.method, r.setup)).or_default().insert(r.seed, (r.mint_acc, r.audited_acc));
        if prev.is_some() {
            return Err(Error::Contract(format!(
                "duplicate result for {} / {} / {} / seed {}",
                r.dataset,
                r.method.as_str(),
                setup_str(r.setup),
                r.seed
            )));
        }
    }
    let cells: BTreeMap<CellKey, Cell> = groups
        .into_iter()
        .map(|(k, by_seed)| {
            let mint: Vec<f64> = by_seed.values().map(|v| v.0).collect();
            let aud: Vec<f64> = by_seed.values().map(|v| v.1).collect();
            let cell = Cell { mint: Stat::of(&mint).expect("nonempty"), audited: Stat::of(&aud).expect("nonempty"), seeds: by_seed.len() };
            (k, cell)
        })
        .collect();
    let datasets: Vec<String> = cells.keys().map(|k| k.0.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let get = |d: &str, m: Method, s: Option<Setup>| cells.get(&(d.to_string(), m, s)).copied();
    // Passive and Active comparisons use whatever setup the passive runs recorded.
    let passive_setup = |d: &str| cells.keys().find(|k| k.0 == d && k.1 == Method::Passive).map(|k| k.2).unwrap_or(Some(Setup::Entry));

    let mut text = String::new();
    let mut csv_out = String::from("table,dataset,method,setup,metric,mean,spread,n\n");
    let mut emit = |table: &str, d: &str, m: Method, s: Option<Setup>, c: Option<Cell>| {
        if let Some(c) = c {
            for (metric, st) in [("mint_acc", c.mint), ("audited_acc", c.audited)] {
                let _ = writeln!(csv_out, "{table},{d},{},{},{metric},{:.6},{:.6},{}", m.as_str(), setup_str(s), st.mean, st.spread, st.n);
            }
        }
    };

    let mut header = vec!["dataset".to_string()];
    for s in Setup::ALL {
        header.push(format!("{} MINT", s.name()));
        header.push(format!("{} Aud", s.name()));
    }
    let mut rows = Vec::new();
    for d in &datasets {
        let mut row = vec![d.clone()];
        for s in Setup::ALL {
            let c = get(d, Method::Active, Some(s));
            emit("setups", d, Method::Active, Some(s), c);
            row.push(Stat::render(c.map(|c| c.mint)));
            row.push(Stat::render(c.map(|c| c.audited)));
        }
        rows.push(row);
    }
    render_table(&mut text, "Table 1. Active MINT across tap setups", &header, &rows);

    let mut setup_checks = BTreeMap::new();
    for d in &datasets {
        if let (Some(e), Some(o)) = (get(d, Method::Active, Some(Setup::Entry)), get(d, Method::Active, Some(Setup::Output))) {
            let check = SetupCheck { entry: e.audited.mean, output: o.audited.mean, entry_not_worse: e.audited.mean >= o.audited.mean };
            let _ = writeln!(
                text,
                "  {d}: entry Aud {:.3} vs output Aud {:.3} -> {}",
                check.entry,
                check.output,
                if check.entry_not_worse { "PASS (entry >= output)" } else { "FAIL (entry < output)" }
            );
            setup_checks.insert(d.clone(), check);
        }
    }
    if !setup_checks.is_empty() {
        text.push('\n');
    }

    let header: Vec<String> = ["dataset", "aMINT MINT", "aMINT Aud", "pMINT MINT", "pMINT Aud"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for d in &datasets {
        let ps = passive_setup(d);
        let a = get(d, Method::Active, ps);
        let p = get(d, Method::Passive, ps);
        emit("active_vs_passive", d, Method::Active, ps, a);
        emit("active_vs_passive", d, Method::Passive, ps, p);
        rows.push(vec![
            format!("{d} ({})", setup_str(ps)),
            Stat::render(a.map(|c| c.mint)),
            Stat::render(a.map(|c| c.audited)),
            Stat::render(p.map(|c| c.mint)),
            Stat::render(p.map(|c| c.audited)),
        ]);
    }
    render_table(&mut text, "Table 2. Active vs Passive MINT", &header, &rows);

    let mut header = vec!["dataset".to_string()];
    header.extend([Method::Active, Method::MiaLoss, Method::MiaConf].map(|m| m.label().to_string()));
    let mut rows = Vec::new();
    for d in &datasets {
        let ps = passive_setup(d);
        let mut row = vec![d.clone()];
        for (m, s) in [(Method::Active, ps), (Method::MiaLoss, None), (Method::MiaConf, None)] {
            let c = get(d, m, s);
            if m != Method::Active {
                emit("mia", d, m, s, c);
            }
            row.push(Stat::render(c.map(|c| c.mint)));
        }
        rows.push(row);
    }
    render_table(&mut text, "Table 3. Membership detection accuracy: aMINT vs threshold attacks", &header, &rows);

    let _ = writeln!(text, "All MINT and attack accuracies are balanced accuracies on held-out members and externals.");
    let _ = writeln!(text, "Aud is top-1 accuracy on the official test split. Cells show mean ± sample std over seeds.");
    let _ = writeln!(text, "Loss terms are normalized by a running mean of their magnitude (momentum 0.99).");

    Ok(ExperimentReport { cells, datasets, setup_checks, text, csv: csv_out })
}

/// Finds every `results.csv` below `dir`, sorted by path.
pub fn collect_results(dir: &Path) -> Result<Vec<MetricRecord>> {
    fn walk(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == "results.csv") {
                out.push(p);
            }
        }
        Ok(())
    }
    if !dir.is_dir() {
        return Err(Error::Contract(format!("no results: {} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    let mut records = Vec::new();
    for f in &files {
        records.extend(read_results(f)?);
    }
    if records.is_empty() {
        return Err(Error::Contract(format!("no results found under {}", dir.display())));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: Method, setup: Option<Setup>, seed: u64, mint: f64, aud: f64) -> MetricRecord {
        MetricRecord { method, setup, dataset: "mnist".into(), seed, mint_acc: mint, audited_acc: aud }
    }

    #[test]
    fn constant_predictor_scores_half() {
        let truth = [1, 1, 0, 0, 1, 0];
        assert_eq!(mint_accuracy(&[0.7; 6], &truth).unwrap(), 0.5);
        assert_eq!(mint_accuracy(&[0.2; 6], &truth).unwrap(), 0.5);
    }

    #[test]
    fn single_role_is_contract_error() {
        assert!(matches!(mint_accuracy(&[0.9, 0.8], &[1, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn full_grid_has_six_cells_and_missing_cells_render_as_dash() {
        let recs: Vec<_> = Setup::ALL.iter().map(|&s| rec(Method::Active, Some(s), 0, 0.8, 0.9)).collect();
        let r = build_report(&recs).unwrap();
        assert!(r.setup_grid_complete());
        assert_eq!(r.cells.len(), 3);
        assert!(r.text.contains("—"));
        let single = build_report(&recs[..1]).unwrap();
        assert_eq!(single.cells.len(), 1);
        assert!(!single.setup_grid_complete());
    }

    #[test]
    fn duplicate_seed_is_rejected() {
        let recs = vec![rec(Method::Active, Some(Setup::Entry), 1, 0.8, 0.9), rec(Method::Active, Some(Setup::Entry), 1, 0.7, 0.9)];
        assert!(build_report(&recs).is_err());
    }

    #[test]
    fn results_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![rec(Method::MiaConf, None, 3, 0.55, 0.97), rec(Method::Passive, Some(Setup::Entry), 3, 0.5125, 0.97)];
        let p = dir.path().join("a/results.csv");
        write_results(&p, &recs).unwrap();
        assert_eq!(read_results(&p).unwrap(), recs);
        assert_eq!(collect_results(dir.path()).unwrap(), recs);
    }

    #[test]
    fn empty_results_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(collect_results(dir.path()).is_err());
    }
}
