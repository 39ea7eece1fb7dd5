//! Run reports, per-round curves and directory evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use protoloop_core::metrics::{evaluate, ClassMetrics};
use serde::{Deserialize, Serialize};

use crate::array_io::{load_labels, read_json, write_atomic, write_json};
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::state::{existing_rounds, round_dir, MeanStd, RoundState, TestSummary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub refined: bool,
    pub pseudo_label_dice: Option<f64>,
    pub raw_pseudo_label_dice: Option<f64>,
    pub test_dice: Option<MeanStd>,
    pub test_jaccard: Option<MeanStd>,
    pub test_hd95: Option<MeanStd>,
    pub test_asd: Option<MeanStd>,
    pub threshold: Option<f64>,
    pub certain: usize,
    pub uncertain: usize,
    pub selected_iteration: Option<usize>,
    pub training_seconds: f64,
    pub feature_refine_seconds: f64,
    pub inference_seconds: f64,
    pub encoder_calls: usize,
}

impl RoundSummary {
    fn from_state(s: &RoundState) -> Self {
        let test = |f: fn(&TestSummary) -> MeanStd| s.metrics.test.as_ref().map(f);
        RoundSummary {
            round: s.round,
            refined: s.refined,
            pseudo_label_dice: s.metrics.pseudo_label_dice,
            raw_pseudo_label_dice: s.metrics.raw_pseudo_label_dice,
            test_dice: test(|t| t.dice),
            test_jaccard: test(|t| t.jaccard),
            test_hd95: test(|t| t.hd95),
            test_asd: test(|t| t.asd),
            threshold: s.partition.as_ref().map(|p| p.threshold),
            certain: s.partition.as_ref().map_or(0, |p| p.certain.len()),
            uncertain: s.partition.as_ref().map_or(0, |p| p.uncertain.len()),
            selected_iteration: s.training.as_ref().map(|t| t.selected_iteration),
            training_seconds: s.timings.training,
            feature_refine_seconds: s.timings.feature_and_refine(),
            inference_seconds: s.timings.inference + s.timings.evaluation,
            encoder_calls: s.counters.encoder_calls,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub refine: bool,
    pub k: usize,
    pub q_unc: f64,
    pub iterations: usize,
    pub rounds: Vec<RoundSummary>,
    /// Encoder invocations after round 0 finished; zero when features are reused.
    pub encoder_calls_after_round0: usize,
}

fn pct(x: Option<f64>) -> String {
    x.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))
}

fn pct_ms(x: Option<MeanStd>) -> String {
    x.map_or("-".into(), |m| format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std))
}

fn dist_ms(x: Option<MeanStd>) -> String {
    x.map_or("-".into(), |m| format!("{:.2} ± {:.2}", m.mean, m.std))
}

impl Report {
    pub fn from_states(config: &PipelineConfig, states: &[RoundState]) -> Self {
        let base = states.first().map_or(0, |s| s.counters.encoder_calls);
        let last = states.last().map_or(0, |s| s.counters.encoder_calls);
        Report {
            seed: config.seed,
            refine: config.refine,
            k: config.k,
            q_unc: config.q_unc,
            iterations: config.train.iterations,
            rounds: states.iter().map(RoundSummary::from_state).collect(),
            // counters only grow within one cache; saturate on a hand-edited index
            encoder_calls_after_round0: last.saturating_sub(base),
        }
    }

    /// Rebuilds the report from the round directories of a run.
    pub fn from_run(run: &Path) -> Result<Self> {
        let config: PipelineConfig = read_json(&run.join(crate::pipeline::CONFIG_FILE))?;
        let rounds = existing_rounds(run);
        if rounds.is_empty() {
            return Err(Error::Validation(format!("{} has no rounds", run.display())));
        }
        let states = rounds
            .into_iter()
            .map(|r| RoundState::load(&round_dir(run, r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Report::from_states(&config, &states))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "seed {}  refine {}  K {}  q_unc {}  iterations {}",
            self.seed, self.refine, self.k, self.q_unc, self.iterations
        );
        let _ = writeln!(
            s,
            "{:>5}  {:>8}  {:>8}  {:>16}  {:>16}  {:>14}  {:>14}  {:>9}  {:>9}  {:>9}",
            "round", "pl_dice", "raw_dice", "test_dice", "test_jaccard", "test_hd95", "test_asd",
            "uncertain", "train_s", "feat+ref_s"
        );
        for r in &self.rounds {
            let _ = writeln!(
                s,
                "{:>5}  {:>8}  {:>8}  {:>16}  {:>16}  {:>14}  {:>14}  {:>9}  {:>9.2}  {:>9.2}",
                r.round,
                pct(r.pseudo_label_dice),
                pct(r.raw_pseudo_label_dice),
                pct_ms(r.test_dice),
                pct_ms(r.test_jaccard),
                dist_ms(r.test_hd95),
                dist_ms(r.test_asd),
                r.uncertain,
                r.training_seconds,
                r.feature_refine_seconds,
            );
        }
        let _ = writeln!(
            s,
            "encoder calls after round 0: {}",
            self.encoder_calls_after_round0
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
        let mut s = String::from(
            "round,refined,pseudo_label_dice,raw_pseudo_label_dice,test_dice,test_dice_std,\
             test_jaccard,test_hd95,test_asd,uncertain,training_seconds,feature_refine_seconds\n",
        );
        for r in &self.rounds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.refined,
                opt(r.pseudo_label_dice),
                opt(r.raw_pseudo_label_dice),
                opt(r.test_dice.map(|m| m.mean)),
                opt(r.test_dice.map(|m| m.std)),
                opt(r.test_jaccard.map(|m| m.mean)),
                opt(r.test_hd95.map(|m| m.mean)),
                opt(r.test_asd.map(|m| m.mean)),
                r.uncertain,
                r.training_seconds,
                r.feature_refine_seconds,
            );
        }
        s
    }

    /// Line chart of pseudo-label and test Dice per round.
    pub fn to_svg(&self) -> String {
        let series: [Series; 2] = [
            (
                "pseudo-label Dice",
                "#1f77b4",
                self.rounds
                    .iter()
                    .filter_map(|r| r.pseudo_label_dice.map(|v| (r.round, v)))
                    .collect(),
            ),
            (
                "test Dice",
                "#d62728",
                self.rounds
                    .iter()
                    .filter_map(|r| r.test_dice.map(|m| (r.round, m.mean)))
                    .collect(),
            ),
        ];
        line_chart(&series, self.rounds.len().saturating_sub(1).max(1))
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        let json = dir.join("report.json");
        let txt = dir.join("report.txt");
        for p in [&json, &txt] {
            if p.exists() && !force {
                return Err(Error::AlreadyExists(p.to_path_buf()));
            }
        }
        write_json(self, &json)?;
        write_atomic(&txt, self.to_text().as_bytes())
    }
}

/// Legend label, stroke colour and (round, value) points.
type Series<'a> = (&'a str, &'a str, Vec<(usize, f64)>);

fn line_chart(series: &[Series], max_x: usize) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 20.0, 20.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |r: usize| left + pw * r as f64 / max_x as f64;
    let y = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.1}" x2="{x2}" y2="{yy:.1}" stroke="#ddd"/><text x="{tx}" y="{ty:.1}" text-anchor="end">{v:.1}</text>"##,
            yy = y(v),
            x2 = w - right,
            tx = left - 6.0,
            ty = y(v) + 4.0,
        );
    }
    for r in 0..=max_x {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">R{r}</text>"#,
            x(r),
            h - bottom + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">round</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    for (i, (name, color, pts)) in series.iter().enumerate() {
        if !pts.is_empty() {
            let path: Vec<String> = pts
                .iter()
                .map(|&(r, v)| format!("{:.1},{:.1}", x(r), y(v)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                path.join(" ")
            );
            for &(r, v) in pts {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                    x(r),
                    y(v)
                );
            }
        }
        let ly = top + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            w - right - 150.0,
            w - right - 130.0,
            w - right - 124.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `curves.csv` (and `curves.svg` with `plot`) for a run directory.
pub fn write_curves(run: &Path, plot: bool, force: bool) -> Result<Report> {
    let report = Report::from_run(run)?;
    let csv = run.join("curves.csv");
    let svg = run.join("curves.svg");
    for p in [&csv, &svg] {
        if p.exists() && !force && (p == &csv || plot) {
            return Err(Error::AlreadyExists(p.to_path_buf()));
        }
    }
    write_atomic(&csv, report.to_csv().as_bytes())?;
    if plot {
        write_atomic(&svg, report.to_svg().as_bytes())?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub per_volume: BTreeMap<String, ClassMetrics>,
    pub dice: MeanStd,
    pub jaccard: MeanStd,
    pub hd95: MeanStd,
    pub asd: MeanStd,
}

impl EvalTable {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12}  {:>8}  {:>8}  {:>8}  {:>8}",
            "id", "Dice", "Jaccard", "95HD", "ASD"
        );
        for (id, m) in &self.per_volume {
            let _ = writeln!(
                s,
                "{:<12}  {:>8.2}  {:>8.2}  {:>8.2}  {:>8.2}",
                id,
                100.0 * m.dice,
                100.0 * m.jaccard,
                m.hd95,
                m.asd
            );
        }
        let _ = writeln!(
            s,
            "mean ± std    Dice {}  Jaccard {}  95HD {}  ASD {}",
            pct_ms(Some(self.dice)),
            pct_ms(Some(self.jaccard)),
            dist_ms(Some(self.hd95)),
            dist_ms(Some(self.asd)),
        );
        s
    }
}

/// `.label` files under `dir` keyed by id (file name up to the first dot).
/// When several files share an id the shortest name wins, so a round
/// directory resolves to its carried pseudo-labels.
fn label_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out: BTreeMap<String, PathBuf> = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if !name.ends_with(".label") {
            continue;
        }
        let id = name.split('.').next().unwrap_or_default().to_string();
        let better = out.get(&id).is_none_or(|p| {
            let cur = p.file_name().unwrap().len();
            name.len() < cur || (name.len() == cur && path < *p)
        });
        if better {
            out.insert(id, path);
        }
    }
    Ok(out)
}

/// Scores every truth volume against the prediction with the same id.
pub fn evaluate_dirs(pred: &Path, truth: &Path) -> Result<EvalTable> {
    let preds = label_files(pred)?;
    let truths = label_files(truth)?;
    if truths.is_empty() {
        return Err(Error::Validation(format!(
            "{} contains no .label files",
            truth.display()
        )));
    }
    if let Some(id) = truths.keys().find(|id| !preds.contains_key(*id)) {
        return Err(Error::Validation(format!(
            "no prediction for {id} in {}",
            pred.display()
        )));
    }
    let mut per_volume = BTreeMap::new();
    for (id, tp) in &truths {
        let t = load_labels(tp, None)?;
        let p = load_labels(&preds[id], Some(t.num_classes()))?;
        per_volume.insert(id.clone(), evaluate(&p, &t)?.foreground);
    }
    let summary = TestSummary::from_metrics(per_volume);
    Ok(EvalTable {
        dice: summary.dice,
        jaccard: summary.jaccard,
        hd95: summary.hd95,
        asd: summary.asd,
        per_volume: summary.per_volume,
    })
}
