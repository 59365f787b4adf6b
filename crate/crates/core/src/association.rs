//! Association of predicted attributes and features with zonal TIR values.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::domain::{AttributeLabelSet, Task};
use crate::error::{Error, Result};
use crate::features::FeatureRecord;
use crate::stats::{kruskal_wallis, pearson_r};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationRecord {
    pub labels: AttributeLabelSet,
    pub roof_brightness: Option<f64>,
    pub wall_brightness: Option<f64>,
    pub mean_dist_4nn_m: Option<f64>,
    pub tir_value: Option<f64>,
    pub tir_valid: bool,
}

impl AssociationRecord {
    pub fn new(labels: AttributeLabelSet, features: &FeatureRecord) -> Self {
        Self {
            labels,
            roof_brightness: features.roof_brightness,
            wall_brightness: features.wall_brightness,
            mean_dist_4nn_m: features.mean_dist_4nn_m,
            tir_value: features.tir_value,
            tir_valid: features.tir_valid,
        }
    }

    pub fn building_id(&self) -> &str {
        &self.labels.building_id
    }

    fn tir(&self) -> Option<f64> {
        self.tir_value.filter(|v| self.tir_valid && v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    pub alpha: f64,
    pub bonferroni: bool,
    pub min_n: usize,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            bonferroni: false,
            min_n: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    KruskalWallis,
    Pearson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub class: String,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub variable: String,
    pub kind: TestKind,
    /// H for Kruskal–Wallis, r for Pearson.
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    /// Per-class TIR summaries (Kruskal–Wallis only).
    pub groups: Vec<GroupSummary>,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedTest {
    pub variable: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationReport {
    pub alpha: f64,
    pub bonferroni: bool,
    /// Threshold actually applied to p-values.
    pub alpha_effective: f64,
    pub n_valid: usize,
    pub n_invalid: usize,
    pub tests: Vec<TestResult>,
    pub skipped: Vec<SkippedTest>,
    #[serde(skip)]
    pub figures: Vec<FigureData>,
}

impl AssociationReport {
    pub fn test(&self, variable: &str) -> Option<&TestResult> {
        self.tests.iter().find(|t| t.variable == variable)
    }

    pub fn is_significant(&self, variable: &str) -> bool {
        self.test(variable).is_some_and(|t| t.significant)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FigureData {
    /// `(class, building_id, tir)` rows.
    Groups {
        variable: String,
        classes: Vec<String>,
        rows: Vec<(String, String, f64)>,
    },
    /// `(building_id, x, tir)` rows.
    Scatter {
        variable: String,
        rows: Vec<(String, f64, f64)>,
    },
}

impl FigureData {
    pub fn variable(&self) -> &str {
        match self {
            FigureData::Groups { variable, .. } | FigureData::Scatter { variable, .. } => variable,
        }
    }
}

/// Categorical variables in reporting order.
pub const CATEGORICAL: [(&str, Task); 5] = [
    ("vegetation", Task::Vegetation),
    ("roof_material", Task::Roof),
    ("wall_material", Task::Wall),
    ("openness", Task::Openness),
    ("floors", Task::Floors),
];

pub const NUMERIC: [&str; 3] = ["roof_brightness", "wall_brightness", "mean_dist_4nn_m"];

fn numeric_value(r: &AssociationRecord, name: &str) -> Option<f64> {
    match name {
        "roof_brightness" => r.roof_brightness,
        "wall_brightness" => r.wall_brightness,
        "mean_dist_4nn_m" => r.mean_dist_4nn_m,
        _ => None,
    }
    .filter(|v| v.is_finite())
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

pub fn run_association_suite(
    records: &[AssociationRecord],
    cfg: &AssociationConfig,
) -> Result<AssociationReport> {
    let mut valid: Vec<&AssociationRecord> = records.iter().filter(|r| r.tir().is_some()).collect();
    if valid.is_empty() {
        return Err(Error::NoValidThermalData);
    }
    if valid.len() < cfg.min_n {
        return Err(Error::Stats(format!(
            "{} valid thermal records; at least {} required",
            valid.len(),
            cfg.min_n
        )));
    }
    valid.sort_by(|a, b| a.building_id().cmp(b.building_id()));

    let mut tests = Vec::new();
    let mut skipped = Vec::new();
    let mut figures = Vec::new();

    for (name, task) in CATEGORICAL {
        let unclear = task.unclear_index();
        let classes = task.class_names();
        let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); classes.len()];
        let mut rows = Vec::new();
        for r in &valid {
            let c = r.labels.class_index(task);
            if Some(c) == unclear {
                continue;
            }
            let t = r.tir().unwrap_or_default();
            per_class[c].push(t);
            rows.push((classes[c].to_string(), r.building_id().to_string(), t));
        }
        let kept: Vec<usize> = (0..classes.len()).filter(|&c| per_class[c].len() >= 2).collect();
        let dropped: Vec<&str> = (0..classes.len())
            .filter(|&c| per_class[c].len() == 1)
            .map(|c| classes[c])
            .collect();
        if !dropped.is_empty() {
            log::info!("{name}: classes with a single observation left out: {dropped:?}");
        }
        let kept_names: Vec<String> = kept.iter().map(|&c| classes[c].to_string()).collect();
        figures.push(FigureData::Groups {
            variable: name.to_string(),
            classes: kept_names,
            rows: rows
                .into_iter()
                .filter(|(c, _, _)| kept.iter().any(|&k| classes[k] == c))
                .collect(),
        });
        if kept.len() < 2 {
            let reason = format!("{} class(es) with at least 2 observations", kept.len());
            log::warn!("skipping {name}: {reason}");
            skipped.push(SkippedTest {
                variable: name.to_string(),
                reason,
            });
            continue;
        }
        let groups: Vec<&[f64]> = kept.iter().map(|&c| per_class[c].as_slice()).collect();
        let kw = kruskal_wallis(&groups)?;
        let summaries = kept
            .iter()
            .map(|&c| {
                let mut v = per_class[c].clone();
                v.sort_by(f64::total_cmp);
                GroupSummary {
                    class: classes[c].to_string(),
                    n: v.len(),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    median: median(&v),
                }
            })
            .collect();
        tests.push(TestResult {
            variable: name.to_string(),
            kind: TestKind::KruskalWallis,
            statistic: kw.h,
            p_value: kw.p_value,
            n: groups.iter().map(|g| g.len()).sum(),
            groups: summaries,
            significant: false,
        });
    }

    for name in NUMERIC {
        let rows: Vec<(String, f64, f64)> = valid
            .iter()
            .filter_map(|r| {
                let x = numeric_value(r, name)?;
                Some((r.building_id().to_string(), x, r.tir()?))
            })
            .collect();
        let x: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
        figures.push(FigureData::Scatter {
            variable: name.to_string(),
            rows,
        });
        match pearson_r(&x, &y) {
            Ok(p) => tests.push(TestResult {
                variable: name.to_string(),
                kind: TestKind::Pearson,
                statistic: p.r,
                p_value: p.p_value,
                n: p.n,
                groups: Vec::new(),
                significant: false,
            }),
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                skipped.push(SkippedTest {
                    variable: name.to_string(),
                    reason: e.to_string(),
                });
            }
        }
    }

    let alpha_effective = if cfg.bonferroni && !tests.is_empty() {
        cfg.alpha / tests.len() as f64
    } else {
        cfg.alpha
    };
    for t in &mut tests {
        t.significant = t.p_value < alpha_effective;
    }

    Ok(AssociationReport {
        alpha: cfg.alpha,
        bonferroni: cfg.bonferroni,
        alpha_effective,
        n_valid: valid.len(),
        n_invalid: records.len() - valid.len(),
        tests,
        skipped,
        figures,
    })
}

/// Writes `association_results.json` plus `fig_<variable>.csv` and
/// `fig_<variable>.png` for every variable.
pub fn write_report(dir: &Path, report: &AssociationReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("association_results.json");
    let json = serde_json::to_string_pretty(report)?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;

    for fig in &report.figures {
        let csv_path = dir.join(format!("fig_{}.csv", fig.variable()));
        let mut w = csv::Writer::from_path(&csv_path)?;
        let img = match fig {
            FigureData::Groups { classes, rows, .. } => {
                w.write_record(["building_id", "class", "tir_value"])?;
                for (c, id, t) in rows {
                    w.write_record([id.as_str(), c.as_str(), &t.to_string()])?;
                }
                let groups: Vec<Vec<f64>> = classes
                    .iter()
                    .map(|c| rows.iter().filter(|r| &r.0 == c).map(|r| r.2).collect())
                    .collect();
                render_boxplot(&groups)
            }
            FigureData::Scatter { rows, .. } => {
                w.write_record(["building_id", "value", "tir_value"])?;
                for (id, x, t) in rows {
                    w.write_record([id.as_str(), &x.to_string(), &t.to_string()])?;
                }
                let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.1, r.2)).collect();
                render_scatter(&pts)
            }
        };
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        img.save(dir.join(format!("fig_{}.png", fig.variable())))?;
    }
    Ok(())
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;
const MARGIN: f64 = 30.0;
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const BLUE: Rgb<u8> = Rgb([40, 90, 200]);
const RED: Rgb<u8> = Rgb([200, 40, 40]);

struct Canvas {
    img: RgbImage,
    y_lo: f64,
    y_hi: f64,
}

impl Canvas {
    fn new(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
        let (x0, y1) = (MARGIN as u32, PLOT_H - MARGIN as u32);
        for x in x0..PLOT_W - 10 {
            img.put_pixel(x, y1, BLACK);
        }
        for y in 10..=y1 {
            img.put_pixel(x0, y, BLACK);
        }
        Self { img, y_lo: lo, y_hi: hi }
    }

    fn py(&self, v: f64) -> f64 {
        let top = 10.0;
        let bottom = PLOT_H as f64 - MARGIN;
        bottom - (v - self.y_lo) / (self.y_hi - self.y_lo) * (bottom - top)
    }

    fn put(&mut self, x: f64, y: f64, c: Rgb<u8>) {
        if x >= 0.0 && y >= 0.0 && (x as u32) < PLOT_W && (y as u32) < PLOT_H {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn hline(&mut self, x0: f64, x1: f64, y: f64, c: Rgb<u8>) {
        let mut x = x0;
        while x <= x1 {
            self.put(x, y, c);
            x += 1.0;
        }
    }

    fn vline(&mut self, x: f64, y0: f64, y1: f64, c: Rgb<u8>) {
        let (a, b) = (y0.min(y1), y0.max(y1));
        let mut y = a;
        while y <= b {
            self.put(x, y, c);
            y += 1.0;
        }
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

fn render_boxplot(groups: &[Vec<f64>]) -> RgbImage {
    let mut cv = Canvas::new(groups.iter().flatten().copied());
    let slot = (PLOT_W as f64 - MARGIN - 20.0) / groups.len().max(1) as f64;
    for (k, g) in groups.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let mut s = g.clone();
        s.sort_by(f64::total_cmp);
        let cx = MARGIN + slot * (k as f64 + 0.5);
        let half = (slot * 0.3).max(2.0);
        let (q1, q2, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
        let (lo, hi) = (s[0], s[s.len() - 1]);
        cv.vline(cx, cv.py(lo), cv.py(q1), BLACK);
        cv.vline(cx, cv.py(q3), cv.py(hi), BLACK);
        cv.hline(cx - half / 2.0, cx + half / 2.0, cv.py(lo), BLACK);
        cv.hline(cx - half / 2.0, cx + half / 2.0, cv.py(hi), BLACK);
        cv.hline(cx - half, cx + half, cv.py(q1), BLUE);
        cv.hline(cx - half, cx + half, cv.py(q3), BLUE);
        cv.vline(cx - half, cv.py(q1), cv.py(q3), BLUE);
        cv.vline(cx + half, cv.py(q1), cv.py(q3), BLUE);
        let ym = cv.py(q2);
        cv.hline(cx - half, cx + half, ym, RED);
        cv.hline(cx - half, cx + half, ym + 1.0, RED);
    }
    cv.img
}

fn render_scatter(points: &[(f64, f64)]) -> RgbImage {
    let mut cv = Canvas::new(points.iter().map(|p| p.1));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo = lo.min(p.0);
        hi = hi.max(p.0);
    }
    if !lo.is_finite() || hi - lo < 1e-9 {
        lo = if lo.is_finite() { lo - 0.5 } else { 0.0 };
        hi = lo + 1.0;
    }
    let left = MARGIN + 5.0;
    let right = PLOT_W as f64 - 15.0;
    for &(x, y) in points {
        let px = left + (x - lo) / (hi - lo) * (right - left);
        let py = cv.py(y);
        for dx in -1..=1 {
            for dy in -1..=1 {
                cv.put(px + dx as f64, py + dy as f64, BLUE);
            }
        }
    }
    cv.img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Vegetation;

    fn record(id: usize, veg: bool, roof: f64, tir: f64) -> AssociationRecord {
        let mut labels = AttributeLabelSet::from_indices(format!("b{id:03}"), [0, 0, 0, 0, 0]).unwrap();
        labels.vegetation = if veg { Vegetation::Yes } else { Vegetation::No };
        labels.roof = crate::domain::RoofMaterial::from_index(id % 3).unwrap();
        AssociationRecord {
            labels,
            roof_brightness: Some(roof),
            wall_brightness: Some(100.0 + (id % 7) as f64),
            mean_dist_4nn_m: Some(5.0 + (id % 5) as f64),
            tir_value: Some(tir),
            tir_valid: true,
        }
    }

    fn planted() -> Vec<AssociationRecord> {
        (0..40)
            .map(|i| {
                let veg = i % 2 == 0;
                let noise = ((i * 7919) % 13) as f64 / 13.0 - 0.5;
                record(i, veg, 50.0 + i as f64, if veg { 35.0 } else { 40.0 } + noise)
            })
            .collect()
    }

    #[test]
    fn vegetation_effect_is_flagged() {
        let rep = run_association_suite(&planted(), &AssociationConfig::default()).unwrap();
        let t = rep.test("vegetation").unwrap();
        assert_eq!(t.kind, TestKind::KruskalWallis);
        assert!(t.significant, "p = {}", t.p_value);
        assert!(t.groups[0].mean < t.groups[1].mean);
    }

    #[test]
    fn constant_tir_is_never_significant() {
        let recs: Vec<_> = (0..20).map(|i| record(i, i % 2 == 0, i as f64, 30.0)).collect();
        let rep = run_association_suite(&recs, &AssociationConfig::default()).unwrap();
        for t in &rep.tests {
            assert!(!t.significant);
            assert_eq!(t.kind, TestKind::KruskalWallis);
            assert_eq!(t.statistic, 0.0);
        }
        for name in NUMERIC {
            assert!(rep.skipped.iter().any(|s| s.variable == name));
        }
    }

    #[test]
    fn no_valid_thermal_data() {
        let mut recs = planted();
        for r in &mut recs {
            r.tir_valid = false;
        }
        assert!(matches!(
            run_association_suite(&recs, &AssociationConfig::default()),
            Err(Error::NoValidThermalData)
        ));
    }

    #[test]
    fn single_class_variable_is_skipped() {
        let rep = run_association_suite(&planted(), &AssociationConfig::default()).unwrap();
        // every record has openness = Closed
        assert!(rep.test("openness").is_none());
        assert!(rep.skipped.iter().any(|s| s.variable == "openness"));
    }

    #[test]
    fn unclear_is_excluded() {
        let mut recs = planted();
        for r in recs.iter_mut().take(10) {
            r.labels.wall = crate::domain::WallMaterial::Unclear;
        }
        for r in recs.iter_mut().skip(10).take(10) {
            r.labels.wall = crate::domain::WallMaterial::Brick;
        }
        let rep = run_association_suite(&recs, &AssociationConfig::default()).unwrap();
        let t = rep.test("wall_material").unwrap();
        assert_eq!(t.n, 30);
        assert!(t.groups.iter().all(|g| g.class != "Unclear"));
    }

    #[test]
    fn bonferroni_tightens_threshold() {
        let cfg = AssociationConfig {
            bonferroni: true,
            ..Default::default()
        };
        let rep = run_association_suite(&planted(), &cfg).unwrap();
        assert!((rep.alpha_effective - 0.05 / rep.tests.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn order_independent_and_written() {
        let recs = planted();
        let mut rev = recs.clone();
        rev.reverse();
        let cfg = AssociationConfig::default();
        let a = run_association_suite(&recs, &cfg).unwrap();
        let b = run_association_suite(&rev, &cfg).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &a).unwrap();
        assert!(dir.path().join("association_results.json").exists());
        for v in ["vegetation", "roof_brightness"] {
            assert!(dir.path().join(format!("fig_{v}.csv")).exists());
            assert!(dir.path().join(format!("fig_{v}.png")).exists());
        }
    }
}
