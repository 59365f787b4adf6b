//! Spatial blocking, train/val/test splits, stratified spatial folds and
//! weighted-F1 evaluation.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rstar::primitives::GeomWithData;
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::domain::Task;
use crate::error::{Error, Result};
use crate::geometry::Point;

/// One labelled building as seen by the splitting code.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledItem {
    pub building_id: String,
    pub centroid: Point,
    /// Class index per task in `Task::ALL` order.
    pub classes: [usize; 5],
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        parent[hi] = lo;
    }
}

/// Block id per point: square grid cells of `block_size_m`, with cells
/// merged whenever two points closer than `merge_distance_m` fall in
/// different cells. Ids are numbered by first appearance.
pub fn spatial_blocks(points: &[Point], block_size_m: f64, merge_distance_m: f64) -> Result<Vec<usize>> {
    if !(block_size_m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "block_size_m must be positive, got {block_size_m}"
        )));
    }
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut first_in_cell: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let key = (
            (p.x / block_size_m).floor() as i64,
            (p.y / block_size_m).floor() as i64,
        );
        match first_in_cell.get(&key) {
            Some(&j) => union(&mut parent, i, j),
            None => {
                first_in_cell.insert(key, i);
            }
        }
    }
    if merge_distance_m > 0.0 {
        let tree = RTree::bulk_load(
            points
                .iter()
                .enumerate()
                .map(|(i, p)| GeomWithData::new([p.x, p.y], i))
                .collect(),
        );
        let r2 = merge_distance_m * merge_distance_m;
        for (i, p) in points.iter().enumerate() {
            for item in tree.locate_within_distance([p.x, p.y], r2) {
                union(&mut parent, i, item.data);
            }
        }
    }
    let mut label: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let r = find(&mut parent, i);
        let next = label.len();
        out.push(*label.entry(r).or_insert(next));
    }
    Ok(out)
}

fn block_members(blocks: &[usize]) -> Vec<Vec<usize>> {
    let n_blocks = blocks.iter().map(|b| b + 1).max().unwrap_or(0);
    let mut members = vec![Vec::new(); n_blocks];
    for (i, &b) in blocks.iter().enumerate() {
        members[b].push(i);
    }
    members
}

/// Largest-remainder apportionment of `total` items to `ratios`; ties go to
/// the earlier part.
pub fn apportion(total: usize, ratios: &[f64]) -> Vec<usize> {
    let sum: f64 = ratios.iter().sum();
    let quotas: Vec<f64> = ratios.iter().map(|r| r / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut rest = total.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            rest -= 1;
        }
    }
    counts
}

/// Seeded block-level partition of `items` into parts sized by `ratios`.
/// Returns building ids per part, each sorted.
pub fn partition_blocks(
    items: &[LabeledItem],
    ratios: &[f64],
    block_size_m: f64,
    merge_distance_m: f64,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut sorted: Vec<&LabeledItem> = items.iter().collect();
    sorted.sort_by(|a, b| a.building_id.cmp(&b.building_id));
    let points: Vec<Point> = sorted.iter().map(|i| i.centroid).collect();
    let members = block_members(&spatial_blocks(&points, block_size_m, merge_distance_m)?);
    let needed = ratios.iter().filter(|r| **r > 0.0).count();
    if members.len() < needed {
        return Err(Error::TooFewBlocks {
            needed,
            found: members.len(),
        });
    }
    let counts = apportion(members.len(), ratios);
    if let Some(k) = (0..ratios.len()).find(|&k| ratios[k] > 0.0 && counts[k] == 0) {
        log::debug!("part {k} received no blocks");
        return Err(Error::TooFewBlocks {
            needed: needed.max(members.len() + 1),
            found: members.len(),
        });
    }
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            log::warn!("split part {k} is empty (ratio {})", ratios[k]);
        }
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(ratios.len());
    let mut cursor = 0;
    for c in counts {
        let mut ids: Vec<String> = order[cursor..cursor + c]
            .iter()
            .flat_map(|&b| members[b].iter().map(|&i| sorted[i].building_id.clone()))
            .collect();
        ids.sort();
        parts.push(ids);
        cursor += c;
    }
    Ok(parts)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn make_split(
    items: &[LabeledItem],
    ratios: (f64, f64, f64),
    block_size_m: f64,
    merge_distance_m: f64,
    seed: u64,
) -> Result<Split> {
    let mut parts = partition_blocks(
        items,
        &[ratios.0, ratios.1, ratios.2],
        block_size_m,
        merge_distance_m,
        seed,
    )?
    .into_iter();
    Ok(Split {
        train: parts.next().unwrap_or_default(),
        val: parts.next().unwrap_or_default(),
        test: parts.next().unwrap_or_default(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialFoldPlan {
    pub k: usize,
    pub block_size_m: f64,
    /// Fold index per block id.
    pub assignment: Vec<usize>,
    /// Block id per building.
    pub block_of: BTreeMap<String, usize>,
}

impl SpatialFoldPlan {
    pub fn fold_of(&self, building_id: &str) -> Option<usize> {
        self.block_of.get(building_id).map(|&b| self.assignment[b])
    }

    /// Building ids of fold `f`, sorted.
    pub fn members(&self, f: usize) -> Vec<String> {
        self.block_of
            .iter()
            .filter(|(_, &b)| self.assignment[b] == f)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Buildings not in fold `f`, sorted.
    pub fn complement(&self, f: usize) -> Vec<String> {
        self.block_of
            .iter()
            .filter(|(_, &b)| self.assignment[b] != f)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Greedy stratified assignment of spatial blocks to `k` folds. Blocks are
/// visited largest first; each goes to the fold where it least increases the
/// squared deviation of per-task class counts (and fold size) from their
/// global targets. Ties go to the lowest fold index.
pub fn make_spatial_folds(
    items: &[LabeledItem],
    k: usize,
    block_size_m: f64,
    merge_distance_m: f64,
) -> Result<SpatialFoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let mut sorted: Vec<&LabeledItem> = items.iter().collect();
    sorted.sort_by(|a, b| a.building_id.cmp(&b.building_id));
    let points: Vec<Point> = sorted.iter().map(|i| i.centroid).collect();
    let blocks = spatial_blocks(&points, block_size_m, merge_distance_m)?;
    let members = block_members(&blocks);
    if members.len() < k {
        return Err(Error::TooFewBlocks {
            needed: k,
            found: members.len(),
        });
    }

    // flattened (task, class) slots
    let offsets: Vec<usize> = Task::ALL
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.num_classes();
            Some(o)
        })
        .collect();
    let slots = Task::ALL.iter().map(|t| t.num_classes()).sum::<usize>();
    let count_of = |idx: &[usize]| -> Vec<f64> {
        let mut c = vec![0.0; slots];
        for &i in idx {
            for (t, &cls) in sorted[i].classes.iter().enumerate() {
                c[offsets[t] + cls] += 1.0;
            }
        }
        c
    };
    let all: Vec<usize> = (0..sorted.len()).collect();
    let target: Vec<f64> = count_of(&all).iter().map(|c| c / k as f64).collect();
    let size_target = sorted.len() as f64 / k as f64;
    let block_counts: Vec<Vec<f64>> = members.iter().map(|m| count_of(m)).collect();

    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| members[b].len().cmp(&members[a].len()).then(a.cmp(&b)));

    let mut fold_counts = vec![vec![0.0; slots]; k];
    let mut fold_sizes = vec![0.0; k];
    let mut assignment = vec![usize::MAX; members.len()];
    for (step, &b) in order.iter().enumerate() {
        let remaining = order.len() - step;
        let empty: Vec<usize> = (0..k).filter(|&f| fold_sizes[f] == 0.0).collect();
        let candidates: Vec<usize> = if remaining <= empty.len() {
            empty
        } else {
            (0..k).collect()
        };
        let bs = members[b].len() as f64;
        let mut best = (f64::INFINITY, usize::MAX);
        for &f in &candidates {
            let mut cost = 0.0;
            for s in 0..slots {
                let before = fold_counts[f][s] - target[s];
                let after = before + block_counts[b][s];
                cost += after * after - before * before;
            }
            let before = fold_sizes[f] - size_target;
            let after = before + bs;
            cost += after * after - before * before;
            if cost < best.0 - 1e-12 {
                best = (cost, f);
            }
        }
        let f = best.1;
        assignment[b] = f;
        fold_sizes[f] += bs;
        for s in 0..slots {
            fold_counts[f][s] += block_counts[b][s];
        }
    }

    let block_of = sorted
        .iter()
        .zip(&blocks)
        .map(|(it, &b)| (it.building_id.clone(), b))
        .collect();
    Ok(SpatialFoldPlan {
        k,
        block_size_m,
        assignment,
        block_of,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

pub fn per_class_scores(pred: &[usize], truth: &[usize], class_names: &[&str]) -> Result<Vec<ClassScore>> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let c = class_names.len();
    if let Some(bad) = pred.iter().chain(truth).find(|&&v| v >= c) {
        return Err(Error::InvalidArgument(format!("class index {bad} outside vocabulary of {c}")));
    }
    let mut tp = vec![0usize; c];
    let mut pred_n = vec![0usize; c];
    let mut support = vec![0usize; c];
    for (&p, &t) in pred.iter().zip(truth) {
        pred_n[p] += 1;
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    Ok((0..c)
        .map(|k| {
            let precision = if pred_n[k] > 0 { tp[k] as f64 / pred_n[k] as f64 } else { 0.0 };
            let recall = if support[k] > 0 { tp[k] as f64 / support[k] as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScore {
                class: class_names[k].to_string(),
                precision,
                recall,
                f1,
                support: support[k],
            }
        })
        .collect())
}

/// Support-weighted mean of per-class F1; zero-support classes carry no weight.
pub fn weighted_f1(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    let names = vec![""; num_classes];
    let scores = per_class_scores(pred, truth, &names)?;
    Ok(weighted_from_scores(&scores))
}

fn weighted_from_scores(scores: &[ClassScore]) -> f64 {
    let total: usize = scores.iter().map(|s| s.support).sum();
    scores.iter().map(|s| s.f1 * s.support as f64).sum::<f64>() / total as f64
}

/// Relative gain of the fused model over the best single modality, in percent.
pub fn gain_pct(multi: f64, sv: f64, uav: f64) -> f64 {
    let best = sv.max(uav);
    100.0 * (multi - best) / best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Multi,
    SvOnly,
    UavOnly,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Multi, Modality::SvOnly, Modality::UavOnly];

    pub fn key(self) -> &'static str {
        match self {
            Modality::Multi => "multi",
            Modality::SvOnly => "sv",
            Modality::UavOnly => "uav",
        }
    }

    pub fn from_key(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "multi" => Some(Modality::Multi),
            "sv" | "sv_only" => Some(Modality::SvOnly),
            "uav" | "uav_only" => Some(Modality::UavOnly),
            _ => None,
        }
    }

    pub fn uses_top(self) -> bool {
        self != Modality::SvOnly
    }

    pub fn uses_facade(self) -> bool {
        self != Modality::UavOnly
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityScores {
    pub weighted_f1: f64,
    pub per_class: Vec<ClassScore>,
    pub support: usize,
}

impl ModalityScores {
    pub fn evaluate(pred: &[usize], truth: &[usize], task: Task) -> Result<Self> {
        let per_class = per_class_scores(pred, truth, &task.class_names())?;
        Ok(Self {
            weighted_f1: weighted_from_scores(&per_class),
            support: truth.len(),
            per_class,
        })
    }

    /// Scores known only by their weighted F1 (e.g. published values).
    pub fn from_weighted_f1(f1: f64) -> Self {
        Self {
            weighted_f1: f1,
            per_class: Vec::new(),
            support: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task: Task,
    pub multi: ModalityScores,
    pub sv_only: ModalityScores,
    pub uav_only: ModalityScores,
    pub gain_pct: f64,
}

impl TaskEval {
    pub fn new(task: Task, multi: ModalityScores, sv_only: ModalityScores, uav_only: ModalityScores) -> Self {
        let gain = gain_pct(multi.weighted_f1, sv_only.weighted_f1, uav_only.weighted_f1);
        Self {
            task,
            multi,
            sv_only,
            uav_only,
            gain_pct: gain,
        }
    }

    pub fn scores(&self, m: Modality) -> &ModalityScores {
        match m {
            Modality::Multi => &self.multi,
            Modality::SvOnly => &self.sv_only,
            Modality::UavOnly => &self.uav_only,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskEval>,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Option<&TaskEval> {
        self.tasks.iter().find(|t| t.task == task)
    }
}

/// Human-readable table: fused F1, single-modality F1 with the difference
/// relative to the fused model, and the gain over the best single modality.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<22} {:>10} {:>16} {:>16} {:>8}",
            "Classification task", "Multi F1", "SV F1", "UAV F1", "Gain"
        )?;
        for t in &self.tasks {
            let m = t.multi.weighted_f1;
            let rel = |x: f64| {
                if m > 0.0 {
                    format!("{x:.2} ({:+.0}%)", 100.0 * (x - m) / m)
                } else {
                    format!("{x:.2}")
                }
            };
            writeln!(
                f,
                "{:<22} {:>10.2} {:>16} {:>16} {:>+7.1}%",
                t.task.title(),
                m,
                rel(t.sv_only.weighted_f1),
                rel(t.uav_only.weighted_f1),
                t.gain_pct
            )?;
        }
        Ok(())
    }
}

/// Out-of-fold predictions of one modality: class indices per building and
/// the fold each building was held out in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityPredictions {
    pub modality: Modality,
    pub fold_of: BTreeMap<String, usize>,
    pub predictions: BTreeMap<String, [usize; 5]>,
}

/// Scores the three modality runs against `truth` on the buildings they all
/// predicted. Fold assignments must agree across runs.
pub fn ablation_report(
    runs: &[ModalityPredictions],
    truth: &BTreeMap<String, [usize; 5]>,
) -> Result<EvalReport> {
    let get = |m: Modality| {
        runs.iter()
            .find(|r| r.modality == m)
            .ok_or_else(|| Error::InvalidArgument(format!("missing {m} predictions")))
    };
    let (multi, sv, uav) = (get(Modality::Multi)?, get(Modality::SvOnly)?, get(Modality::UavOnly)?);
    if multi.fold_of != sv.fold_of || multi.fold_of != uav.fold_of {
        return Err(Error::InvalidArgument("fold assignments differ across modalities".into()));
    }
    let ids: Vec<&String> = truth
        .keys()
        .filter(|id| [multi, sv, uav].iter().all(|r| r.predictions.contains_key(*id)))
        .collect();
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no building predicted by all modalities".into()));
    }
    let mut tasks = Vec::new();
    for (t, task) in Task::ALL.iter().enumerate() {
        let y: Vec<usize> = ids.iter().map(|id| truth[*id][t]).collect();
        let score = |r: &ModalityPredictions| {
            let p: Vec<usize> = ids.iter().map(|id| r.predictions[*id][t]).collect();
            ModalityScores::evaluate(&p, &y, *task)
        };
        tasks.push(TaskEval::new(*task, score(multi)?, score(sv)?, score(uav)?));
    }
    Ok(EvalReport { tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, x: f64, y: f64, classes: [usize; 5]) -> LabeledItem {
        LabeledItem {
            building_id: id.to_string(),
            centroid: Point::new(x, y),
            classes,
        }
    }

    fn grid(n_blocks_x: usize, n_blocks_y: usize, per_block: usize) -> Vec<LabeledItem> {
        let mut out = Vec::new();
        for bx in 0..n_blocks_x {
            for by in 0..n_blocks_y {
                for j in 0..per_block {
                    let id = format!("b{:02}{:02}{:02}", bx, by, j);
                    let x = bx as f64 * 100.0 + 10.0 + (j % 5) as f64 * 15.0;
                    let y = by as f64 * 100.0 + 10.0 + (j / 5) as f64 * 15.0;
                    out.push(item(&id, x, y, [0, 0, j % 2, 0, 0]));
                }
            }
        }
        out
    }

    #[test]
    fn split_block_counts() {
        // 20 blocks of 5 buildings
        let items = grid(5, 4, 5);
        let s = make_split(&items, (0.7, 0.15, 0.15), 100.0, 1.0, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        let s2 = make_split(&items, (0.7, 0.15, 0.15), 100.0, 1.0, 3).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn split_degenerate_ratios() {
        let items = grid(2, 2, 3);
        let s = make_split(&items, (1.0, 0.0, 0.0), 100.0, 1.0, 0).unwrap();
        assert_eq!(s.train.len(), 12);
        assert!(s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn split_too_few_blocks() {
        let items = grid(2, 1, 3);
        assert!(matches!(
            make_split(&items, (0.7, 0.15, 0.15), 100.0, 1.0, 0),
            Err(Error::TooFewBlocks { .. })
        ));
        assert!(make_split(&items, (0.7, 0.2, 0.2), 100.0, 1.0, 0).is_err());
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(20, &[0.7, 0.15, 0.15]), vec![14, 3, 3]);
        assert_eq!(apportion(10, &[1.0, 0.0, 0.0]), vec![10, 0, 0]);
        assert_eq!(apportion(7, &[0.5, 0.5]), vec![4, 3]);
    }

    #[test]
    fn close_buildings_share_a_block() {
        // straddling the x = 100 cell boundary
        let pts = [Point::new(99.6, 5.0), Point::new(100.6, 5.0), Point::new(300.0, 5.0)];
        for bs in [1.0, 10.0, 100.0] {
            let b = spatial_blocks(&pts, bs, 1.0).unwrap();
            assert_eq!(b[0], b[1]);
            assert_ne!(b[0], b[2]);
        }
    }

    #[test]
    fn five_blocks_five_folds() {
        let items = grid(5, 1, 3);
        let plan = make_spatial_folds(&items, 5, 100.0, 1.0).unwrap();
        let mut folds = plan.assignment.clone();
        folds.sort();
        assert_eq!(folds, vec![0, 1, 2, 3, 4]);
        assert!(matches!(
            make_spatial_folds(&grid(2, 2, 1), 5, 100.0, 1.0),
            Err(Error::TooFewBlocks { needed: 5, found: 4 })
        ));
    }

    #[test]
    fn rare_class_blocks_are_spread() {
        // 10 equal blocks; the rare vegetation class sits only in blocks 2 and 7
        let mut items = Vec::new();
        for b in 0..10 {
            for j in 0..6 {
                let rare = (b == 2 || b == 7) && j < 3;
                items.push(item(
                    &format!("b{b}_{j}"),
                    b as f64 * 100.0 + 10.0 + j as f64 * 10.0,
                    10.0,
                    [0, 0, usize::from(rare), 0, 0],
                ));
            }
        }
        let plan = make_spatial_folds(&items, 5, 100.0, 1.0).unwrap();
        let fold_rare: Vec<usize> = ["b2_0", "b7_0"].iter().map(|id| plan.fold_of(id).unwrap()).collect();
        assert_ne!(fold_rare[0], fold_rare[1]);
        // exhaustive check: each fold gets exactly two blocks
        let mut per_fold = [0; 5];
        for &f in &plan.assignment {
            per_fold[f] += 1;
        }
        assert_eq!(per_fold, [2; 5]);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(weighted_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        // confusion [[3,1],[1,3]]
        let truth = [0, 0, 0, 0, 1, 1, 1, 1];
        let pred = [0, 0, 0, 1, 1, 1, 1, 0];
        let scores = per_class_scores(&pred, &truth, &["a", "b"]).unwrap();
        assert!((scores[0].f1 - 0.75).abs() < 1e-12 && (scores[1].f1 - 0.75).abs() < 1e-12);
        assert!((weighted_f1(&pred, &truth, 2).unwrap() - 0.75).abs() < 1e-12);
        // all predicted class 0 on balanced truths: P0 = 0.5, R0 = 1
        let oracle = 0.5 * (2.0 * 0.5 * 1.0 / (0.5 + 1.0));
        let w = weighted_f1(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((w - oracle).abs() < 1e-12);
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
        assert!(weighted_f1(&[], &[], 2).is_err());
    }

    #[test]
    fn published_gains() {
        let cases = [
            (0.94, 0.86, 0.80, 9.3),
            (0.91, 0.85, 0.45, 7.1),
            (0.85, 0.70, 0.82, 3.7),
            (0.68, 0.68, 0.06, 0.0),
        ];
        for (m, s, u, g) in cases {
            let v = gain_pct(m, s, u);
            assert_eq!(format!("{v:.1}"), format!("{g:.1}"));
        }
        // openness row: the table values give about 1.5%
        assert!((gain_pct(0.66, 0.57, 0.65) - 1.538).abs() < 1e-3);
    }

    #[test]
    fn ablation_requires_matching_folds() {
        let mut fold_of = BTreeMap::new();
        fold_of.insert("a".to_string(), 0);
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), [0, 0, 0, 0, 0]);
        let run = |m| ModalityPredictions {
            modality: m,
            fold_of: fold_of.clone(),
            predictions: preds.clone(),
        };
        let truth = preds.clone();
        let rep = ablation_report(&[run(Modality::Multi), run(Modality::SvOnly), run(Modality::UavOnly)], &truth).unwrap();
        assert_eq!(rep.tasks.len(), 5);
        let mut bad = run(Modality::UavOnly);
        bad.fold_of.insert("a".to_string(), 1);
        assert!(ablation_report(&[run(Modality::Multi), run(Modality::SvOnly), bad], &truth).is_err());
    }
}
