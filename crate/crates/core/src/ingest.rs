//! Loading of footprints, the capture index and annotation tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::crs::{Crs, Reprojector};
use crate::domain::{AttributeLabelSet, BuildingFootprint, CaptureSample, Task};
use crate::error::{Error, Result};
use crate::geometry::{normalize_deg, normalize_ring, Point};

#[derive(Clone, Debug)]
pub struct FootprintOptions {
    /// Property whose value marks a feature as residential.
    pub residential_field: String,
    /// CRS of the file's coordinates; falls back to the file's own `crs` member.
    pub crs: Option<String>,
    /// Working metric CRS; `None` keeps a projected source CRS or picks the
    /// local UTM zone for geographic input.
    pub working_crs: Option<String>,
}

impl Default for FootprintOptions {
    fn default() -> Self {
        Self {
            residential_field: "building".to_string(),
            crs: None,
            working_crs: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FootprintSet {
    pub footprints: Vec<BuildingFootprint>,
    pub dropped: usize,
    pub working_crs: Crs,
}

impl FootprintSet {
    pub fn residential(&self) -> impl Iterator<Item = &BuildingFootprint> {
        self.footprints.iter().filter(|f| f.is_residential)
    }
}

const RESIDENTIAL_VALUES: &[&str] = &[
    "yes",
    "true",
    "1",
    "residential",
    "house",
    "apartments",
    "detached",
    "semidetached_house",
    "terrace",
    "bungalow",
    "hut",
];

fn is_residential_value(v: &Value) -> bool {
    match v {
        Value::Bool(b) => *b,
        Value::Number(n) => n.as_f64().is_some_and(|x| x != 0.0),
        Value::String(s) => RESIDENTIAL_VALUES
            .iter()
            .any(|r| s.trim().eq_ignore_ascii_case(r)),
        _ => false,
    }
}

fn value_to_id(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_ring(v: &Value) -> Option<Vec<Point>> {
    v.as_array()?
        .iter()
        .map(|pos| {
            let c = pos.as_array()?;
            Some(Point::new(c.first()?.as_f64()?, c.get(1)?.as_f64()?))
        })
        .collect()
}

/// Outer rings of a geometry; holes are ignored and each multipolygon part
/// counts as its own building.
fn outer_rings(geom: &Value) -> Option<Vec<Vec<Point>>> {
    let coords = geom.get("coordinates")?;
    match geom.get("type")?.as_str()? {
        "Polygon" => Some(vec![parse_ring(coords.as_array()?.first()?)?]),
        "MultiPolygon" => coords
            .as_array()?
            .iter()
            .map(|poly| parse_ring(poly.as_array()?.first()?))
            .collect(),
        _ => None,
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Load building footprints from a GeoJSON feature collection and reproject
/// them into the working metric CRS. Invalid geometries are dropped and counted.
pub fn load_footprints(path: &Path, opts: &FootprintOptions) -> Result<FootprintSet> {
    let text = read_to_string(path)?;
    let root: Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse(path, "expected a FeatureCollection with `features`"))?;

    let file_crs = root
        .pointer("/crs/properties/name")
        .and_then(Value::as_str)
        .map(str::to_string);
    let src_name = opts.crs.clone().or(file_crs).ok_or_else(|| {
        Error::Crs(format!(
            "{}: no CRS in file and none configured (footprints.crs)",
            path.display()
        ))
    })?;
    let src = Crs::parse(&src_name)?;

    let mut raw: Vec<(String, Vec<Point>, bool)> = Vec::with_capacity(features.len());
    let mut dropped = 0usize;
    for (i, feat) in features.iter().enumerate() {
        let props = feat.get("properties");
        let id = feat
            .get("id")
            .and_then(value_to_id)
            .or_else(|| props.and_then(|p| p.get("id")).and_then(value_to_id))
            .or_else(|| props.and_then(|p| p.get("osm_id")).and_then(value_to_id))
            .unwrap_or_else(|| format!("feature_{i}"));
        let residential = props
            .and_then(|p| p.get(&opts.residential_field))
            .is_some_and(is_residential_value);
        match feat.get("geometry").and_then(outer_rings) {
            Some(rings) if rings.len() == 1 => {
                raw.push((id, rings.into_iter().next().unwrap(), residential))
            }
            Some(rings) if !rings.is_empty() => {
                for (k, ring) in rings.into_iter().enumerate() {
                    raw.push((format!("{id}#{k}"), ring, residential));
                }
            }
            _ => dropped += 1,
        }
    }

    let working = match &opts.working_crs {
        Some(w) => Crs::parse(w)?,
        None if src.is_geographic() => {
            let n = raw.iter().map(|r| r.1.len()).sum::<usize>().max(1) as f64;
            let (sx, sy) = raw
                .iter()
                .flat_map(|r| r.1.iter())
                .fold((0.0, 0.0), |acc, p| (acc.0 + p.x, acc.1 + p.y));
            Crs::utm_for(sx / n, sy / n)?
        }
        None => src.clone(),
    };
    if working.is_geographic() {
        return Err(Error::Crs(format!(
            "working CRS {} is geographic; a projected metric CRS is required",
            working.name()
        )));
    }
    let reproj = Reprojector::new(src, working.clone())?;

    let mut seen = HashSet::new();
    let mut footprints = Vec::with_capacity(raw.len());
    for (id, ring, residential) in raw {
        let projected: Result<Vec<Point>> = if reproj.is_identity() {
            Ok(ring)
        } else {
            ring.into_iter().map(|p| reproj.forward(p)).collect()
        };
        let Some(norm) = projected.ok().and_then(|r| normalize_ring(&r)) else {
            dropped += 1;
            continue;
        };
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateBuilding(id));
        }
        footprints.push(BuildingFootprint::new(id, norm, residential));
    }
    if dropped > 0 {
        warn!("{}: dropped {dropped} invalid geometries", path.display());
    }
    if footprints.is_empty() {
        return Err(Error::NoValidPolygons {
            path: path.to_path_buf(),
        });
    }
    footprints.sort_by(|a, b| a.id.cmp(&b.id));
    info!(
        "{}: {} footprints ({} residential) in {}",
        path.display(),
        footprints.len(),
        footprints.iter().filter(|f| f.is_residential).count(),
        working.name()
    );
    Ok(FootprintSet {
        footprints,
        dropped,
        working_crs: working,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingImagePolicy {
    #[default]
    Error,
    /// Drop the row with a warning.
    Warn,
}

#[derive(Clone, Debug, Default)]
pub struct CaptureIndex {
    pub samples: Vec<CaptureSample>,
    pub dropped_missing_heading: usize,
    pub dropped_missing_image: usize,
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name))
}

fn required_column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    column(headers, name).ok_or_else(|| Error::parse(path, format!("missing column `{name}`")))
}

/// Load the capture index CSV (`id, x, y, heading_deg, image_path`, optional
/// `width_px, height_px`). Image paths are resolved against the index's directory.
pub fn load_capture_index(path: &Path, missing_image: MissingImagePolicy) -> Result<CaptureIndex> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let headers = rdr.headers()?.clone();
    let c_id = required_column(&headers, "id", path)?;
    let c_x = required_column(&headers, "x", path)?;
    let c_y = required_column(&headers, "y", path)?;
    let c_h = required_column(&headers, "heading_deg", path)?;
    let c_img = required_column(&headers, "image_path", path)?;
    let c_w = column(&headers, "width_px");
    let c_hh = column(&headers, "height_px");
    let base = path.parent().unwrap_or(Path::new("."));

    let mut index = CaptureIndex::default();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::MalformedRow {
            path: path.to_path_buf(),
            row,
            msg: e.to_string(),
        })?;
        let malformed = |msg: String| Error::MalformedRow {
            path: path.to_path_buf(),
            row,
            msg,
        };
        let num = |c: usize, name: &str| -> Result<f64> {
            let s = rec.get(c).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(format!("`{name}` is not a number: `{s}`")))
        };
        let id = rec.get(c_id).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(malformed("empty id".into()));
        }
        let x = num(c_x, "x")?;
        let y = num(c_y, "y")?;
        let heading_raw = rec.get(c_h).unwrap_or("");
        if heading_raw.is_empty() {
            index.dropped_missing_heading += 1;
            continue;
        }
        let heading = num(c_h, "heading_deg")?;
        let img = rec.get(c_img).unwrap_or("");
        if img.is_empty() {
            return Err(malformed("empty image_path".into()));
        }
        let image_ref = if Path::new(img).is_absolute() {
            PathBuf::from(img)
        } else {
            base.join(img)
        };
        let given = match (c_w.and_then(|c| rec.get(c)), c_hh.and_then(|c| rec.get(c))) {
            (Some(w), Some(h)) if !w.is_empty() && !h.is_empty() => Some((
                w.parse::<u32>().map_err(|_| malformed(format!("bad width_px `{w}`")))?,
                h.parse::<u32>().map_err(|_| malformed(format!("bad height_px `{h}`")))?,
            )),
            _ => None,
        };
        let exists = image_ref.is_file();
        if !exists {
            match missing_image {
                MissingImagePolicy::Error => return Err(Error::MissingImage(image_ref)),
                MissingImagePolicy::Warn => {
                    warn!("row {row}: panorama {} not found, skipping", image_ref.display());
                    index.dropped_missing_image += 1;
                    continue;
                }
            }
        }
        let (w, h) = match given {
            Some(d) => d,
            None => image::image_dimensions(&image_ref)?,
        };
        if w == 0 || h == 0 {
            return Err(malformed("zero image dimension".into()));
        }
        if w != 2 * h {
            warn!(
                "capture {id}: {w}x{h} is not a 2:1 equirectangular panorama",
            );
        }
        index.samples.push(CaptureSample {
            id,
            position: Point::new(x, y),
            heading_deg: normalize_deg(heading),
            image_ref,
            width_px: w,
            height_px: h,
        });
    }
    if index.dropped_missing_heading > 0 {
        warn!(
            "{}: dropped {} rows without heading",
            path.display(),
            index.dropped_missing_heading
        );
    }
    index.samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(index)
}

/// Load the annotation CSV (`building_id, openness, floors, vegetation, wall, roof`).
pub fn load_labels(path: &Path) -> Result<BTreeMap<String, AttributeLabelSet>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let headers = rdr.headers()?.clone();
    let c_id = required_column(&headers, "building_id", path)?;
    let cols: Vec<usize> = Task::ALL
        .iter()
        .map(|t| required_column(&headers, t.key(), path))
        .collect::<Result<_>>()?;

    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::MalformedRow {
            path: path.to_path_buf(),
            row,
            msg: e.to_string(),
        })?;
        let id = rec.get(c_id).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                row,
                msg: "empty building_id".into(),
            });
        }
        let mut idx = [0usize; 5];
        for (k, task) in Task::ALL.iter().enumerate() {
            let token = rec.get(cols[k]).unwrap_or("");
            idx[k] = task.parse_class(token).ok_or_else(|| Error::UnknownLabel {
                row,
                field: task.key(),
                token: token.to_string(),
            })?;
        }
        let labels = AttributeLabelSet::from_indices(id.clone(), idx)
            .expect("indices come from parse_class");
        if out.insert(id.clone(), labels).is_some() {
            return Err(Error::DuplicateBuilding(id));
        }
    }
    Ok(out)
}

/// Per-task class histogram of an annotation set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelSummary {
    pub total: usize,
    pub counts: BTreeMap<Task, Vec<usize>>,
}

impl LabelSummary {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a AttributeLabelSet>) -> Self {
        let mut counts: BTreeMap<Task, Vec<usize>> = Task::ALL
            .iter()
            .map(|t| (*t, vec![0; t.num_classes()]))
            .collect();
        let mut total = 0;
        for l in labels {
            total += 1;
            for t in Task::ALL {
                counts.get_mut(&t).unwrap()[l.class_index(t)] += 1;
            }
        }
        Self { total, counts }
    }

    pub fn percent(&self, task: Task, class: usize) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        100.0 * self.counts[&task][class] as f64 / self.total as f64
    }
}

impl fmt::Display for LabelSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:<18} {:>6} {:>8}", "Task", "Class", "Count", "Percent")?;
        for task in Task::ALL {
            for (c, name) in task.class_names().iter().enumerate() {
                writeln!(
                    f,
                    "{:<22} {:<18} {:>6} {:>7.2}%",
                    task.title(),
                    name,
                    self.counts[&task][c],
                    self.percent(task, c)
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    fn square_feature(id: &str, x: f64, y: f64, residential: bool) -> String {
        format!(
            r#"{{"type":"Feature","id":"{id}","properties":{{"building":"{}"}},"geometry":{{"type":"Polygon","coordinates":[[[{x},{y}],[{x1},{y}],[{x1},{y1}],[{x},{y1}],[{x},{y}]]]}}}}"#,
            if residential { "residential" } else { "commercial" },
            x1 = x + 10.0,
            y1 = y + 8.0
        )
    }

    fn collection(features: &[String], crs: Option<&str>) -> String {
        let crs = crs
            .map(|c| format!(r#""crs":{{"type":"name","properties":{{"name":"{c}"}}}},"#))
            .unwrap_or_default();
        format!(r#"{{"type":"FeatureCollection",{crs}"features":[{}]}}"#, features.join(","))
    }

    #[test]
    fn five_residential_polygons_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let feats: Vec<String> = (0..5).map(|i| square_feature(&format!("b{i}"), 20.0 * i as f64, 0.0, true)).collect();
        let p = write(dir.path(), "fp.geojson", &collection(&feats, Some("local")));
        let set = load_footprints(&p, &FootprintOptions::default()).unwrap();
        assert_eq!(set.footprints.len(), 5);
        assert!(set.footprints.iter().all(|f| f.is_residential));
        assert_eq!(set.dropped, 0);
    }

    #[test]
    fn degenerate_geometry_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let mut feats: Vec<String> = (0..4).map(|i| square_feature(&format!("b{i}"), 20.0 * i as f64, 0.0, true)).collect();
        feats.push(r#"{"type":"Feature","id":"bad","properties":{},"geometry":{"type":"Polygon","coordinates":[[[0,0],[1,1],[0,0]]]}}"#.to_string());
        let p = write(dir.path(), "fp.geojson", &collection(&feats, Some("local")));
        let set = load_footprints(&p, &FootprintOptions::default()).unwrap();
        assert_eq!(set.footprints.len(), 4);
        assert_eq!(set.dropped, 1);
    }

    #[test]
    fn residential_subset() {
        let dir = tempfile::tempdir().unwrap();
        let feats: Vec<String> = (0..10)
            .map(|i| square_feature(&format!("b{i}"), 20.0 * i as f64, 0.0, i < 6))
            .collect();
        let p = write(dir.path(), "fp.geojson", &collection(&feats, Some("local")));
        let set = load_footprints(&p, &FootprintOptions::default()).unwrap();
        assert_eq!(set.footprints.len(), 10);
        assert_eq!(set.residential().count(), 6);
    }

    #[test]
    fn missing_crs_is_an_error_unless_configured() {
        let dir = tempfile::tempdir().unwrap();
        let feats = vec![square_feature("a", 0.0, 0.0, true)];
        let p = write(dir.path(), "fp.geojson", &collection(&feats, None));
        assert!(matches!(load_footprints(&p, &FootprintOptions::default()), Err(Error::Crs(_))));
        let opts = FootprintOptions {
            crs: Some("EPSG:32737".into()),
            ..Default::default()
        };
        assert_eq!(load_footprints(&p, &opts).unwrap().footprints.len(), 1);
    }

    #[test]
    fn geographic_input_goes_to_utm() {
        let dir = tempfile::tempdir().unwrap();
        let f = r#"{"type":"Feature","id":"g","properties":{"building":"yes"},"geometry":{"type":"Polygon","coordinates":[[[39.2686,-6.7985],[39.2687,-6.7985],[39.2687,-6.7984],[39.2686,-6.7984],[39.2686,-6.7985]]]}}"#;
        let p = write(dir.path(), "fp.geojson", &collection(&[f.to_string()], Some("EPSG:4326")));
        let set = load_footprints(&p, &FootprintOptions::default()).unwrap();
        assert_eq!(set.working_crs.name(), "EPSG:32737");
        let fp = &set.footprints[0];
        // ~11 m x ~11 m at this latitude
        assert!(fp.area() > 100.0 && fp.area() < 140.0, "area {}", fp.area());
        assert!(fp.centroid.x > 500_000.0 && fp.centroid.y > 9_000_000.0);
    }

    #[test]
    fn unreadable_file_errors() {
        let r = load_footprints(Path::new("/nonexistent/fp.geojson"), &FootprintOptions::default());
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn capture_headings_normalized_and_missing_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "id,x,y,heading_deg,image_path,width_px,height_px\n\
                   c1,0,0,450.0,a.png,200,100\n\
                   c2,5,0,-90.0,b.png,200,100\n\
                   c3,10,0,,c.png,200,100\n";
        for n in ["a.png", "b.png", "c.png"] {
            write(dir.path(), n, "");
        }
        let p = write(dir.path(), "captures.csv", csv);
        let idx = load_capture_index(&p, MissingImagePolicy::Error).unwrap();
        assert_eq!(idx.samples.len(), 2);
        assert_eq!(idx.dropped_missing_heading, 1);
        assert_eq!(idx.samples[0].heading_deg, 90.0);
        assert_eq!(idx.samples[1].heading_deg, 270.0);
    }

    #[test]
    fn capture_missing_image_policy() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "id,x,y,heading_deg,image_path,width_px,height_px\nc1,0,0,10,nope.png,200,100\n";
        let p = write(dir.path(), "captures.csv", csv);
        assert!(matches!(
            load_capture_index(&p, MissingImagePolicy::Error),
            Err(Error::MissingImage(_))
        ));
        let idx = load_capture_index(&p, MissingImagePolicy::Warn).unwrap();
        assert!(idx.samples.is_empty());
        assert_eq!(idx.dropped_missing_image, 1);
    }

    #[test]
    fn capture_malformed_row() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.png", "");
        let p = write(
            dir.path(),
            "captures.csv",
            "id,x,y,heading_deg,image_path,width_px,height_px\nc1,abc,0,10,a.png,200,100\n",
        );
        assert!(matches!(
            load_capture_index(&p, MissingImagePolicy::Error),
            Err(Error::MalformedRow { row: 2, .. })
        ));
    }

    const HEADER: &str = "building_id,openness,floors,vegetation,wall,roof\n";

    #[test]
    fn labels_parse_and_reject_unknown_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "labels.csv", &format!("{HEADER}b1,Closed,One,Yes,Concrete,Clay\n"));
        let labels = load_labels(&p).unwrap();
        assert_eq!(labels["b1"].roof, crate::domain::RoofMaterial::Clay);

        let p = write(dir.path(), "bad.csv", &format!("{HEADER}b1,Closed,One,Yes,Concrete,Thatch\n"));
        match load_labels(&p) {
            Err(Error::UnknownLabel { field, token, row }) => {
                assert_eq!(field, "roof");
                assert_eq!(token, "Thatch");
                assert_eq!(row, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_label_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "labels.csv",
            &format!("{HEADER}b1,Closed,One,Yes,Concrete,Clay\nb1,Closed,One,No,Concrete,Clay\n"),
        );
        assert!(matches!(load_labels(&p), Err(Error::DuplicateBuilding(id)) if id == "b1"));
    }

    #[test]
    fn vegetation_summary_percentages() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = HEADER.to_string();
        for i in 0..2000 {
            let veg = if i < 1946 { "Yes" } else { "No" };
            body.push_str(&format!("b{i:04},Closed,One,{veg},Concrete,Metal\n"));
        }
        let p = write(dir.path(), "labels.csv", &body);
        let labels = load_labels(&p).unwrap();
        let summary = LabelSummary::from_labels(labels.values());
        let text = summary.to_string();
        assert!(text.contains("97.30%"), "{text}");
        assert!(text.contains("2.70%"), "{text}");
        for task in Task::ALL {
            assert_eq!(summary.counts[&task].iter().sum::<usize>(), 2000);
        }
    }
}
