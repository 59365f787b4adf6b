//! Cross-view pair construction: capture matching, sightline obstruction,
//! façade localization in the equirectangular panorama and masked chips.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use rstar::primitives::{GeomWithData, Rectangle};
use rstar::{RTree, AABB};
use serde::{Deserialize, Serialize};

use crate::domain::{BuildingFootprint, CaptureSample};
use crate::error::{Error, Result};
use crate::geometry::{
    bearing_deg, contains_point, locate_point, normalize_deg, segment_interior_entry, Bbox,
    Location, Point,
};
use crate::imaging::{sample_bilinear, to_rgb8};
use crate::raster::Raster;

/// Where the driving direction sits in the panorama.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanoramaConvention {
    /// Horizontal center column looks along the heading.
    #[default]
    HeadingCenter,
    /// Column 0 looks along the heading.
    HeadingLeft,
    /// Horizontal center column looks north, independent of heading.
    NorthCenter,
}

impl PanoramaConvention {
    /// Bearing seen at the left edge of column 0.
    fn column_zero_bearing(self, heading_deg: f64) -> f64 {
        match self {
            PanoramaConvention::HeadingCenter => heading_deg - 180.0,
            PanoramaConvention::HeadingLeft => heading_deg,
            PanoramaConvention::NorthCenter => 180.0,
        }
    }

    /// Continuous column in `[0, width)` for an absolute bearing.
    pub fn column_of(self, bearing: f64, heading_deg: f64, width: u32) -> f64 {
        let rel = normalize_deg(bearing - self.column_zero_bearing(heading_deg));
        rel / 360.0 * width as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisibilityMode {
    /// One sightline from the capture to the footprint centroid.
    #[default]
    SingleRay,
    /// Centroid ray plus rays to the two angular extremes of the footprint;
    /// obstructed only if every ray is blocked.
    Fan3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    pub max_match_distance: f64,
    pub pad_deg: f64,
    pub chip_size: u32,
    pub fill: [u8; 3],
    pub min_mask_fraction: f64,
    /// Panorama row band as fractions of height, top to bottom.
    pub elevation_band: [f64; 2],
    pub convention: PanoramaConvention,
    pub visibility: VisibilityMode,
    /// Assumed wall height used to project the footprint into the panorama.
    pub facade_height_m: f64,
    pub camera_height_m: f64,
    /// Extra margin around the square top-view crop, as a fraction of its side.
    pub top_margin: f64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            max_match_distance: 30.0,
            pad_deg: 5.0,
            chip_size: 256,
            fill: [128, 128, 128],
            min_mask_fraction: 0.01,
            elevation_band: [0.25, 0.75],
            convention: PanoramaConvention::HeadingCenter,
            visibility: VisibilityMode::SingleRay,
            facade_height_m: 6.0,
            camera_height_m: 2.5,
            top_margin: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VisibilityStatus {
    NonResidential,
    TooFar,
    Obstructed,
    Usable,
}

impl VisibilityStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            VisibilityStatus::NonResidential => "NonResidential",
            VisibilityStatus::TooFar => "TooFar",
            VisibilityStatus::Obstructed => "Obstructed",
            VisibilityStatus::Usable => "Usable",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityVerdict {
    pub building_id: String,
    pub status: VisibilityStatus,
    pub blocking_id: Option<String>,
}

impl VisibilityVerdict {
    fn new(building_id: &str, status: VisibilityStatus) -> Self {
        Self {
            building_id: building_id.to_string(),
            status,
            blocking_id: None,
        }
    }
}

/// Spatial index over capture positions.
pub struct CaptureLocator<'a> {
    captures: &'a [CaptureSample],
    tree: RTree<GeomWithData<[f64; 2], usize>>,
}

impl<'a> CaptureLocator<'a> {
    pub fn new(captures: &'a [CaptureSample]) -> Self {
        let items = captures
            .iter()
            .enumerate()
            .map(|(i, c)| GeomWithData::new([c.position.x, c.position.y], i))
            .collect();
        Self {
            captures,
            tree: RTree::bulk_load(items),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.captures.is_empty()
    }
}

/// Nearest capture to the footprint centroid, ties broken by the smaller
/// capture id. `None` when nothing lies within `max_distance`.
pub fn nearest_capture<'a>(
    building: &BuildingFootprint,
    captures: &CaptureLocator<'a>,
    max_distance: f64,
) -> Option<(&'a CaptureSample, f64)> {
    let q = [building.centroid.x, building.centroid.y];
    let mut best: Option<(usize, f64)> = None;
    for (item, d2) in captures.tree.nearest_neighbor_iter_with_distance_2(q) {
        match best {
            None => best = Some((item.data, d2)),
            Some((bi, bd2)) => {
                if d2 > bd2 {
                    break;
                }
                if captures.captures[item.data].id < captures.captures[bi].id {
                    best = Some((item.data, d2));
                }
            }
        }
    }
    let (i, d2) = best?;
    let d = d2.sqrt();
    (d <= max_distance).then(|| (&captures.captures[i], d))
}

/// Bounding-box index over footprints.
pub struct FootprintIndex<'a> {
    footprints: &'a [BuildingFootprint],
    tree: RTree<GeomWithData<Rectangle<[f64; 2]>, usize>>,
}

impl<'a> FootprintIndex<'a> {
    pub fn new(footprints: &'a [BuildingFootprint]) -> Self {
        let items = footprints
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let b = Bbox::of(&f.polygon);
                GeomWithData::new(
                    Rectangle::from_corners([b.min_x, b.min_y], [b.max_x, b.max_y]),
                    i,
                )
            })
            .collect();
        Self {
            footprints,
            tree: RTree::bulk_load(items),
        }
    }

    pub fn footprints(&self) -> &'a [BuildingFootprint] {
        self.footprints
    }

    /// First other footprint whose interior the segment enters, with the
    /// entry distance along the segment.
    fn first_blocker(&self, from: Point, to: Point, exclude: &str) -> Option<(&'a BuildingFootprint, f64)> {
        let env = AABB::from_corners(
            [from.x.min(to.x), from.y.min(to.y)],
            [from.x.max(to.x), from.y.max(to.y)],
        );
        let len = from.distance(to);
        let mut best: Option<(&BuildingFootprint, f64)> = None;
        for item in self.tree.locate_in_envelope_intersecting(env) {
            let f = &self.footprints[item.data];
            if f.id == exclude {
                continue;
            }
            if let Some(t) = segment_interior_entry(from, to, &f.polygon) {
                let d = t * len;
                let better = match best {
                    None => true,
                    Some((bf, bd)) => d < bd - 1e-9 || ((d - bd).abs() <= 1e-9 && f.id < bf.id),
                };
                if better {
                    best = Some((f, d));
                }
            }
        }
        best
    }
}

/// Sightline obstruction test between a capture and a matched building.
pub fn visibility_test(
    building: &BuildingFootprint,
    capture: &CaptureSample,
    all_footprints: &FootprintIndex<'_>,
    mode: VisibilityMode,
) -> VisibilityVerdict {
    let from = capture.position;
    let centre = all_footprints.first_blocker(from, building.centroid, &building.id);
    let blocked = match (mode, centre) {
        (_, None) => None,
        (VisibilityMode::SingleRay, Some(b)) => Some(b),
        (VisibilityMode::Fan3, Some(b)) => {
            let extremes = extreme_vertices(from, building);
            let all_blocked = extremes.iter().all(|&v| {
                // pull slightly inside so the ray does not graze the corner
                let target = v.lerp(building.centroid, 0.1);
                all_footprints.first_blocker(from, target, &building.id).is_some()
            });
            all_blocked.then_some(b)
        }
    };
    match blocked {
        Some((f, _)) => VisibilityVerdict {
            building_id: building.id.clone(),
            status: VisibilityStatus::Obstructed,
            blocking_id: Some(f.id.clone()),
        },
        None => VisibilityVerdict::new(&building.id, VisibilityStatus::Usable),
    }
}

fn extreme_vertices(from: Point, building: &BuildingFootprint) -> [Point; 2] {
    let base = bearing_deg(from, building.centroid);
    let pts = crate::geometry::open_ring(&building.polygon);
    let signed = |p: Point| {
        let d = normalize_deg(bearing_deg(from, p) - base);
        if d > 180.0 {
            d - 360.0
        } else {
            d
        }
    };
    let lo = pts
        .iter()
        .copied()
        .min_by(|a, b| signed(*a).total_cmp(&signed(*b)))
        .unwrap();
    let hi = pts
        .iter()
        .copied()
        .max_by(|a, b| signed(*a).total_cmp(&signed(*b)))
        .unwrap();
    [lo, hi]
}

/// Angular interval relative to the heading, in degrees. `end < start`
/// means the interval wraps through 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularWindow {
    pub start_deg: f64,
    pub end_deg: f64,
}

impl AngularWindow {
    pub fn new(start_deg: f64, end_deg: f64) -> Self {
        Self {
            start_deg: normalize_deg(start_deg),
            end_deg: normalize_deg(end_deg),
        }
    }

    pub fn width_deg(&self) -> f64 {
        normalize_deg(self.end_deg - self.start_deg)
    }

    pub fn is_wrapped(&self) -> bool {
        self.end_deg < self.start_deg
    }

    pub fn contains(&self, rel_deg: f64) -> bool {
        normalize_deg(rel_deg - self.start_deg) <= self.width_deg()
    }
}

/// Angular span of the footprint as seen from the capture, relative to the
/// driving direction and padded by `pad_deg` on each side.
pub fn facade_angular_window(
    capture: &CaptureSample,
    building: &BuildingFootprint,
    pad_deg: f64,
) -> Result<AngularWindow> {
    if locate_point(capture.position, &building.polygon, 1e-9) != Location::Outside {
        return Err(Error::CaptureInsideBuilding {
            capture: capture.id.clone(),
            building: building.id.clone(),
        });
    }
    let mut rel: Vec<f64> = crate::geometry::open_ring(&building.polygon)
        .iter()
        .map(|&v| normalize_deg(bearing_deg(capture.position, v) - capture.heading_deg))
        .collect();
    rel.sort_by(f64::total_cmp);
    // the occupied arc is the complement of the largest empty gap
    let n = rel.len();
    let mut gap_end = 0;
    let mut largest = -1.0;
    for i in 0..n {
        let next = if i + 1 < n { rel[i + 1] } else { rel[0] + 360.0 };
        let gap = next - rel[i];
        if gap > largest {
            largest = gap;
            gap_end = (i + 1) % n;
        }
    }
    let start = rel[gap_end];
    let end = rel[(gap_end + n - 1) % n];
    let span = normalize_deg(end - start);
    if span + 2.0 * pad_deg >= 360.0 {
        return Ok(AngularWindow::new(0.0, 360.0 - 1e-9));
    }
    Ok(AngularWindow::new(start - pad_deg, end + pad_deg))
}

/// Integer panorama columns covered by `window`, in left-to-right order,
/// before any resampling.
pub fn window_columns(
    window: &AngularWindow,
    heading_deg: f64,
    width: u32,
    convention: PanoramaConvention,
) -> Vec<u32> {
    let start = convention.column_of(heading_deg + window.start_deg, heading_deg, width);
    let n = (window.width_deg() / 360.0 * width as f64).round() as i64;
    let s = start.round() as i64;
    (0..n).map(|k| (s + k).rem_euclid(width as i64) as u32).collect()
}

/// Which panorama pixels belong to the target building.
#[derive(Clone, Debug)]
pub enum FacadeMask {
    Full,
    Empty,
    /// Extrude the footprint to a fixed wall height and keep pixels whose
    /// elevation angle falls between the wall foot and top along each azimuth.
    Footprint {
        origin: Point,
        ring: Vec<Point>,
        camera_height_m: f64,
        wall_height_m: f64,
    },
}

impl FacadeMask {
    pub fn for_building(capture: &CaptureSample, building: &BuildingFootprint, cfg: &PairingConfig) -> Self {
        FacadeMask::Footprint {
            origin: capture.position,
            ring: building.polygon.clone(),
            camera_height_m: cfg.camera_height_m,
            wall_height_m: cfg.facade_height_m,
        }
    }

    /// Elevation interval (degrees, bottom to top) covered along `bearing`.
    pub fn elevation_span(&self, bearing: f64) -> Option<(f64, f64)> {
        match self {
            FacadeMask::Full => Some((-90.0, 90.0)),
            FacadeMask::Empty => None,
            FacadeMask::Footprint {
                origin,
                ring,
                camera_height_m,
                wall_height_m,
            } => {
                let d = ray_hit_distance(*origin, bearing, ring)?;
                let bottom = (-camera_height_m).atan2(d).to_degrees();
                let top = (wall_height_m - camera_height_m).atan2(d).to_degrees();
                Some((bottom, top))
            }
        }
    }
}

/// Distance along a compass bearing to the first crossing of the ring.
fn ray_hit_distance(origin: Point, bearing: f64, ring: &[Point]) -> Option<f64> {
    let (s, c) = bearing.to_radians().sin_cos();
    let dir = Point::new(s, c);
    let pts = crate::geometry::open_ring(ring);
    let n = pts.len();
    let mut best: Option<f64> = None;
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        let e = Point::new(b.x - a.x, b.y - a.y);
        let denom = dir.x * e.y - dir.y * e.x;
        if denom.abs() < 1e-15 {
            continue;
        }
        let w = Point::new(a.x - origin.x, a.y - origin.y);
        let t = (w.x * e.y - w.y * e.x) / denom;
        let u = (w.x * dir.y - w.y * dir.x) / denom;
        if t > 0.0 && (0.0..=1.0).contains(&u) {
            best = Some(best.map_or(t, |bt: f64| bt.min(t)));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedChip {
    pub image: RgbImage,
    /// Fraction of chip pixels that are not fill.
    pub mask_fraction: f64,
}

/// Resample the panorama segment under `window` into a square chip, keeping
/// only pixels selected by `mask`.
pub fn extract_facade_chip(
    panorama: &RgbImage,
    heading_deg: f64,
    window: &AngularWindow,
    mask: &FacadeMask,
    cfg: &PairingConfig,
) -> Result<MaskedChip> {
    let width_deg = window.width_deg();
    if width_deg <= 0.0 {
        return Err(Error::DegenerateWindow);
    }
    let s = cfg.chip_size;
    let (w, h) = panorama.dimensions();
    let r0 = cfg.elevation_band[0] * h as f64;
    let r1 = cfg.elevation_band[1] * h as f64;
    let mut out = RgbImage::from_pixel(s, s, Rgb(cfg.fill));
    let mut kept = 0usize;
    for i in 0..s {
        let rel = window.start_deg + (i as f64 + 0.5) / s as f64 * width_deg;
        let bearing = heading_deg + rel;
        let Some((lo, hi)) = mask.elevation_span(bearing) else {
            continue;
        };
        let u = cfg.convention.column_of(bearing, heading_deg, w);
        for j in 0..s {
            let v = r0 + (j as f64 + 0.5) / s as f64 * (r1 - r0);
            let elev = 90.0 - v / h as f64 * 180.0;
            if elev < lo || elev > hi {
                continue;
            }
            let mut px = to_rgb8(sample_bilinear(panorama, u, v, true));
            if px.0 == cfg.fill {
                px.0[0] ^= 1;
            }
            out.put_pixel(i, j, px);
            kept += 1;
        }
    }
    Ok(MaskedChip {
        image: out,
        mask_fraction: kept as f64 / (s as f64 * s as f64),
    })
}

/// Square top-view crop around the footprint with exterior pixels set to fill.
pub fn extract_top_chip(
    uav: &Raster,
    footprint: &BuildingFootprint,
    cfg: &PairingConfig,
) -> Result<MaskedChip> {
    let bbox = Bbox::of(&footprint.polygon);
    if !uav.extent().contains_bbox(&bbox) {
        return Err(Error::OutOfExtent(footprint.id.clone()));
    }
    let side = bbox.width().max(bbox.height()) * (1.0 + 2.0 * cfg.top_margin);
    let c = bbox.center();
    let (x0, y1) = (c.x - side / 2.0, c.y + side / 2.0);
    let s = cfg.chip_size;
    let mut out = RgbImage::from_pixel(s, s, Rgb(cfg.fill));
    let mut buf = vec![0.0f32; uav.band_count()];
    let mut kept = 0usize;
    let mut inside = 0usize;
    for j in 0..s {
        for i in 0..s {
            let p = Point::new(
                x0 + (i as f64 + 0.5) / s as f64 * side,
                y1 - (j as f64 + 0.5) / s as f64 * side,
            );
            if !contains_point(&footprint.polygon, p) {
                continue;
            }
            inside += 1;
            let (u, v) = uav.transform.world_to_pixel(p);
            if !uav.sample_bilinear(u, v, &mut buf) {
                continue;
            }
            let rgb = if buf.len() >= 3 {
                [buf[0], buf[1], buf[2]]
            } else {
                [buf[0]; 3]
            };
            let mut px = to_rgb8(rgb);
            if px.0 == cfg.fill {
                px.0[0] ^= 1;
            }
            out.put_pixel(i, j, px);
            kept += 1;
        }
    }
    if inside > 0 && kept == 0 {
        return Err(Error::AllNodata(footprint.id.clone()));
    }
    Ok(MaskedChip {
        image: out,
        mask_fraction: kept as f64 / (s as f64 * s as f64),
    })
}

/// Source of panorama pixels for a capture.
pub trait PanoramaSource: Sync {
    fn load(&self, capture: &CaptureSample) -> Result<RgbImage>;
}

/// Reads each capture's `image_ref` from disk.
pub struct FilePanoramas;

impl PanoramaSource for FilePanoramas {
    fn load(&self, capture: &CaptureSample) -> Result<RgbImage> {
        Ok(image::open(&capture.image_ref)?.to_rgb8())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossViewPair {
    pub building_id: String,
    pub top_chip: RgbImage,
    pub facade_chip: RgbImage,
    pub capture_id: String,
    pub match_distance_m: f64,
    pub mask_fraction_top: f64,
    pub mask_fraction_facade: f64,
}

/// Per-building outcome of pairing, one row of the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingRecord {
    pub building_id: String,
    pub status: VisibilityStatus,
    pub capture_id: Option<String>,
    pub match_distance_m: Option<f64>,
    pub blocking_id: Option<String>,
    pub mask_fraction_top: Option<f64>,
    pub mask_fraction_facade: Option<f64>,
    pub emitted: bool,
    pub note: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub non_residential: usize,
    pub too_far: usize,
    pub obstructed: usize,
    pub usable: usize,
    /// Usable buildings whose chips were written.
    pub emitted: usize,
}

impl Census {
    pub fn as_tuple(&self) -> (usize, usize, usize, usize) {
        (self.non_residential, self.too_far, self.obstructed, self.usable)
    }
}

#[derive(Clone, Debug, Default)]
pub struct CrossViewDataset {
    pub pairs: Vec<CrossViewPair>,
    pub records: Vec<PairingRecord>,
    pub census: Census,
}

struct Matched<'a> {
    building: &'a BuildingFootprint,
    capture: &'a CaptureSample,
    distance: f64,
}

fn classify<'a>(
    building: &'a BuildingFootprint,
    locator: &CaptureLocator<'a>,
    index: &FootprintIndex<'a>,
    cfg: &PairingConfig,
) -> (PairingRecord, Option<Matched<'a>>) {
    let mut rec = PairingRecord {
        building_id: building.id.clone(),
        status: VisibilityStatus::NonResidential,
        capture_id: None,
        match_distance_m: None,
        blocking_id: None,
        mask_fraction_top: None,
        mask_fraction_facade: None,
        emitted: false,
        note: None,
    };
    if !building.is_residential {
        return (rec, None);
    }
    let Some((capture, distance)) = nearest_capture(building, locator, cfg.max_match_distance) else {
        rec.status = VisibilityStatus::TooFar;
        return (rec, None);
    };
    rec.capture_id = Some(capture.id.clone());
    rec.match_distance_m = Some(distance);
    let verdict = visibility_test(building, capture, index, cfg.visibility);
    rec.status = verdict.status;
    rec.blocking_id = verdict.blocking_id;
    if rec.status != VisibilityStatus::Usable {
        return (rec, None);
    }
    (
        rec,
        Some(Matched {
            building,
            capture,
            distance,
        }),
    )
}

fn extract_pair(
    m: &Matched<'_>,
    panorama: &RgbImage,
    uav: &Raster,
    cfg: &PairingConfig,
) -> Result<(CrossViewPair, f64, f64)> {
    let top = extract_top_chip(uav, m.building, cfg)?;
    let window = facade_angular_window(m.capture, m.building, cfg.pad_deg)?;
    let mask = FacadeMask::for_building(m.capture, m.building, cfg);
    let facade = extract_facade_chip(panorama, m.capture.heading_deg, &window, &mask, cfg)?;
    let (ft, ff) = (top.mask_fraction, facade.mask_fraction);
    Ok((
        CrossViewPair {
            building_id: m.building.id.clone(),
            top_chip: top.image,
            facade_chip: facade.image,
            capture_id: m.capture.id.clone(),
            match_distance_m: m.distance,
            mask_fraction_top: ft,
            mask_fraction_facade: ff,
        },
        ft,
        ff,
    ))
}

/// Run matching, visibility and chip extraction for every footprint.
/// Per-building failures are recorded in the manifest and never abort the run.
pub fn build_dataset(
    footprints: &[BuildingFootprint],
    captures: &[CaptureSample],
    uav: &Raster,
    panoramas: &dyn PanoramaSource,
    cfg: &PairingConfig,
) -> CrossViewDataset {
    let locator = CaptureLocator::new(captures);
    let index = FootprintIndex::new(footprints);
    let mut order: Vec<&BuildingFootprint> = footprints.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    let classified: Vec<(PairingRecord, Option<Matched<'_>>)> = order
        .par_iter()
        .map(|b| classify(b, &locator, &index, cfg))
        .collect();

    // group matched buildings by capture so each panorama is decoded once
    let mut by_capture: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, m)) in classified.iter().enumerate() {
        if let Some(m) = m {
            by_capture.entry(m.capture.id.as_str()).or_default().push(i);
        }
    }
    let groups: Vec<(&str, Vec<usize>)> = by_capture.into_iter().collect();
    let extracted: Vec<Vec<(usize, Result<(CrossViewPair, f64, f64)>)>> = groups
        .par_iter()
        .map(|(_, idxs)| {
            let capture = classified[idxs[0]].1.as_ref().unwrap().capture;
            match panoramas.load(capture) {
                Ok(pano) => idxs
                    .iter()
                    .map(|&i| (i, extract_pair(classified[i].1.as_ref().unwrap(), &pano, uav, cfg)))
                    .collect(),
                Err(e) => {
                    let msg = e.to_string();
                    idxs.iter()
                        .map(|&i| (i, Err(Error::Raster(format!("panorama: {msg}")))))
                        .collect()
                }
            }
        })
        .collect();

    let mut records: Vec<PairingRecord> = classified.iter().map(|(r, _)| r.clone()).collect();
    let mut pairs_by_idx: BTreeMap<usize, CrossViewPair> = BTreeMap::new();
    for (i, res) in extracted.into_iter().flatten() {
        let rec = &mut records[i];
        match res {
            Ok((pair, ft, ff)) => {
                rec.mask_fraction_top = Some(ft);
                rec.mask_fraction_facade = Some(ff);
                if ft < cfg.min_mask_fraction || ff < cfg.min_mask_fraction {
                    rec.note = Some(format!(
                        "rejected: mask fraction below {} (top {ft:.4}, facade {ff:.4})",
                        cfg.min_mask_fraction
                    ));
                } else {
                    rec.emitted = true;
                    pairs_by_idx.insert(i, pair);
                }
            }
            Err(e) => rec.note = Some(e.to_string()),
        }
    }

    let mut census = Census::default();
    for r in &records {
        match r.status {
            VisibilityStatus::NonResidential => census.non_residential += 1,
            VisibilityStatus::TooFar => census.too_far += 1,
            VisibilityStatus::Obstructed => census.obstructed += 1,
            VisibilityStatus::Usable => census.usable += 1,
        }
    }
    census.emitted = pairs_by_idx.len();
    CrossViewDataset {
        pairs: pairs_by_idx.into_values().collect(),
        records,
        census,
    }
}

/// File-name-safe form of a building id.
pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// One manifest row as written to `manifest.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub building_id: String,
    pub capture_id: Option<String>,
    pub match_distance_m: Option<f64>,
    pub status: VisibilityStatus,
    pub blocking_id: Option<String>,
    pub mask_fraction_top: Option<f64>,
    pub mask_fraction_facade: Option<f64>,
    pub top_chip: Option<String>,
    pub facade_chip: Option<String>,
    pub note: Option<String>,
}

/// Write chips as `chips/<id>_{top|facade}.png`, `manifest.csv` and `census.json`.
pub fn write_dataset(dir: &Path, ds: &CrossViewDataset) -> Result<PathBuf> {
    let chips = dir.join("chips");
    std::fs::create_dir_all(&chips).map_err(|e| Error::io(&chips, e))?;
    let pairs: BTreeMap<&str, &CrossViewPair> =
        ds.pairs.iter().map(|p| (p.building_id.as_str(), p)).collect();
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    for r in &ds.records {
        let (top, facade) = match pairs.get(r.building_id.as_str()) {
            Some(p) => {
                let stem = sanitize_id(&p.building_id);
                let top = format!("chips/{stem}_top.png");
                let facade = format!("chips/{stem}_facade.png");
                p.top_chip.save(dir.join(&top))?;
                p.facade_chip.save(dir.join(&facade))?;
                (Some(top), Some(facade))
            }
            None => (None, None),
        };
        w.serialize(ManifestRow {
            building_id: r.building_id.clone(),
            capture_id: r.capture_id.clone(),
            match_distance_m: r.match_distance_m,
            status: r.status,
            blocking_id: r.blocking_id.clone(),
            mask_fraction_top: r.mask_fraction_top,
            mask_fraction_facade: r.mask_fraction_facade,
            top_chip: top,
            facade_chip: facade,
            note: r.note.clone(),
        })?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    let census_path = dir.join("census.json");
    std::fs::write(&census_path, serde_json::to_string_pretty(&ds.census)?)
        .map_err(|e| Error::io(&census_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Load the chip pair referenced by a manifest row (relative to the manifest's directory).
pub fn load_pair(manifest_dir: &Path, row: &ManifestRow) -> Result<Option<CrossViewPair>> {
    let (Some(top), Some(facade), Some(capture)) = (&row.top_chip, &row.facade_chip, &row.capture_id) else {
        return Ok(None);
    };
    Ok(Some(CrossViewPair {
        building_id: row.building_id.clone(),
        top_chip: image::open(manifest_dir.join(top))?.to_rgb8(),
        facade_chip: image::open(manifest_dir.join(facade))?.to_rgb8(),
        capture_id: capture.clone(),
        match_distance_m: row.match_distance_m.unwrap_or(f64::NAN),
        mask_fraction_top: row.mask_fraction_top.unwrap_or(0.0),
        mask_fraction_facade: row.mask_fraction_facade.unwrap_or(0.0),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normalize_ring;
    use crate::raster::GeoTransform;

    pub(crate) fn rect(id: &str, x0: f64, y0: f64, w: f64, h: f64, residential: bool) -> BuildingFootprint {
        let ring = normalize_ring(&[
            Point::new(x0, y0),
            Point::new(x0 + w, y0),
            Point::new(x0 + w, y0 + h),
            Point::new(x0, y0 + h),
        ])
        .unwrap();
        BuildingFootprint::new(id, ring, residential)
    }

    pub(crate) fn capture(id: &str, x: f64, y: f64, heading: f64) -> CaptureSample {
        CaptureSample {
            id: id.to_string(),
            position: Point::new(x, y),
            heading_deg: heading,
            image_ref: PathBuf::from(format!("{id}.png")),
            width_px: 360,
            height_px: 180,
        }
    }

    fn centred(id: &str, cx: f64, cy: f64) -> BuildingFootprint {
        rect(id, cx - 1.0, cy - 1.0, 2.0, 2.0, true)
    }

    #[test]
    fn nearest_capture_unique_minimum() {
        let b = centred("b", 0.0, 0.0);
        let caps = vec![capture("c1", 10.0, 0.0, 0.0), capture("c2", 0.0, 25.0, 0.0)];
        let loc = CaptureLocator::new(&caps);
        let (c, d) = nearest_capture(&b, &loc, 30.0).unwrap();
        assert_eq!(c.id, "c1");
        assert_eq!(d, 10.0);
    }

    #[test]
    fn nearest_capture_beyond_threshold() {
        let b = centred("b", 0.0, 0.0);
        let caps = vec![capture("c1", 0.0, 31.0, 0.0)];
        let loc = CaptureLocator::new(&caps);
        assert!(nearest_capture(&b, &loc, 30.0).is_none());
        let caps = vec![capture("c1", 0.0, 30.0, 0.0)];
        let loc = CaptureLocator::new(&caps);
        assert!(nearest_capture(&b, &loc, 30.0).is_some());
    }

    #[test]
    fn nearest_capture_tie_prefers_smaller_id() {
        let b = centred("b", 0.0, 0.0);
        for caps in [
            vec![capture("zeta", 5.0, 0.0, 0.0), capture("alpha", -5.0, 0.0, 0.0)],
            vec![capture("alpha", -5.0, 0.0, 0.0), capture("zeta", 5.0, 0.0, 0.0)],
        ] {
            let loc = CaptureLocator::new(&caps);
            assert_eq!(nearest_capture(&b, &loc, 30.0).unwrap().0.id, "alpha");
        }
    }

    #[test]
    fn visibility_empty_scene_is_usable() {
        let target = centred("t", 20.0, 0.0);
        let all = vec![target.clone()];
        let idx = FootprintIndex::new(&all);
        let v = visibility_test(&target, &capture("c", 0.0, 0.0, 0.0), &idx, VisibilityMode::SingleRay);
        assert_eq!(v.status, VisibilityStatus::Usable);
        assert!(v.blocking_id.is_none());
    }

    #[test]
    fn visibility_blocker_on_midpoint() {
        let target = centred("t", 20.0, 0.0);
        let blocker = rect("blk", 8.0, -2.0, 4.0, 4.0, true);
        let far = rect("far", 14.0, -2.0, 2.0, 4.0, true);
        let all = vec![target.clone(), far, blocker];
        let idx = FootprintIndex::new(&all);
        let v = visibility_test(&target, &capture("c", 0.0, 0.0, 0.0), &idx, VisibilityMode::SingleRay);
        assert_eq!(v.status, VisibilityStatus::Obstructed);
        assert_eq!(v.blocking_id.as_deref(), Some("blk"));
    }

    #[test]
    fn visibility_touching_only_at_target_boundary() {
        // triangle leaning on the target's near wall (x = 19); it meets the
        // sightline only at (19, 0), a point of the target's boundary
        let target = centred("t", 20.0, 0.0);
        let tri = normalize_ring(&[Point::new(19.0, 0.0), Point::new(19.0, 3.0), Point::new(17.0, 3.0)]).unwrap();
        let blocker = BuildingFootprint::new("touch", tri, true);
        let all = vec![target.clone(), blocker];
        let idx = FootprintIndex::new(&all);
        let v = visibility_test(&target, &capture("c", 0.0, 0.0, 0.0), &idx, VisibilityMode::SingleRay);
        assert_eq!(v.status, VisibilityStatus::Usable);
    }

    #[test]
    fn fan_mode_needs_all_rays_blocked() {
        let target = rect("t", 18.0, -3.0, 4.0, 6.0, true);
        let narrow = rect("n", 9.0, -0.5, 1.0, 1.0, true);
        let all = vec![target.clone(), narrow];
        let idx = FootprintIndex::new(&all);
        let c = capture("c", 0.0, 0.0, 0.0);
        assert_eq!(visibility_test(&target, &c, &idx, VisibilityMode::SingleRay).status, VisibilityStatus::Obstructed);
        assert_eq!(visibility_test(&target, &c, &idx, VisibilityMode::Fan3).status, VisibilityStatus::Usable);
        let wide = rect("w", 9.0, -5.0, 1.0, 10.0, true);
        let all = vec![target.clone(), wide];
        let idx = FootprintIndex::new(&all);
        let v = visibility_test(&target, &c, &idx, VisibilityMode::Fan3);
        assert_eq!(v.status, VisibilityStatus::Obstructed);
        assert_eq!(v.blocking_id.as_deref(), Some("w"));
    }

    #[test]
    fn window_for_building_due_east() {
        // square of side 2 whose near corners subtend ±10° from the capture
        let d = 1.0 / 10f64.to_radians().tan() + 1.0;
        let b = rect("b", d - 1.0, -1.0, 2.0, 2.0, true);
        let c = capture("c", 0.0, 0.0, 0.0);
        let w = facade_angular_window(&c, &b, 5.0).unwrap();
        // brute-force oracle: per-vertex bearings
        let bearings: Vec<f64> = crate::geometry::open_ring(&b.polygon)
            .iter()
            .map(|&v| bearing_deg(c.position, v))
            .collect();
        let lo = bearings.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = bearings.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo - 80.0).abs() < 1e-9 && (hi - 100.0).abs() < 1e-9);
        assert!((w.start_deg - 75.0).abs() < 1e-9, "{w:?}");
        assert!((w.end_deg - 105.0).abs() < 1e-9, "{w:?}");
    }

    #[test]
    fn window_centered_on_heading() {
        let b = centred("b", 10.0, 0.0);
        let c = capture("c", 0.0, 0.0, 90.0);
        let w = facade_angular_window(&c, &b, 0.0).unwrap();
        assert!(w.is_wrapped());
        let mid = normalize_deg(w.start_deg + w.width_deg() / 2.0);
        assert!(mid < 1e-9 || (360.0 - mid) < 1e-9, "{w:?}");
    }

    #[test]
    fn window_wraps_through_zero() {
        // heading south, building dead ahead: relative bearings straddle 0
        let b = centred("b", 0.0, -10.0);
        let c = capture("c", 0.0, 0.0, 180.0);
        let w = facade_angular_window(&c, &b, 0.0).unwrap();
        let half = (1.0f64 / 9.0).atan().to_degrees();
        assert!((w.start_deg - (360.0 - half)).abs() < 1e-9, "{w:?}");
        assert!((w.end_deg - half).abs() < 1e-9, "{w:?}");
        assert!(w.is_wrapped());
        let padded = facade_angular_window(&c, &b, 5.0).unwrap();
        assert!((padded.width_deg() - (2.0 * half + 10.0)).abs() < 1e-9);
    }

    #[test]
    fn window_inside_building_is_error() {
        let b = centred("b", 0.0, 0.0);
        let c = capture("c", 0.0, 0.0, 0.0);
        assert!(matches!(
            facade_angular_window(&c, &b, 5.0),
            Err(Error::CaptureInsideBuilding { .. })
        ));
    }

    #[test]
    fn column_mapping_proportional() {
        let w = AngularWindow::new(0.0, 36.0);
        let cols = window_columns(&w, 123.0, 3600, PanoramaConvention::HeadingLeft);
        assert_eq!(cols.len(), 360);
        assert_eq!(cols[0], 0);
        assert_eq!(*cols.last().unwrap(), 359);
        let centred = window_columns(&w, 123.0, 3600, PanoramaConvention::HeadingCenter);
        assert_eq!(centred[0], 1800);
    }

    #[test]
    fn wrapped_columns_stitch_both_edges() {
        let w = AngularWindow::new(350.0, 10.0);
        let cols = window_columns(&w, 0.0, 3600, PanoramaConvention::HeadingLeft);
        assert_eq!(cols.len(), 200);
        assert_eq!(cols[0], 3500);
        assert_eq!(cols[99], 3599);
        assert_eq!(cols[100], 0);
        assert_eq!(cols[199], 99);
    }

    #[test]
    fn wrapped_facade_chip_on_gradient_panorama() {
        // red channel encodes column / 10; window (350, 10) on a 3600-px
        // panorama maps chip column i to source column 3500 + 10 i (mod 3600)
        let pano = RgbImage::from_fn(3600, 1800, |x, _| Rgb([(x / 15) as u8, 0, 255]));
        let cfg = PairingConfig {
            chip_size: 20,
            convention: PanoramaConvention::HeadingLeft,
            ..Default::default()
        };
        let w = AngularWindow::new(350.0, 10.0);
        let chip = extract_facade_chip(&pano, 0.0, &w, &FacadeMask::Full, &cfg).unwrap();
        assert_eq!(chip.mask_fraction, 1.0);
        for i in 0..20u32 {
            let src_col = (3500.0 + (i as f64 + 0.5) * 10.0) % 3600.0;
            let expected = pano.get_pixel(src_col as u32, 900).0[0];
            let got = chip.image.get_pixel(i, 10).0[0];
            assert!((got as i32 - expected as i32).abs() <= 1, "col {i}: {got} vs {expected}");
        }
        // left half from the right edge, right half from the left edge
        assert!(chip.image.get_pixel(0, 0).0[0] > 200);
        assert!(chip.image.get_pixel(19, 0).0[0] < 10);
    }

    #[test]
    fn empty_mask_gives_pure_fill() {
        let pano = RgbImage::from_pixel(360, 180, Rgb([10, 200, 30]));
        let cfg = PairingConfig {
            chip_size: 16,
            ..Default::default()
        };
        let chip = extract_facade_chip(&pano, 0.0, &AngularWindow::new(10.0, 40.0), &FacadeMask::Empty, &cfg).unwrap();
        assert_eq!(chip.mask_fraction, 0.0);
        assert!(chip.image.pixels().all(|p| p.0 == cfg.fill));
    }

    #[test]
    fn zero_width_window_rejected() {
        let pano = RgbImage::new(360, 180);
        let r = extract_facade_chip(&pano, 0.0, &AngularWindow::new(10.0, 10.0), &FacadeMask::Full, &PairingConfig::default());
        assert!(matches!(r, Err(Error::DegenerateWindow)));
    }

    fn constant_raster(value: [f32; 3]) -> Raster {
        let t = GeoTransform::north_up(-50.0, 50.0, 0.5);
        let bands = value.iter().map(|&v| vec![v; 200 * 200]).collect();
        Raster::new(t, 200, 200, bands, None).unwrap()
    }

    #[test]
    fn top_chip_constant_raster() {
        let r = constant_raster([200.0, 50.0, 10.0]);
        let fp = rect("u", 0.0, 0.0, 1.0, 1.0, true);
        let cfg = PairingConfig {
            chip_size: 32,
            ..Default::default()
        };
        let chip = extract_top_chip(&r, &fp, &cfg).unwrap();
        assert!(chip.mask_fraction > 0.99);
        assert!(chip.image.pixels().all(|p| p.0 == [200, 50, 10]));

        let l = rect("u2", 0.0, 0.0, 1.0, 2.0, true);
        let chip = extract_top_chip(&r, &l, &cfg).unwrap();
        let interior = chip.image.pixels().filter(|p| p.0 == [200, 50, 10]).count();
        let fill = chip.image.pixels().filter(|p| p.0 == cfg.fill).count();
        assert_eq!(interior + fill, 32 * 32);
        assert!((chip.mask_fraction - 0.5).abs() < 0.02);
    }

    #[test]
    fn top_chip_out_of_extent() {
        let r = constant_raster([1.0, 1.0, 1.0]);
        let fp = rect("edge", 45.0, 0.0, 10.0, 4.0, true);
        assert!(matches!(
            extract_top_chip(&r, &fp, &PairingConfig::default()),
            Err(Error::OutOfExtent(_))
        ));
    }

    #[test]
    fn top_chip_all_nodata() {
        let mut r = constant_raster([-1.0, -1.0, -1.0]);
        r.nodata = Some(-1.0);
        let fp = rect("nd", 0.0, 0.0, 2.0, 2.0, true);
        let cfg = PairingConfig {
            chip_size: 8,
            ..Default::default()
        };
        assert!(matches!(extract_top_chip(&r, &fp, &cfg), Err(Error::AllNodata(_))));
    }

    #[test]
    fn l_shape_mask_fraction_matches_area_ratio() {
        let r = constant_raster([90.0, 90.0, 90.0]);
        let ring = normalize_ring(&[
            Point::new(0.0, 0.0),
            Point::new(8.0, 0.0),
            Point::new(8.0, 3.0),
            Point::new(3.0, 3.0),
            Point::new(3.0, 8.0),
            Point::new(0.0, 8.0),
        ])
        .unwrap();
        let fp = BuildingFootprint::new("L", ring, true);
        let chip = extract_top_chip(&r, &fp, &PairingConfig::default()).unwrap();
        let expected = fp.area() / 64.0;
        assert!(
            (chip.mask_fraction - expected).abs() / expected < 0.02,
            "{} vs {expected}",
            chip.mask_fraction
        );
    }
}
