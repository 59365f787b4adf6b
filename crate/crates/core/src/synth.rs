//! Synthetic scene generator: footprints along grid streets, street-level
//! panoramas, an RGB orthomosaic, a planted TIR raster and labels, written
//! in the same formats the ingest module reads.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::domain::{
    AttributeLabelSet, Floors, Openness, RoofMaterial, Task, Vegetation, WallMaterial,
};
use crate::error::{Error, Result};
use crate::geometry::{contains_point, open_ring, Bbox, Point};
use crate::pairing::PanoramaConvention;
use crate::raster::{write_geotiff, GeoTransform, Raster, SampleFormat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_buildings: usize,
    /// Buildings per street side.
    pub buildings_per_row: usize,
    /// Buildings placed at least 40 m from every street (counted in `n_buildings`).
    pub isolated: usize,
    pub residential_fraction: f64,
    pub labeled_fraction: f64,
    pub crs: String,
    pub origin: [f64; 2],
    pub gsd_m: f64,
    pub tir_gsd_m: f64,
    pub panorama_width: u32,
    pub convention: PanoramaConvention,
    pub camera_height_m: f64,
    pub wall_height_m: f64,
    pub vegetation_rate: f64,
    /// Probabilities of a vegetated building showing its greenery on the
    /// roof only, on the façade only, or on both.
    pub cue_split: [f64; 3],
    pub tir_base: f64,
    /// TIR offset for vegetated buildings.
    pub tir_vegetation_effect: f64,
    /// TIR change per unit of `(roof brightness − 128) / 128`.
    pub tir_roof_brightness_effect: f64,
    pub tir_noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_buildings: 200,
            buildings_per_row: 10,
            isolated: 0,
            residential_fraction: 1.0,
            labeled_fraction: 1.0,
            crs: "EPSG:32737".into(),
            origin: [530_000.0, 9_248_000.0],
            gsd_m: 0.25,
            tir_gsd_m: 3.5,
            panorama_width: 512,
            convention: PanoramaConvention::HeadingCenter,
            camera_height_m: 2.5,
            wall_height_m: 6.0,
            vegetation_rate: 0.5,
            cue_split: [0.35, 0.35, 0.3],
            tir_base: 40.0,
            tir_vegetation_effect: -4.0,
            tir_roof_brightness_effect: -6.0,
            tir_noise: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VegetationCue {
    None,
    Roof,
    Facade,
    Both,
}

impl VegetationCue {
    pub fn on_roof(self) -> bool {
        matches!(self, VegetationCue::Roof | VegetationCue::Both)
    }

    pub fn on_facade(self) -> bool {
        matches!(self, VegetationCue::Facade | VegetationCue::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBuilding {
    pub id: String,
    pub polygon: Vec<Point>,
    pub residential: bool,
    pub labeled: bool,
    pub isolated: bool,
    pub labels: AttributeLabelSet,
    pub vegetation_cue: VegetationCue,
    /// Mean channel value of the painted roof before greenery.
    pub roof_brightness: f64,
    pub tir: f64,
    #[serde(skip)]
    canopy: Vec<(Point, f64)>,
    #[serde(skip)]
    wall_tone: f64,
    #[serde(skip)]
    roof_rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCapture {
    pub id: String,
    pub position: Point,
    pub heading_deg: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub dir: PathBuf,
    pub footprints: PathBuf,
    pub captures: PathBuf,
    pub uav: PathBuf,
    pub tir: PathBuf,
    pub labels: PathBuf,
    pub truth: PathBuf,
    pub buildings: Vec<SyntheticBuilding>,
    pub capture_points: Vec<SyntheticCapture>,
}

const FRONTAGE_M: f64 = 16.0;
const BAND_M: f64 = 36.0;
const ROAD_HALF_M: f64 = 3.0;

fn pick<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Deterministic value noise in `[-1, 1]`.
fn noise(a: i64, b: i64, salt: u64) -> f64 {
    let mut z = (a as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add(salt.wrapping_mul(0x1656_67B1_9E37_79F9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn rgb(c: [f64; 3]) -> [f64; 3] {
    c.map(|v| v.clamp(0.0, 255.0))
}

fn roof_base(m: RoofMaterial) -> [f64; 3] {
    match m {
        RoofMaterial::Metal => [172.0, 176.0, 182.0],
        RoofMaterial::Concrete => [150.0, 148.0, 140.0],
        RoofMaterial::Clay => [182.0, 92.0, 62.0],
        RoofMaterial::Tarpaulin => [45.0, 95.0, 175.0],
        RoofMaterial::Wood => [122.0, 86.0, 56.0],
        RoofMaterial::Unclear => [112.0, 104.0, 96.0],
    }
}

fn wall_base(m: WallMaterial) -> [f64; 3] {
    match m {
        WallMaterial::Metal => [158.0, 164.0, 170.0],
        WallMaterial::Concrete => [205.0, 198.0, 186.0],
        WallMaterial::Brick => [152.0, 72.0, 50.0],
        WallMaterial::Wood => [132.0, 92.0, 60.0],
        WallMaterial::Unclear => [98.0, 98.0, 92.0],
    }
}

const GREEN: [f64; 3] = [46.0, 132.0, 48.0];

fn rect(x0: f64, y0: f64, w: f64, d: f64, angle_deg: f64) -> Vec<Point> {
    let c = Point::new(x0 + w / 2.0, y0 + d / 2.0);
    let mut ring: Vec<Point> = [
        Point::new(x0, y0),
        Point::new(x0 + w, y0),
        Point::new(x0 + w, y0 + d),
        Point::new(x0, y0 + d),
    ]
    .into_iter()
    .map(|p| p.rotated(c, angle_deg))
    .collect();
    ring.push(ring[0]);
    ring
}

fn labels_for<R: Rng>(id: &str, rng: &mut R, vegetation_rate: f64) -> AttributeLabelSet {
    let openness = Openness::ALL[pick(rng, &[0.7, 0.22, 0.08])];
    let floors = Floors::ALL[pick(rng, &[0.45, 0.3, 0.12, 0.06, 0.07])];
    let vegetation = if rng.random_bool(vegetation_rate.clamp(0.0, 1.0)) {
        Vegetation::Yes
    } else {
        Vegetation::No
    };
    let wall = WallMaterial::ALL[pick(rng, &[0.2, 0.35, 0.25, 0.12, 0.08])];
    let roof = RoofMaterial::ALL[pick(rng, &[0.45, 0.15, 0.12, 0.1, 0.1, 0.08])];
    AttributeLabelSet {
        building_id: id.to_string(),
        openness,
        floors,
        vegetation,
        wall,
        roof,
    }
}

struct Layout {
    buildings: Vec<SyntheticBuilding>,
    captures: Vec<SyntheticCapture>,
}

fn layout(spec: &SceneSpec) -> Result<Layout> {
    if spec.n_buildings == 0 {
        return Err(Error::InvalidArgument("synthetic scene needs at least one building".into()));
    }
    if spec.isolated > spec.n_buildings {
        return Err(Error::InvalidArgument("more isolated buildings than buildings".into()));
    }
    let per_row = spec.buildings_per_row.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tir_noise = Normal::new(0.0, spec.tir_noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (ox, oy) = (spec.origin[0], spec.origin[1]);
    let street_n = spec.n_buildings - spec.isolated;
    let bands = street_n.div_ceil(2 * per_row).max(1);

    let mut buildings = Vec::with_capacity(spec.n_buildings);
    let mut used_slots = vec![vec![false; per_row]; bands + 1];
    for k in 0..spec.n_buildings {
        let id = format!("b{:04}", k + 1);
        let isolated = k >= street_n;
        let w = rng.random_range(8.0..11.0);
        let d = rng.random_range(7.0..10.0);
        let setback = rng.random_range(3.5..5.0);
        let angle = rng.random_range(-4.0..4.0);
        let (x0, y0) = if isolated {
            let j = (k - street_n) as f64;
            let x = ox + per_row as f64 * FRONTAGE_M + 50.0 + 25.0 * j;
            (x, oy + BAND_M / 2.0 - d / 2.0)
        } else {
            let band = k / (2 * per_row);
            let side = (k / per_row) % 2;
            let slot = k % per_row;
            let cx = ox + (slot as f64 + 0.5) * FRONTAGE_M;
            let street = if side == 0 { band } else { band + 1 };
            used_slots[street][slot] = true;
            let sy = oy + street as f64 * BAND_M;
            let y0 = if side == 0 { sy + setback } else { sy - setback - d };
            (cx - w / 2.0, y0)
        };
        let polygon = rect(x0, y0, w, d, angle);
        let labels = labels_for(&id, &mut rng, spec.vegetation_rate);
        let cue = if labels.vegetation == Vegetation::Yes {
            [VegetationCue::Roof, VegetationCue::Facade, VegetationCue::Both][pick(&mut rng, &spec.cue_split)]
        } else {
            VegetationCue::None
        };
        let mut canopy = Vec::new();
        if cue.on_roof() {
            let bbox = Bbox::of(&polygon);
            for _ in 0..rng.random_range(2..=4) {
                let c = loop {
                    let p = Point::new(
                        rng.random_range(bbox.min_x..bbox.max_x),
                        rng.random_range(bbox.min_y..bbox.max_y),
                    );
                    if contains_point(&polygon, p) {
                        break p;
                    }
                };
                canopy.push((c, rng.random_range(1.3..2.1)));
            }
        }
        let tone = rng.random_range(0.55..1.3);
        let roof_rgb = rgb(roof_base(labels.roof).map(|c| c * tone));
        let roof_brightness = roof_rgb.iter().sum::<f64>() / 3.0;
        let veg = if labels.vegetation == Vegetation::Yes { 1.0 } else { 0.0 };
        let tir = spec.tir_base
            + spec.tir_vegetation_effect * veg
            + spec.tir_roof_brightness_effect * (roof_brightness - 128.0) / 128.0
            + tir_noise.sample(&mut rng);
        buildings.push(SyntheticBuilding {
            id,
            polygon,
            residential: rng.random_bool(spec.residential_fraction.clamp(0.0, 1.0)),
            labeled: rng.random_bool(spec.labeled_fraction.clamp(0.0, 1.0)),
            isolated,
            labels,
            vegetation_cue: cue,
            roof_brightness,
            tir,
            canopy,
            wall_tone: rng.random_range(0.9..1.1),
            roof_rgb,
        });
    }

    let mut captures = Vec::new();
    for (street, slots) in used_slots.iter().enumerate() {
        for (slot, &used) in slots.iter().enumerate() {
            if !used {
                continue;
            }
            // one capture in front of the slot and one at its right edge
            for (half, dx) in [(0, 0.5), (1, 1.0)] {
                captures.push(SyntheticCapture {
                    id: format!("c{street:03}_{slot:03}_{half}"),
                    position: Point::new(ox + (slot as f64 + dx) * FRONTAGE_M, oy + street as f64 * BAND_M),
                    heading_deg: if street % 2 == 0 { 90.0 } else { 270.0 },
                });
            }
        }
    }
    Ok(Layout { buildings, captures })
}

struct Hit {
    distance: f64,
    building: usize,
    along: f64,
}

fn cast(origin: Point, bearing: f64, candidates: &[(usize, Vec<Point>)]) -> Option<Hit> {
    let (s, c) = bearing.to_radians().sin_cos();
    let mut best: Option<Hit> = None;
    for (b, pts) in candidates {
        let n = pts.len();
        for i in 0..n {
            let a = pts[i];
            let e = Point::new(pts[(i + 1) % n].x - a.x, pts[(i + 1) % n].y - a.y);
            let denom = s * e.y - c * e.x;
            if denom.abs() < 1e-15 {
                continue;
            }
            let w = Point::new(a.x - origin.x, a.y - origin.y);
            let t = (w.x * e.y - w.y * e.x) / denom;
            let u = (w.x * c - w.y * s) / denom;
            if t > 0.0 && (0.0..=1.0).contains(&u) && best.as_ref().is_none_or(|h| t < h.distance) {
                let len = (e.x * e.x + e.y * e.y).sqrt();
                best = Some(Hit {
                    distance: t,
                    building: *b,
                    along: u * len + i as f64 * 37.0,
                });
            }
        }
    }
    best
}

fn wall_texel(b: &SyntheticBuilding, along: f64, z: f64, salt: u64) -> [f64; 3] {
    let l = &b.labels;
    let mut c = wall_base(l.wall).map(|v| v * b.wall_tone);
    match l.wall {
        WallMaterial::Metal => {
            if (along / 0.3).fract() < 0.25 {
                c = c.map(|v| v * 0.75);
            }
        }
        WallMaterial::Brick => {
            let row = (z / 0.25).floor();
            let offset = if row as i64 % 2 == 0 { 0.0 } else { 0.25 };
            if (z / 0.25).fract() < 0.15 || ((along + offset) / 0.5).fract() < 0.08 {
                c = [190.0, 185.0, 175.0];
            }
        }
        WallMaterial::Wood => {
            if (z / 0.2).fract() < 0.2 {
                c = c.map(|v| v * 0.7);
            }
        }
        WallMaterial::Concrete | WallMaterial::Unclear => {}
    }
    let n = noise((along * 20.0) as i64, (z * 20.0) as i64, salt);
    c = c.map(|v| v + 8.0 * n);

    let rows = match l.floors {
        Floors::One => 1,
        Floors::Two => 2,
        Floors::Three => 3,
        Floors::FourPlus => 4,
        Floors::Unclear => 0,
    };
    if rows > 0 {
        let band = 6.0 / rows as f64;
        let r = (z / band).fract();
        let col = ((along + 1.25) / 2.5).fract();
        if (0.3..0.75).contains(&r) && (0.3..0.7).contains(&col) {
            c = [40.0, 45.0, 58.0];
        }
    } else if noise(along.floor() as i64, z.floor() as i64, salt ^ 7) > 0.3 {
        c = c.map(|v| v * 0.6);
    }
    match l.openness {
        Openness::Partial if (along % 37.0) > 1.0 && (along % 37.0) < 4.5 && z < 4.2 => c = [22.0, 22.0, 24.0],
        Openness::Unclear if noise((along * 2.0) as i64, (z * 2.0) as i64, salt ^ 11) > 0.6 => {
            c = [60.0, 60.0, 60.0]
        }
        _ => {}
    }
    if b.vegetation_cue.on_facade() && z < 1.9 && (along / 2.2).fract() < 0.6 {
        let g = noise((along * 10.0) as i64, (z * 10.0) as i64, salt ^ 3);
        c = GREEN.map(|v| v + 15.0 * g);
    }
    rgb(c)
}

fn render_panorama(
    cap: &SyntheticCapture,
    buildings: &[SyntheticBuilding],
    spec: &SceneSpec,
    salt: u64,
) -> RgbImage {
    let w = spec.panorama_width.max(8);
    let h = w / 2;
    let candidates: Vec<(usize, Vec<Point>)> = buildings
        .iter()
        .enumerate()
        .filter(|(_, b)| {
            let c = Bbox::of(&b.polygon).center();
            c.distance(cap.position) < 90.0
        })
        .map(|(i, b)| (i, open_ring(&b.polygon).to_vec()))
        .collect();
    // bearing at the left edge of column 0
    let col0 = -spec.convention.column_of(0.0, cap.heading_deg, w) / w as f64 * 360.0;
    let mut img = RgbImage::new(w, h);
    for i in 0..w {
        let bearing = col0 + (i as f64 + 0.5) / w as f64 * 360.0;
        let hit = cast(cap.position, bearing, &candidates);
        for j in 0..h {
            let elev = 90.0 - (j as f64 + 0.5) / h as f64 * 180.0;
            let tan = elev.to_radians().tan();
            let mut px = None;
            if let Some(hit) = &hit {
                let z = spec.camera_height_m + hit.distance * tan;
                if (0.0..=spec.wall_height_m).contains(&z) {
                    let b = &buildings[hit.building];
                    px = Some(wall_texel(b, hit.along, z, salt.wrapping_add(hit.building as u64)));
                }
            }
            let c = px.unwrap_or_else(|| {
                if elev > 0.0 {
                    let t = elev / 90.0;
                    [170.0 - 60.0 * t, 200.0 - 40.0 * t, 235.0]
                } else {
                    let n = noise(i as i64, j as i64, salt);
                    [86.0 + 6.0 * n, 84.0 + 6.0 * n, 80.0 + 6.0 * n]
                }
            });
            img.put_pixel(i, j, Rgb(c.map(|v| v.round() as u8)));
        }
    }
    img
}

fn scene_extent(buildings: &[SyntheticBuilding], captures: &[SyntheticCapture]) -> Bbox {
    let pts: Vec<Point> = buildings
        .iter()
        .flat_map(|b| b.polygon.iter().copied())
        .chain(captures.iter().map(|c| c.position))
        .collect();
    let b = Bbox::of(&pts);
    Bbox {
        min_x: b.min_x - 12.0,
        min_y: b.min_y - 12.0,
        max_x: b.max_x + 12.0,
        max_y: b.max_y + 12.0,
    }
}

fn render_uav(
    buildings: &[SyntheticBuilding],
    captures: &[SyntheticCapture],
    extent: &Bbox,
    spec: &SceneSpec,
) -> Result<Raster> {
    let gsd = spec.gsd_m;
    let width = (extent.width() / gsd).ceil() as usize;
    let height = (extent.height() / gsd).ceil() as usize;
    let transform = GeoTransform::north_up(extent.min_x, extent.max_y, gsd);
    let mut r = Raster::filled(transform, width, height, 3, 0.0)?;
    let street_ys: Vec<f64> = {
        let mut ys: Vec<f64> = captures.iter().map(|c| c.position.y).collect();
        ys.sort_by(f64::total_cmp);
        ys.dedup();
        ys
    };
    for row in 0..height {
        for col in 0..width {
            let p = r.pixel_center(col, row);
            let n = noise(col as i64 / 3, row as i64 / 3, spec.seed ^ 0xA5);
            let on_road = street_ys.iter().any(|y| (p.y - y).abs() < ROAD_HALF_M);
            let c = if on_road {
                [92.0 + 5.0 * n, 92.0 + 5.0 * n, 96.0 + 5.0 * n]
            } else {
                [156.0 + 12.0 * n, 138.0 + 12.0 * n, 108.0 + 10.0 * n]
            };
            for (band, v) in c.iter().enumerate() {
                r.set(band, col, row, *v as f32);
            }
        }
    }
    for (k, b) in buildings.iter().enumerate() {
        let bbox = Bbox::of(&b.polygon);
        let (c0, r0) = transform.world_to_pixel(Point::new(bbox.min_x, bbox.max_y));
        let (c1, r1) = transform.world_to_pixel(Point::new(bbox.max_x, bbox.min_y));
        let (c0, r0) = (c0.floor().max(0.0) as usize, r0.floor().max(0.0) as usize);
        let (c1, r1) = ((c1.ceil() as usize).min(width), (r1.ceil() as usize).min(height));
        for row in r0..r1 {
            for col in c0..c1 {
                let p = r.pixel_center(col, row);
                if !contains_point(&b.polygon, p) {
                    continue;
                }
                let n = noise(col as i64, row as i64, k as u64);
                let mut c = b.roof_rgb.map(|v| v + 6.0 * n);
                if b.labels.roof == RoofMaterial::Metal && ((p.x - bbox.min_x) / 0.6).fract() < 0.3 {
                    c = c.map(|v| v * 0.85);
                }
                for &(cc, rad) in &b.canopy {
                    let d = p.distance(cc);
                    if d < rad {
                        let shade = 1.0 - 0.35 * d / rad;
                        c = GREEN.map(|v| v * shade + 10.0 * n);
                    }
                }
                for (band, v) in rgb(c).iter().enumerate() {
                    r.set(band, col, row, *v as f32);
                }
            }
        }
    }
    Ok(r)
}

fn render_tir(buildings: &[SyntheticBuilding], extent: &Bbox, spec: &SceneSpec) -> Result<Raster> {
    let gsd = spec.tir_gsd_m;
    let width = (extent.width() / gsd).ceil() as usize;
    let height = (extent.height() / gsd).ceil() as usize;
    let transform = GeoTransform::north_up(extent.min_x, extent.max_y, gsd);
    let mut r = Raster::filled(transform, width, height, 1, 0.0)?;
    for row in 0..height {
        for col in 0..width {
            let n = noise(col as i64, row as i64, spec.seed ^ 0x5A);
            r.set(0, col, row, (spec.tir_base - 1.0 + 0.5 * n) as f32);
        }
    }
    for b in buildings {
        let mut any = false;
        for row in 0..height {
            for col in 0..width {
                if contains_point(&b.polygon, r.pixel_center(col, row)) {
                    r.set(0, col, row, b.tir as f32);
                    any = true;
                }
            }
        }
        if !any {
            let c = crate::geometry::centroid(&b.polygon);
            if let Some((col, row)) = r.pixel_at(c) {
                r.set(0, col, row, b.tir as f32);
            }
        }
    }
    r.nodata = Some(-9999.0);
    Ok(r)
}

/// Generate a scene under `dir` and return the written paths and ground truth.
pub fn generate_synthetic_scene(spec: &SceneSpec, dir: &Path) -> Result<SyntheticScene> {
    let Layout { buildings, captures } = layout(spec)?;
    fs::create_dir_all(dir.join("panoramas")).map_err(|e| Error::io(dir, e))?;

    let features: Vec<_> = buildings
        .iter()
        .map(|b| {
            let coords: Vec<[f64; 2]> = b.polygon.iter().map(|p| [p.x, p.y]).collect();
            json!({
                "type": "Feature",
                "properties": {
                    "id": b.id,
                    "building": if b.residential { "residential" } else { "commercial" },
                },
                "geometry": { "type": "Polygon", "coordinates": [coords] },
            })
        })
        .collect();
    let fc = json!({
        "type": "FeatureCollection",
        "crs": { "type": "name", "properties": { "name": spec.crs } },
        "features": features,
    });
    let footprints = dir.join("footprints.geojson");
    fs::write(&footprints, serde_json::to_string(&fc)?).map_err(|e| Error::io(&footprints, e))?;

    let captures_path = dir.join("captures.csv");
    let mut w = csv::Writer::from_path(&captures_path)?;
    w.write_record(["id", "x", "y", "heading_deg", "image_path", "width_px", "height_px"])?;
    let (pw, ph) = (spec.panorama_width.max(8), spec.panorama_width.max(8) / 2);
    for c in &captures {
        w.write_record([
            c.id.clone(),
            format!("{:.3}", c.position.x),
            format!("{:.3}", c.position.y),
            format!("{}", c.heading_deg),
            format!("panoramas/{}.png", c.id),
            pw.to_string(),
            ph.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&captures_path, e))?;

    use rayon::prelude::*;
    captures
        .par_iter()
        .enumerate()
        .try_for_each(|(k, c)| -> Result<()> {
            let img = render_panorama(c, &buildings, spec, spec.seed.wrapping_add(k as u64 * 7919));
            img.save(dir.join("panoramas").join(format!("{}.png", c.id)))?;
            Ok(())
        })?;

    let extent = scene_extent(&buildings, &captures);
    let uav = dir.join("uav.tif");
    write_geotiff(&uav, &render_uav(&buildings, &captures, &extent, spec)?, SampleFormat::U8)?;
    let tir = dir.join("tir.tif");
    write_geotiff(&tir, &render_tir(&buildings, &extent, spec)?, SampleFormat::F32)?;

    let labels = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels)?;
    let mut header = vec!["building_id"];
    header.extend(Task::ALL.iter().map(|t| t.key()));
    w.write_record(&header)?;
    for b in buildings.iter().filter(|b| b.labeled) {
        let mut row = vec![b.id.clone()];
        row.extend(Task::ALL.iter().map(|&t| b.labels.class_name(t).to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&labels, e))?;

    let truth = dir.join("truth.json");
    let sidecar = json!({ "spec": spec, "buildings": buildings, "captures": captures });
    fs::write(&truth, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&truth, e))?;

    Ok(SyntheticScene {
        dir: dir.to_path_buf(),
        footprints,
        captures: captures_path,
        uav,
        tir,
        labels,
        truth,
        buildings,
        capture_points: captures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts() {
        let spec = SceneSpec {
            n_buildings: 50,
            ..Default::default()
        };
        let l = layout(&spec).unwrap();
        assert_eq!(l.buildings.len(), 50);
        assert!(l.captures.len() >= 50);
        assert!(layout(&SceneSpec {
            n_buildings: 0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn isolated_building_is_far_from_captures() {
        let spec = SceneSpec {
            n_buildings: 21,
            isolated: 1,
            ..Default::default()
        };
        let l = layout(&spec).unwrap();
        let iso = l.buildings.iter().find(|b| b.isolated).unwrap();
        let c = crate::geometry::centroid(&iso.polygon);
        let nearest = l
            .captures
            .iter()
            .map(|k| k.position.distance(c))
            .fold(f64::INFINITY, f64::min);
        assert!(nearest >= 40.0, "{nearest}");
    }

    #[test]
    fn noise_is_bounded_and_deterministic() {
        for i in 0..100 {
            let v = noise(i, -i, 3);
            assert!((-1.0..=1.0).contains(&v));
            assert_eq!(v, noise(i, -i, 3));
        }
    }
}
