//! Non-learned per-building features: brightness, neighbour distance and
//! zonal thermal statistics.

use std::collections::BTreeMap;

use image::RgbImage;
use rstar::primitives::{GeomWithData, Rectangle};
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::domain::BuildingFootprint;
use crate::error::{Error, Result};
use crate::geometry::{contains_point, ring_distance, Bbox};
use crate::imaging::content_mask;
use crate::pairing::CrossViewPair;
use crate::raster::Raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub building_id: String,
    pub roof_brightness: Option<f64>,
    pub wall_brightness: Option<f64>,
    /// `None` when fewer than four other footprints exist.
    pub mean_dist_4nn_m: Option<f64>,
    pub tir_value: Option<f64>,
    pub tir_valid: bool,
}

/// Mean of `(R + G + B) / 3` over the selected pixels.
pub fn brightness(chip: &RgbImage, mask: &[bool]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, &keep) in chip.pixels().zip(mask) {
        if keep {
            sum += (p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / 3.0;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Brightness over all non-fill pixels of a masked chip.
pub fn chip_brightness(chip: &RgbImage, fill: [u8; 3]) -> Result<f64> {
    brightness(chip, &content_mask(chip, fill))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighbourDistance {
    #[default]
    Centroid,
    Edge,
}

/// Index for nearest-footprint queries.
pub struct NeighbourIndex<'a> {
    footprints: &'a [BuildingFootprint],
    centroids: RTree<GeomWithData<[f64; 2], usize>>,
    boxes: RTree<GeomWithData<Rectangle<[f64; 2]>, usize>>,
}

impl<'a> NeighbourIndex<'a> {
    pub fn new(footprints: &'a [BuildingFootprint]) -> Self {
        let centroids = footprints
            .iter()
            .enumerate()
            .map(|(i, f)| GeomWithData::new([f.centroid.x, f.centroid.y], i))
            .collect();
        let boxes = footprints
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let b = Bbox::of(&f.polygon);
                GeomWithData::new(Rectangle::from_corners([b.min_x, b.min_y], [b.max_x, b.max_y]), i)
            })
            .collect();
        Self {
            footprints,
            centroids: RTree::bulk_load(centroids),
            boxes: RTree::bulk_load(boxes),
        }
    }
}

/// Mean distance to the four nearest other footprints.
pub fn mean_dist_4nn(
    building: &BuildingFootprint,
    index: &NeighbourIndex<'_>,
    mode: NeighbourDistance,
) -> Option<f64> {
    const K: usize = 4;
    let q = [building.centroid.x, building.centroid.y];
    let mut dists: Vec<f64> = match mode {
        NeighbourDistance::Centroid => index
            .centroids
            .nearest_neighbor_iter_with_distance_2(q)
            .filter(|(item, _)| index.footprints[item.data].id != building.id)
            .take(K)
            .map(|(_, d2)| d2.sqrt())
            .collect(),
        NeighbourDistance::Edge => {
            // bbox distance from the building's own bbox is a lower bound on
            // edge distance; scan in bbox order until it exceeds the 4th best
            let own = Bbox::of(&building.polygon);
            let own_rect = Rectangle::from_corners([own.min_x, own.min_y], [own.max_x, own.max_y]);
            let mut cands: Vec<(f64, usize)> = index
                .boxes
                .iter()
                .filter(|it| index.footprints[it.data].id != building.id)
                .map(|it| (rect_gap(&own_rect, it.geom()), it.data))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut best: Vec<f64> = Vec::new();
            for (lb, i) in cands {
                if best.len() >= K && lb > best[K - 1] {
                    break;
                }
                best.push(ring_distance(&building.polygon, &index.footprints[i].polygon));
                best.sort_by(f64::total_cmp);
            }
            best.truncate(K);
            best
        }
    };
    if dists.len() < K {
        return None;
    }
    dists.sort_by(f64::total_cmp);
    Some(dists.iter().sum::<f64>() / K as f64)
}

fn rect_gap(a: &Rectangle<[f64; 2]>, b: &Rectangle<[f64; 2]>) -> f64 {
    let (al, au) = (a.lower(), a.upper());
    let (bl, bu) = (b.lower(), b.upper());
    let dx = (bl[0] - au[0]).max(al[0] - bu[0]).max(0.0);
    let dy = (bl[1] - au[1]).max(al[1] - bu[1]).max(0.0);
    dx.hypot(dy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZonalValue {
    pub value: f64,
    pub valid: bool,
}

impl ZonalValue {
    const INVALID: ZonalValue = ZonalValue {
        value: f64::NAN,
        valid: false,
    };
}

/// Mean of band-0 pixels whose centers fall inside the footprint, ignoring
/// nodata. Footprints smaller than a pixel fall back to the pixel under the
/// centroid.
pub fn zonal_tir(tir: &Raster, footprint: &BuildingFootprint) -> ZonalValue {
    let bbox = Bbox::of(&footprint.polygon);
    if !tir.extent().contains_bbox(&bbox) {
        return ZonalValue::INVALID;
    }
    let corners = [
        tir.transform.world_to_pixel(crate::geometry::Point::new(bbox.min_x, bbox.min_y)),
        tir.transform.world_to_pixel(crate::geometry::Point::new(bbox.max_x, bbox.max_y)),
        tir.transform.world_to_pixel(crate::geometry::Point::new(bbox.min_x, bbox.max_y)),
        tir.transform.world_to_pixel(crate::geometry::Point::new(bbox.max_x, bbox.min_y)),
    ];
    let umin = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let umax = (corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(tir.width);
    let vmin = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let vmax = (corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(tir.height);

    let mut sum = 0.0;
    let mut n = 0usize;
    let mut centers_inside = 0usize;
    for row in vmin..vmax {
        for col in umin..umax {
            if !contains_point(&footprint.polygon, tir.pixel_center(col, row)) {
                continue;
            }
            centers_inside += 1;
            let v = tir.get(0, col, row);
            if !tir.is_nodata(v) {
                sum += v as f64;
                n += 1;
            }
        }
    }
    if n > 0 {
        return ZonalValue {
            value: sum / n as f64,
            valid: true,
        };
    }
    if centers_inside > 0 {
        return ZonalValue::INVALID;
    }
    match tir.pixel_at(footprint.centroid) {
        Some((col, row)) => {
            let v = tir.get(0, col, row);
            if tir.is_nodata(v) {
                ZonalValue::INVALID
            } else {
                ZonalValue {
                    value: v as f64,
                    valid: true,
                }
            }
        }
        None => ZonalValue::INVALID,
    }
}

/// Feature rows for every emitted pair, in pair order. Neighbour distances
/// use all footprints (residential or not); TIR is absent without a raster.
pub fn compute_features(
    pairs: &[CrossViewPair],
    footprints: &[BuildingFootprint],
    tir: Option<&Raster>,
    fill: [u8; 3],
    mode: NeighbourDistance,
) -> Result<Vec<FeatureRecord>> {
    let index = NeighbourIndex::new(footprints);
    let by_id: BTreeMap<&str, &BuildingFootprint> = footprints.iter().map(|f| (f.id.as_str(), f)).collect();
    pairs
        .iter()
        .map(|p| {
            let fp = by_id
                .get(p.building_id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("no footprint for pair {}", p.building_id)))?;
            let zonal = tir.map(|t| zonal_tir(t, fp));
            Ok(FeatureRecord {
                building_id: p.building_id.clone(),
                roof_brightness: chip_brightness(&p.top_chip, fill).ok(),
                wall_brightness: chip_brightness(&p.facade_chip, fill).ok(),
                mean_dist_4nn_m: mean_dist_4nn(fp, &index, mode),
                tir_value: zonal.filter(|z| z.valid).map(|z| z.value),
                tir_valid: zonal.is_some_and(|z| z.valid),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{normalize_ring, Point};
    use crate::raster::GeoTransform;
    use image::Rgb;

    fn rect(id: &str, x0: f64, y0: f64, w: f64, h: f64) -> BuildingFootprint {
        let ring = normalize_ring(&[
            Point::new(x0, y0),
            Point::new(x0 + w, y0),
            Point::new(x0 + w, y0 + h),
            Point::new(x0, y0 + h),
        ])
        .unwrap();
        BuildingFootprint::new(id, ring, true)
    }

    #[test]
    fn brightness_constant_fields() {
        let white = RgbImage::from_pixel(4, 4, Rgb([255, 255, 255]));
        assert_eq!(brightness(&white, &[true; 16]).unwrap(), 255.0);
        let black = RgbImage::new(4, 4);
        assert_eq!(brightness(&black, &[true; 16]).unwrap(), 0.0);
    }

    #[test]
    fn brightness_channel_mean() {
        let mut img = RgbImage::new(2, 1);
        img.put_pixel(0, 0, Rgb([255, 0, 0]));
        img.put_pixel(1, 0, Rgb([0, 0, 255]));
        assert_eq!(brightness(&img, &[true, true]).unwrap(), 85.0);
    }

    #[test]
    fn brightness_empty_mask() {
        let img = RgbImage::new(2, 1);
        assert!(matches!(brightness(&img, &[false, false]), Err(Error::EmptyMask)));
    }

    #[test]
    fn chip_brightness_ignores_fill() {
        let fill = [128, 128, 128];
        let mut img = RgbImage::from_pixel(3, 1, Rgb(fill));
        img.put_pixel(2, 0, Rgb([30, 60, 90]));
        assert_eq!(chip_brightness(&img, fill).unwrap(), 60.0);
    }

    fn at(id: &str, x: f64, y: f64) -> BuildingFootprint {
        rect(id, x - 0.25, y - 0.25, 0.5, 0.5)
    }

    #[test]
    fn four_nn_sort_and_average() {
        let fps = vec![
            at("t", 0.0, 0.0),
            at("a", 1.0, 0.0),
            at("b", 0.0, 2.0),
            at("c", -3.0, 0.0),
            at("d", 0.0, -4.0),
            at("e", 100.0, 0.0),
        ];
        let idx = NeighbourIndex::new(&fps);
        let d = mean_dist_4nn(&fps[0], &idx, NeighbourDistance::Centroid).unwrap();
        assert!((d - 2.5).abs() < 1e-12);
    }

    #[test]
    fn four_nn_equal_distances_and_too_few() {
        let d = 7.0;
        let fps = vec![
            at("t", 0.0, 0.0),
            at("a", d, 0.0),
            at("b", -d, 0.0),
            at("c", 0.0, d),
            at("e", 0.0, -d),
        ];
        let idx = NeighbourIndex::new(&fps);
        assert!((mean_dist_4nn(&fps[0], &idx, NeighbourDistance::Centroid).unwrap() - d).abs() < 1e-12);
        let idx = NeighbourIndex::new(&fps[..4]);
        assert!(mean_dist_4nn(&fps[0], &idx, NeighbourDistance::Centroid).is_none());
    }

    #[test]
    fn four_nn_edge_mode() {
        // unit squares spaced 3 m apart centre-to-centre: edge gap 2 m
        let fps: Vec<_> = (0..6).map(|i| rect(&format!("s{i}"), 3.0 * i as f64, 0.0, 1.0, 1.0)).collect();
        let idx = NeighbourIndex::new(&fps);
        let d = mean_dist_4nn(&fps[0], &idx, NeighbourDistance::Edge).unwrap();
        // gaps 2, 5, 8, 11
        assert!((d - 6.5).abs() < 1e-12, "{d}");
    }

    fn grid(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> Raster {
        let t = GeoTransform::north_up(0.0, h as f64 * 3.5, 3.5);
        let mut data = vec![0.0; w * h];
        for r in 0..h {
            for c in 0..w {
                data[r * w + c] = f(c, r);
            }
        }
        Raster::new(t, w, h, vec![data], Some(-9999.0)).unwrap()
    }

    #[test]
    fn zonal_constant_raster() {
        let r = grid(10, 10, |_, _| 40.0);
        let z = zonal_tir(&r, &rect("a", 3.0, 3.0, 12.0, 9.0));
        assert!(z.valid);
        assert_eq!(z.value, 40.0);
    }

    #[test]
    fn zonal_tiny_footprint_uses_centroid_pixel() {
        let r = grid(10, 10, |c, r| (c * 10 + r) as f32);
        // 1 m square inside pixel col 2, row 7 (rows count down from y = 35)
        let fp = rect("tiny", 7.5, 8.0, 1.0, 1.0);
        let z = zonal_tir(&r, &fp);
        assert!(z.valid);
        assert_eq!(z.value, 27.0);
    }

    #[test]
    fn zonal_checkerboard_oracle() {
        let r = grid(10, 10, |c, r| if (c + r) % 2 == 0 { 10.0 } else { 20.0 });
        // covers pixel centres of cols 2..6 and rows 3..5 (4 x 2 = 8 pixels)
        let fp = rect("cb", 7.0, 35.0 - 17.5, 14.0, 7.0);
        let mut oracle = Vec::new();
        for row in 0..10 {
            for col in 0..10 {
                let c = r.pixel_center(col, row);
                if c.x > 7.0 && c.x < 21.0 && c.y > 17.5 && c.y < 24.5 {
                    oracle.push(r.get(0, col, row) as f64);
                }
            }
        }
        assert_eq!(oracle.len(), 8);
        let tens = oracle.iter().filter(|v| **v == 10.0).count();
        assert_eq!(tens, 4);
        let z = zonal_tir(&r, &fp);
        assert!(z.valid);
        assert!((z.value - 15.0).abs() < 1e-12);
    }

    #[test]
    fn zonal_outside_or_all_nodata_invalid() {
        let r = grid(4, 4, |_, _| 1.0);
        assert!(!zonal_tir(&r, &rect("out", 100.0, 100.0, 5.0, 5.0)).valid);
        let nd = grid(4, 4, |_, _| -9999.0);
        assert!(!zonal_tir(&nd, &rect("nd", 1.0, 1.0, 8.0, 8.0)).valid);
    }

    #[test]
    fn compute_features_without_thermal_raster() {
        let fps: Vec<BuildingFootprint> = (0..6).map(|i| rect(&format!("b{i}"), i as f64 * 20.0, 0.0, 10.0, 10.0)).collect();
        let fill = [128, 128, 128];
        let pair = CrossViewPair {
            building_id: "b2".into(),
            top_chip: RgbImage::from_pixel(4, 4, Rgb([200, 100, 0])),
            facade_chip: RgbImage::from_pixel(4, 4, Rgb(fill)),
            capture_id: "c".into(),
            match_distance_m: 5.0,
            mask_fraction_top: 1.0,
            mask_fraction_facade: 0.0,
        };
        let rows = compute_features(&[pair.clone()], &fps, None, fill, NeighbourDistance::Centroid).unwrap();
        assert_eq!(rows[0].roof_brightness, Some(100.0));
        assert_eq!(rows[0].wall_brightness, None);
        // neighbours at 20, 20, 40, 40 m
        assert_eq!(rows[0].mean_dist_4nn_m, Some(30.0));
        assert!(!rows[0].tir_valid && rows[0].tir_value.is_none());
        let mut orphan = pair;
        orphan.building_id = "zz".into();
        assert!(compute_features(&[orphan], &fps, None, fill, NeighbourDistance::Centroid).is_err());
    }
}
