use crossview_heat::association::{run_association_suite, AssociationConfig, AssociationRecord};
use crossview_heat::features::{chip_brightness, mean_dist_4nn, zonal_tir, NeighbourDistance, NeighbourIndex};
use crossview_heat::ingest::{load_capture_index, load_footprints, load_labels, FootprintOptions, MissingImagePolicy};
use crossview_heat::pairing::{build_dataset, write_dataset, FilePanoramas, PairingConfig, VisibilityStatus};
use crossview_heat::raster::read_geotiff;
use crossview_heat::synth::{generate_synthetic_scene, SceneSpec};

fn pairing_cfg() -> PairingConfig {
    PairingConfig {
        chip_size: 64,
        ..Default::default()
    }
}

#[test]
fn fifty_building_grid_is_all_usable() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        n_buildings: 50,
        seed: 11,
        ..Default::default()
    };
    let scene = generate_synthetic_scene(&spec, dir.path()).unwrap();
    let fps = load_footprints(&scene.footprints, &FootprintOptions::default()).unwrap();
    assert_eq!(fps.footprints.len(), 50);
    let caps = load_capture_index(&scene.captures, MissingImagePolicy::Error).unwrap();
    assert!(caps.samples.len() >= 50);
    let uav = read_geotiff(&scene.uav).unwrap();
    let ds = build_dataset(&fps.footprints, &caps.samples, &uav, &FilePanoramas, &pairing_cfg());
    assert_eq!(ds.census.as_tuple(), (0, 0, 0, 50));
    assert_eq!(ds.census.emitted, 50);
    if let Ok(out) = std::env::var("SYNTH_DUMP") {
        write_dataset(std::path::Path::new(&out), &ds).unwrap();
    }
    let labels = load_labels(&scene.labels).unwrap();
    assert_eq!(labels.len(), 50);
}

#[test]
fn isolated_building_is_too_far() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        n_buildings: 21,
        isolated: 1,
        panorama_width: 128,
        gsd_m: 0.5,
        ..Default::default()
    };
    let scene = generate_synthetic_scene(&spec, dir.path()).unwrap();
    let fps = load_footprints(&scene.footprints, &FootprintOptions::default()).unwrap();
    let caps = load_capture_index(&scene.captures, MissingImagePolicy::Error).unwrap();
    let uav = read_geotiff(&scene.uav).unwrap();
    let ds = build_dataset(&fps.footprints, &caps.samples, &uav, &FilePanoramas, &pairing_cfg());
    let iso = scene.buildings.iter().find(|b| b.isolated).unwrap();
    let rec = ds.records.iter().find(|r| r.building_id == iso.id).unwrap();
    assert_eq!(rec.status, VisibilityStatus::TooFar);
    assert_eq!(ds.census.too_far, 1);
}

#[test]
fn planted_roof_effect_is_recovered() {
    // bright roofs cool, dark roofs warm: expect a negative correlation
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        n_buildings: 60,
        panorama_width: 128,
        tir_vegetation_effect: 0.0,
        tir_roof_brightness_effect: -10.0,
        seed: 5,
        ..Default::default()
    };
    let scene = generate_synthetic_scene(&spec, dir.path()).unwrap();
    let fps = load_footprints(&scene.footprints, &FootprintOptions::default()).unwrap();
    let caps = load_capture_index(&scene.captures, MissingImagePolicy::Error).unwrap();
    let uav = read_geotiff(&scene.uav).unwrap();
    let tir = read_geotiff(&scene.tir).unwrap();
    let cfg = pairing_cfg();
    let ds = build_dataset(&fps.footprints, &caps.samples, &uav, &FilePanoramas, &cfg);
    let labels = load_labels(&scene.labels).unwrap();
    let index = NeighbourIndex::new(&fps.footprints);
    let records: Vec<AssociationRecord> = ds
        .pairs
        .iter()
        .map(|p| {
            let fp = fps.footprints.iter().find(|f| f.id == p.building_id).unwrap();
            let z = zonal_tir(&tir, fp);
            AssociationRecord {
                labels: labels[&p.building_id].clone(),
                roof_brightness: chip_brightness(&p.top_chip, cfg.fill).ok(),
                wall_brightness: chip_brightness(&p.facade_chip, cfg.fill).ok(),
                mean_dist_4nn_m: mean_dist_4nn(fp, &index, NeighbourDistance::Centroid),
                tir_value: Some(z.value),
                tir_valid: z.valid,
            }
        })
        .collect();
    let rep = run_association_suite(&records, &AssociationConfig::default()).unwrap();
    let t = rep.test("roof_brightness").unwrap();
    assert!(t.statistic < 0.0 && t.significant, "{t:?}");
}
