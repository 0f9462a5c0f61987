use proptest::prelude::*;
use soilseg::coco::{
    generate_synthetic_dataset, load_coco_dataset, polygon_to_mask, split_dataset, validate_dataset, CocoFile,
    PolygonAnnotation, Split, SplitSpec, SyntheticSpec,
};

/// Even-odd test written independently of the library: count edges crossed by a ray towards +x.
fn brute_inside(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut crossings = 0;
    for k in 0..poly.len() {
        let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
        let (lo, hi) = if a.1 <= b.1 { (a, b) } else { (b, a) };
        // half-open in y so a vertex on the ray is counted once
        if py >= lo.1 && py < hi.1 {
            let t = (py - lo.1) / (hi.1 - lo.1);
            let x = lo.0 + t * (hi.0 - lo.0);
            if x > px {
                crossings += 1;
            }
        }
    }
    crossings % 2 == 1
}

fn annotation(points: &[(f64, f64)]) -> PolygonAnnotation {
    PolygonAnnotation {
        id: 1,
        image_id: 1,
        category_id: 1,
        segmentation: vec![points.iter().flat_map(|&(x, y)| [x, y]).collect()],
        bbox: [0.0, 0.0, 1.0, 1.0],
        area: 1.0,
        iscrowd: 0,
    }
}

proptest! {
    #[test]
    fn raster_matches_point_in_polygon(
        w in 1usize..=32,
        h in 1usize..=32,
        pts in prop::collection::vec((-3.0f64..35.0, -3.0f64..35.0), 3..10),
    ) {
        let mask = polygon_to_mask(&annotation(&pts), w, h).unwrap();
        for r in 0..h {
            for c in 0..w {
                prop_assert_eq!(mask.get(r, c), brute_inside(c as f64 + 0.5, r as f64 + 0.5, &pts), "pixel ({}, {})", r, c);
            }
        }
    }

    #[test]
    fn split_partitions_ids(n in 2usize..200, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let ids: Vec<u64> = (1..=n as u64).map(|i| i * 3).collect();
        let spec = SplitSpec { ratio, seed };
        let (a, b) = split_dataset(&ids, spec).unwrap();
        prop_assert_eq!(a.len(), (ratio * n as f64).round() as usize);
        let mut all: Vec<u64> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(&all, &ids);
        prop_assert_eq!(split_dataset(&ids, spec).unwrap(), (a, b));
    }
}

#[test]
fn split_of_111_is_78_33() {
    let ids: Vec<u64> = (1..=111).collect();
    let (train, val) = split_dataset(&ids, SplitSpec { ratio: 0.7, seed: 0 }).unwrap();
    assert_eq!((train.len(), val.len()), (78, 33));
}

#[test]
fn synthetic_root_round_trips_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::new(5, 64, 11);
    generate_synthetic_dataset(&spec, dir.path()).unwrap();
    for split in [Split::Train, Split::Val] {
        let ds = load_coco_dataset(dir.path(), split).unwrap();
        assert!(validate_dataset(&ds).is_clean());
        let path = dir.path().join(format!("copy_{split}.json"));
        ds.write_annotations(&path).unwrap();
        assert_eq!(CocoFile::read(&path).unwrap(), ds.to_coco_file());
        for img in &ds.images {
            let masks = ds.instance_masks(img).unwrap();
            assert_eq!(masks.len(), 1);
            assert!(masks[0].area() > 0);
        }
    }
    // same seed, same bytes
    let again = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(&spec, again.path()).unwrap();
    let read = |root: &std::path::Path| std::fs::read(Split::Train.annotation_path(root)).unwrap();
    assert_eq!(read(dir.path()), read(again.path()));
}
