use std::fs;

use ulw_core::image::{load_paired_dataset, split_dataset, synth_dataset, write_paired_dataset, SyntheticSpec};

#[test]
fn written_dataset_loads_back_within_quantization() {
    let spec = SyntheticSpec {
        pairs: 5,
        size: 24,
        ..Default::default()
    };
    let ds = synth_dataset(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_paired_dataset(&ds, dir.path()).unwrap();
    let back = load_paired_dataset(&manifest).unwrap();
    assert_eq!(back.len(), ds.len());
    for (a, b) in ds.samples().iter().zip(back.samples()) {
        assert_eq!(a.id, b.id);
        for (x, y) in [(&a.smoky, &b.smoky), (&a.clean, &b.clean)] {
            let worst = (x.data() - y.data()).mapv(f64::abs).fold(0.0_f64, |m, &v| m.max(v));
            assert!(worst <= 0.5 / 255.0 + 1e-12, "{}: {worst}", a.id);
        }
    }
    // Already quantized, so a second trip is exact.
    let again = write_paired_dataset(&back, dir.path().join("again")).unwrap();
    assert_eq!(load_paired_dataset(again).unwrap().fingerprint(), back.fingerprint());
}

#[test]
fn manifest_problems_are_reported_with_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.tsv");
    fs::write(&path, "a\tx.png\n").unwrap();
    let err = load_paired_dataset(&path).unwrap_err().to_string();
    assert!(err.contains("line 1"), "{err}");

    let ds = synth_dataset(&SyntheticSpec {
        pairs: 2,
        size: 16,
        ..Default::default()
    })
    .unwrap();
    write_paired_dataset(&ds, dir.path()).unwrap();
    fs::write(
        &path,
        "a\tsmoky/synth_0000.png\tclean/synth_0000.png\na\tsmoky/synth_0001.png\tclean/synth_0001.png\n",
    )
    .unwrap();
    let err = load_paired_dataset(&path).unwrap_err().to_string();
    assert!(err.contains("duplicate"), "{err}");

    fs::write(&path, "a\tsmoky/missing.png\tclean/synth_0000.png\n").unwrap();
    assert!(load_paired_dataset(&path).is_err());
}

#[test]
fn split_is_seeded_and_disjoint() {
    let ds = synth_dataset(&SyntheticSpec {
        pairs: 20,
        size: 16,
        ..Default::default()
    })
    .unwrap();
    let (a, b, c) = split_dataset(&ds, (0.8, 0.1, 0.1), 3).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (16, 2, 2));
    let mut ids: Vec<&str> = a.ids().chain(b.ids()).chain(c.ids()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 20);
    let again = split_dataset(&ds, (0.8, 0.1, 0.1), 3).unwrap();
    assert_eq!(again.2.ids().collect::<Vec<_>>(), c.ids().collect::<Vec<_>>());
    let other = split_dataset(&ds, (0.8, 0.1, 0.1), 4).unwrap();
    assert_ne!(other.0.ids().collect::<Vec<_>>(), a.ids().collect::<Vec<_>>());
}
