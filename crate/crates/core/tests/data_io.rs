use std::fs;

use proptest::prelude::*;

use sdda::data::{decode_container, encode_container, import_csv, read_container, write_container, TrialSet, LABELS_FILE};
use sdda::Error;

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("sdda-data-io-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // The payload is single precision, so values that are exactly f32 must
    // come back bit for bit.
    #[test]
    fn container_round_trip_is_exact(
        n in 1usize..6,
        e in 1usize..5,
        t in 1usize..20,
        classes in 1usize..5,
        seed in any::<u32>(),
        labeled in any::<bool>(),
        tagged in any::<bool>(),
    ) {
        let data: Vec<f64> = (0..n * e * t)
            .map(|i| f64::from(f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) % 0x7f00_0000)))
            .map(|v| if seed % 2 == 0 { v } else { -v })
            .collect();
        let labels = labeled.then(|| (0..n).map(|i| i % classes).collect());
        let mut set = TrialSet::new(e, t, data, labels, 250.0, classes).unwrap();
        if tagged {
            set = set.with_sessions((0..n as u16).collect()).unwrap();
            set.participant = Some(7);
        }
        let back = decode_container(&encode_container(&set).unwrap()).unwrap();
        prop_assert_eq!(back.data().len(), set.data().len());
        for (a, b) in back.data().iter().zip(set.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back, set);
    }
}

#[test]
fn container_file_round_trip_and_errors() {
    let dir = scratch("container");
    let set = TrialSet::new(2, 3, (0..12).map(f64::from).collect(), None, 128.0, 2).unwrap();
    let path = dir.join("x.trl");
    write_container(&set, &path).unwrap();
    let back = read_container(&path).unwrap();
    assert!(back.labels().is_none());
    assert_eq!(back, set);

    let bytes = fs::read(&path).unwrap();
    assert!(matches!(decode_container(&bytes[..bytes.len() - 5]), Err(Error::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_container(&bad), Err(Error::BadMagic)));
}

#[test]
fn csv_import_with_and_without_labels() {
    let dir = scratch("csv");
    let trial = |offset: usize| {
        (0..3)
            .map(|c| (0..10).map(|k| (offset + c * 10 + k).to_string()).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
    };
    fs::write(dir.join("a.csv"), trial(0)).unwrap();
    fs::write(dir.join("b.csv"), trial(100)).unwrap();

    let unlabeled = import_csv(&dir, 250.0).unwrap();
    assert_eq!((unlabeled.len(), unlabeled.channels(), unlabeled.samples()), (2, 3, 10));
    assert!(unlabeled.labels().is_none());
    assert_eq!(unlabeled.channel(1, 2)[9], 129.0);

    fs::write(dir.join(LABELS_FILE), "file,label\na.csv,0\nb.csv,1\n").unwrap();
    let labeled = import_csv(&dir, 250.0).unwrap();
    assert_eq!(labeled.labels(), Some(&[0, 1][..]));
    assert_eq!(labeled.classes, 2);

    fs::write(dir.join("c.csv"), "1,2,3\n4,5\n").unwrap();
    let err = import_csv(&dir, 250.0).unwrap_err().to_string();
    assert!(err.contains("c.csv"), "{err}");
}
