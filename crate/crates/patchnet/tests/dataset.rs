use std::path::Path;

use patchnet::dataset::{write_split, Split};
use patchnet::image_io::{load_image, save_image};
use patchnet::Error;
use patchnet_core::imaging::Preprocess;
use patchnet_core::{Image, Sample};

fn toy_root() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/toy"))
}

#[test]
fn bundled_toy_layout() {
    let train = Split::scan(toy_root(), "train").unwrap();
    assert_eq!(train.class_counts(), [6, 6]);
    assert!(train.missing_masks().is_empty());
    for split in ["val", "test"] {
        assert_eq!(Split::scan(toy_root(), split).unwrap().class_counts(), [2, 2]);
    }
    let samples = train.load_samples(&Preprocess::default()).unwrap();
    assert!(samples
        .iter()
        .all(|s| s.image.channels() == 1 && s.image.height() == 24));
    let masked = train.load_masked(&Preprocess::default()).unwrap();
    for m in &masked {
        let mask = m.mask.as_ref().unwrap();
        let positives = mask.positives();
        assert_eq!(positives > 0, m.id.starts_with("1/"), "{}", m.id);
    }
    let index = train.index();
    assert_eq!(index.lines().count(), 13);
}

#[test]
fn write_then_scan() {
    let dir = tempfile::tempdir().unwrap();
    let img = |v| Image::filled(4, 5, 1, v).unwrap();
    let samples = vec![
        Sample::new(img(0), 0).unwrap(),
        Sample::new(img(9), 1).unwrap(),
        Sample::new(img(10), 1).unwrap(),
    ];
    let masks = vec![img(0), img(255), img(255)];
    write_split(dir.path(), "train", &samples, Some(&masks)).unwrap();
    let split = Split::scan(dir.path(), "train").unwrap();
    assert_eq!(split.class_counts(), [1, 2]);
    let loaded = split.load_samples(&Preprocess::default()).unwrap();
    assert_eq!(loaded, samples);

    // resized masks are re-binarized
    let pre = Preprocess {
        resize: Some((8, 10)),
        ..Preprocess::default()
    };
    let masked = split.load_masked(&pre).unwrap();
    assert_eq!(masked[1].mask.as_ref().unwrap().positives(), 80);

    std::fs::remove_file(dir.path().join("train/masks/c1_0001.png")).unwrap();
    let split = Split::scan(dir.path(), "train").unwrap();
    assert_eq!(split.missing_masks(), vec!["1/c1_0001.png".to_string()]);
}

#[test]
fn empty_or_missing_split() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Split::scan(dir.path(), "train"), Err(Error::Dataset(_))));
    std::fs::create_dir_all(dir.path().join("train/0")).unwrap();
    assert!(matches!(Split::scan(dir.path(), "train"), Err(Error::Dataset(_))));
}

#[test]
fn image_formats() {
    let dir = tempfile::tempdir().unwrap();
    let rgb = Image::new(2, 3, 3, (0..18).map(|v| v * 13).collect()).unwrap();
    let gray = Image::new(3, 2, 1, vec![0, 50, 100, 150, 200, 250]).unwrap();
    for ext in ["png", "ppm"] {
        let p = dir.path().join(format!("rgb.{ext}"));
        save_image(&rgb, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), rgb);
    }
    for ext in ["png", "pgm"] {
        let p = dir.path().join(format!("gray.{ext}"));
        save_image(&gray, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), gray);
    }
    let ascii = dir.path().join("ascii.pgm");
    std::fs::write(&ascii, "P2\n2 1\n255\n7 200\n").unwrap();
    assert_eq!(load_image(&ascii).unwrap(), Image::new(1, 2, 1, vec![7, 200]).unwrap());
}
