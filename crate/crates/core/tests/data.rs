mod common;

use common::*;
use proptest::prelude::*;
use slbf::data::{
    dataset_from_idx, encode_idx_images, encode_idx_labels, load_mnist_dir, parse_idx_images, IdxImages,
    MnistFiles, Normalization, Split,
};
use slbf::Error;

#[test]
fn mnist_files_have_expected_shape() {
    let Some(dir) = mnist_dir() else {
        eprintln!("skipped: MNIST not found");
        return;
    };
    let (train, test) = load_mnist_dir(&dir, &MnistFiles::default(), Normalization::default()).unwrap();
    assert_eq!((train.len(), test.len()), (60_000, 10_000));
    assert_eq!(train.dims(), [1, 28, 28]);
    assert_eq!(train.classes(), 10);
    assert_eq!(test.split(), Split::Test);
    let mut seen = [0usize; 10];
    for &l in test.labels() {
        seen[l] += 1;
    }
    assert!(seen.iter().all(|&n| n > 800));
    let lo = train.images().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = train.images().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    assert!((lo + 0.4242).abs() < 1e-3 && (hi - 2.8215).abs() < 1e-3, "{lo} {hi}");
}

#[test]
fn idx_errors_are_distinct() {
    let images = IdxImages {
        count: 3,
        rows: 2,
        cols: 2,
        pixels: vec![7; 12],
    };
    let img = encode_idx_images(&images);
    let lab = encode_idx_labels(&[0, 1, 2]);
    assert_eq!(parse_idx_images(&img).unwrap(), images);

    let mut bad = img.clone();
    bad[3] = 1;
    assert!(matches!(parse_idx_images(&bad), Err(Error::BadMagic { .. })));
    assert!(matches!(parse_idx_images(&img[..img.len() - 1]), Err(Error::Truncated(_))));
    let short = encode_idx_labels(&[0, 1]);
    assert!(matches!(
        dataset_from_idx(&img, &short, Normalization::default(), Split::Train),
        Err(Error::CountMismatch { images: 3, labels: 2 })
    ));
    let ds = dataset_from_idx(&img, &lab, Normalization::default(), Split::Train).unwrap();
    assert_eq!(ds.len(), 3);
}

#[test]
fn missing_directory_names_the_path() {
    let err = load_mnist_dir(
        std::path::Path::new("/nonexistent/mnist"),
        &MnistFiles::default(),
        Normalization::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/mnist"), "{err}");
}

proptest! {
    #[test]
    fn normalized_pixels_stay_in_range(pixels in prop::collection::vec(any::<u8>(), 16)) {
        let images = IdxImages { count: 1, rows: 4, cols: 4, pixels };
        let ds = dataset_from_idx(
            &encode_idx_images(&images),
            &encode_idx_labels(&[3]),
            Normalization::default(),
            Split::Synthetic,
        ).unwrap();
        for &v in ds.images() {
            prop_assert!((-0.5..=3.0).contains(&v));
        }
        prop_assert_eq!(ds.labels(), &[3][..]);
    }
}
