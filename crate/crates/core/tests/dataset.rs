use diffusion_core::dataset::*;
use diffusion_core::Tensor;
use proptest::prelude::*;

#[test]
fn deterministic_and_balanced() {
    let a = generate_dataset(8, 12, 16, 5).unwrap();
    let b = generate_dataset(8, 12, 16, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_dataset(8, 12, 16, 6).unwrap());
    for k in 0..8 {
        assert_eq!(a.iter().filter(|i| i.label == k).count(), 12);
    }
    for img in &a {
        assert_eq!(img.pixels.shape(), &[3, 16, 16]);
        assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn class_means_are_separated() {
    // [DERIVED] pairwise RMS distance of per-class means on the default set
    let data = generate_dataset(8, 256, 16, 0).unwrap();
    let images: Vec<Tensor> = data.iter().map(|d| d.pixels.clone()).collect();
    let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
    let means = class_means(&images, &labels, 8).unwrap();
    for i in 0..8 {
        for j in i + 1..8 {
            let d = rms_distance(means[i].data(), means[j].data());
            assert!(d > 0.05, "classes {i} and {j}: {d}");
        }
    }
}

#[test]
fn identity_resize_and_affine_map() {
    let img = &generate_dataset(1, 1, 16, 0).unwrap()[0];
    assert_eq!(&resize_nearest(&img.pixels, 16).unwrap(), &img.pixels);
    let px = LabeledImage {
        pixels: Tensor::new(vec![3, 1, 1], vec![1.0, 0.0, 0.5]).unwrap(),
        label: 0,
    };
    assert_eq!(preprocess(&px, 1).unwrap().data(), &[1.0, -1.0, 0.0]);
    assert_eq!(denormalize(&Tensor::from_vec(vec![-1.0, 1.0, 3.0])).data(), &[0.0, 1.0, 1.0]);
}

#[test]
fn checkerboard_to_one_pixel() {
    let px = LabeledImage {
        pixels: Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        label: 0,
    };
    assert_eq!(preprocess(&px, 1).unwrap().data(), &[1.0]);
}

#[test]
fn upsizing_repeats_pixels() {
    let px = Tensor::new(vec![1, 2, 2], vec![0.0, 0.25, 0.5, 0.75]).unwrap();
    let big = resize_nearest(&px, 4).unwrap();
    assert_eq!(
        big.data(),
        &[0.0, 0.0, 0.25, 0.25, 0.0, 0.0, 0.25, 0.25, 0.5, 0.5, 0.75, 0.75, 0.5, 0.5, 0.75, 0.75]
    );
}

#[test]
fn errors() {
    assert!(generate_dataset(MAX_CLASSES + 1, 4, 16, 0).is_err());
    assert!(generate_dataset(1, 0, 16, 0).is_err());
    let flat = LabeledImage {
        pixels: Tensor::from_vec(vec![0.5; 4]),
        label: 0,
    };
    assert!(preprocess(&flat, 2).is_err());
    let ok = &generate_dataset(1, 1, 8, 0).unwrap()[0];
    assert!(preprocess(ok, 0).is_err());
}

proptest! {
    #[test]
    fn round_trip_is_exact(levels in prop::collection::vec(0u32..=256, 12), target in 1usize..6) {
        let data: Vec<f64> = levels.iter().map(|&l| l as f64 / 256.0).collect();
        let img = LabeledImage { pixels: Tensor::new(vec![3, 2, 2], data).unwrap(), label: 0 };
        let back = denormalize(&preprocess(&img, target).unwrap());
        prop_assert_eq!(back, resize_nearest(&img.pixels, target).unwrap());
    }

    #[test]
    fn generated_sets_round_trip(seed in 0u64..1000) {
        let img = &generate_dataset(3, 1, 8, seed).unwrap()[2];
        let back = denormalize(&preprocess(img, 8).unwrap());
        prop_assert_eq!(&back, &img.pixels);
    }
}
