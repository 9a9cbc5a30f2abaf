use std::path::Path;

use anytime_core::data::*;
use anytime_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rgb_file(dir: &Path, name: &str, records: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::with_capacity(records * 3073);
    for _ in 0..records {
        bytes.push(rng.random_range(0..10u8));
        bytes.extend((0..3072).map(|_| rng.random::<u8>()));
    }
    std::fs::write(dir.join(name), &bytes).unwrap();
    bytes
}

fn flat(v: f32) -> ImageRecord {
    ImageRecord::gray(0, vec![v; IMAGE_PIXELS])
}

#[test]
fn first_record_matches_byte_level_parse() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = random_rgb_file(dir.path(), "b.bin", 3, 1);
    let recs = read_batch_file(&dir.path().join("b.bin")).unwrap();
    assert_eq!(recs.len(), 3);
    // label byte, then 1024 red, 1024 green, 1024 blue bytes
    assert_eq!(recs[0].label, bytes[0]);
    for (i, &b) in bytes[1..3073].iter().enumerate() {
        assert_eq!(recs[0].pixels[i], b as f32 / 255.0);
    }
    assert_eq!(recs[2].label, bytes[2 * 3073]);
}

#[test]
fn loads_full_layout_and_round_trips_encoding() {
    let dir = tempfile::tempdir().unwrap();
    for (i, f) in expected_files().iter().enumerate() {
        random_rgb_file(dir.path(), f, 4, i as u64);
    }
    let data = load_cifar10(dir.path()).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (20, 4));
    let again = encode_records(&data.test).unwrap();
    assert_eq!(again, std::fs::read(dir.path().join(TEST_FILE)).unwrap());
}

#[test]
fn truncated_file_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.bin"), vec![0u8; 3072]).unwrap();
    let err = read_batch_file(&dir.path().join("t.bin")).unwrap_err();
    assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    assert!(err.to_string().contains("t.bin"));
}

#[test]
fn bad_label_is_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = vec![0u8; 2 * 3073];
    bytes[3073] = 10;
    std::fs::write(dir.path().join("l.bin"), bytes).unwrap();
    assert!(matches!(
        read_batch_file(&dir.path().join("l.bin")),
        Err(Error::Corrupt { .. })
    ));
}

#[test]
fn missing_file_error_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_cifar10(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("data_batch_1.bin"), "{err}");
}

#[test]
fn class_counts_tally_labels() {
    let imgs = synthetic_images(50, 0);
    assert_eq!(class_counts(&imgs), [5; 10]);
}

#[test]
fn grayscale_weights() {
    let neutral = ImageRecord {
        label: 1,
        channels: 3,
        pixels: vec![0.37; 3 * IMAGE_PIXELS],
    };
    let g = to_grayscale(&neutral);
    assert_eq!(g.channels, 1);
    assert!(g.pixels.iter().all(|&p| (p - 0.37).abs() < 1e-6));

    let mut red = vec![0.0; 3 * IMAGE_PIXELS];
    red[..IMAGE_PIXELS].fill(1.0);
    let g = to_grayscale(&ImageRecord { label: 0, channels: 3, pixels: red });
    assert!(g.pixels.iter().all(|&p| (p - 0.299).abs() < 1e-6));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rgb: Vec<f32> = (0..3 * IMAGE_PIXELS).map(|_| rng.random()).collect();
    let g = to_grayscale(&ImageRecord { label: 0, channels: 3, pixels: rgb.clone() });
    for i in 0..IMAGE_PIXELS {
        let want = 0.299 * rgb[i] as f64 + 0.587 * rgb[i + 1024] as f64 + 0.114 * rgb[i + 2048] as f64;
        assert!((g.pixels[i] as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn zero_noise_is_exact_copy() {
    let img = synthetic_images(1, 4).remove(0);
    let out = add_noise(&img, &NoiseSpec { sd: 0.0, seed: 9 }).unwrap();
    assert_eq!(out, img);
}

#[test]
fn noise_statistics() {
    let mut values = Vec::new();
    for seed in 0..10 {
        let out = add_noise(&flat(0.5), &NoiseSpec { sd: 0.5, seed }).unwrap();
        values.extend(out.pixels.iter().map(|&v| v as f64 - 0.5));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((sd - 0.5).abs() < 0.02, "sd {sd}");
    // unclipped
    assert!(values.iter().any(|&v| v + 0.5 < 0.0) && values.iter().any(|&v| v + 0.5 > 1.0));
}

#[test]
fn noise_is_shared_across_channels() {
    let rgb = ImageRecord {
        label: 0,
        channels: 3,
        pixels: vec![0.5; 3 * IMAGE_PIXELS],
    };
    let out = add_noise(&rgb, &NoiseSpec { sd: 0.1, seed: 1 }).unwrap();
    assert_eq!(out.pixels[..1024], out.pixels[1024..2048]);
    assert_eq!(out.pixels[..1024], out.pixels[2048..]);
}

#[test]
fn negative_sd_is_rejected() {
    assert!(add_noise(&flat(0.5), &NoiseSpec { sd: -0.1, seed: 0 }).is_err());
}

#[test]
fn default_policy_grid() {
    let p = TrainNoisePolicy::default();
    assert_eq!(p.apply_probability, 0.5);
    let want = [0.0, 0.02, 0.04, 0.06, 0.08, 0.10, 0.12, 0.14, 0.15];
    assert_eq!(p.sd_grid.len(), want.len());
    for (a, b) in p.sd_grid.iter().zip(want) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn half_of_batches_receive_noise() {
    let imgs: Vec<ImageRecord> = (0..10_000).map(|i| ImageRecord::gray((i % 10) as u8, vec![0.5; IMAGE_PIXELS])).collect();
    let policy = TrainNoisePolicy::default();
    let noisy = train_batch_pipeline(&imgs, &policy, Normalization::identity(), 1, 77)
        .unwrap()
        .filter(|b| b.as_ref().unwrap().noise_sd.is_some())
        .count();
    let frac = noisy as f64 / 10_000.0;
    assert!((frac - 0.5).abs() < 0.02, "{frac}");
}

#[test]
fn noiseless_policy_only_flips_and_normalizes() {
    let imgs = synthetic_images(40, 2);
    let norm = Normalization::from_records(&imgs).unwrap();
    let mut seen = 0;
    for batch in train_batch_pipeline(&imgs, &TrainNoisePolicy::none(), norm, 8, 3).unwrap() {
        let batch = batch.unwrap();
        assert_eq!(batch.noise_sd, None);
        for (j, &label) in batch.labels.iter().enumerate() {
            let got = &batch.images.data()[j * IMAGE_PIXELS..(j + 1) * IMAGE_PIXELS];
            let matches = |img: &ImageRecord, flip: bool| {
                (0..IMAGE_PIXELS).all(|p| {
                    let (y, x) = (p / 32, p % 32);
                    let src = if flip { y * 32 + 31 - x } else { p };
                    (got[p] - (img.pixels[src] - norm.mean) / norm.std).abs() < 1e-6
                })
            };
            let found = imgs
                .iter()
                .any(|img| usize::from(img.label) == label && (matches(img, false) || matches(img, true)));
            assert!(found, "batch image {j} is not a flipped/unflipped normalized source");
            seen += 1;
        }
    }
    assert_eq!(seen, 40);
}

#[test]
fn normalized_training_set_is_standardized() {
    let imgs = synthetic_images(200, 5);
    let norm = Normalization::from_records(&imgs).unwrap();
    let vals: Vec<f64> = imgs
        .iter()
        .flat_map(|r| r.pixels.iter().map(|&p| norm.apply(p) as f64))
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-3 && (sd - 1.0).abs() < 1e-3, "{mean} {sd}");
}

#[test]
fn pipeline_is_deterministic_and_label_preserving() {
    let imgs = synthetic_images(100, 6);
    let norm = Normalization::from_records(&imgs).unwrap();
    let policy = TrainNoisePolicy::default();
    let run = |seed| {
        train_batch_pipeline(&imgs, &policy, norm, 16, seed)
            .unwrap()
            .map(Result::unwrap)
            .collect::<Vec<_>>()
    };
    let (a, b, c) = (run(1), run(1), run(2));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let mut labels: Vec<usize> = a.iter().flat_map(|x| x.labels.clone()).collect();
    labels.sort();
    let mut want: Vec<usize> = imgs.iter().map(|r| r.label as usize).collect();
    want.sort();
    assert_eq!(labels, want);
}

fn decode_png(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!(info.color_type, png::ColorType::Grayscale);
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

#[test]
fn uniform_grey_renders_as_128() {
    let png = render_stimulus(&flat(0.5), &NoiseSpec { sd: 0.0, seed: 0 }, 190).unwrap();
    let (w, h, px) = decode_png(&png);
    assert_eq!((w, h), (190, 190));
    assert!(px.iter().all(|&p| p == 128));
}

#[test]
fn noisy_stimulus_is_clipped_and_reproducible() {
    let spec = NoiseSpec { sd: 2.0, seed: 5 };
    let a = render_stimulus(&flat(0.5), &spec, 190).unwrap();
    assert_eq!(a, render_stimulus(&flat(0.5), &spec, 190).unwrap());
    let (_, _, px) = decode_png(&a);
    assert!(px.contains(&0) && px.contains(&255));
}

#[test]
fn upscale_maps_each_source_pixel_to_a_constant_block() {
    let checker: Vec<f32> = (0..IMAGE_PIXELS)
        .map(|p| if (p / 32 + p % 32) % 2 == 0 { 1.0 } else { 0.0 })
        .collect();
    let img = ImageRecord::gray(0, checker);
    let (_, _, px) = decode_png(&render_stimulus(&img, &NoiseSpec { sd: 0.0, seed: 0 }, 190).unwrap());
    // independent oracle: destination d belongs to source s when s*190 <= d*32 < (s+1)*190
    for sy in 0..32usize {
        for sx in 0..32usize {
            let want = if (sy + sx) % 2 == 0 { 255 } else { 0 };
            let ys = (0..190usize).filter(|&d| sy * 190 <= d * 32 && d * 32 < (sy + 1) * 190);
            for y in ys {
                for x in (0..190usize).filter(|&d| sx * 190 <= d * 32 && d * 32 < (sx + 1) * 190) {
                    assert_eq!(px[y * 190 + x], want, "src ({sy},{sx}) dst ({y},{x})");
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn noise_depends_only_on_seed(seed in any::<u64>(), sd in 0.0f32..2.0) {
        let img = flat(0.3);
        let a = add_noise(&img, &NoiseSpec { sd, seed }).unwrap();
        let b = add_noise(&img, &NoiseSpec { sd, seed }).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn grayscale_stays_in_unit_range(px in proptest::collection::vec(0.0f32..=1.0, 3 * 1024)) {
        let g = to_grayscale(&ImageRecord { label: 0, channels: 3, pixels: px });
        prop_assert!(g.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn stimulus_is_always_requested_size(size in 1usize..300, sd in 0.0f32..1.0) {
        let px = stimulus_pixels(&flat(0.2), &NoiseSpec { sd, seed: 1 }, size).unwrap();
        prop_assert_eq!(px.len(), size * size);
    }

    #[test]
    fn derived_seeds_differ_across_streams(base in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        prop_assume!(a != b);
        prop_assert_ne!(derive_seed(base, a), derive_seed(base, b));
    }
}
