use std::collections::HashSet;

use proptest::prelude::*;
use sha2::{Digest, Sha256};

use super::*;

fn small() -> SceneParams {
    SceneParams {
        grid: 64,
        placement_radius: 30.0,
        lidar_range: 20.0,
        radar_range: 32.0,
        clutter_radius: 8.0,
        ..SceneParams::default()
    }
}

fn scene_with(params: &SceneParams, vehicles: Vec<RotatedBox>) -> Scene {
    Scene {
        grid: params.grid,
        seed: 4,
        vehicles,
    }
}

fn support_radius(frame: &Tensor, params: &SceneParams) -> f64 {
    let n = params.grid;
    let (ex, ey) = params.ego();
    let mut r: f64 = 0.0;
    for (i, v) in frame.data().iter().enumerate() {
        if *v != 0.0 {
            let cell = i % (n * n);
            let (row, col) = (cell / n, cell % n);
            r = r.max((col as f64 + 0.5 - ex).hypot(row as f64 + 0.5 - ey));
        }
    }
    r
}

#[test]
fn empty_and_deterministic_scenes() {
    let p = SceneParams {
        min_vehicles: 0,
        max_vehicles: 0,
        ..SceneParams::default()
    };
    assert!(generate_scene(1, &p).unwrap().vehicles.is_empty());
    let d = SceneParams::default();
    assert_eq!(generate_scene(9, &d).unwrap(), generate_scene(9, &d).unwrap());
    assert_ne!(generate_scene(9, &d).unwrap(), generate_scene(10, &d).unwrap());
}

#[test]
fn placed_vehicles_do_not_overlap() {
    let p = SceneParams::default();
    for seed in 0..1000 {
        let s = generate_scene(seed, &p).unwrap();
        assert!((p.min_vehicles..=p.max_vehicles).contains(&s.vehicles.len()));
        for (i, a) in s.vehicles.iter().enumerate() {
            let (ex, ey) = p.ego();
            assert!(a.distance_to(ex, ey) <= p.placement_radius);
            assert!(a.cx >= 0.0 && a.cx < p.grid as f64 && a.cy >= 0.0 && a.cy < p.grid as f64);
            for b in &s.vehicles[i + 1..] {
                assert!(rotated_iou(a, b) < 0.05);
            }
        }
    }
}

#[test]
fn impossible_density_is_a_generation_error() {
    let p = SceneParams {
        min_vehicles: 50,
        max_vehicles: 50,
        placement_radius: 3.0,
        rejection_budget: 500,
        ..SceneParams::default()
    };
    assert!(matches!(generate_scene(0, &p), Err(Error::Generation(_))));
}

#[test]
fn lidar_empty_and_out_of_range() {
    let p = small();
    let empty = render_lidar(&scene_with(&p, vec![]), &p);
    assert!(empty.data().iter().all(|v| *v == 0.0));
    let far = RotatedBox::new(32.0 + 27.0, 32.0, 6.0, 2.4, 90.0, true);
    let frame = render_lidar(&scene_with(&p, vec![far]), &p);
    assert!(frame.data().iter().all(|v| *v == 0.0));
}

#[test]
fn lidar_occupancy_covers_exactly_the_footprint() {
    let p = small();
    // Axis-aligned 8x3 box spanning columns 36..44 and rows 30..33.
    let b = RotatedBox::new(40.0, 31.5, 8.0, 3.0, 0.0, true);
    let frame = render_lidar(&scene_with(&p, vec![b]), &p);
    let n = p.grid;
    let plane = n * n;
    let intensity = &frame.data()[(p.lidar_channels - 1) * plane..];
    for r in 0..n {
        for c in 0..n {
            let inside = (36..44).contains(&c) && (30..33).contains(&r);
            assert_eq!(intensity[r * n + c] > 0.0, inside, "cell ({r}, {c})");
            if inside {
                let d = (c as f64 + 0.5 - 32.0).hypot(r as f64 + 0.5 - 32.0);
                assert!((intensity[r * n + c] - 1.0 / (1.0 + d / p.intensity_d0)).abs() < 1e-15);
                // The lowest slice is always occupied.
                assert!(frame.data()[r * n + c] > 0.0);
            }
        }
    }
    assert!(frame.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn radar_noise_floor_and_extended_range() {
    let p = small();
    let empty = render_radar(&scene_with(&p, vec![]), &p, 1);
    let mean = empty.data().iter().sum::<f64>() / empty.numel() as f64;
    assert!(mean < 0.05, "noise mean {mean}");
    assert!(empty.data().iter().all(|v| *v >= 0.0));
    assert_eq!(empty, render_radar(&scene_with(&p, vec![]), &p, 1));

    // Between the two ranges: radar sees it, lidar does not.
    let mid = RotatedBox::new(32.0 + 26.0, 32.0, 6.0, 2.4, 90.0, true);
    let s = scene_with(&p, vec![mid]);
    assert!(render_lidar(&s, &p).data().iter().all(|v| *v == 0.0));
    let radar = render_radar(&s, &p, 1);
    let n = p.grid;
    assert!(radar.data()[32 * n + 58] > 0.5);
    assert!(support_radius(&radar, &p) > 0.0);
}

#[test]
fn radar_reaches_further_than_lidar() {
    let p = SceneParams {
        radar_floor: 0.0,
        ..small()
    };
    let mut checked = 0;
    for seed in 0..40 {
        let s = generate_scene(seed, &p).unwrap();
        let (ex, ey) = p.ego();
        if !s.vehicles.iter().any(|v| v.distance_to(ex, ey) > p.lidar_range + 4.0) {
            continue;
        }
        checked += 1;
        let l = support_radius(&render_lidar(&s, &p), &p);
        let r = support_radius(&render_radar(&s, &p, seed), &p);
        assert!(r > l, "seed {seed}: radar {r} lidar {l}");
    }
    assert!(checked > 5);
}

#[test]
fn weather_effects() {
    let p = small();
    // A ring of vehicles reaching the lidar range.
    let ring: Vec<RotatedBox> = (0..6)
        .map(|k| {
            let a = k as f64 * 60.0;
            let (s, c) = a.to_radians().sin_cos();
            RotatedBox::new(32.0 + 17.0 * c, 32.0 + 17.0 * s, 8.0, 3.2, a + 90.0, true)
        })
        .chain([RotatedBox::new(32.0, 41.0, 8.0, 3.2, 0.0, true)])
        .collect();
    let scene = scene_with(&p, ring);
    let sample = Sample {
        id: 1,
        lidar: Some(render_lidar(&scene, &p)),
        radar: Some(render_radar(&scene, &p, 2)),
        annotations: vec![],
        weather: Weather::Clear,
        lidar_imputed: false,
        radar_imputed: false,
    };
    assert_eq!(apply_weather(&sample, Weather::Clear, 3, &p), sample);

    let before = support_radius(sample.lidar.as_ref().unwrap(), &p);
    let fog = apply_weather(&sample, Weather::Fog, 3, &p);
    let after = support_radius(fog.lidar.as_ref().unwrap(), &p);
    assert!(before > p.lidar_range - 1.5);
    assert!(after <= p.fog_factor * p.lidar_range && after > p.fog_factor * p.lidar_range - 1.5);
    assert!((after / before - 0.5).abs() < 0.05);
    assert_eq!(fog.radar, sample.radar);
    assert_eq!(fog.weather, Weather::Fog);

    let rain = apply_weather(&sample, Weather::Rain, 3, &p);
    let snow = apply_weather(&sample, Weather::Snow, 3, &p);
    assert_eq!(snow, apply_weather(&sample, Weather::Snow, 3, &p));
    assert_ne!(snow, apply_weather(&sample, Weather::Snow, 4, &p));
    assert_eq!(snow.radar, sample.radar);
    let bright = |s: &Sample| {
        let l = s.lidar.as_ref().unwrap().data();
        let plane = p.grid * p.grid;
        l[(p.lidar_channels - 1) * plane..].iter().filter(|v| **v == 1.0).count()
    };
    assert!(bright(&snow) > bright(&rain));
    assert!(bright(&rain) > bright(&sample));
    assert!(support_radius(snow.lidar.as_ref().unwrap(), &p) <= before);
}

#[test]
fn annotation_dropping() {
    let p = small();
    let s = render_sample(7, 7, &p).unwrap();
    assert!(drop_annotations(&s, 1.0, 1).unwrap().annotations.iter().all(|a| a.kept));
    assert!(drop_annotations(&s, 0.0, 1).unwrap().annotations.iter().all(|a| !a.kept));
    assert!(drop_annotations(&s, 1.5, 1).is_err());

    let digest = |s: &Sample| {
        let mut h = Sha256::new();
        for b in s.ground_truth() {
            for v in [b.cx, b.cy, b.length, b.width, b.angle] {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()
    };
    let mut kept = 0;
    let mut total = 0;
    let mut seed = 0;
    while total < 10_000 {
        let d = drop_annotations(&s, 0.5, seed).unwrap();
        assert_eq!(digest(&d), digest(&s));
        kept += d.annotations.iter().filter(|a| a.kept).count();
        total += d.annotations.len();
        seed += 1;
    }
    let frac = kept as f64 / total as f64;
    assert!((frac - 0.5).abs() < 0.02, "kept fraction {frac}");
}

fn tiny_sample(id: u64) -> Sample {
    Sample {
        id,
        lidar: Some(Tensor::zeros(&[2, 2, 2])),
        radar: Some(Tensor::zeros(&[1, 2, 2])),
        annotations: vec![],
        weather: Weather::Clear,
        lidar_imputed: false,
        radar_imputed: false,
    }
}

#[test]
fn modality_dropping() {
    let s = tiny_sample(0);
    assert_eq!(drop_modality(&s, &ModalityPolicy::none(), 3).unwrap(), s);
    let radar_only = ModalityPolicy {
        drop_lidar: 0.0,
        drop_radar: 1.0,
    };
    let d = drop_modality(&s, &radar_only, 3).unwrap();
    assert!(d.lidar.is_some() && d.radar.is_none());
    let lidar_only = ModalityPolicy {
        drop_lidar: 1.0,
        drop_radar: 0.0,
    };
    assert!(matches!(drop_modality(&d, &lidar_only, 3), Err(Error::Policy(_))));
    assert!(drop_modality(&s, &ModalityPolicy { drop_lidar: 0.6, drop_radar: 0.6 }, 1).is_err());

    let quarter = ModalityPolicy {
        drop_lidar: 0.25,
        drop_radar: 0.25,
    };
    let (mut no_l, mut no_r) = (0, 0);
    for seed in 0..10_000 {
        let d = drop_modality(&s, &quarter, seed).unwrap();
        assert!(d.lidar.is_some() || d.radar.is_some());
        no_l += d.lidar.is_none() as usize;
        no_r += d.radar.is_none() as usize;
    }
    for count in [no_l, no_r] {
        assert!((count as f64 / 10_000.0 - 0.25).abs() < 0.02);
    }
}

fn profiles() -> Vec<ClientProfile> {
    (0..3)
        .map(|id| ClientProfile {
            id,
            keep_ratio: 0.3 + 0.3 * id as f64,
            modality: ModalityPolicy {
                drop_lidar: 0.25,
                drop_radar: 0.25,
            },
            weather: WeatherMix::uniform(),
            samples: 6,
        })
        .collect()
}

fn tiny_params() -> SceneParams {
    SceneParams {
        grid: 32,
        min_vehicles: 1,
        max_vehicles: 3,
        min_length: 4.0,
        max_length: 7.0,
        placement_radius: 14.0,
        lidar_range: 11.0,
        radar_range: 16.0,
        clutter_radius: 5.0,
        precipitation_mmh: 10.0,
        ..SceneParams::default()
    }
}

#[test]
fn client_datasets_are_deterministic_and_disjoint() {
    let p = tiny_params();
    let a = build_client_datasets(&profiles(), &p, 42).unwrap();
    assert_eq!(a, build_client_datasets(&profiles(), &p, 42).unwrap());
    assert_ne!(a, build_client_datasets(&profiles(), &p, 43).unwrap());
    let mut ids = HashSet::new();
    for (c, set) in a.iter().enumerate() {
        assert_eq!(set.len(), 6);
        for s in set {
            assert!(ids.insert(s.id));
            assert_eq!(SampleNamespace::of(s.id), SampleNamespace::Client(c));
            s.validate().unwrap();
        }
    }
    // Adding a client leaves existing clients untouched.
    let mut more = profiles();
    more.push(ClientProfile { id: 7, ..more[0].clone() });
    let b = build_client_datasets(&more, &p, 42).unwrap();
    assert_eq!(&b[..3], &a[..]);

    let test = build_test_set(&p, 4, 42, &WeatherMix::default(), &ModalityPolicy::none()).unwrap();
    let pre = build_pretrain_pairs(&p, 4, 42, &WeatherMix::default()).unwrap();
    for s in test.iter().chain(&pre) {
        assert!(ids.insert(s.id));
        assert!(s.has_lidar() && s.has_radar());
        assert!(s.annotations.iter().all(|a| a.kept));
    }

    let mut dup = profiles();
    dup[1].id = 0;
    assert!(matches!(build_client_datasets(&dup, &p, 1), Err(Error::Config(_))));
}

#[test]
fn dataset_files_round_trip() {
    let p = tiny_params();
    let sets = build_client_datasets(&profiles(), &p, 5).unwrap();
    let header = DatasetHeader {
        grid: p.grid,
        lidar_channels: p.lidar_channels,
        seed: 5,
    };
    let bytes = encode_dataset(&header, &sets[0]).unwrap();
    assert_eq!(bytes, encode_dataset(&header, &sets[0]).unwrap());
    let predicted: usize = sets[0]
        .iter()
        .map(|s| sample_encoded_len(p.grid, p.lidar_channels, s.has_lidar(), s.has_radar(), s.annotations.len()))
        .sum();
    assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 8 + 8 + predicted);
    let (h, back) = decode_dataset(&bytes).unwrap();
    assert_eq!(h, header);
    assert_eq!(back, sets[0]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("client0.bin");
    write_dataset(&path, &header, &sets[0]).unwrap();
    assert_eq!(read_dataset(&path).unwrap().1, sets[0]);
    assert!(decode_dataset(&bytes[..bytes.len() - 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_sample_keeps_a_modality(seed in any::<u64>(), pl in 0.0..1.0f64, frac in 0.0..1.0f64) {
        let policy = ModalityPolicy { drop_lidar: pl, drop_radar: (1.0 - pl) * frac };
        let profile = ClientProfile {
            id: 0,
            keep_ratio: 0.5,
            modality: policy,
            weather: WeatherMix::uniform(),
            samples: 3,
        };
        let p = SceneParams { grid: 16, min_vehicles: 0, max_vehicles: 2, min_length: 3.0, max_length: 4.0,
            placement_radius: 7.0, lidar_range: 6.0, radar_range: 8.0, clutter_radius: 3.0, ..SceneParams::default() };
        for s in &build_client_datasets(&[profile], &p, seed).unwrap()[0] {
            prop_assert!(s.validate().is_ok());
        }
    }
}
