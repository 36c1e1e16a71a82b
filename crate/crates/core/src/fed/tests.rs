use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use super::Strategy;
use crate::detector::{AnchorConfig, DetectorConfig};
use crate::scene::{build_client_datasets, build_test_set, ClientProfile, ModalityPolicy, SceneParams, WeatherMix};

fn random_vectors(rng: &mut impl Rng, n: usize, d: usize) -> Vec<WeightVector> {
    (0..n)
        .map(|_| WeightVector {
            values: (0..d).map(|_| rng.sample(StandardNormal)).collect(),
            config_hash: 7,
        })
        .collect()
}

fn brute_knn(points: &[(usize, &[f64])], q: &[f64], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .filter(|(id, _)| Some(*id) != exclude)
        .map(|(id, v)| (squared_distance(q, v), *id))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d, id)| (id, d.sqrt())).collect()
}

#[test]
fn flatten_round_trip_and_hash_guard() {
    let det = Detector::new(micro_detector()).unwrap();
    let p = det.init_params(1).unwrap();
    let w = flatten(&p);
    assert_eq!(w.dim(), det.num_params());
    let back = unflatten(&w, &det.init_params(2).unwrap()).unwrap();
    assert_eq!(back.to_flat(), p.to_flat());
    assert_eq!(flatten(&det.init_params(9).unwrap()).dim(), w.dim());
    let other = Detector::new(DetectorConfig { hidden: 5, ..micro_detector() }).unwrap();
    assert!(matches!(unflatten(&w, &other.init_params(1).unwrap()), Err(Error::Config(_))));
}

#[test]
fn aggregation_is_the_plain_mean() {
    let zero = WeightVector { values: vec![0.0; 4], config_hash: 1 };
    let two = WeightVector { values: vec![2.0; 4], config_hash: 1 };
    assert_eq!(aggregate(&[&zero, &two]).unwrap().values, vec![1.0; 4]);
    assert_eq!(aggregate(&[&two, &two, &two, &two]).unwrap(), two);
    let mut rng = seed::rng(3);
    let vs = random_vectors(&mut rng, 13, 50);
    let refs: Vec<&WeightVector> = vs.iter().collect();
    let mean = aggregate(&refs).unwrap();
    for d in 0..50 {
        let want = vs.iter().rev().map(|v| v.values[d]).sum::<f64>() / 13.0;
        assert!((mean.values[d] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
    let odd = WeightVector { values: vec![0.0; 4], config_hash: 2 };
    assert!(aggregate(&[&zero, &odd]).is_err());
    assert!(aggregate(&[]).is_err());
}

#[test]
fn kdtree_structure() {
    let one = [(3usize, [1.0, 2.0].as_slice())];
    let t = KdTree::build(&one, None).unwrap();
    assert_eq!(t.leaf_ids(), vec![3]);
    assert_eq!(t.query_knn(&[0.0, 0.0], 1, None).unwrap(), vec![(3, 5f64.sqrt())]);

    let same = [(0usize, [1.0].as_slice()), (1, [1.0].as_slice())];
    let t = KdTree::build(&same, None).unwrap();
    assert_eq!(t.query_knn(&[1.0], 2, None).unwrap(), vec![(0, 0.0), (1, 0.0)]);

    let mut rng = seed::rng(4);
    let vs = random_vectors(&mut rng, 40, 30);
    let pts: Vec<(usize, &[f64])> = vs.iter().enumerate().map(|(i, v)| (100 + i, v.values.as_slice())).collect();
    let t = KdTree::build(&pts, None).unwrap();
    let mut ids = t.leaf_ids();
    ids.sort_unstable();
    assert_eq!(ids, (100..140).collect::<Vec<_>>());
    assert!(t.max_leaf_size() <= LEAF_SIZE);
    assert!(t.splits_are_consistent());
    let dims = [0usize, 5, 9];
    assert!(KdTree::build(&pts, Some(&dims)).unwrap().splits_are_consistent());
    assert!(KdTree::build(&pts, Some(&[30])).is_err());
}

#[test]
fn knn_small_cases() {
    let pts = [(0usize, [0.0].as_slice()), (1, [1.0].as_slice()), (2, [10.0].as_slice())];
    let t = KdTree::build(&pts, None).unwrap();
    assert!(t.query_knn(&[0.0], 0, None).unwrap().is_empty());
    assert_eq!(t.query_knn(&[0.0], 1, Some(0)).unwrap(), vec![(1, 1.0)]);
    assert_eq!(t.query_knn(&[0.0], 1, None).unwrap(), vec![(0, 0.0)]);
    assert!(t.query_knn(&[0.0], 3, Some(0)).is_err());
}

#[test]
fn knn_matches_brute_force() {
    let mut rng = seed::rng(5);
    for _ in 0..100 {
        let vs = random_vectors(&mut rng, 40, 200);
        let pts: Vec<(usize, &[f64])> = vs.iter().enumerate().map(|(i, v)| (i, v.values.as_slice())).collect();
        let t = KdTree::build(&pts, None).unwrap();
        let k = rng.random_range(1..39);
        let q = rng.random_range(0..40);
        assert_eq!(t.query_knn(pts[q].1, k, Some(q)).unwrap(), brute_knn(&pts, pts[q].1, k, Some(q)));
        let outside: Vec<f64> = (0..200).map(|_| rng.sample(StandardNormal)).collect();
        assert_eq!(t.query_knn(&outside, k, None).unwrap(), brute_knn(&pts, &outside, k, None));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Integer lattices force many exact distance ties.
    #[test]
    fn knn_exact_with_ties(
        coords in prop::collection::vec(prop::collection::vec(-2i32..3, 3), 2..30),
        k in 0usize..30,
        q in prop::collection::vec(-2i32..3, 3),
    ) {
        let vs: Vec<Vec<f64>> = coords.iter().map(|c| c.iter().map(|&x| x as f64).collect()).collect();
        let pts: Vec<(usize, &[f64])> = vs.iter().enumerate().map(|(i, v)| (i, v.as_slice())).collect();
        let t = KdTree::build(&pts, None).unwrap();
        let k = k.min(pts.len());
        let qf: Vec<f64> = q.iter().map(|&x| x as f64).collect();
        prop_assert_eq!(t.query_knn(&qf, k, None).unwrap(), brute_knn(&pts, &qf, k, None));
        prop_assert!(t.splits_are_consistent());
    }

    #[test]
    fn selection_matches_exhaustive_argmin(seed_ in any::<u64>(), n in 2usize..12, m_frac in 0.0..1.0f64) {
        let mut rng = seed::rng(seed_);
        let vs = random_vectors(&mut rng, n, 6);
        let m = 1 + ((n - 1) as f64 * m_frac) as usize;
        let pairs: Vec<(usize, &WeightVector)> = vs.iter().enumerate().collect();
        let sel = select_clients(&pairs, m).unwrap();
        prop_assert_eq!(sel.ids.len(), m);
        if m < n {
            let pts: Vec<(usize, &[f64])> = vs.iter().enumerate().map(|(i, v)| (i, v.values.as_slice())).collect();
            let spread: Vec<f64> = (0..n)
                .map(|i| brute_knn(&pts, pts[i].1, m - 1, Some(i)).iter().map(|p| p.1).sum())
                .collect();
            let best = (0..n).min_by(|&a, &b| spread[a].total_cmp(&spread[b]).then(a.cmp(&b))).unwrap();
            let mut want: Vec<usize> = std::iter::once(best)
                .chain(brute_knn(&pts, pts[best].1, m - 1, Some(best)).into_iter().map(|p| p.0))
                .collect();
            want.sort_unstable();
            prop_assert_eq!(sel.ids, want);
            prop_assert_eq!(sel.spread, spread);
        }
    }
}

#[test]
fn selection_boundaries() {
    let vs: Vec<WeightVector> = [0.0, 1.0, 10.0]
        .iter()
        .map(|&x| WeightVector { values: vec![x], config_hash: 0 })
        .collect();
    let pairs: Vec<(usize, &WeightVector)> = vs.iter().enumerate().collect();
    assert_eq!(select_clients(&pairs, 2).unwrap().ids, vec![0, 1]);
    assert_eq!(select_clients(&pairs, 3).unwrap().ids, vec![0, 1, 2]);
    assert!(matches!(select_clients(&pairs, 4), Err(Error::Config(_))));
    assert!(matches!(select_clients(&pairs, 0), Err(Error::Config(_))));
}

#[test]
fn far_outliers_are_never_selected() {
    let mut rng = seed::rng(6);
    for _ in 0..20 {
        let mut vs = random_vectors(&mut rng, 40, 50);
        for v in vs.iter_mut().skip(35) {
            v.values.iter_mut().for_each(|x| *x += 100.0);
        }
        let pairs: Vec<(usize, &WeightVector)> = vs.iter().enumerate().collect();
        let sel = select_clients(&pairs, 16).unwrap();
        assert!(sel.ids.iter().all(|&id| id < 35), "{:?}", sel.ids);
    }
}

#[test]
fn pca_degenerate_inputs() {
    let same = [[1.0, 2.0, 3.0]; 5];
    let refs: Vec<&[f64]> = same.iter().map(|v| v.as_slice()).collect();
    let e = pca_embed(&refs).unwrap();
    assert!(e.coords.iter().all(|c| c[0] == 0.0 && c[1] == 0.0));

    let line: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let refs: Vec<&[f64]> = line.iter().map(|v| v.as_slice()).collect();
    let e = pca_embed(&refs).unwrap();
    let spread = e.coords.iter().map(|c| c[0].abs()).fold(0.0, f64::max);
    assert!(e.coords.iter().all(|c| c[1].abs() < 1e-6 * spread));
    // Points in input order increase along the first component.
    assert!(e.coords.windows(2).all(|w| w[1][0] > w[0][0]));
}

#[test]
fn pca_matches_dense_eigensolver() {
    let mut rng = seed::rng(7);
    for trial in 0..10 {
        let n = 12 + trial;
        let scales: Vec<f64> = (0..10).map(|d| 1.0 + 0.6 * (10 - d) as f64).collect();
        let vs: Vec<Vec<f64>> = (0..n)
            .map(|_| scales.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let refs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        let e = pca_embed(&refs).unwrap();
        let x = DMatrix::from_fn(n, 10, |i, j| vs[i][j]);
        let mean = x.row_mean();
        let centred = DMatrix::from_fn(n, 10, |i, j| x[(i, j)] - mean[j]);
        let cov = centred.transpose() * &centred / n as f64;
        let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for c in 0..2 {
            assert!((e.explained[c] - eig[c]).abs() < 1e-8 * eig[0], "trial {trial}: {:?} vs {:?}", e.explained, &eig[..2]);
        }
    }
}

fn micro_detector() -> DetectorConfig {
    DetectorConfig {
        grid: 16,
        lidar_channels: 2,
        width: 2,
        attention_dim: 2,
        rpn_hidden: 2,
        roi_size: 1,
        hidden: 4,
        anchors: AnchorConfig {
            scales: vec![5.0],
            ..AnchorConfig::default()
        },
        pre_nms: 16,
        post_nms: 8,
        ..DetectorConfig::default()
    }
}

fn micro_scene() -> SceneParams {
    SceneParams {
        grid: 16,
        lidar_channels: 2,
        min_vehicles: 1,
        max_vehicles: 2,
        min_length: 3.0,
        max_length: 5.0,
        placement_radius: 6.0,
        lidar_range: 5.0,
        radar_range: 8.0,
        clutter_radius: 3.0,
        ..SceneParams::default()
    }
}

struct Fixture {
    det: Detector,
    init: ParamStore,
    clients: Vec<ClientState>,
    test: Vec<Sample>,
}

fn fixture(n: usize, samples: usize) -> Fixture {
    let det = Detector::new(micro_detector()).unwrap();
    let profiles: Vec<ClientProfile> = (0..n)
        .map(|id| ClientProfile {
            id,
            keep_ratio: if id % 2 == 0 { 1.0 } else { 0.5 },
            modality: ModalityPolicy::none(),
            weather: WeatherMix::default(),
            samples,
        })
        .collect();
    let sp = micro_scene();
    let data = build_client_datasets(&profiles, &sp, 11).unwrap();
    let clients = prepare_clients(&det, data.into_iter().enumerate().collect(), Imputation::ZeroFill, None, 11, 1).unwrap();
    let test = build_test_set(&sp, 4, 11, &WeatherMix::default(), &ModalityPolicy::none()).unwrap();
    Fixture {
        init: det.init_params(11).unwrap(),
        det,
        clients,
        test,
    }
}

fn fl(strategy: Strategy, rounds: usize) -> FlConfig {
    FlConfig {
        rounds,
        local_epochs: 1,
        selection_fraction: 1.0,
        strategy,
        batch_size: 2,
        sgd: SgdConfig {
            learning_rate: 0.05,
            decay: 0.0,
        },
        imputation: Imputation::ZeroFill,
        ..FlConfig::default()
    }
}

impl Fixture {
    fn federation<'a>(&'a self, cfg: &'a FlConfig, eval: &'a EvalConfig, workers: usize) -> Federation<'a> {
        Federation {
            detector: &self.det,
            init: &self.init,
            clients: &self.clients,
            test: &self.test,
            config: cfg,
            eval,
            workers,
        }
    }
}

#[test]
fn local_update_edge_cases() {
    let f = fixture(2, 3);
    let g = flatten(&f.init);
    let zero_epochs = FlConfig { local_epochs: 0, ..fl(Strategy::Fedavg, 1) };
    let out = client_update(&f.det, &f.init, &f.clients[0], &g, &g, &zero_epochs, 0).unwrap();
    assert_eq!(out.weights, g);

    let cfg = fl(Strategy::Fedavg, 1);
    let a = client_update(&f.det, &f.init, &f.clients[0], &g, &g, &cfg, 0).unwrap();
    assert_ne!(a.weights, g);
    assert_eq!(a.epoch_losses.len(), 1);
    // Same data and seed give the same update.
    let twin = ClientState { id: 9, ..f.clients[0].clone() };
    assert_eq!(client_update(&f.det, &f.init, &twin, &g, &g, &cfg, 0).unwrap(), a);

    let empty = ClientState { samples: vec![], targets: vec![], ..f.clients[0].clone() };
    let out = client_update(&f.det, &f.init, &empty, &g, &g, &cfg, 0).unwrap();
    assert!(out.skipped && out.weights == g);
}

#[test]
fn proximal_term_pulls_toward_global() {
    let f = fixture(1, 4);
    let g = flatten(&f.init);
    // Start away from the anchor so the pull is visible from the first step.
    let mut rng = seed::rng(12);
    let start = WeightVector {
        values: g.values.iter().map(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect(),
        config_hash: g.config_hash,
    };
    let mut last = f64::INFINITY;
    for mu in [0.0, 0.1, 10.0] {
        let cfg = FlConfig { prox_mu: mu, batch_size: 4, ..fl(Strategy::Fedprox, 1) };
        let out = client_update(&f.det, &f.init, &f.clients[0], &start, &g, &cfg, 0).unwrap();
        let d = squared_distance(&out.weights.values, &g.values);
        assert!(d < last, "mu {mu}: {d} !< {last}");
        last = d;
    }
}

#[test]
fn autofed_with_full_selection_equals_fedavg() {
    let f = fixture(4, 3);
    let eval = EvalConfig::default();
    let avg = fl(Strategy::Fedavg, 3);
    let auto = fl(Strategy::Autofed, 3);
    let (ra, sa) = f.federation(&avg, &eval, 1).run_training(None, |_, _| Ok(())).unwrap();
    let (rb, sb) = f.federation(&auto, &eval, 1).run_training(None, |_, _| Ok(())).unwrap();
    assert_eq!(sa.global, sb.global);
    for (a, b) in ra.iter().zip(&rb) {
        assert_eq!(a.selected, b.selected);
        assert_eq!(a.local_losses, b.local_losses);
    }
}

#[test]
fn rounds_report_selection_and_bytes() {
    let f = fixture(5, 2);
    let eval = EvalConfig::default();
    let cfg = FlConfig { selection_fraction: 0.4, eval_every: 1, ..fl(Strategy::Autofed, 2) };
    let (reports, state) = f.federation(&cfg, &eval, 1).run_training(None, |_, _| Ok(())).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(state.next_round, 2);
    let d = f.det.num_params() as u64;
    for r in &reports {
        assert_eq!(r.selected.len(), 2);
        assert!(r.selected.iter().all(|id| *id < 5));
        assert_eq!(r.bytes_model_up, 8 * d * 5);
        assert_eq!(r.bytes_model_down, 8 * d * 5);
        let raw: u64 = f.clients.iter().map(|c| c.raw_bytes).sum();
        assert_eq!(r.bytes_raw_data, raw);
        let e = r.eval.unwrap();
        assert!(e.ap80 <= e.ap50);
    }

    let none = fl(Strategy::Autofed, 0);
    let (reports, state) = f.federation(&none, &eval, 1).run_training(None, |_, _| Ok(())).unwrap();
    assert!(reports.is_empty());
    assert_eq!(state.global, flatten(&f.init));
}

#[test]
fn training_is_deterministic_across_worker_counts() {
    let f = fixture(4, 3);
    let eval = EvalConfig::default();
    let cfg = FlConfig { selection_fraction: 0.5, eval_every: 1, ..fl(Strategy::Autofed, 2) };
    let (a, sa) = f.federation(&cfg, &eval, 1).run_training(None, |_, _| Ok(())).unwrap();
    let (b, sb) = f.federation(&cfg, &eval, 4).run_training(None, |_, _| Ok(())).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn resumed_training_continues_identically() {
    let f = fixture(3, 2);
    let eval = EvalConfig::default();
    let cfg = FlConfig { eval_every: 1, ..fl(Strategy::Fedprox, 3) };
    let (full, end) = f.federation(&cfg, &eval, 1).run_training(None, |_, _| Ok(())).unwrap();
    let mut saved = None;
    let _ = f.federation(&cfg, &eval, 1).run_training(None, |r, s| {
        if r.round == 0 {
            saved = Some(s.clone());
            return Err(Error::Usage("interrupt".into()));
        }
        Ok(())
    });
    let (rest, end2) = f.federation(&cfg, &eval, 1).run_training(saved, |_, _| Ok(())).unwrap();
    assert_eq!(end, end2);
    assert_eq!(&full[1..], &rest[..]);
}

#[test]
fn standalone_keeps_separate_models() {
    let f = fixture(3, 2);
    let eval = EvalConfig::default();
    let cfg = fl(Strategy::Standalone, 2);
    let (reports, state) = f.federation(&cfg, &eval, 1).run_training(None, |_, _| Ok(())).unwrap();
    assert_eq!(state.locals.len(), 3);
    assert_ne!(state.locals[0], state.locals[1]);
    assert_eq!(state.global, flatten(&f.init));
    assert_eq!(reports[1].bytes_model_up, 0);
    assert!(reports[1].eval.is_some());
}

#[test]
fn report_lines_round_trip_without_timestamp() {
    let f = fixture(2, 2);
    let eval = EvalConfig::default();
    let cfg = FlConfig { record_embedding: true, ..fl(Strategy::Fedavg, 1) };
    let (reports, _) = f.federation(&cfg, &eval, 1).run_training(None, |_, _| Ok(())).unwrap();
    let line = reports[0].ndjson_line("2026-01-01T00:00:00Z").unwrap();
    let (back, stamp) = RoundReport::from_ndjson_line(&line).unwrap();
    assert_eq!(back, reports[0]);
    assert_eq!(stamp.as_deref(), Some("2026-01-01T00:00:00Z"));
    assert_eq!(reports[0].embedding.as_ref().unwrap().len(), 2);
    assert_eq!(reports[0].csv_row().split(',').count(), CSV_HEADER.split(',').count());
}
