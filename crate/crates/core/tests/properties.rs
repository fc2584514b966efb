use proptest::prelude::*;
use ssl2d::acoustics::{render_scene, AcousticsConfig, Environment, MicArray, Point2D, SourceEvent};
use ssl2d::config::{Profile, RunConfig};
use ssl2d::dsp::{pairwise_channel_map, pairwise_rearrange, stft_features, StftConfig};
use ssl2d::metrics::{associate, rmse_tp, scores};
use ssl2d::represent::{
    decode_hm, decode_rg, encode_hm, encode_rg, loss_hm, loss_rg, loss_tg, nms, CellActivity, GridSpec, Keypoint,
    RetrievalConfig,
};
use ssl2d::tensornet::Tensor;

fn point() -> impl Strategy<Value = Point2D> {
    (0.0..6.0f64, 0.0..6.0f64).prop_map(|(x, y)| Point2D::new(x, y))
}

/// One or two sources at least 2 m apart inside the 6 m room.
fn scene() -> impl Strategy<Value = Vec<Point2D>> {
    prop_oneof![
        point().prop_map(|p| vec![p]),
        (point(), point())
            .prop_filter("separation", |(a, b)| a.distance(b) >= 2.0)
            .prop_map(|(a, b)| vec![a, b]),
    ]
}

fn keypoints(ps: &[Point2D]) -> Vec<Keypoint> {
    ps.iter().map(|&position| Keypoint { position, score: 1.0 }).collect()
}

fn arrays() -> Vec<MicArray> {
    ssl2d::acoustics::default_arrays(&Environment::default())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn frame_count(len in 1usize..5000, half in 1usize..300, hop_frac in 0.05f64..=1.0) {
        let cfg = StftConfig { window_len: 2 * half, hop: ((2 * half) as f64 * hop_frac).ceil() as usize, normalize: false };
        prop_assume!(cfg.validate().is_ok());
        let channels = vec![vec![0.1f32; len]];
        match stft_features(&channels, &cfg) {
            Ok(f) => {
                prop_assert!(len >= cfg.window_len);
                prop_assert_eq!(f.tensor.shape()[1], (len - cfg.window_len) / cfg.hop + 1);
            }
            Err(_) => prop_assert!(len < cfg.window_len),
        }
    }

    #[test]
    fn pairwise_channels_are_copies(n_mics in 2usize..6, seed in 0u32..1000) {
        let len = 600;
        let channels: Vec<Vec<f32>> = (0..n_mics)
            .map(|m| (0..len).map(|t| (t as f32 * 0.37 + m as f32 * 1.3 + seed as f32).sin()).collect())
            .collect();
        let cfg = StftConfig { window_len: 64, hop: 32, normalize: false };
        let f = stft_features(&channels, &cfg).unwrap();
        let p = pairwise_rearrange(&f).unwrap();
        let plane = f.tensor.shape()[1] * f.tensor.shape()[2];
        for (out, &src) in pairwise_channel_map(n_mics).iter().enumerate() {
            prop_assert_eq!(&p.tensor.data()[out * plane..][..plane], &f.tensor.data()[src * plane..][..plane]);
        }
    }

    #[test]
    fn rendering_is_linear_and_deterministic(a in point(), b in point(), seed in 0u64..100) {
        let cfg = AcousticsConfig::default();
        let sig = |k: u64| -> Vec<f32> { (0..400).map(|t| ((t as u64 * 31 + k * 17 + seed) % 97) as f32 / 97.0 - 0.5).collect() };
        let sa = SourceEvent::new(a, sig(1));
        let sb = SourceEvent::new(b, sig(2));
        let mics = arrays();
        let both = render_scene(&[sa.clone(), sb.clone()], &mics, &cfg);
        prop_assume!(both.is_ok());
        let both = both.unwrap();
        let mut sum = render_scene(std::slice::from_ref(&sa), &mics, &cfg).unwrap();
        sum.add_assign(&render_scene(std::slice::from_ref(&sb), &mics, &cfg).unwrap()).unwrap();
        prop_assert_eq!(&both, &sum);
        prop_assert_eq!(&both, &render_scene(&[sa, sb], &mics, &cfg).unwrap());
    }

    #[test]
    fn hm_round_trip(sources in scene()) {
        let grid = GridSpec::fine();
        let map = encode_hm(&sources, &grid, 0.1).unwrap();
        prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let kps = decode_hm(&map, &grid, &RetrievalConfig::default());
        prop_assert_eq!(kps.len(), sources.len());
        for s in &sources {
            let best = kps.iter().map(|k| k.position.distance(s)).fold(f64::INFINITY, f64::min);
            prop_assert!(best <= 0.15, "{:?} -> {:?}", s, kps);
        }
    }

    #[test]
    fn rg_round_trip(sources in scene()) {
        let grid = GridSpec::coarse();
        let (act, rel) = encode_rg(&sources, &grid).unwrap();
        let kps = decode_rg(&act, &rel, &grid, &RetrievalConfig::default());
        prop_assert_eq!(kps.len(), sources.len());
        for s in &sources {
            let best = kps.iter().map(|k| k.position.distance(s)).fold(f64::INFINITY, f64::min);
            prop_assert!(best <= 1e-6, "{:?} -> {:?}", s, kps);
        }
    }

    #[test]
    fn nms_maxima_are_separated(values in prop::collection::vec(0.0..1.0f64, 15 * 15), radius in 1usize..4) {
        let map = CellActivity::from_values(15, 15, values).unwrap();
        let peaks = nms(&map, 0.3, radius);
        for (i, a) in peaks.iter().enumerate() {
            prop_assert!(a.2 >= 0.3);
            for b in &peaks[i + 1..] {
                prop_assert!(a.0.abs_diff(b.0) > radius || a.1.abs_diff(b.1) > radius);
            }
        }
    }

    #[test]
    fn losses_are_positive_and_zero_at_target(
        act in prop::collection::vec(prop::bool::ANY, 36),
        rel in prop::collection::vec(0.0..1.0f64, 72),
        pred in prop::collection::vec(0.01..0.99f64, 108),
        noise in prop::collection::vec(-5.0..5.0f64, 72),
    ) {
        let a: Vec<f64> = act.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let gt = Tensor::from_vec(&[3, 6, 6], a.iter().chain(&rel).copied().collect()).unwrap();
        let p = Tensor::from_vec(&[3, 6, 6], pred).unwrap();
        let at = Tensor::from_vec(&[1, 6, 6], a.clone()).unwrap();
        let pa = Tensor::from_vec(&[1, 6, 6], p.data()[..36].to_vec()).unwrap();

        prop_assert!(loss_tg(&pa, &at, 0.01).unwrap().0 > 0.0);
        prop_assert!(loss_tg(&at, &at, 0.01).unwrap().0 < 1e-4);
        prop_assert!(loss_hm(&pa, &at).unwrap().0 >= 0.0);
        prop_assert_eq!(loss_hm(&at, &at).unwrap().0, 0.0);
        prop_assert!(loss_rg(&p, &gt, 0.25, 10.0).unwrap().0 > 0.0);
        prop_assert!(loss_rg(&gt, &gt, 0.25, 10.0).unwrap().0 < 1e-4);

        // Offsets in inactive cells do not matter.
        let mut moved = p.clone();
        for c in 0..36 {
            if a[c] == 0.0 {
                moved.data_mut()[36 + c] += noise[c];
                moved.data_mut()[72 + c] += noise[36 + c];
            }
        }
        prop_assert_eq!(loss_rg(&p, &gt, 0.25, 10.0).unwrap(), loss_rg(&moved, &gt, 0.25, 10.0).unwrap());
    }

    #[test]
    fn metric_invariants(
        gks in prop::collection::vec(point(), 0..6),
        pks in prop::collection::vec(point(), 0..6),
        r1 in 0.05..2.0f64,
        dr in 0.0..2.0f64,
        rot in 0usize..6,
    ) {
        let p = keypoints(&pks);
        let small = associate(&gks, &p, r1);
        let large = associate(&gks, &p, r1 + dr);
        prop_assert!(large.tp >= small.tp);
        prop_assert!(large.fn_ <= small.fn_);
        for m in [&small, &large] {
            prop_assert_eq!(m.tp + m.fn_, gks.len());
            prop_assert_eq!(m.fp, pks.len() - m.tp.min(pks.len()));
            let s = scores(m);
            for v in [s.precision, s.recall, s.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        let mut g2 = gks.clone();
        let mut p2 = p.clone();
        if !g2.is_empty() {
            let k = rot % g2.len();
            g2.rotate_left(k);
        }
        p2.reverse();
        let shuffled = associate(&g2, &p2, r1);
        prop_assert_eq!((shuffled.tp, shuffled.fp, shuffled.fn_), (small.tp, small.fp, small.fn_));
        match (rmse_tp(&small), rmse_tp(&shuffled)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}

#[test]
fn configs_round_trip_through_toml() {
    for p in [Profile::Paper, Profile::Desk] {
        let mut cfg = RunConfig::profile(p);
        cfg.training.seed = 99;
        cfg.metrics.resolutions = vec![0.25, 0.5, 2.0];
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, Profile::Paper).unwrap(), cfg);
    }
}

#[test]
fn rg_diagonal_neighbours_both_survive() {
    let grid = GridSpec::coarse();
    let sources = [Point2D::new(0.5, 0.5), Point2D::new(1.95, 1.95)];
    let (act, rel) = encode_rg(&sources, &grid).unwrap();
    assert_eq!(decode_rg(&act, &rel, &grid, &RetrievalConfig::default()).len(), 2);
}
