use lad::metrics::{
    ellipse_fit, fid, mds_embed, mmd, ms_ssim, ms_ssim_pairs, union_bbox, usable_scales, EmbeddingData, FeatureExtractor, FeatureSet,
};
use lad::volume::{Dims, LabelMask, Volume, ORGAN};
use nalgebra::DMatrix;
use ndarray::Array3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, f: usize, shift: f64, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = DMatrix::from_fn(n, f, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v + shift
    });
    FeatureSet::new(d, "test").unwrap()
}

fn constant_volume(v: f32, dims: Dims) -> Volume {
    Volume::new(Array3::from_elem((dims.d, dims.h, dims.w), v), [1.0; 3], "c").unwrap()
}

#[test]
fn fid_grows_with_shift_and_is_nonnegative() {
    let a = gaussian(64, 4, 0.0, 1);
    let near = fid(&a, &gaussian(64, 4, 0.1, 2)).unwrap();
    let far = fid(&a, &gaussian(64, 4, 2.0, 3)).unwrap();
    assert!(near >= 0.0 && far > near);
}

#[test]
fn fid_invariant_to_orthogonal_maps() {
    let a = gaussian(50, 3, 0.0, 4);
    let b = gaussian(50, 3, 0.5, 5);
    let q = DMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64 + if i == j { 3.0 } else { 0.0 }).qr().q();
    let ra = FeatureSet::new(&a.data * &q, "test").unwrap();
    let rb = FeatureSet::new(&b.data * &q, "test").unwrap();
    let (x, y) = (fid(&a, &b).unwrap(), fid(&ra, &rb).unwrap());
    assert!((x - y).abs() < 1e-6 * x.max(1.0), "{x} vs {y}");
}

#[test]
fn mmd_separates_disjoint_supports() {
    let a = gaussian(30, 2, 0.0, 6);
    let b = gaussian(30, 2, 25.0, 7);
    let same = mmd(&a, &gaussian(30, 2, 0.0, 8)).unwrap().value();
    let apart = mmd(&a, &b).unwrap().value();
    assert!(apart > 10.0 * same.max(1e-3), "apart {apart} vs same {same}");
}

#[test]
fn distances_reject_too_few_rows() {
    let one = gaussian(1, 2, 0.0, 9);
    assert!(fid(&one, &one).is_err());
    assert!(mmd(&one, &one).is_err());
}

#[test]
fn ms_ssim_of_opposite_constants_is_small() {
    let d = Dims::new(16, 32, 32);
    let s = ms_ssim(&constant_volume(0.0, d), &constant_volume(1.0, d)).unwrap();
    assert!(s < 0.05, "{s}");
    assert_eq!(usable_scales([16, 32, 32]), 3);
    assert_eq!(usable_scales([8, 64, 64]), 2);
}

#[test]
fn identical_list_scores_one() {
    let d = Dims::new(16, 32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let v = Volume::new(Array3::from_shape_fn((16, 32, 32), |_| rand::Rng::random::<f32>(&mut rng)), [1.0; 3], "r").unwrap();
    let score = ms_ssim_pairs(&[v.clone(), v.clone(), v], 10, 0).unwrap();
    assert_eq!(score.mean, 1.0);
    assert_eq!(score.pairs, 10);
    let _ = d;
}

#[test]
fn extractor_is_fixed_and_checks_shapes() {
    let a = FeatureExtractor::new();
    let b = FeatureExtractor::new();
    assert_eq!(a.hash(), b.hash());
    let v = constant_volume(0.3, Dims::new(8, 16, 16));
    let w = constant_volume(0.3, Dims::new(8, 16, 8));
    let f = a.extract(std::slice::from_ref(&v)).unwrap();
    assert_eq!(f.width(), 256);
    assert_eq!(f.data, b.extract(std::slice::from_ref(&v)).unwrap().data);
    assert!(a.extract(&[v, w]).is_err());
}

#[test]
fn embedding_text_round_trip() {
    let pts: Vec<[f64; 2]> = (0..12).map(|k| {
        let t = k as f64 * 0.5;
        [3.0 * t.cos() + 1.0, t.sin() - 2.0]
    }).collect();
    let el = ellipse_fit(&pts).ok();
    let data = EmbeddingData { methods: vec![("real".into(), pts.clone(), el), ("synth".into(), pts[..4].to_vec(), None)] };
    let back = EmbeddingData::parse(&data.to_text()).unwrap();
    assert_eq!(back.methods.len(), 2);
    assert_eq!(back.methods[0].1, pts);
    assert!(back.methods[0].2.is_some());
    assert!(back.methods[1].2.is_none());
}

#[test]
fn ellipse_fit_rejects_degenerate_input() {
    assert!(ellipse_fit(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());
    let line: Vec<[f64; 2]> = (0..10).map(|i| [i as f64, 2.0 * i as f64]).collect();
    assert!(ellipse_fit(&line).is_err());
}

#[test]
fn circle_fit() {
    let pts: Vec<[f64; 2]> = (0..30).map(|k| {
        let t = k as f64 / 30.0 * std::f64::consts::TAU;
        [5.0 + 1.5 * t.cos(), -1.0 + 1.5 * t.sin()]
    }).collect();
    let el = ellipse_fit(&pts).unwrap();
    assert!((el.semi_axes[0] - 1.5).abs() < 1e-6 && (el.semi_axes[1] - 1.5).abs() < 1e-6);
    assert!((el.center[0] - 5.0).abs() < 1e-6 && (el.center[1] + 1.0).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mmd_symmetric(seed in any::<u64>()) {
        let a = gaussian(12, 3, 0.0, seed);
        let b = gaussian(15, 3, 0.3, seed.wrapping_add(1));
        let (x, y) = (mmd(&a, &b).unwrap().raw, mmd(&b, &a).unwrap().raw);
        prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
    }

    #[test]
    fn union_bbox_never_shrinks(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<LabelMask> = (0..4).map(|_| {
            let mut a = Array3::<u8>::zeros((4, 6, 6));
            let p = [rand::Rng::random_range(&mut rng, 0..4), rand::Rng::random_range(&mut rng, 0..6), rand::Rng::random_range(&mut rng, 0..6)];
            a[p] = ORGAN;
            LabelMask::new(a).unwrap()
        }).collect();
        let mut prev = union_bbox(&masks[..1], ORGAN).unwrap();
        for k in 2..=masks.len() {
            let next = union_bbox(&masks[..k], ORGAN).unwrap();
            prop_assert!((0..3).all(|a| next.lo[a] <= prev.lo[a] && next.hi[a] >= prev.hi[a]));
            prev = next;
        }
    }

    #[test]
    fn ellipse_rotation_invariant(angle in 0.0f64..std::f64::consts::PI, a in 1.5f64..4.0, b in 0.5f64..1.4) {
        let base: Vec<[f64; 2]> = (0..24).map(|k| {
            let t = k as f64 / 24.0 * std::f64::consts::TAU;
            [a * t.cos(), b * t.sin()]
        }).collect();
        let (c, s) = (angle.cos(), angle.sin());
        let rot: Vec<[f64; 2]> = base.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect();
        let e0 = ellipse_fit(&base).unwrap();
        let e1 = ellipse_fit(&rot).unwrap();
        prop_assert!((e0.semi_axes[0] - e1.semi_axes[0]).abs() < 1e-3);
        prop_assert!((e0.semi_axes[1] - e1.semi_axes[1]).abs() < 1e-3);
    }

    #[test]
    fn mds_keeps_planar_distances(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 2]> = (0..8).map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)]).collect();
        let data = DMatrix::from_fn(8, 4, |i, j| match j { 0 => pts[i][0], 1 => pts[i][1], _ => 0.0 });
        let e = mds_embed(&FeatureSet::new(data, "p").unwrap()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let d0 = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                let d1 = ((e.points[i][0] - e.points[j][0]).powi(2) + (e.points[i][1] - e.points[j][1]).powi(2)).sqrt();
                prop_assert!((d0 - d1).abs() < 1e-6);
            }
        }
    }
}
