use lad::codec::{Codec, CodecConfig};
use lad::condition::{check_condition, condition_dropout, condition_input, null_condition, StructureNorm};
use lad::diffusion::{Denoiser, DiffusionConfig, DiffusionTrainer, UNetConfig};
use lad::phantom::{generate_phantom, truncate_normalize, PhantomSpec};
use lad::volume::{Dims, LabelMask, Volume};
use lad_tensor::Tensor;
use ndarray::{s, Array3};
use proptest::prelude::*;

fn set(n: usize) -> (Vec<Volume>, Vec<LabelMask>) {
    let spec = PhantomSpec {
        dims: Dims::new(16, 32, 32),
        ..PhantomSpec::default()
    };
    (0..n)
        .map(|i| {
            let (raw, m) = generate_phantom(100 + i as u64, &spec).unwrap();
            (truncate_normalize(&raw, -1000.0, 400.0, spec.spacing, format!("v{i}")).unwrap(), m)
        })
        .unzip()
}

fn tiny_unet() -> UNetConfig {
    UNetConfig {
        base_width: 8,
        embed_dim: 16,
        groups: 4,
    }
}

#[test]
fn condition_shapes_follow_the_codec() {
    let codec = Codec::new(CodecConfig::default(), 1).unwrap();
    let (_, m) = set(1);
    let c = condition_input(&m[0], &codec, StructureNorm::Log).unwrap();
    assert_eq!(c.encoded.shape(), &[8, 4, 8, 8]);
    assert_eq!(c.structure.len(), 96);
    assert!(c.structure.iter().all(|v| *v >= 0.0));
    check_condition(&c, 8, [4, 8, 8]).unwrap();
    assert!(check_condition(&c, 8, [4, 4, 8]).is_err());
    let again = condition_input(&m[0], &codec, StructureNorm::Log).unwrap();
    assert_eq!(c, again);
}

#[test]
fn null_token_changes_the_prediction() {
    let den = Denoiser::new(tiny_unet(), 8, 16, 3).unwrap();
    let codec = Codec::new(CodecConfig::default(), 1).unwrap();
    let (_, m) = set(1);
    let c = condition_input(&m[0], &codec, StructureNorm::Log).unwrap();
    let null = null_condition(8, [4, 8, 8], 16);
    let z = Tensor::full(&[1, 8, 4, 8, 8], 0.3);
    let a = den.predict(z.clone(), &[10], &[&c]).unwrap();
    let b = den.predict(z, &[10], &[&null]).unwrap();
    assert_ne!(a.data(), b.data());
}

#[test]
fn fully_dropped_batches_leave_content_head_untouched() {
    let (v, m) = set(2);
    let codec = Codec::new(CodecConfig::default(), 1).unwrap();
    let cfg = DiffusionConfig {
        unet: tiny_unet(),
        p_uncond: 1.0,
        batch_size: 2,
        ..DiffusionConfig::default()
    };
    let t = DiffusionTrainer::new(cfg, &codec, &v, &m).unwrap();
    let batch = t.draw_batch(0);
    assert!(batch.dropped.iter().all(|d| *d));
    let (_, grads) = t.loss_and_grads(&batch).unwrap();
    let content = t.denoiser.content.params();
    for (id, g) in &grads {
        if content.contains(id) {
            assert!(g.data().iter().all(|x| *x == 0.0));
        }
    }
}

#[test]
fn training_does_not_touch_the_codec() {
    let (v, m) = set(2);
    let codec = Codec::new(CodecConfig::default(), 1).unwrap();
    let before = codec.params.to_bytes();
    let cfg = DiffusionConfig {
        unet: tiny_unet(),
        batch_size: 2,
        ..DiffusionConfig::default()
    };
    let mut t = DiffusionTrainer::new(cfg, &codec, &v, &m).unwrap();
    let content_before: Vec<Vec<f32>> = t.denoiser.content.params().iter().map(|p| t.denoiser.params.get(*p).data().to_vec()).collect();
    for _ in 0..3 {
        t.train_step().unwrap();
    }
    assert_eq!(codec.params.to_bytes(), before);
    let content_after: Vec<Vec<f32>> = t.denoiser.content.params().iter().map(|p| t.denoiser.params.get(*p).data().to_vec()).collect();
    assert_ne!(content_before, content_after);
}

#[test]
fn zero_probability_never_drops() {
    for step in 0..500 {
        for i in 0..8 {
            assert!(!condition_dropout(0, step, i, 0.0));
            assert!(condition_dropout(0, step, i, 1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn structure_ignores_in_plane_shift(dy in 0usize..6, dx in 0usize..6) {
        let codec = Codec::new(CodecConfig::default(), 1).unwrap();
        let mut pattern = Array3::<u8>::zeros((16, 10, 10));
        pattern.slice_mut(s![2..10, 2..8, 2..8]).fill(1);
        pattern.slice_mut(s![4..6, 4..6, 4..6]).fill(2);
        pattern.slice_mut(s![8..9, 4..5, 4..5]).fill(0);
        let place = |oy: usize, ox: usize| {
            let mut a = Array3::<u8>::zeros((16, 32, 32));
            a.slice_mut(s![.., 1 + oy..11 + oy, 1 + ox..11 + ox]).assign(&pattern);
            LabelMask::new(a).unwrap()
        };
        let a = condition_input(&place(0, 0), &codec, StructureNorm::Log).unwrap();
        let b = condition_input(&place(dy, dx), &codec, StructureNorm::Log).unwrap();
        prop_assert_eq!(a.structure, b.structure);
    }

    #[test]
    fn structure_length_is_fixed(labels in proptest::collection::vec(0u8..3, 16 * 32 * 32)) {
        let codec = Codec::new(CodecConfig::default(), 1).unwrap();
        let m = LabelMask::new(Array3::from_shape_vec((16, 32, 32), labels).unwrap()).unwrap();
        prop_assert_eq!(condition_input(&m, &codec, StructureNorm::Raw).unwrap().structure.len(), 96);
    }
}
