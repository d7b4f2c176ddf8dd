use lad::codec::{Codec, CodecConfig};
use lad::condition::{condition_input, StructureNorm};
use lad::diffusion::{
    make_schedule, sample, sample_unconditional, train_diffusion_on, DenoiserCheckpoint, DiffusionConfig, DiffusionTrainer,
    SampleOptions, ScheduleKind, UNetConfig,
};
use lad::phantom::{generate_phantom, truncate_normalize, PhantomSpec};
use lad::volume::{Dims, LabelMask, Volume};
use proptest::prelude::*;

fn set(n: usize, seed: u64) -> (Vec<Volume>, Vec<LabelMask>) {
    let spec = PhantomSpec {
        dims: Dims::new(16, 32, 32),
        ..PhantomSpec::default()
    };
    (0..n)
        .map(|i| {
            let (raw, m) = generate_phantom(seed + i as u64, &spec).unwrap();
            (truncate_normalize(&raw, -1000.0, 400.0, spec.spacing, format!("v{i}")).unwrap(), m)
        })
        .unzip()
}

fn tiny(steps: u64) -> DiffusionConfig {
    DiffusionConfig {
        timesteps: 30,
        unet: UNetConfig {
            base_width: 8,
            embed_dim: 16,
            groups: 4,
        },
        batch_size: 2,
        steps,
        checkpoint_every: 2,
        seed: 3,
        ..DiffusionConfig::default()
    }
}

#[test]
fn initial_loss_near_unit_variance() {
    let (v, m) = set(8, 0);
    let codec = Codec::new(CodecConfig::default(), 0).unwrap();
    let t = DiffusionTrainer::new(DiffusionConfig::default(), &codec, &v, &m).unwrap();
    let (loss, _) = t.loss_and_grads(&t.draw_batch(0)).unwrap();
    assert!((0.5..=2.0).contains(&loss), "step-0 loss {loss}");
}

#[test]
fn loss_decreases_over_training() {
    let (v, m) = set(16, 40);
    let codec = Codec::new(CodecConfig::default(), 0).unwrap();
    let mut t = DiffusionTrainer::new(DiffusionConfig::default(), &codec, &v, &m).unwrap();
    let losses: Vec<f64> = (0..500).map(|_| t.train_step().unwrap()).collect();
    let first = losses[..100].iter().sum::<f64>() / 100.0;
    let last = losses[400..].iter().sum::<f64>() / 100.0;
    assert!(last < first, "first-100 mean {first}, last-100 mean {last}");
}

#[test]
fn resume_matches_straight_run() {
    let (v, m) = set(3, 9);
    let codec = Codec::new(CodecConfig::default(), 0).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let straight = train_diffusion_on(&codec, &v, &m, a.path(), &tiny(4)).unwrap();
    train_diffusion_on(&codec, &v, &m, b.path(), &tiny(2)).unwrap();
    let resumed = train_diffusion_on(&codec, &v, &m, b.path(), &tiny(4)).unwrap();
    assert_eq!(resumed.step, 4);
    assert_eq!(straight.denoiser.params.to_bytes(), resumed.denoiser.params.to_bytes());
    assert_eq!(lad::checkpoint::read_loss_log(a.path()).unwrap(), lad::checkpoint::read_loss_log(b.path()).unwrap());
}

#[test]
fn changed_config_starts_over() {
    let (v, m) = set(2, 9);
    let codec = Codec::new(CodecConfig::default(), 0).unwrap();
    let d = tempfile::tempdir().unwrap();
    train_diffusion_on(&codec, &v, &m, d.path(), &tiny(2)).unwrap();
    let other = DiffusionConfig { p_uncond: 0.5, ..tiny(1) };
    assert!(DiffusionTrainer::resume(d.path(), other.clone(), &codec, &v, &m).is_err());
    let ck = train_diffusion_on(&codec, &v, &m, d.path(), &other).unwrap();
    assert_eq!(ck.step, 1);
}

#[test]
fn sampling_is_deterministic_and_chunk_free() {
    let (v, m) = set(3, 20);
    let codec = Codec::new(CodecConfig::default(), 0).unwrap();
    let d = tempfile::tempdir().unwrap();
    train_diffusion_on(&codec, &v, &m, d.path(), &tiny(2)).unwrap();
    let ck = DenoiserCheckpoint::load(d.path()).unwrap();
    let conds: Vec<_> = m.iter().map(|x| condition_input(x, &codec, StructureNorm::Log).unwrap()).collect();
    let opts = SampleOptions { seed: 11, batch: 3, ..SampleOptions::default() };
    let a = sample(&codec, &ck, &conds, 0, &opts).unwrap();
    let b = sample(&codec, &ck, &conds, 0, &SampleOptions { batch: 1, ..opts.clone() }).unwrap();
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|x| x.dims() == Dims::new(16, 32, 32)));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data(), y.data());
    }
    // sample i depends only on its global index
    let tail = sample(&codec, &ck, &conds[1..], 1, &opts).unwrap();
    assert_eq!(tail[0].data(), a[1].data());
    let unc = sample_unconditional(&codec, &ck, 2, Dims::new(16, 32, 32), &opts).unwrap();
    assert_eq!(unc.len(), 2);
    assert_ne!(unc[0].data(), unc[1].data());
}

#[test]
fn sampling_rejects_foreign_geometry() {
    let (v, m) = set(2, 30);
    let codec = Codec::new(CodecConfig::default(), 0).unwrap();
    let d = tempfile::tempdir().unwrap();
    let ck = train_diffusion_on(&codec, &v, &m, d.path(), &tiny(1)).unwrap();
    assert!(sample_unconditional(&codec, &ck, 1, Dims::new(32, 32, 32), &SampleOptions::default()).is_err());
}

proptest! {
    #[test]
    fn schedule_power_partition(t in 2usize..400) {
        let s = make_schedule(t, ScheduleKind::Linear).unwrap();
        for k in 0..t {
            let ab = s.alpha_bar[k];
            prop_assert!((ab.sqrt().powi(2) + (1.0 - ab) - 1.0).abs() < 1e-12);
            prop_assert!(k == 0 || s.alpha_bar[k] < s.alpha_bar[k - 1]);
        }
    }
}
