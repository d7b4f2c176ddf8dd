use lad::phantom::{generate_phantom, resample, sliding_window_crop, truncate_normalize, PhantomSpec};
use lad::volume::{Dims, Volume, ORGAN, TUMOR};
use ndarray::{s, Array1, Array3};
use proptest::prelude::*;

fn small() -> PhantomSpec {
    PhantomSpec {
        dims: Dims::new(16, 32, 32),
        ..PhantomSpec::default()
    }
}

#[test]
fn organ_present_for_default_seeds() {
    let spec = PhantomSpec::default();
    for seed in 0..64 {
        let (_, m) = generate_phantom(seed, &spec).unwrap();
        assert!(m.count(ORGAN) > 0, "seed {seed} has no organ");
    }
}

#[test]
fn raw_values_inside_range() {
    let spec = small();
    for seed in 0..8 {
        let (raw, _) = generate_phantom(seed, &spec).unwrap();
        assert!(raw.iter().all(|v| (-1000.0..=1000.0).contains(v)));
    }
}

#[test]
fn rejects_tiny_grid() {
    let spec = PhantomSpec {
        dims: Dims::new(4, 32, 32),
        ..PhantomSpec::default()
    };
    assert!(generate_phantom(0, &spec).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tumor_inside_dilated_organ(seed in any::<u64>()) {
        let spec = PhantomSpec { tumor_probability: 1.0, ..small() };
        let (_, m) = generate_phantom(seed, &spec).unwrap();
        let d = m.data();
        let dims = d.dim();
        let neighbours = |(z, y, x): (usize, usize, usize)| {
            let mut out = Vec::new();
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let p = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        if p.0 >= 0 && p.1 >= 0 && p.2 >= 0 && (p.0 as usize) < dims.0 && (p.1 as usize) < dims.1 && (p.2 as usize) < dims.2 {
                            out.push((p.0 as usize, p.1 as usize, p.2 as usize));
                        }
                    }
                }
            }
            out
        };
        // every tumor blob borders the organ it was carved from
        let mut seen = Array3::from_elem(dims, false);
        for (start, v) in d.indexed_iter() {
            if *v != TUMOR || seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let mut touches = false;
            while let Some(p) = stack.pop() {
                for q in neighbours(p) {
                    touches |= d[q] == ORGAN;
                    if d[q] == TUMOR && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
            prop_assert!(touches, "tumor blob at {:?} is detached from the organ", start);
        }
    }

    #[test]
    fn generation_is_pure(seed in any::<u64>()) {
        let a = generate_phantom(seed, &small()).unwrap();
        let b = generate_phantom(seed, &small()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalize_monotone(mut raw in proptest::collection::vec(-2000f32..2000.0, 2..64)) {
        raw.sort_by(f32::total_cmp);
        let a = Array3::from_shape_vec((1, 1, raw.len()), raw).unwrap();
        let v = truncate_normalize(&a, -1000.0, 400.0, [1.0; 3], "m").unwrap();
        let out: Array1<f32> = v.data().iter().copied().collect();
        prop_assert!(out.windows(2).into_iter().all(|w| w[0] <= w[1]));
        prop_assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn normalize_idempotent_on_unit_window(vals in proptest::collection::vec(0f32..=1.0, 1..64)) {
        let a = Array3::from_shape_vec((1, 1, vals.len()), vals).unwrap();
        let v = truncate_normalize(&a, 0.0, 1.0, [1.0; 3], "i").unwrap();
        prop_assert_eq!(v.data(), &a);
    }

    #[test]
    fn crops_reconstruct_volume(seed in 0u64..1000, window in 1usize..=16, stride_off in 0usize..16) {
        let stride = 1 + stride_off % window;
        let (raw, m) = generate_phantom(seed, &small()).unwrap();
        let v = truncate_normalize(&raw, -1000.0, 400.0, [2.3, 1.6, 1.6], "c").unwrap();
        let crops = sliding_window_crop(&v, &m, window, stride).unwrap();
        let mut vol = Array3::<f32>::from_elem(v.data().dim(), f32::NAN);
        let mut mask = Array3::<u8>::from_elem(m.data().dim(), 255);
        for c in &crops {
            vol.slice_mut(s![c.z0..c.z0 + window, .., ..]).assign(c.volume.data());
            mask.slice_mut(s![c.z0..c.z0 + window, .., ..]).assign(c.mask.data());
        }
        prop_assert_eq!(&vol, v.data());
        prop_assert_eq!(&mask, m.data());
    }
}

#[test]
fn resample_identity_and_label_alphabet() {
    let (raw, m) = generate_phantom(5, &small()).unwrap();
    let v = truncate_normalize(&raw, -1000.0, 400.0, [2.3, 1.6, 1.6], "r").unwrap();
    let (same_v, same_m) = resample(&v, &m, [2.3, 1.6, 1.6]).unwrap();
    assert_eq!(same_v, v);
    assert_eq!(same_m, m);
    let (rv, rm) = resample(&v, &m, [3.0, 1.0, 2.0]).unwrap();
    assert_eq!(rv.dims(), Dims::new(12, 51, 26));
    assert!(rm.data().iter().all(|l| *l <= TUMOR));
    assert!(rv.data().iter().all(|x| (0.0..=1.0).contains(x)));
}

#[test]
fn volume_rejects_out_of_range() {
    let a = Array3::from_elem((2, 2, 2), 1.5f32);
    assert!(Volume::new(a, [1.0; 3], "bad").is_err());
}
