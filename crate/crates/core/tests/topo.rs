use lad::topo::{betti_2d, euler_characteristic, structure_vector_slice, structure_vector_volume};
use lad::volume::LabelMask;
use ndarray::{s, Array2, Array3};
use proptest::prelude::*;

fn grid(bits: &[bool], h: usize, w: usize) -> Array2<bool> {
    Array2::from_shape_vec((h, w), bits.to_vec()).unwrap()
}

#[test]
fn ring_has_one_hole() {
    let mut a = Array2::from_elem((7, 7), false);
    a.slice_mut(s![1..6, 1..6]).fill(true);
    a[[3, 3]] = false;
    assert_eq!(betti_2d(a.view()), (1, 1));
    assert_eq!(euler_characteristic(a.view()), 0);
}

#[test]
fn diagonal_pixels_connect_foreground_only() {
    let mut a = Array2::from_elem((4, 4), false);
    a[[1, 1]] = true;
    a[[2, 2]] = true;
    assert_eq!(betti_2d(a.view()), (1, 0));
    // a diagonal ring encloses a 4-connected hole
    let mut r = Array2::from_elem((5, 5), false);
    for (y, x) in [(1, 2), (2, 1), (2, 3), (3, 2)] {
        r[[y, x]] = true;
    }
    assert_eq!(betti_2d(r.view()), (1, 1));
}

#[test]
fn border_hole_not_counted() {
    let mut a = Array2::from_elem((5, 5), true);
    a[[0, 2]] = false;
    a[[1, 2]] = false;
    assert_eq!(betti_2d(a.view()).1, 0);
}

proptest! {
    #[test]
    fn euler_identity(bits in proptest::collection::vec(any::<bool>(), 12 * 12)) {
        let a = grid(&bits, 12, 12);
        let (b0, b1) = betti_2d(a.view());
        prop_assert_eq!(euler_characteristic(a.view()), b0 as i64 - b1 as i64);
    }

    #[test]
    fn single_pixel_flip_bounds_components(bits in proptest::collection::vec(prop::bool::weighted(0.3), 10 * 10), y in 0usize..10, x in 0usize..10) {
        let mut a = grid(&bits, 10, 10);
        a[[y, x]] = false;
        let before = betti_2d(a.view()).0 as i64;
        let mut neighbours = 0i64;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if (dy, dx) != (0, 0) && (0..10).contains(&ny) && (0..10).contains(&nx) && a[[ny as usize, nx as usize]] {
                    neighbours += 1;
                }
            }
        }
        a[[y, x]] = true;
        let after = betti_2d(a.view()).0 as i64;
        prop_assert!(after - before <= 1);
        prop_assert!(before - after <= (neighbours - 1).max(0));
    }

    #[test]
    fn translation_invariant(bits in proptest::collection::vec(any::<bool>(), 6 * 6), dy in 0usize..4, dx in 0usize..4) {
        let pattern = grid(&bits, 6, 6);
        let mut a = Array2::from_elem((12, 12), false);
        a.slice_mut(s![1..7, 1..7]).assign(&pattern);
        let mut b = Array2::from_elem((12, 12), false);
        b.slice_mut(s![1 + dy..7 + dy, 1 + dx..7 + dx]).assign(&pattern);
        prop_assert_eq!(betti_2d(a.view()), betti_2d(b.view()));
    }

    #[test]
    fn volume_vector_matches_slices(labels in proptest::collection::vec(0u8..3, 4 * 8 * 8)) {
        let a = Array3::from_shape_vec((4, 8, 8), labels).unwrap();
        let m = LabelMask::new(a.clone()).unwrap();
        let v = structure_vector_volume(&m);
        prop_assert_eq!(v.len(), 24);
        for z in 0..4 {
            let sv = structure_vector_slice(a.slice(s![z, .., ..])).unwrap();
            prop_assert_eq!(v.slice(z), &sv[..]);
        }
    }
}

#[test]
fn slice_vector_rejects_bad_label() {
    let a = Array2::from_elem((3, 3), 7u8);
    assert!(structure_vector_slice(a.view()).is_err());
}
