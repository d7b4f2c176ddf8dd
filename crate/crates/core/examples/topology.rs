//! Betti numbers of hand-drawn slices and the structure vector of a phantom.

use lad::phantom::{generate_phantom, PhantomSpec};
use lad::topo::{betti_2d, euler_characteristic, structure_vector_volume};
use ndarray::Array2;

fn parse(rows: &[&str]) -> Array2<bool> {
    let h = rows.len();
    let w = rows[0].len();
    Array2::from_shape_fn((h, w), |(y, x)| rows[y].as_bytes()[x] == b'#')
}

fn main() -> anyhow::Result<()> {
    let shapes = [
        ("ring", vec![".....", ".###.", ".#.#.", ".###.", "....."]),
        ("two dots", vec!["#...#", ".....", "....."]),
        ("diagonal", vec!["#..", ".#.", "..#"]),
        ("figure eight", vec!["#####", "#.#.#", "#####"]),
    ];
    for (name, rows) in shapes {
        let a = parse(&rows);
        let (b0, b1) = betti_2d(a.view());
        println!("{name:>12}: b0={b0} b1={b1} chi={}", euler_characteristic(a.view()));
    }

    let (_, mask) = generate_phantom(3, &PhantomSpec::default())?;
    let v = structure_vector_volume(&mask);
    println!("structure vector length {}", v.len());
    println!("per slice (b0, b1) for background, organ, tumor:");
    for z in (0..mask.dims().d).filter(|z| v.slice(*z)[2] > 0).take(6) {
        println!("  slice {z:>2}: {:?}", v.slice(z));
    }
    Ok(())
}
