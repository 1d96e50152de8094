use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{LatentVector, MoFlow};
use crate::molgraph::Molecule;

use super::fingerprint::{fingerprint, tanimoto};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    norm
}

/// Two random orthonormal directions: Gaussian draws normalized, then the
/// second made orthogonal to the first by Gram–Schmidt.
pub fn orthonormal_pair<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    assert!(dim >= 2, "need at least two dimensions");
    let draw = |rng: &mut R| -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    loop {
        let mut x = draw(rng);
        let mut y = draw(rng);
        if normalize(&mut x) < 1e-8 || normalize(&mut y) < 1e-8 {
            continue;
        }
        for _ in 0..2 {
            let p = dot(&x, &y);
            y.iter_mut().zip(&x).for_each(|(yi, xi)| *yi -= p * xi);
        }
        if normalize(&mut y) > 1e-8 {
            return (x, y);
        }
    }
}

/// `per_side²` steps `(λx, λy)` evenly spaced over `[-extent, extent]²`,
/// row-major with `λy` outer.
pub fn grid_steps(extent: f64, per_side: usize) -> Vec<(f64, f64)> {
    let vals: Vec<f64> = match per_side {
        0 => vec![],
        1 => vec![0.0],
        n => (0..n).map(|i| -extent + 2.0 * extent * i as f64 / (n - 1) as f64).collect(),
    };
    vals.iter().flat_map(|&y| vals.iter().map(move |&x| (x, y))).collect()
}

/// Latents `z + λx·X + λy·Y` for each step.
pub fn grid_latents<R: Rng + ?Sized>(z: &LatentVector, steps: &[(f64, f64)], rng: &mut R) -> Vec<LatentVector> {
    let (x, y) = orthonormal_pair(z.len(), rng);
    steps.iter().map(|&(lx, ly)| z.offset(&[(lx, &x), (ly, &y)])).collect()
}

/// Decode a 2-D neighborhood of `z` along two random orthonormal directions.
pub fn grid_neighborhood<R: Rng + ?Sized>(
    model: &MoFlow,
    z: &LatentVector,
    steps: &[(f64, f64)],
    rng: &mut R,
    apply_correction: bool,
) -> Result<Vec<Molecule>> {
    model.decode(&grid_latents(z, steps, rng), apply_correction)
}

/// Decode `count` evenly spaced points on the segment from `z0` to `z1`.
pub fn interpolate(
    model: &MoFlow,
    z0: &LatentVector,
    z1: &LatentVector,
    count: usize,
    apply_correction: bool,
) -> Result<Vec<Molecule>> {
    if count < 2 {
        return Err(Error::Config(format!("interpolation needs count >= 2, got {count}")));
    }
    let (a, b) = (z0.to_flat(), z1.to_flat());
    let diff: Vec<f64> = b.iter().zip(&a).map(|(p, q)| p - q).collect();
    let zs: Vec<LatentVector> =
        (0..count).map(|i| z0.offset(&[(i as f64 / (count - 1) as f64, &diff)])).collect();
    model.decode(&zs, apply_correction)
}

/// Tanimoto similarity of each molecule to `seed`.
pub fn similarity_to(seed: &Molecule, mols: &[Molecule]) -> Vec<f64> {
    let fs = fingerprint(seed);
    mols.iter().map(|m| tanimoto(&fs, &fingerprint(m))).collect()
}

/// Row-major values as CSV with `cols` entries per line.
pub fn heatmap_csv(values: &[f64], cols: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(cols.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn directions_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in [2, 5, 369] {
            let (x, y) = orthonormal_pair(dim, &mut rng);
            assert!(dot(&x, &y).abs() < 1e-12);
            assert!((dot(&x, &x) - 1.0).abs() < 1e-12);
            assert!((dot(&y, &y) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_is_row_major() {
        let s = grid_steps(1.0, 5);
        assert_eq!(s.len(), 25);
        assert_eq!(s[0], (-1.0, -1.0));
        assert_eq!(s[1], (-0.5, -1.0));
        assert_eq!(s[12], (0.0, 0.0));
        assert_eq!(grid_steps(2.0, 1), vec![(0.0, 0.0)]);
    }

    #[test]
    fn heatmap_layout() {
        assert_eq!(heatmap_csv(&[1.0, 0.5, 0.25, 0.0], 2), "1.0000,0.5000\n0.2500,0.0000\n");
    }
}
