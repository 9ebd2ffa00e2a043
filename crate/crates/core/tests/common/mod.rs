#![allow(dead_code)]

pub mod grad_suite;

use voxelseg::volume::{Affine, Volume};
use voxelseg::{OrientationCode, RngStream, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn random_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_range(0.1, 2.0);
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Compare the tape gradient of a scalar objective with central finite
/// differences over every element of every input. Non-scalar outputs are
/// contracted with fixed random weights. Returns the worst relative error.
pub fn gradient_check(
    inputs: &[Tensor],
    rng: &mut RngStream,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let weights = (probe.iter().product::<usize>() > 1).then(|| random_tensor(rng, &probe));
    let objective = |tape: &mut Tape, vars: &[Var]| -> Var {
        let out = build(tape, vars);
        match &weights {
            Some(w) => {
                let wv = tape.constant(w.clone());
                let prod = tape.mul(out, wv).unwrap();
                tape.sum(prod)
            }
            None => out,
        }
    };
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = objective(&mut tape, &vars);
        tape.value(out).data()[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = objective(&mut tape, &vars);
    tape.backward(root).unwrap();

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Partition sizes of two binary masks computed by materialising the sets
/// as voxel index lists.
pub fn set_partition(pred: &[f64], truth: &[f64]) -> (usize, usize, usize) {
    let p: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] == 1.0).collect();
    let g: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == 1.0).collect();
    let inter = p.iter().filter(|i| g.contains(i)).count();
    let p_minus_g = p.iter().filter(|i| !g.contains(i)).count();
    let g_minus_p = g.iter().filter(|i| !p.contains(i)).count();
    (inter, p_minus_g, g_minus_p)
}

/// Brute-force Jaccard, Dice and Tversky from set sizes, 1 on empty masks.
pub fn brute_force_coefficients(pred: &[f64], truth: &[f64], alpha: f64, beta: f64) -> [f64; 3] {
    let (i, a, b) = set_partition(pred, truth);
    if i + a + b == 0 {
        return [1.0; 3];
    }
    let (i, a, b) = (i as f64, a as f64, b as f64);
    [
        i / (i + a + b),
        2.0 * i / (2.0 * i + a + b),
        i / (i + alpha * a + beta * b),
    ]
}

/// Bit `k` of `bits` as the k-th voxel of a 2×2×2 mask.
pub fn mask_from_bits(bits: u32) -> Vec<f64> {
    (0..8).map(|k| ((bits >> k) & 1) as f64).collect()
}

pub fn apply_affine(a: &Affine, p: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|r| a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + a[r][3])
}

pub fn random_orientation(rng: &mut RngStream) -> OrientationCode {
    let all = OrientationCode::all();
    all[rng.below(all.len() as u64) as usize]
}

/// An affine with the given orientation, random spacing and origin, and a
/// small shear that never changes the dominant axis of a column.
pub fn random_affine(rng: &mut RngStream, code: OrientationCode) -> Affine {
    let mut a = [[0.0; 4]; 4];
    a[3][3] = 1.0;
    for (col, d) in code.directions().into_iter().enumerate() {
        let spacing = rng.uniform_range(0.5, 3.0);
        let row = d.world_axis();
        a[row][col] = if d.is_positive() { spacing } else { -spacing };
        for other in (0..3).filter(|&r| r != row) {
            a[other][col] = rng.uniform_range(-0.2, 0.2) * spacing;
        }
    }
    for row in a.iter_mut().take(3) {
        row[3] = rng.uniform_range(-50.0, 50.0);
    }
    a
}

pub fn random_volume(rng: &mut RngStream, extents: [usize; 3]) -> Volume {
    let code = random_orientation(rng);
    let affine = random_affine(rng, code);
    let n = extents.iter().product();
    Volume::new(extents, (0..n).map(|_| rng.normal()).collect(), affine).unwrap()
}
