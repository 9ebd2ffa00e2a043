//! Acceptance run: nine criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p voxelseg --test acceptance -- --nocapture` to see
//! the report. The end-to-end training criterion dominates the runtime.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use common::grad_suite::{self, MODEL_TOLERANCE, OP_TOLERANCE};
use common::{
    brute_force_coefficients, mask_from_bits, random_affine, random_orientation, random_tensor,
    random_volume,
};
use voxelseg::checkpoint;
use voxelseg::losses::{self, LossKind, OverlapCounts, TverskyParams};
use voxelseg::nifti::{read_nifti, write_nifti, Datatype};
use voxelseg::normalize::zscore;
use voxelseg::patching::{grid_tiles, stitch, PatchSampler, PatchSpec, Window};
use voxelseg::phantom::{generate, PhantomConfig};
use voxelseg::trainer::{init_model, train, InferenceConfig, LogRecord, Sample, TrainConfig};
use voxelseg::volume::Volume;
use voxelseg::{reorient, Model, RngStream, VNetConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn run(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let pass = out.pass && elapsed < limit;
    println!(
        "criterion {id} {name}: {} ({}; {:.2} s, limit {} s)",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn metric_oracle() -> Outcome {
    let tv = TverskyParams::new(0.3, 0.7).unwrap();
    let mut mismatches = 0usize;
    for a in 0..256u32 {
        let pred = mask_from_bits(a);
        for b in 0..256u32 {
            let truth = mask_from_bits(b);
            let c = losses::counts(&pred, &truth).unwrap();
            let got = [
                losses::jaccard(&c),
                losses::dice(&c),
                losses::tversky(&c, &tv),
            ];
            if got != brute_force_coefficients(&pred, &truth, tv.alpha(), tv.beta()) {
                mismatches += 1;
            }
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("65536 pairs, {mismatches} mismatches"),
    }
}

fn identities() -> Outcome {
    let mut rng = RngStream::new(2);
    let half = TverskyParams::new(0.5, 0.5).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = OverlapCounts::new(
            rng.below(1000) as f64,
            rng.below(1000) as f64,
            rng.below(1000) as f64,
        );
        let (j, d) = (losses::jaccard(&c), losses::dice(&c));
        worst = worst.max((losses::tversky(&c, &half) - d).abs());
        worst = worst.max((2.0 * j / (1.0 + j) - d).abs());
    }
    Outcome {
        pass: worst < 1e-12,
        detail: format!("max error {worst:e}"),
    }
}

fn gradient_suite() -> Outcome {
    let mut op_worst = (0.0f64, "");
    for (name, make) in grad_suite::op_cases() {
        let w = grad_suite::op_worst(make);
        if w >= op_worst.0 {
            op_worst = (w, name);
        }
    }
    let loss_worst = grad_suite::loss_cases()
        .iter()
        .map(|(k, p)| grad_suite::soft_loss_worst(*k, p))
        .fold(0.0, f64::max);
    let (model_worst, at) = grad_suite::model_worst();
    Outcome {
        pass: op_worst.0 < OP_TOLERANCE
            && loss_worst < OP_TOLERANCE
            && model_worst < MODEL_TOLERANCE,
        detail: format!(
            "ops {:e} ({}), losses {loss_worst:e}, model {model_worst:e} ({at})",
            op_worst.0, op_worst.1
        ),
    }
}

fn stitching() -> Outcome {
    let mut rng = RngStream::new(4);
    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..50 {
        let ext = [0; 3].map(|_| 1 + rng.below(40) as usize);
        let patch = [0; 3].map(|_| 1 + rng.below(16) as usize);
        let overlap: [usize; 3] = std::array::from_fn(|a| rng.below(patch[a] as u64) as usize);
        let c = rng.uniform_range(-5.0, 5.0);
        let n: usize = ext.iter().product();
        let truth: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for w in [Window::Uniform, Window::Hann] {
            let layout = grid_tiles(ext, patch, overlap).unwrap().with_window(w);
            let tile_len: usize = patch.iter().product();
            let flat = stitch(&layout, &vec![vec![c; tile_len]; layout.len()]).unwrap();
            worst = flat.iter().map(|x| (x - c).abs()).fold(worst, f64::max);
            let tiles: Vec<Vec<f64>> = (0..layout.len())
                .map(|t| layout.extract(&truth, t, 0.0))
                .collect();
            exact &= stitch(&layout, &tiles).unwrap() == truth;
        }
    }
    Outcome {
        pass: worst < 1e-6 && exact,
        detail: format!("100 stitches, constant error {worst:e}, reconstruction exact: {exact}"),
    }
}

fn geometry() -> Outcome {
    let mut rng = RngStream::new(5);
    let mut worst = 0.0f64;
    let mut idempotent = true;
    for _ in 0..100 {
        let ext = [0; 3].map(|_| 1 + rng.below(12) as usize);
        let v = random_volume(&mut rng, ext);
        let target = random_orientation(&mut rng);
        let r = reorient(&v, target);
        idempotent &= reorient(&r, target) == r;

        // Voxel values are distinct draws, so each identifies its voxel.
        let mut world_of_value = HashMap::new();
        for n in 0..v.len() {
            let ijk = [n % ext[0], (n / ext[0]) % ext[1], n / (ext[0] * ext[1])];
            world_of_value.insert(v.data()[n].to_bits(), v.world_of(ijk));
        }
        let [nx, ny, _] = r.extents();
        for n in 0..r.len() {
            let ijk = [n % nx, (n / nx) % ny, n / (nx * ny)];
            let before = world_of_value[&r.data()[n].to_bits()];
            let after = r.world_of(ijk);
            worst = (0..3)
                .map(|a| (before[a] - after[a]).abs())
                .fold(worst, f64::max);
        }
    }
    Outcome {
        pass: worst < 1e-9 && idempotent,
        detail: format!("100 pairs, world error {worst:e}, idempotent: {idempotent}"),
    }
}

fn formats() -> Outcome {
    let mut rng = RngStream::new(6);
    let mut values_exact = true;
    let mut affine_worst = 0.0f64;
    for dt in [
        Datatype::Uint8,
        Datatype::Int16,
        Datatype::Float32,
        Datatype::Float64,
    ] {
        for _ in 0..10 {
            let ext = [0; 3].map(|_| 1 + rng.below(8) as usize);
            let n: usize = ext.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| match dt {
                    Datatype::Uint8 => rng.below(256) as f64,
                    Datatype::Int16 => rng.below(65536) as f64 - 32768.0,
                    Datatype::Float32 => f64::from((rng.normal() * 100.0) as f32),
                    Datatype::Float64 => rng.normal() * 100.0,
                })
                .collect();
            // Translations within ±7.5 mm keep every entry where single
            // precision resolves 1e-6.
            let code = random_orientation(&mut rng);
            let mut affine = random_affine(&mut rng, code);
            for row in affine.iter_mut().take(3) {
                row[3] = row[3].clamp(-7.5, 7.5);
            }
            let v = Volume::new(ext, data, affine).unwrap();
            let back = read_nifti(&write_nifti(&v, dt).unwrap()).unwrap();
            values_exact &= back.extents() == v.extents() && back.data() == v.data();
            for r in 0..4 {
                for c in 0..4 {
                    affine_worst = affine_worst.max((back.affine()[r][c] - v.affine()[r][c]).abs());
                }
            }
        }
    }

    let model = Model::build(VNetConfig::default(), &mut RngStream::new(60)).unwrap();
    let restored = checkpoint::load(&checkpoint::save(&model)).unwrap();
    let x = random_tensor(&mut rng, &[1, 1, 16, 16, 16]);
    let (a, b) = (model.forward(&x).unwrap(), restored.forward(&x).unwrap());
    let bitwise = a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits());
    Outcome {
        pass: values_exact && affine_worst < 1e-6 && bitwise,
        detail: format!(
            "values exact: {values_exact}, affine error {affine_worst:e}, checkpoint forward bitwise: {bitwise}"
        ),
    }
}

fn phantom_samples() -> Vec<Sample> {
    (0..16)
        .map(|seed| {
            let (image, label) = generate(&PhantomConfig {
                seed,
                ..PhantomConfig::default()
            })
            .unwrap();
            Sample {
                image: zscore(&image),
                label,
            }
        })
        .collect()
}

fn end_to_end() -> Outcome {
    let samples = phantom_samples();
    let (train_set, held_out) = samples.split_at(12);
    let cfg = TrainConfig {
        steps: 1000,
        eval_every: 500,
        ..TrainConfig::default()
    };
    let inference = InferenceConfig {
        threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        ..InferenceConfig::default()
    };
    let model = init_model(VNetConfig::default(), cfg.seed).unwrap();
    let (_, log) = train(train_set, held_out, model, &cfg, &inference).unwrap();
    let dice = log.evals().last().map_or(f64::NAN, |e| e.1);

    let short = TrainConfig {
        steps: 50,
        ..cfg.clone()
    };
    let model = init_model(VNetConfig::default(), short.seed).unwrap();
    let (_, again) = train(train_set, &[], model, &short, &inference).unwrap();
    let steps = |records: &[LogRecord]| -> Vec<(usize, u64)> {
        records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { step, loss } => Some((*step, loss.to_bits())),
                LogRecord::Eval { .. } => None,
            })
            .take(50)
            .collect()
    };
    let deterministic = steps(&log.records) == steps(&again.records);
    let evals: Vec<String> = log
        .evals()
        .iter()
        .map(|(s, d)| format!("{s}:{d:.4}"))
        .collect();
    Outcome {
        pass: dice >= 0.80 && deterministic,
        detail: format!(
            "held-out Dice {dice:.4} after {} steps (evals {}), deterministic: {deterministic}",
            cfg.steps,
            evals.join(" ")
        ),
    }
}

fn imbalance_ordering() -> Outcome {
    let mut rng = RngStream::new(8);
    let tv = TverskyParams::new(0.3, 0.7).unwrap();
    let dice_params = TverskyParams::default();
    let (mut instances, mut violations, mut min_gap) = (0, 0, f64::INFINITY);
    while instances < 1000 {
        let n = 16 + rng.below(240) as usize;
        let q = rng.uniform_range(0.05, 0.95);
        let truth: Vec<f64> = (0..n).map(|_| rng.bernoulli(q) as u8 as f64).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let c = losses::soft_counts(&pred, &truth).unwrap();
        if c.false_neg <= c.false_pos {
            continue;
        }
        instances += 1;
        let t = losses::soft_loss_grad(&pred, &truth, LossKind::Tversky, &tv)
            .unwrap()
            .0;
        let d = losses::soft_loss_grad(&pred, &truth, LossKind::Dice, &dice_params)
            .unwrap()
            .0;
        if t <= d {
            violations += 1;
        }
        min_gap = min_gap.min(t - d);
    }
    Outcome {
        pass: violations == 0,
        detail: format!(
            "{instances} instances with fn > fp, {violations} violations, min gap {min_gap:e}"
        ),
    }
}

fn sampler_balance() -> Outcome {
    let ext = [64, 64, 64];
    let n: usize = ext.iter().product();
    let mut label = vec![0.0; n];
    for [i, j, k] in [
        [5, 7, 9],
        [50, 40, 30],
        [20, 60, 3],
        [61, 2, 44],
        [33, 33, 58],
    ] {
        label[i + 64 * (j + 64 * k)] = 1.0;
    }
    let label = Volume::from_data(ext, label).unwrap();
    let image = Volume::zeros(ext);
    let spec = PatchSpec {
        size: [32, 32, 32],
        fg_fraction: 0.5,
        ..PatchSpec::default()
    };
    let sampler = PatchSampler::new(&image, &label, &spec).unwrap();
    let mut rng = RngStream::new(9);
    let draws = 10_000;
    let with_fg = (0..draws)
        .filter(|_| sampler.sample(&mut rng).unwrap().contains_foreground())
        .count();
    let frac = with_fg as f64 / draws as f64;
    Outcome {
        pass: frac >= 0.48,
        detail: format!(
            "{with_fg}/{draws} patches contain foreground ({:.2}%)",
            100.0 * frac
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let secs = Duration::from_secs;
    let results = [
        run(1, "metric oracle", secs(5), metric_oracle),
        run(2, "coefficient identities", secs(1), identities),
        run(3, "gradient suite", secs(120), gradient_suite),
        run(4, "stitching partition of unity", secs(30), stitching),
        run(5, "reorientation geometry", secs(30), geometry),
        run(6, "format round-trips", secs(10), formats),
        run(7, "end-to-end learning", secs(15 * 60), end_to_end),
        run(8, "imbalance ordering", secs(1), imbalance_ordering),
        run(9, "sampler balance", secs(30), sampler_balance),
    ];
    let failed: Vec<usize> = (0..results.len())
        .filter(|&i| !results[i])
        .map(|i| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
