//! Central finite-difference checks for every differentiable operation, the
//! soft overlap losses and a whole VNet. Shared by the gradient tests and
//! the acceptance run.

use super::{away_from_zero, gradient_check, random_tensor, rel_err, FD_STEP};
use voxelseg::losses::{soft_loss_grad, LossKind, TverskyParams};
use voxelseg::vnet::{Nonlinearity, OutputHead};
use voxelseg::{Model, RngStream, Tape, Tensor, VNetConfig, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const INSTANCES: u64 = 20;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
type Maker = fn(&mut RngStream) -> (Vec<Tensor>, Build);

fn random_probs(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(0.05, 0.95)).collect()
}

fn random_mask(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.bernoulli(0.3) as u8 as f64).collect()
}

pub fn op_cases() -> Vec<(&'static str, Maker)> {
    vec![
        ("add", |r| {
            (
                vec![random_tensor(r, &[2, 3]), random_tensor(r, &[2, 3])],
                Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
            )
        }),
        ("sub", |r| {
            (
                vec![random_tensor(r, &[4]), random_tensor(r, &[4])],
                Box::new(|t, v| t.sub(v[0], v[1]).unwrap()),
            )
        }),
        ("mul", |r| {
            (
                vec![random_tensor(r, &[3, 2]), random_tensor(r, &[3, 2])],
                Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
            )
        }),
        ("add_scalar", |r| {
            let c = r.normal();
            (
                vec![random_tensor(r, &[5])],
                Box::new(move |t, v| t.add_scalar(v[0], c)),
            )
        }),
        ("mul_scalar", |r| {
            let c = r.normal();
            (
                vec![random_tensor(r, &[5])],
                Box::new(move |t, v| t.mul_scalar(v[0], c)),
            )
        }),
        ("relu", |r| {
            (vec![away_from_zero(r, &[6])], Box::new(|t, v| t.relu(v[0])))
        }),
        ("prelu", |r| {
            (
                vec![
                    away_from_zero(r, &[6]),
                    Tensor::new(vec![1], vec![r.uniform_range(0.0, 0.5)]).unwrap(),
                ],
                Box::new(|t, v| t.prelu(v[0], v[1]).unwrap()),
            )
        }),
        ("sigmoid", |r| {
            (
                vec![random_tensor(r, &[6])],
                Box::new(|t, v| t.sigmoid(v[0])),
            )
        }),
        ("sum", |r| {
            (
                vec![random_tensor(r, &[2, 2, 2])],
                Box::new(|t, v| t.sum(v[0])),
            )
        }),
        ("mean", |r| {
            (vec![random_tensor(r, &[7])], Box::new(|t, v| t.mean(v[0])))
        }),
        ("reshape", |r| {
            (
                vec![random_tensor(r, &[2, 3])],
                Box::new(|t, v| t.reshape(v[0], vec![3, 2]).unwrap()),
            )
        }),
        ("concat_channels", |r| {
            (
                vec![
                    random_tensor(r, &[2, 1, 2, 2, 1]),
                    random_tensor(r, &[2, 2, 2, 2, 1]),
                ],
                Box::new(|t, v| t.concat_channels(v[0], v[1]).unwrap()),
            )
        }),
        ("conv3d same padding", |r| {
            (
                vec![
                    random_tensor(r, &[1, 2, 4, 4, 4]),
                    random_tensor(r, &[2, 2, 3, 3, 3]),
                    random_tensor(r, &[2]),
                ],
                Box::new(|t, v| {
                    t.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1])
                        .unwrap()
                }),
            )
        }),
        ("conv3d strided", |r| {
            (
                vec![
                    random_tensor(r, &[2, 1, 5, 4, 3]),
                    random_tensor(r, &[2, 1, 3, 2, 2]),
                ],
                Box::new(|t, v| t.conv3d(v[0], v[1], None, [2, 1, 2], [1, 0, 1]).unwrap()),
            )
        }),
        ("conv3d_down", |r| {
            (
                vec![
                    random_tensor(r, &[1, 2, 4, 4, 2]),
                    random_tensor(r, &[3, 2, 2, 2, 2]),
                    random_tensor(r, &[3]),
                ],
                Box::new(|t, v| t.conv3d_down(v[0], v[1], Some(v[2])).unwrap()),
            )
        }),
        ("conv_transpose3d_up", |r| {
            (
                vec![
                    random_tensor(r, &[1, 3, 2, 2, 1]),
                    random_tensor(r, &[3, 2, 2, 2, 2]),
                    random_tensor(r, &[2]),
                ],
                Box::new(|t, v| t.conv_transpose3d_up(v[0], v[1], Some(v[2])).unwrap()),
            )
        }),
        ("conv_transpose3d general", |r| {
            (
                vec![
                    random_tensor(r, &[1, 2, 3, 2, 3]),
                    random_tensor(r, &[2, 1, 3, 3, 2]),
                ],
                Box::new(|t, v| {
                    t.conv_transpose3d(v[0], v[1], None, [2, 1, 1], [1, 1, 0])
                        .unwrap()
                }),
            )
        }),
        ("conv -> relu -> sum", |r| {
            (
                vec![
                    random_tensor(r, &[1, 1, 4, 4, 4]),
                    random_tensor(r, &[1, 1, 3, 3, 3]),
                ],
                Box::new(|t, v| {
                    let y = t.conv3d(v[0], v[1], None, [1, 1, 1], [1, 1, 1]).unwrap();
                    let a = t.relu(y);
                    t.sum(a)
                }),
            )
        }),
        ("soft dice on tape", |r| {
            let truth = random_mask(r, 27);
            (
                vec![random_tensor(r, &[27])],
                Box::new(move |t, v| {
                    let p = t.sigmoid(v[0]);
                    t.soft_overlap_loss(p, &truth, LossKind::Dice, &TverskyParams::default())
                        .unwrap()
                }),
            )
        }),
    ]
}

/// Worst relative error of one op over `INSTANCES` random instances.
pub fn op_worst(make: Maker) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut rng = RngStream::new(1000).split(i);
        let (inputs, build) = make(&mut rng);
        worst = worst.max(gradient_check(&inputs, &mut rng, build));
    }
    worst
}

pub fn loss_cases() -> [(LossKind, TverskyParams); 3] {
    [
        (LossKind::Jaccard, TverskyParams::default()),
        (LossKind::Dice, TverskyParams::default()),
        (LossKind::Tversky, TverskyParams::new(0.3, 0.7).unwrap()),
    ]
}

/// Worst relative error of the analytic soft-loss gradient over 64 voxels.
pub fn soft_loss_worst(kind: LossKind, params: &TverskyParams) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut rng = RngStream::new(2000).split(i);
        let pred = random_probs(&mut rng, 64);
        let truth = random_mask(&mut rng, 64);
        let (_, grad) = soft_loss_grad(&pred, &truth, kind, params).unwrap();
        for j in 0..pred.len() {
            let mut p = pred.clone();
            p[j] += FD_STEP;
            let up = soft_loss_grad(&p, &truth, kind, params).unwrap().0;
            p[j] -= 2.0 * FD_STEP;
            let down = soft_loss_grad(&p, &truth, kind, params).unwrap().0;
            worst = worst.max(rel_err(grad[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Soft-Dice loss of a 2-stage model on 8³ against finite differences over
/// every parameter. Returns the worst error and where it occurred.
pub fn model_worst() -> (f64, String) {
    let cfg = VNetConfig {
        in_channels: 1,
        stage_channels: vec![2, 3],
        convs_per_stage: 2,
        kernel: [3, 3, 3],
        nonlinearity: Nonlinearity::Prelu,
        output: OutputHead::Sigmoid,
    };
    let model = Model::build(cfg, &mut RngStream::new(31)).unwrap();
    let mut rng = RngStream::new(32);
    let x = random_tensor(&mut rng, &[1, 1, 8, 8, 8]);
    let truth = random_mask(&mut rng, 512);
    let params = TverskyParams::default();

    let loss_of = |m: &Model| -> f64 {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (out, _) = m.forward_graph(&mut tape, &p, xv).unwrap();
        let l = tape
            .soft_overlap_loss(out, &truth, LossKind::Dice, &params)
            .unwrap();
        tape.value(l).data()[0]
    };

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let (out, _) = model.forward_graph(&mut tape, &vars, xv).unwrap();
    let loss = tape
        .soft_overlap_loss(out, &truth, LossKind::Dice, &params)
        .unwrap();
    tape.backward(loss).unwrap();

    let mut worst = (0.0f64, String::new());
    let mut probe = model.clone();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).unwrap().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let orig = probe.parameters()[pi].value.data()[j];
            probe.parameters_mut()[pi].value.data_mut()[j] = orig + FD_STEP;
            let up = loss_of(&probe);
            probe.parameters_mut()[pi].value.data_mut()[j] = orig - FD_STEP;
            let down = loss_of(&probe);
            probe.parameters_mut()[pi].value.data_mut()[j] = orig;
            let e = rel_err(a, (up - down) / (2.0 * FD_STEP));
            if e > worst.0 {
                worst = (e, format!("{}[{j}]", model.parameters()[pi].name));
            }
        }
    }
    worst
}
