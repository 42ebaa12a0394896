//! Finite-difference checks for every differentiable op and for the composed
//! model, shared by the test suite and the `gradcheck` command.

use crate::attention::{coattention_on, dynamic_filters_on, gate_on, lightweight_nonlocal_on, self_attention_on};
use crate::error::Result;
use crate::model::{forward_on, ModelOptions, ModelParams, ModelTensors};
use crate::rng::Rng;
use crate::tensor::gradcheck::random_projection;
use crate::tensor::{gradient_check, gradient_check_coords, GradTape, Tensor, Var, DEFAULT_STEP};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Seeded evaluation points per row.
pub const POINTS: usize = 5;
/// Parameter coordinates sampled per point for the composed model.
pub const MODEL_COORDS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Negative control: scales the matmul backward by 1.5 on every tape.
    pub corrupt_matmul: bool,
}

type Builder = fn(&mut GradTape, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: fn(&mut Rng) -> Vec<Tensor>,
    build: Builder,
}

fn u(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::random_uniform(shape, lo, hi, rng)
}

fn sym(shape: &[usize], rng: &mut Rng) -> Tensor {
    u(shape, -1.0, 1.0, rng)
}

fn project(tape: &mut GradTape, v: Var) -> Result<Var> {
    random_projection(tape, v, 0x5eed)
}

fn half_mask(h: usize, w: usize) -> Tensor {
    let mut m = Tensor::zeros(&[h, w]);
    for i in 0..h * w / 2 {
        m.data_mut()[i] = 1.0;
    }
    m
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            inputs: |r| vec![sym(&[4, 5], r), sym(&[5, 3], r)],
            build: |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y)
            },
        },
        OpCase {
            name: "transpose",
            inputs: |r| vec![sym(&[4, 6], r)],
            build: |t, v| {
                let y = t.transpose(v[0])?;
                project(t, y)
            },
        },
        OpCase {
            name: "reshape",
            inputs: |r| vec![sym(&[3, 4, 2], r)],
            build: |t, v| {
                let y = t.reshape(v[0], &[12, 2])?;
                project(t, y)
            },
        },
        OpCase {
            name: "add",
            inputs: |r| vec![sym(&[3, 5], r), sym(&[3, 5], r)],
            build: |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y)
            },
        },
        OpCase {
            name: "mul",
            inputs: |r| vec![sym(&[3, 5], r), sym(&[3, 5], r)],
            build: |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y)
            },
        },
        OpCase {
            name: "scale",
            inputs: |r| vec![sym(&[6], r)],
            build: |t, v| {
                let y = t.scale(v[0], -1.7);
                project(t, y)
            },
        },
        OpCase {
            name: "add_bias",
            inputs: |r| vec![sym(&[4, 4, 3], r), sym(&[3], r)],
            build: |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                project(t, y)
            },
        },
        OpCase {
            name: "relu",
            // Values kept away from the kink.
            inputs: |r| vec![sym(&[5, 5], r).map(|x| if x.abs() < 0.05 { x + 0.1 } else { x })],
            build: |t, v| {
                let y = t.relu(v[0]);
                project(t, y)
            },
        },
        OpCase {
            name: "sigmoid",
            inputs: |r| vec![u(&[5, 5], -4.0, 4.0, r)],
            build: |t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y)
            },
        },
        OpCase {
            name: "softmax_rows",
            inputs: |r| vec![u(&[4, 6], -3.0, 3.0, r)],
            build: |t, v| {
                let y = t.softmax_rows(v[0])?;
                project(t, y)
            },
        },
        OpCase {
            name: "conv2d",
            inputs: |r| vec![sym(&[6, 6, 3], r), sym(&[3, 3, 3, 4], r)],
            build: |t, v| {
                let y = t.conv2d(v[0], v[1], 1)?;
                project(t, y)
            },
        },
        OpCase {
            name: "conv2d_stride2",
            inputs: |r| vec![sym(&[6, 6, 3], r), sym(&[3, 3, 3, 4], r)],
            build: |t, v| {
                let y = t.conv2d(v[0], v[1], 2)?;
                project(t, y)
            },
        },
        OpCase {
            name: "depthwise_conv2d",
            inputs: |r| vec![sym(&[6, 6, 8], r), sym(&[3, 3, 8], r)],
            build: |t, v| {
                let y = t.depthwise_conv2d(v[0], v[1])?;
                project(t, y)
            },
        },
        OpCase {
            name: "masked_avg_pool",
            inputs: |r| vec![sym(&[4, 4, 5], r)],
            build: |t, v| {
                let y = t.masked_avg_pool(v[0], &half_mask(4, 4))?;
                project(t, y)
            },
        },
        OpCase {
            name: "spatial_mean",
            inputs: |r| vec![sym(&[4, 4, 5], r)],
            build: |t, v| {
                let y = t.spatial_mean(v[0])?;
                project(t, y)
            },
        },
        OpCase {
            name: "l2_normalize",
            inputs: |r| vec![sym(&[6], r)],
            build: |t, v| {
                let y = t.l2_normalize(v[0])?;
                project(t, y)
            },
        },
        OpCase {
            name: "bilinear_upsample_x2",
            inputs: |r| vec![sym(&[3, 4, 2], r)],
            build: |t, v| {
                let y = t.upsample2x(v[0])?;
                project(t, y)
            },
        },
        OpCase {
            name: "concat_channels",
            inputs: |r| vec![sym(&[3, 3, 2], r), sym(&[3, 3, 4], r)],
            build: |t, v| {
                let y = t.concat_channels(&[v[0], v[1]])?;
                project(t, y)
            },
        },
        OpCase {
            name: "sum",
            inputs: |r| vec![sym(&[7], r)],
            build: |t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.sum(y))
            },
        },
        OpCase {
            name: "bce_loss",
            inputs: |r| vec![u(&[5, 5], 0.05, 0.95, r)],
            build: |t, v| {
                let target = Tensor::random_uniform(&[5, 5], 0.0, 1.0, &mut Rng::new(77)).map(|x| x.round());
                t.bce(v[0], &target)
            },
        },
        OpCase {
            name: "infonce",
            inputs: |r| (0..5).map(|_| sym(&[6], r)).collect(),
            build: |t, v| {
                let n: Vec<Var> = v.iter().map(|&x| t.l2_normalize(x)).collect::<Result<_>>()?;
                t.infonce(n[0], &[n[1], n[2]], &[n[3], n[4]], 0.1)
            },
        },
        OpCase {
            name: "lightweight_nonlocal",
            inputs: |r| vec![sym(&[4, 4, 6], r)],
            build: |t, v| {
                let y = lightweight_nonlocal_on(t, v[0])?;
                project(t, y)
            },
        },
        OpCase {
            name: "dynamic_filters",
            inputs: |r| vec![sym(&[4, 4, 4], r), u(&[4, 36], -0.5, 0.5, r)],
            build: |t, v| {
                let y = dynamic_filters_on(t, v[0], v[1])?;
                project(t, y)
            },
        },
        OpCase {
            name: "self_attention_block",
            inputs: |r| vec![sym(&[4, 4, 4], r), u(&[4, 36], -0.5, 0.5, r)],
            build: |t, v| {
                let y = self_attention_on(t, v[0], v[1])?;
                project(t, y)
            },
        },
        OpCase {
            name: "coattention",
            inputs: |r| {
                vec![
                    sym(&[8, 8, 3], r),
                    sym(&[4, 4, 4], r),
                    u(&[4, 4], -0.5, 0.5, r),
                    u(&[3, 3, 3, 4], -0.3, 0.3, r),
                ]
            },
            build: |t, v| {
                let y = coattention_on(t, v[0], v[1], v[2], v[3])?;
                project(t, y)
            },
        },
        OpCase {
            name: "gate",
            inputs: |r| vec![sym(&[4, 4, 4], r), sym(&[1, 1, 4, 4], r), sym(&[4], r)],
            build: |t, v| {
                let y = gate_on(t, v[0], v[1], v[2])?;
                project(t, y)
            },
        },
    ]
}

fn corruptible(corrupt: bool, build: Builder) -> impl Fn(&mut GradTape, &[Var]) -> Result<Var> {
    move |tape, vars| {
        if corrupt {
            tape.corrupt_matmul_backward();
        }
        build(tape, vars)
    }
}

/// BCE of the full network on a 32×32 frame, checked on a random subset of
/// parameter coordinates.
fn model_point(point_seed: u64, corrupt: bool) -> Result<f64> {
    let mut rng = Rng::new(point_seed);
    let params = ModelParams::init(8, point_seed);
    let frame = Tensor::random_uniform(&[32, 32, 3], 0.0, 1.0, &mut rng);
    let mut mask = Tensor::zeros(&[32, 32]);
    for y in 8..20 {
        for x in 10..24 {
            mask.data_mut()[y * 32 + x] = 1.0;
        }
    }
    let inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut coords = Vec::with_capacity(MODEL_COORDS);
    for flat in rng.choose_distinct(total, MODEL_COORDS) {
        let mut rest = flat;
        for (i, t) in inputs.iter().enumerate() {
            if rest < t.len() {
                coords.push((i, rest));
                break;
            }
            rest -= t.len();
        }
    }
    let report = gradient_check_coords(
        |tape, vars| {
            if corrupt {
                tape.corrupt_matmul_backward();
            }
            let p = ModelTensors::from_ordered(vars.to_vec()).expect("one var per tensor");
            let input = tape.leaf(frame.clone());
            let out = forward_on(tape, &p, input, ModelOptions::default())?;
            tape.bce(out.saliency, &mask)
        },
        &inputs,
        &coords,
        DEFAULT_STEP,
    )?;
    Ok(report.max_rel_error)
}

/// Runs every row at [`POINTS`] seeded points; each row reports the worst
/// error over its points.
pub fn run_suite(opts: SuiteOptions) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for (ci, case) in op_cases().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for point in 0..POINTS {
            let mut rng = Rng::derive(opts.seed, (ci * POINTS + point) as u64);
            let inputs = (case.inputs)(&mut rng);
            let report = gradient_check(corruptible(opts.corrupt_matmul, case.build), &inputs, DEFAULT_STEP)?;
            worst = worst.max(report.max_rel_error);
        }
        rows.push(GradCheckRow {
            name: case.name,
            max_rel_error: worst,
            tolerance: OP_TOLERANCE,
        });
    }
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let seed = Rng::derive(opts.seed, 0x6d6f_6465_6c00_0000 | point as u64).next_u64();
        worst = worst.max(model_point(seed, opts.corrupt_matmul)?);
    }
    rows.push(GradCheckRow {
        name: "model_bce",
        max_rel_error: worst,
        tolerance: MODEL_TOLERANCE,
    });
    Ok(rows)
}
