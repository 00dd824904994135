//! Every differentiable tape op on fixed random inputs, for central
//! finite-difference checks.

use capdiff_autodiff::gradcheck::check_inputs;
use capdiff_autodiff::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|x| x.abs() + 0.2)
}

/// Collapses any output to a scalar through a fixed random weighting, so
/// every output element contributes a distinct amount.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type Op = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
type Gen = fn(&mut ChaCha8Rng, &[usize]) -> Tensor<f64>;

const OPS: &[(&str, Gen, &[&[usize]], Op)] = &[
    ("scale", random, &[&[3, 4]], |t, v| Ok(t.scale(v[0], -2.5))),
    ("shift", random, &[&[3, 4]], |t, v| Ok(t.shift(v[0], 0.75))),
    ("gelu", random, &[&[3, 5]], |t, v| Ok(t.gelu(v[0]))),
    ("tanh", random, &[&[3, 5]], |t, v| Ok(t.tanh(v[0]))),
    ("sigmoid", random, &[&[3, 5]], |t, v| Ok(t.sigmoid(v[0]))),
    ("exp", random, &[&[2, 4]], |t, v| Ok(t.exp(v[0]))),
    ("log", positive, &[&[2, 4]], |t, v| Ok(t.log(v[0]))),
    ("square", random, &[&[2, 4]], |t, v| Ok(t.square(v[0]))),
    ("softmax", random, &[&[3, 6]], |t, v| Ok(t.softmax(v[0]))),
    ("log_softmax", random, &[&[3, 6]], |t, v| {
        Ok(t.log_softmax(v[0]))
    }),
    ("layer_norm", random, &[&[3, 6]], |t, v| {
        Ok(t.layer_norm(v[0], 1e-5))
    }),
    (
        "transpose",
        random,
        &[&[3, 5]],
        |t, v| Ok(t.transpose(v[0])),
    ),
    ("sum", random, &[&[3, 5]], |t, v| Ok(t.sum(v[0]))),
    ("mean", random, &[&[3, 5]], |t, v| Ok(t.mean(v[0]))),
    ("slice_rows", random, &[&[5, 3]], |t, v| {
        t.slice_rows(v[0], 1, 3)
    }),
    ("slice_cols", random, &[&[3, 6]], |t, v| {
        t.slice_cols(v[0], 2, 3)
    }),
    ("gather", random, &[&[5, 3]], |t, v| {
        t.gather(v[0], &[4, 0, 4, 2])
    }),
    ("pick", random, &[&[4, 5]], |t, v| {
        t.pick(v[0], &[0, 4, 2, 2])
    }),
    ("matmul", random, &[&[3, 4], &[4, 5]], |t, v| {
        t.matmul(v[0], v[1])
    }),
    ("matmul_nt", random, &[&[3, 4], &[5, 4]], |t, v| {
        t.matmul_nt(v[0], v[1])
    }),
    ("add", random, &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
    ("sub", random, &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])),
    ("mul", random, &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
    ("add_row", random, &[&[3, 4], &[4]], |t, v| {
        t.add_row(v[0], v[1])
    }),
    ("mul_row", random, &[&[3, 4], &[4]], |t, v| {
        t.mul_row(v[0], v[1])
    }),
    ("concat_rows", random, &[&[2, 4], &[3, 4]], |t, v| {
        t.concat_rows(&[v[0], v[1]])
    }),
    ("concat_cols", random, &[&[3, 2], &[3, 5]], |t, v| {
        t.concat_cols(&[v[0], v[1]])
    }),
    ("shared_input", random, &[&[3, 3]], |t, v| {
        let xx = t.matmul(v[0], v[0])?;
        let y = t.add(xx, v[0])?;
        t.concat_cols(&[y, v[0]])
    }),
];

/// Largest relative error over the inputs of each op.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    OPS.iter()
        .enumerate()
        .map(|(i, (name, gen, shapes, op))| {
            let mut rng = ChaCha8Rng::seed_from_u64(7 + i as u64);
            let inputs: Vec<_> = shapes.iter().map(|s| gen(&mut rng, s)).collect();
            let errs = check_inputs(&inputs, H, |t, v| {
                let out = op(t, v)?;
                weighted_sum(t, out, 99)
            })
            .unwrap();
            (*name, errs.into_iter().fold(0.0, f64::max))
        })
        .collect()
}
