//! Central finite-difference checks of every layer's backward pass and of
//! composed networks, at f64.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::layers::{self, apply_mask};
use crate::nn::{build_head, build_head_spatial, build_small_cnn_with, Mode, Network};
use crate::optim::bce_loss;
use crate::{Result, Tensor};

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

/// Relative error with an absolute floor of 1e-6 so exactly-zero gradients
/// do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// `(f(x + EPS) - f(x - EPS)) / 2EPS`.
pub fn central(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + EPS) - f(x - EPS)) / (2.0 * EPS)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst error of `grads[j]` against d obj / d `params[j]`, perturbing one
/// coordinate of one argument at a time.
fn probe(args: &[Vec<f64>], grads: &[Vec<f64>], obj: &dyn Fn(&[Vec<f64>]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for (a, g) in grads.iter().enumerate() {
        for i in 0..args[a].len() {
            let n = central(
                &mut |v| {
                    let mut x = args.to_vec();
                    x[a][i] = v;
                    obj(&x)
                },
                args[a][i],
            );
            worst = worst.max(rel_err(g[i], n));
        }
    }
    worst
}

pub fn conv_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ci, co, h, w) = (2, 3, 5, 4);
    let args = vec![
        random_vec(&mut rng, ci * h * w, 1.0),
        random_vec(&mut rng, co * ci * 9, 1.0),
        random_vec(&mut rng, co, 1.0),
    ];
    let up = random_vec(&mut rng, co * h * w, 1.0);
    let (gx, gk, gb) = layers::conv3x3_backward_raw(&args[0], ci, h, w, &args[1], co, &up);
    probe(&args, &[gx, gk, gb], &|a| dot(&layers::conv3x3_raw(&a[0], ci, h, w, &a[1], &a[2], co), &up))
}

pub fn dense_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_in, n_out) = (7, 4);
    let args = vec![
        random_vec(&mut rng, n_in, 1.0),
        random_vec(&mut rng, n_in * n_out, 1.0),
        random_vec(&mut rng, n_out, 1.0),
    ];
    let up = random_vec(&mut rng, n_out, 1.0);
    let (gx, gw, gb) = layers::dense_backward_raw(&args[0], &args[1], &up);
    probe(&args, &[gx, gw, gb], &|a| dot(&layers::dense_raw(&a[0], &a[1], &a[2], n_out), &up))
}

type Backward<'a> = &'a dyn Fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Tensor<f64>;

/// Check a parameter-free layer `f` with backward `df(x, y, upstream)`.
fn unary_error(
    x: Vec<f64>,
    shape: &[usize],
    f: &dyn Fn(&Tensor<f64>) -> Tensor<f64>,
    df: Backward<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let xt = Tensor::new(shape.to_vec(), x.clone())?;
    let y = f(&xt);
    let up = Tensor::new(y.shape().to_vec(), random_vec(rng, y.len(), 1.0))?;
    let g = df(&xt, &y, &up).into_data();
    let obj =
        |a: &[Vec<f64>]| dot(f(&Tensor::new(shape.to_vec(), a[0].clone()).expect("shape fixed")).data(), up.data());
    Ok(probe(&[x], &[g], &obj))
}

/// Values at least `2·EPS` from each other and from zero, so ReLU kinks and
/// pooling ties sit outside the stencil.
fn separated(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) * 0.05 * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    v.shuffle(rng);
    v
}

/// `(name, worst relative error)` for relu, sigmoid, gap, maxpool and a
/// fixed dropout mask.
pub fn elementwise_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 4, 4];
    let x = separated(&mut rng, 32);
    let mask = layers::dropout_mask(x.len(), 0.5, &mut rng)?;
    Ok(vec![
        ("relu", unary_error(x.clone(), &shape, &layers::relu, &|x, _, g| layers::relu_backward(x, g), &mut rng)?),
        (
            "sigmoid",
            unary_error(x.clone(), &shape, &layers::sigmoid, &|_, y, g| layers::sigmoid_backward(y, g), &mut rng)?,
        ),
        (
            "gap",
            unary_error(
                x.clone(),
                &shape,
                &|x| layers::global_avg_pool(x).expect("3-d"),
                &|x, _, g| layers::global_avg_pool_backward(x.shape(), g).expect("3-d"),
                &mut rng,
            )?,
        ),
        (
            "maxpool",
            unary_error(
                x.clone(),
                &shape,
                &|x| layers::maxpool2x2(x).expect("3-d").0,
                &|x, _, g| {
                    let (_, arg) = layers::maxpool2x2(x).expect("3-d");
                    layers::maxpool2x2_backward(g, &arg, x.shape()).expect("matching shapes")
                },
                &mut rng,
            )?,
        ),
        ("dropout", unary_error(x, &shape, &|x| apply_mask(x, &mask), &|_, _, g| apply_mask(g, &mask), &mut rng)?),
    ])
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose stencil crossed a ReLU kink or a max-pool switch,
    /// where the derivative is undefined.
    pub skipped: usize,
}

impl Check {
    fn layer(name: &str, max_rel_err: f64, checked: usize) -> Self {
        Self { name: name.to_owned(), max_rel_err, checked, skipped: 0 }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err < TOL && self.skipped * 10 < self.checked.max(1)
    }
}

/// d bce(net(x), y) / d params against central differences over every
/// parameter. In train mode the dropout mask is fixed by `sample_seed`.
pub fn network_check(
    name: &str,
    net: &Network<f64>,
    x: &Tensor<f64>,
    y: u8,
    mode: Mode,
    sample_seed: u64,
) -> Result<Check> {
    let trace = net.forward_sample(x, mode, sample_seed)?;
    let pattern = net.branch_pattern(&trace);
    let (_, dp) = bce_loss(trace.output(), y)?;
    let analytic = net.backward_sample(&trace, dp)?;
    let mut probe = net.clone();
    let eval = |p: &Network<f64>| -> Result<(f64, bool)> {
        let t = p.forward_sample(x, mode, sample_seed)?;
        Ok((bce_loss(t.output(), y)?.0, p.branch_pattern(&t) == pattern))
    };
    let mut check = Check { name: name.to_owned(), max_rel_err: 0.0, checked: 0, skipped: 0 };
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + EPS;
        let (hi, same_hi) = eval(&probe)?;
        probe.params_mut()[i] = orig - EPS;
        let (lo, same_lo) = eval(&probe)?;
        probe.params_mut()[i] = orig;
        check.checked += 1;
        if same_hi && same_lo {
            check.max_rel_err = check.max_rel_err.max(rel_err(a, (hi - lo) / (2.0 * EPS)));
        } else {
            check.skipped += 1;
        }
    }
    Ok(check)
}

/// Every layer, the small CNN on a 3×8×8 input (both labels, train and eval
/// mode) and both heads.
pub fn full_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out =
        vec![Check::layer("conv3x3", conv_error(seed), 132), Check::layer("dense", dense_error(seed + 1), 39)];
    out.extend(elementwise_errors(seed + 2)?.into_iter().map(|(n, e)| Check::layer(n, e, 32)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let mut cnn = build_small_cnn_with::<f64>(0.5)?;
    cnn.init(seed + 3);
    let x = Tensor::new(vec![3, 8, 8], random_vec(&mut rng, 192, 1.0))?;
    for (y, mode) in [(0, Mode::Eval), (1, Mode::Eval), (1, Mode::Train)] {
        out.push(network_check(&format!("small_cnn y={y} {mode:?}"), &cnn, &x, y, mode, seed)?);
    }

    let mut head = build_head::<f64>(32, 0.5)?;
    head.init(seed + 4);
    let x = Tensor::new(vec![32], random_vec(&mut rng, 32, 1.0))?;
    out.push(network_check("head flat", &head, &x, 1, Mode::Train, seed)?);
    let mut spatial = build_head_spatial::<f64>(8, 0.5)?;
    spatial.init(seed + 5);
    let x = Tensor::new(vec![8, 3, 3], random_vec(&mut rng, 72, 1.0))?;
    out.push(network_check("head spatial", &spatial, &x, 0, Mode::Eval, seed)?);
    Ok(out)
}
