//! Feed-forward networks on top of [`Tape`], plus finite-difference gradient checks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, numeric, shape_err, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::real::Real;
use crate::tensor::{self, Tensor};

/// Nonlinearity applied after every hidden layer. The output layer is affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(contract(format!("unknown activation {other:?}"))),
        }
    }

    fn apply(self, xs: &mut [f32]) {
        match self {
            Activation::Tanh => xs.iter_mut().for_each(|v| *v = libm::tanhf(*v)),
            Activation::Relu => xs.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Identity => {}
        }
    }

    fn apply_f64(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

/// One affine layer; `weight` is `[in, out]`, `bias` is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Multi-layer perceptron with widths `w_0 → w_1 → … → w_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<Linear>,
    activation: Activation,
}

/// Tape handles for an [`Mlp`]'s parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    /// Parameter gradients in [`Mlp::params`] order.
    pub fn grads<T: Real>(&self, net: &Mlp, g: &Gradients<T>) -> Vec<Tensor<T>> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for ((w, b), layer) in self.layers.iter().zip(&net.layers) {
            out.push(g.get_or_zeros(*w, layer.weight.shape()));
            out.push(g.get_or_zeros(*b, layer.bias.shape()));
        }
        out
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        Self::validate(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fi, fo) = (w[0], w[1]);
                let s = libm::sqrtf(6.0 / (fi + fo) as f32);
                let data = (0..fi * fo).map(|_| rng.random_range(-s..s)).collect();
                Linear {
                    weight: Tensor::new(&[fi, fo], data).expect("sized"),
                    bias: Tensor::zeros(&[fo]),
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            activation,
        })
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        Self::validate(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            activation,
        })
    }

    pub fn from_layers(layers: Vec<Linear>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(contract("an MLP needs at least one layer"));
        }
        let mut widths = vec![layers[0].weight.shape()[0]];
        for l in &layers {
            let ws = l.weight.shape();
            if ws.len() != 2 || ws[0] != *widths.last().unwrap() {
                return Err(shape_err(&[*widths.last().unwrap(), l.bias.len()], ws));
            }
            if l.bias.len() != ws[1] {
                return Err(shape_err(&[ws[1]], l.bias.shape()));
            }
            widths.push(ws[1]);
        }
        Ok(Self {
            widths,
            layers,
            activation,
        })
    }

    fn validate(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(contract(format!("invalid layer widths {widths:?}")));
        }
        Ok(())
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameters in the order `w0, b0, w1, b1, …`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Evaluates the network on `[rows, in]` (or a bare `[in]`) input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let rank1 = input.shape().len() == 1;
        let out = self.forward_rows(input.data(), input.last_dim())?;
        let rows = input.rows();
        if rank1 {
            Tensor::new(&[self.output_dim()], out)
        } else {
            Tensor::new(&[rows, self.output_dim()], out)
        }
    }

    /// Batched evaluation over a flat row-major buffer with `cols` columns.
    pub fn forward_rows(&self, input: &[f32], cols: usize) -> Result<Vec<f32>> {
        if cols != self.input_dim() {
            return Err(shape_err(&[self.input_dim()], &[cols]));
        }
        let m = if cols == 0 { 0 } else { input.len() / cols };
        let mut cur = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (k, n) = (l.weight.shape()[0], l.weight.shape()[1]);
            let mut next = vec![0.0; m * n];
            tensor::matmul(&cur, l.weight.data(), m, k, n, &mut next);
            tensor::add_bias(&mut next, l.bias.data());
            if i < last {
                self.activation.apply(&mut next);
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Records the parameters as tape leaves. Frozen parameters become constants.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = (l.weight.cast::<T>(), l.bias.cast::<T>());
                if trainable {
                    (tape.var(w), tape.var(b))
                } else {
                    (tape.constant(w), tape.constant(b))
                }
            })
            .collect();
        MlpVars { layers }
    }

    /// Taped forward pass; values are bit-identical to [`Mlp::forward`].
    pub fn forward_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &MlpVars,
        input: Var,
    ) -> Result<Var> {
        let d = tape.value(input).last_dim();
        if d != self.input_dim() {
            return Err(shape_err(&[self.input_dim()], tape.value(input).shape()));
        }
        let last = vars.layers.len() - 1;
        let mut h = input;
        for (i, (w, b)) in vars.layers.iter().enumerate() {
            h = tape.matmul(h, *w)?;
            h = tape.add_bias(h, *b)?;
            if i < last {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                    Activation::Identity => h,
                };
            }
        }
        Ok(h)
    }

    /// Double-precision evaluation of one input row, written independently of
    /// the `f32` kernels; used as the reference side of gradient checks.
    pub fn forward_f64(&self, input: &[f64]) -> Vec<f64> {
        self.forward_f64_with(input, None)
    }

    fn forward_f64_with(&self, input: &[f64], nudge: Option<(usize, usize, f64)>) -> Vec<f64> {
        let mut cur = input.to_vec();
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let (k, n) = (l.weight.shape()[0], l.weight.shape()[1]);
            let param = |which: usize, idx: usize, raw: f32| -> f64 {
                match nudge {
                    Some((p, i, h)) if p == li * 2 + which && i == idx => raw as f64 + h,
                    _ => raw as f64,
                }
            };
            let mut next = Vec::with_capacity(n);
            for j in 0..n {
                let mut s = param(1, j, l.bias.data()[j]);
                for (p, x) in cur.iter().enumerate().take(k) {
                    s += x * param(0, p * n + j, l.weight.data()[p * n + j]);
                }
                next.push(if li < last { self.activation.apply_f64(s) } else { s });
            }
            cur = next;
        }
        cur
    }

    /// 64-bit FNV-1a over the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::fnv::Fnv64::new();
        for p in self.params() {
            for v in p.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Scalar objectives supported by [`gradcheck`].
#[derive(Debug, Clone)]
pub enum GradLoss {
    /// `Σ y²`.
    SumSquares,
    /// `mean((y − target)²)`.
    Mse(Tensor),
    /// `Σ wᵢ yᵢ`.
    Linear(Tensor),
}

impl GradLoss {
    fn on_tape(&self, tape: &mut Tape<f64>, y: Var) -> Result<Var> {
        match self {
            GradLoss::SumSquares => Ok(tape.sum_squares(y)),
            GradLoss::Mse(t) => {
                let t = tape.constant(t.cast());
                let d = tape.sub(y, t)?;
                Ok(tape.mean_squares(d))
            }
            GradLoss::Linear(w) => {
                let w = tape.constant(w.cast());
                let p = tape.mul(y, w)?;
                // row sums, then a column sum
                let ones = tape.constant(Tensor::full(&[tape.value(p).last_dim(), 1], 1.0));
                let rowsum = tape.matmul(p, ones)?;
                let ones_r = tape.constant(Tensor::full(&[1, tape.value(rowsum).rows()], 1.0));
                let total = tape.matmul(ones_r, rowsum)?;
                Ok(total)
            }
        }
    }

    fn eval_f64(&self, y: &[f64]) -> f64 {
        match self {
            GradLoss::SumSquares => y.iter().map(|v| v * v).sum(),
            GradLoss::Mse(t) => {
                let n = y.len().max(1) as f64;
                y.iter()
                    .zip(t.data())
                    .map(|(a, b)| {
                        let d = a - *b as f64;
                        d * d
                    })
                    .sum::<f64>()
                    / n
            }
            GradLoss::Linear(w) => y.iter().zip(w.data()).map(|(a, b)| a * *b as f64).sum(),
        }
    }
}

/// Reverse-mode parameter gradients of `loss(net(input))`, with the engine
/// instantiated in double precision so that `f32` rounding does not mask
/// errors in the derivative rules.
pub fn analytic_param_grads(
    net: &Mlp,
    loss: &GradLoss,
    input: &Tensor,
) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::<f64>::new();
    let vars = net.bind(&mut tape, true);
    let x = tape.constant(input.cast());
    let y = net.forward_on_tape(&mut tape, &vars, x)?;
    let l = loss.on_tape(&mut tape, y)?;
    if !tape.value(l).is_finite() {
        return Err(numeric("loss is not finite"));
    }
    let g = tape.backward(l)?;
    Ok(vars.grads(net, &g))
}

/// Central differences in double precision, one coordinate at a time, at
/// steps `fd_step` and `fd_step / 2` combined by Richardson extrapolation.
pub fn numeric_param_grads(
    net: &Mlp,
    loss: &GradLoss,
    input: &Tensor,
    fd_step: f64,
) -> Result<Vec<Vec<f64>>> {
    let coords: Vec<(usize, usize)> = net
        .params()
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |i| (pi, i)))
        .collect();
    let flat = numeric_param_grads_at(net, loss, input, fd_step, &coords)?;
    let mut it = flat.into_iter();
    Ok(net.params().iter().map(|p| it.by_ref().take(p.len()).collect()).collect())
}

/// [`numeric_param_grads`] restricted to `(parameter, element)` coordinates.
pub fn numeric_param_grads_at(
    net: &Mlp,
    loss: &GradLoss,
    input: &Tensor,
    fd_step: f64,
    coords: &[(usize, usize)],
) -> Result<Vec<f64>> {
    if !(fd_step > 0.0) {
        return Err(contract("fd_step must be positive"));
    }
    let params = net.params();
    if let Some(&(pi, i)) = coords.iter().find(|&&(pi, i)| pi >= params.len() || i >= params[pi].len()) {
        return Err(contract(alloc::format!("no parameter coordinate ({pi}, {i})")));
    }
    let cols = input.last_dim();
    let rows: Vec<Vec<f64>> = input
        .data()
        .chunks(cols)
        .map(|r| r.iter().map(|v| *v as f64).collect())
        .collect();
    let eval = |nudge: Option<(usize, usize, f64)>| -> Result<f64> {
        let mut ys = Vec::new();
        for r in &rows {
            ys.extend(net.forward_f64_with(r, nudge));
        }
        let v = loss.eval_f64(&ys);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(numeric("loss is not finite"))
        }
    };
    eval(None)?;
    let mut out = Vec::with_capacity(coords.len());
    for &(pi, i) in coords {
        let central = |h: f64| -> Result<f64> {
            let up = eval(Some((pi, i, h)))?;
            let dn = eval(Some((pi, i, -h)))?;
            Ok((up - dn) / (2.0 * h))
        };
        // Richardson: cancels the h² truncation term of the central difference.
        let coarse = central(fd_step)?;
        let fine = central(fd_step / 2.0)?;
        out.push((4.0 * fine - coarse) / 3.0);
    }
    Ok(out)
}

/// `max |a − n| / (|a| + |n| + 1e-8)` over all coordinates.
pub fn max_relative_error<T: Real>(analytic: &[Tensor<T>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (ai, ni) in a.data().iter().zip(n) {
            let ai = ai.to_f64();
            let e = (ai - ni).abs() / (ai.abs() + ni.abs() + 1e-8);
            worst = worst.max(e);
        }
    }
    worst
}

/// Largest relative disagreement between reverse-mode and central-difference
/// parameter gradients over the given coordinates only.
pub fn gradcheck_at(net: &Mlp, loss: &GradLoss, input: &Tensor, fd_step: f64, coords: &[(usize, usize)]) -> Result<f64> {
    let numeric = numeric_param_grads_at(net, loss, input, fd_step, coords)?;
    let analytic = analytic_param_grads(net, loss, input)?;
    let a: Vec<f64> = coords.iter().map(|&(pi, i)| analytic[pi].data()[i]).collect();
    Ok(max_relative_error(&[Tensor::<f64>::new(&[a.len()], a).expect("flat shape")], &[numeric]))
}

/// Largest relative disagreement between reverse-mode and central-difference
/// parameter gradients.
pub fn gradcheck(net: &Mlp, loss: &GradLoss, input: &Tensor, fd_step: f64) -> Result<f64> {
    let numeric = numeric_param_grads(net, loss, input, fd_step)?;
    let analytic = analytic_param_grads(net, loss, input)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Human-readable architecture summary, e.g. `14-128-32/tanh`.
pub fn describe(net: &Mlp) -> String {
    let mut s = String::new();
    for (i, w) in net.widths().iter().enumerate() {
        if i > 0 {
            s.push('-');
        }
        s.push_str(&format!("{w}"));
    }
    s.push('/');
    s.push_str(net.activation().name());
    s
}
