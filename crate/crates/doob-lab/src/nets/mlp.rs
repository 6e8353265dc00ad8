//! A small fixed-architecture MLP eps-network with built-in reverse-mode
//! gradients.
//!
//! Input layout (columns): state x (d) | sinusoidal time features (16) |
//! per-coordinate time channels (d, per-coordinate mode only) | conditioning
//! channels. Conditioning follows the padded-motif scheme: motif values with
//! `pad_value` outside the mask, concatenated with the mask itself. Hidden
//! activations are SiLU (sigmoid-weighted linear units); the output layer is
//! linear and zero-initialized so an untrained network predicts eps = 0.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::engine::{CondData, CondKind, TimeInput};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Number of sinusoidal frequency pairs in the time embedding.
pub const N_TIME_FREQS: usize = 8;

/// Default padding value for motif channels outside the mask.
pub const DEFAULT_PAD_VALUE: f64 = -2.0;

/// Whole-sample scalar time, or an extra per-coordinate time channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeMode {
    Whole,
    PerCoord,
}

/// Network architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct NetArch {
    pub d: usize,
    pub hidden: Vec<usize>,
    pub time_mode: TimeMode,
    pub cond: CondKind,
    pub pad_value: f64,
}

impl NetArch {
    /// Hidden widths default to 2 x 128.
    pub fn new(d: usize, cond: CondKind) -> Self {
        NetArch {
            d,
            hidden: vec![128, 128],
            time_mode: TimeMode::Whole,
            cond,
            pad_value: DEFAULT_PAD_VALUE,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_time_mode(mut self, mode: TimeMode) -> Self {
        self.time_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("network dimension must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        let mut n = self.d + 2 * N_TIME_FREQS;
        if self.time_mode == TimeMode::PerCoord {
            n += self.d;
        }
        n + match self.cond {
            CondKind::None => 0,
            CondKind::Aux { n_aux } => n_aux + 1,
            CondKind::Masked => 2 * self.d,
            CondKind::MaskOnly => self.d,
        }
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.d);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// Backward tape: layer inputs and pre-activations from one forward pass.
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre_acts: Vec<Array2<f64>>,
}

/// The eps-network: flat parameter vector plus architecture.
#[derive(Debug, Clone)]
pub struct EpsNet {
    arch: NetArch,
    params: Vec<f64>,
    shapes: Vec<(usize, usize)>,
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_prime(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

impl EpsNet {
    /// Kaiming-style init for hidden layers; the output layer starts at zero.
    pub fn init(arch: NetArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        let n_layers = shapes.len();
        let count: usize = shapes.iter().map(|(o, i)| o * i + o).sum();
        let mut params = vec![0.0; count];
        let mut off = 0;
        for (l, &(out, inp)) in shapes.iter().enumerate() {
            let scale = if l + 1 == n_layers { 0.0 } else { (2.0 / inp as f64).sqrt() };
            for w in params[off..off + out * inp].iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *w = scale * z;
            }
            off += out * inp + out; // biases stay zero
        }
        Ok(EpsNet { arch, params, shapes })
    }

    pub fn from_params(arch: NetArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        let count: usize = shapes.iter().map(|(o, i)| o * i + o).sum();
        if params.len() != count {
            return Err(Error::format(format!(
                "parameter count {} does not match architecture ({count})",
                params.len()
            )));
        }
        Ok(EpsNet { arch, params, shapes })
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Overwrite all parameters with small random values (gradient checks).
    pub fn randomize(&mut self, rng: &mut ChaCha8Rng, scale: f64) {
        let mut off = 0;
        for &(out, inp) in &self.shapes {
            for w in self.params[off..off + out * inp + out].iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *w = scale * z / (inp as f64).sqrt();
            }
            off += out * inp + out;
        }
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, &[f64]) {
        let mut off = 0;
        for &(out, inp) in &self.shapes[..l] {
            off += out * inp + out;
        }
        let (out, inp) = self.shapes[l];
        let w = ArrayView2::from_shape((out, inp), &self.params[off..off + out * inp])
            .expect("weight shape");
        let b = &self.params[off + out * inp..off + out * inp + out];
        (w, b)
    }

    /// Forward pass on an assembled input matrix.
    pub fn forward(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let mut h = input.to_owned();
        let n_layers = self.shapes.len();
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w.t());
            for mut row in z.outer_iter_mut() {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v += bb;
                }
            }
            if l + 1 < n_layers {
                z.mapv_inplace(silu);
            }
            h = z;
        }
        h
    }

    /// Forward pass that records the tape needed by [`EpsNet::backward`].
    pub fn forward_tape(&self, input: ArrayView2<f64>) -> (Array2<f64>, Tape) {
        let n_layers = self.shapes.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre_acts = Vec::with_capacity(n_layers);
        let mut h = input.to_owned();
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let mut z = h.dot(&w.t());
            for mut row in z.outer_iter_mut() {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v += bb;
                }
            }
            inputs.push(h);
            pre_acts.push(z.clone());
            if l + 1 < n_layers {
                z.mapv_inplace(silu);
            }
            h = z;
        }
        (h, Tape { inputs, pre_acts })
    }

    /// Reverse pass: given dL/d(output), return (dL/d(params), dL/d(input)).
    pub fn backward(&self, tape: &Tape, out_cot: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
        let n_layers = self.shapes.len();
        let mut grads = vec![0.0; self.params.len()];
        let mut g = out_cot.to_owned(); // dL/dZ for the current layer
        let mut offsets = Vec::with_capacity(n_layers);
        {
            let mut off = 0;
            for &(out, inp) in &self.shapes {
                offsets.push(off);
                off += out * inp + out;
            }
        }
        for l in (0..n_layers).rev() {
            let (w, _) = self.layer(l);
            let (out, inp) = self.shapes[l];
            let off = offsets[l];
            // weight and bias gradients
            let gw = g.t().dot(&tape.inputs[l]); // out x inp
            grads[off..off + out * inp].copy_from_slice(gw.as_slice().expect("contiguous"));
            let gb = g.sum_axis(Axis(0));
            grads[off + out * inp..off + out * inp + out]
                .copy_from_slice(gb.as_slice().expect("contiguous"));
            // input cotangent
            let mut gi = g.dot(&w);
            if l > 0 {
                gi.zip_mut_with(&tape.pre_acts[l - 1], |v, z| *v *= silu_prime(*z));
            }
            g = gi;
        }
        (grads, g)
    }

    /// Assemble the network input from state, time and conditioning.
    pub fn assemble_input(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        cond: &CondData,
    ) -> Result<Array2<f64>> {
        let (n, d) = x.dim();
        if d != self.arch.d {
            return Err(Error::config(format!(
                "state dimension {d} does not match network dimension {}",
                self.arch.d
            )));
        }
        let n_steps = sch.n_steps() as f64;
        let taus: Vec<f64> = match times {
            TimeInput::Uniform(k) => vec![*k as f64 / n_steps; n],
            TimeInput::PerRow(ks) => {
                if ks.len() != n {
                    return Err(Error::config("per-row time length mismatch"));
                }
                ks.iter().map(|&k| k as f64 / n_steps).collect()
            }
            TimeInput::PerCoord { rows, coords } => {
                if rows.len() != n || coords.dim() != (n, d) {
                    return Err(Error::config("per-coordinate time shape mismatch"));
                }
                rows.iter().map(|&k| k as f64 / n_steps).collect()
            }
        };

        let mut input = Array2::<f64>::zeros((n, self.arch.input_dim()));
        input.slice_mut(ndarray::s![.., 0..d]).assign(&x);
        let mut col = d;
        for j in 0..N_TIME_FREQS {
            let omega = (1u64 << j) as f64 * std::f64::consts::PI;
            for i in 0..n {
                input[[i, col]] = (omega * taus[i]).sin();
                input[[i, col + 1]] = (omega * taus[i]).cos();
            }
            col += 2;
        }
        if self.arch.time_mode == TimeMode::PerCoord {
            match times {
                TimeInput::PerCoord { coords, .. } => {
                    for i in 0..n {
                        for j in 0..d {
                            input[[i, col + j]] = coords[[i, j]] / n_steps;
                        }
                    }
                }
                _ => {
                    // uniform time across coordinates
                    for i in 0..n {
                        for j in 0..d {
                            input[[i, col + j]] = taus[i];
                        }
                    }
                }
            }
            col += d;
        } else if matches!(times, TimeInput::PerCoord { .. }) {
            return Err(Error::config(
                "per-coordinate time input requires a per-coordinate-time network",
            ));
        }

        match (&self.arch.cond, cond) {
            (CondKind::None, CondData::None) => {}
            (CondKind::Masked, CondData::Masked { values, mask }) => {
                if values.dim() != (n, d) || mask.dim() != (n, d) {
                    return Err(Error::config("masked conditioning shape mismatch"));
                }
                for i in 0..n {
                    for j in 0..d {
                        let m = mask[[i, j]];
                        input[[i, col + j]] =
                            values[[i, j]] * m + self.arch.pad_value * (1.0 - m);
                        input[[i, col + d + j]] = m;
                    }
                }
            }
            (CondKind::Masked, CondData::None) => {
                // null condition: everything padded, empty mask
                for i in 0..n {
                    for j in 0..d {
                        input[[i, col + j]] = self.arch.pad_value;
                    }
                }
            }
            (CondKind::MaskOnly, CondData::MaskOnly { mask }) => {
                if mask.dim() != (n, d) {
                    return Err(Error::config("mask conditioning shape mismatch"));
                }
                input.slice_mut(ndarray::s![.., col..col + d]).assign(mask);
            }
            (CondKind::MaskOnly, CondData::None) => {}
            (CondKind::Aux { n_aux }, CondData::Aux { values, present }) => {
                if values.dim() != (n, *n_aux) || present.len() != n {
                    return Err(Error::config("auxiliary conditioning shape mismatch"));
                }
                for i in 0..n {
                    if present[i] {
                        for j in 0..*n_aux {
                            input[[i, col + j]] = values[[i, j]];
                        }
                        input[[i, col + n_aux]] = 1.0;
                    }
                }
            }
            (CondKind::Aux { .. }, CondData::None) => {}
            (want, got) => {
                return Err(Error::config(format!(
                    "conditioning mismatch: network expects {want:?}, got {:?}",
                    got.kind()
                )));
            }
        }
        Ok(input)
    }

    /// Convenience: assemble, run forward.
    pub fn predict(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        cond: &CondData,
    ) -> Result<Array2<f64>> {
        Ok(self.forward(self.assemble_input(sch, times, x, cond)?.view()))
    }
}

/// Momentum-free gradient descent or adaptive-moment estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state over a flat parameter vector.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        Optimizer { kind, lr, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let bc1 = 1.0 - B1.powi(self.t as i32);
                let bc2 = 1.0 - B2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, substream};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn small_net(cond: CondKind) -> EpsNet {
        let arch = NetArch::new(2, cond).with_hidden(vec![8, 8]);
        let mut rng = substream(0, domain::INIT, 0);
        let mut net = EpsNet::init(arch, &mut rng).unwrap();
        net.randomize(&mut rng, 0.7);
        net
    }

    #[test]
    fn zero_output_at_init() {
        let arch = NetArch::new(3, CondKind::None);
        let mut rng = substream(1, domain::INIT, 0);
        let net = EpsNet::init(arch, &mut rng).unwrap();
        let sch = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let x = Array2::from_elem((4, 3), 1.3);
        let out = net
            .predict(&sch, &TimeInput::Uniform(5), x.view(), &CondData::None)
            .unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_dim_accounting() {
        let d = 3;
        assert_eq!(NetArch::new(d, CondKind::None).input_dim(), 3 + 16);
        assert_eq!(NetArch::new(d, CondKind::Masked).input_dim(), 3 + 16 + 6);
        assert_eq!(NetArch::new(d, CondKind::Aux { n_aux: 2 }).input_dim(), 3 + 16 + 3);
        assert_eq!(
            NetArch::new(d, CondKind::MaskOnly)
                .with_time_mode(TimeMode::PerCoord)
                .input_dim(),
            3 + 16 + 3 + 3
        );
    }

    /// Reverse-mode parameter gradients and input VJP against central finite
    /// differences on a scalar loss.
    #[test]
    fn backward_matches_finite_differences() {
        let net = small_net(CondKind::None);
        let sch = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let x = array![[0.4, -1.2], [0.9, 0.3], [-0.5, 0.8]];
        let input = net
            .assemble_input(&sch, &TimeInput::Uniform(7), x.view(), &CondData::None)
            .unwrap();
        let (out, tape) = net.forward_tape(input.view());
        // L = sum out^2
        let cot = out.mapv(|v| 2.0 * v);
        let (gp, gi) = net.backward(&tape, cot.view());

        let loss = |net: &EpsNet, input: ArrayView2<f64>| -> f64 {
            net.forward(input).iter().map(|v| v * v).sum()
        };

        let mut rng = substream(2, domain::INIT, 1);
        let h = 1e-6;
        for _ in 0..20 {
            let i = (rng.gen::<u64>() as usize) % net.n_params();
            let mut np = net.clone();
            np.params_mut()[i] += h;
            let mut nm = net.clone();
            nm.params_mut()[i] -= h;
            let fd = (loss(&np, input.view()) - loss(&nm, input.view())) / (2.0 * h);
            assert_abs_diff_eq!(gp[i], fd, epsilon = 1e-5 * (1.0 + fd.abs()));
        }
        for r in 0..3 {
            for c in 0..input.ncols() {
                let mut ip = input.clone();
                ip[[r, c]] += h;
                let mut im = input.clone();
                im[[r, c]] -= h;
                let fd = (loss(&net, ip.view()) - loss(&net, im.view())) / (2.0 * h);
                assert_abs_diff_eq!(gi[[r, c]], fd, epsilon = 1e-5 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn masked_conditioning_channels() {
        let net = small_net(CondKind::Masked);
        let sch = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let x = array![[0.0, 0.0]];
        let values = array![[0.7, 0.0]];
        let mask = array![[1.0, 0.0]];
        let cond = CondData::Masked { values, mask };
        let input = net
            .assemble_input(&sch, &TimeInput::Uniform(3), x.view(), &cond)
            .unwrap();
        let base = 2 + 16;
        assert_eq!(input[[0, base]], 0.7); // value under the mask
        assert_eq!(input[[0, base + 1]], DEFAULT_PAD_VALUE); // padded
        assert_eq!(input[[0, base + 2]], 1.0); // mask channel
        assert_eq!(input[[0, base + 3]], 0.0);

        // null condition: pad everywhere, zero mask
        let null = net
            .assemble_input(&sch, &TimeInput::Uniform(3), x.view(), &CondData::None)
            .unwrap();
        assert_eq!(null[[0, base]], DEFAULT_PAD_VALUE);
        assert_eq!(null[[0, base + 2]], 0.0);
    }

    #[test]
    fn per_coord_time_channels() {
        let arch = NetArch::new(2, CondKind::MaskOnly)
            .with_hidden(vec![4])
            .with_time_mode(TimeMode::PerCoord);
        let mut rng = substream(3, domain::INIT, 0);
        let net = EpsNet::init(arch, &mut rng).unwrap();
        let sch = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let x = array![[0.1, 0.2]];
        let coords = array![[0.0, 8.0]];
        let times = TimeInput::PerCoord { rows: vec![8], coords };
        let mask = array![[1.0, 0.0]];
        let input = net
            .assemble_input(&sch, &times, x.view(), &CondData::MaskOnly { mask })
            .unwrap();
        let base = 2 + 16;
        assert_eq!(input[[0, base]], 0.0); // motif time channel zeroed
        assert_abs_diff_eq!(input[[0, base + 1]], 0.8, epsilon = 1e-15);
        assert_eq!(input[[0, base + 2]], 1.0); // mask channel
    }

    #[test]
    fn cond_mismatch_is_config_error() {
        let net = small_net(CondKind::None);
        let sch = NoiseSchedule::linear(10, 1e-4, 2e-2).unwrap();
        let x = array![[0.0, 0.0]];
        let mask = array![[1.0, 0.0]];
        let err = net.assemble_input(
            &sch,
            &TimeInput::Uniform(1),
            x.view(),
            &CondData::MaskOnly { mask },
        );
        assert!(err.is_err());
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, 3);
        let mut params = vec![1.0, -2.0, 0.5];
        let before = params.clone();
        opt.step(&mut params, &[0.0, 0.0, 0.0]);
        assert_eq!(params, before);
    }
}
