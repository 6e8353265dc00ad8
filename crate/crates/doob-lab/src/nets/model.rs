//! [`ScoreModel`] adapters around trained networks: plain, condition-bound,
//! residual (frozen + finetuned h-network) and controlled compositions.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::engine::{CondData, CondKind, ScoreModel, TimeInput};
use crate::error::{Error, Result};
use crate::oracle::HTransform;
use crate::schedule::NoiseSchedule;

use super::mlp::{EpsNet, TimeMode};

/// Boxed model compositions own their parts through this alias.
pub type DynModel = Box<dyn ScoreModel + Send + Sync>;

/// A trained eps-network as a sampler model.
pub struct NetEpsModel {
    net: EpsNet,
}

impl NetEpsModel {
    pub fn new(net: EpsNet) -> Self {
        NetEpsModel { net }
    }

    pub fn net(&self) -> &EpsNet {
        &self.net
    }
}

impl ScoreModel for NetEpsModel {
    fn dim(&self) -> usize {
        self.net.arch().d
    }

    fn cond_kind(&self) -> CondKind {
        self.net.arch().cond
    }

    fn supports_per_coord_time(&self) -> bool {
        self.net.arch().time_mode == TimeMode::PerCoord
    }

    fn eps_batch(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        cond: &CondData,
    ) -> Result<Array2<f64>> {
        self.net.predict(sch, times, x, cond)
    }

    fn eps_vjp_x(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        cond: &CondData,
        cot: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let input = self.net.assemble_input(sch, times, x, cond)?;
        let (_, tape) = self.net.forward_tape(input.view());
        let (_, gi) = self.net.backward(&tape, cot);
        Ok(gi.slice(ndarray::s![.., 0..self.dim()]).to_owned())
    }
}

/// An aux-conditional network with the condition bound at construction; to a
/// sampler it looks like an unconditional model (classifier-free sampling).
pub struct FixedAuxEpsModel {
    net: EpsNet,
    aux: Array1<f64>,
}

impl FixedAuxEpsModel {
    pub fn new(net: EpsNet, aux: Array1<f64>) -> Result<Self> {
        match net.arch().cond {
            CondKind::Aux { n_aux } if n_aux == aux.len() => Ok(FixedAuxEpsModel { net, aux }),
            _ => Err(Error::config(
                "fixed-aux model requires an aux-conditional network of matching width",
            )),
        }
    }

    fn cond_rows(&self, n: usize) -> CondData {
        let values = self
            .aux
            .view()
            .insert_axis(Axis(0))
            .broadcast((n, self.aux.len()))
            .expect("broadcast aux")
            .to_owned();
        CondData::Aux { values, present: vec![true; n] }
    }
}

impl ScoreModel for FixedAuxEpsModel {
    fn dim(&self) -> usize {
        self.net.arch().d
    }

    fn eps_batch(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        _cond: &CondData,
    ) -> Result<Array2<f64>> {
        self.net.predict(sch, times, x, &self.cond_rows(x.nrows()))
    }

    fn eps_vjp_x(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        _cond: &CondData,
        cot: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let cond = self.cond_rows(x.nrows());
        let input = self.net.assemble_input(sch, times, x, &cond)?;
        let (_, tape) = self.net.forward_tape(input.view());
        let (_, gi) = self.net.backward(&tape, cot);
        Ok(gi.slice(ndarray::s![.., 0..self.dim()]).to_owned())
    }
}

/// Frozen unconditional model plus a finetuned h-transform residual network:
/// `eps = eps_frozen(x, t) + eps_h(x, t, cond)`.
pub struct ResidualEpsModel {
    frozen: DynModel,
    h_net: EpsNet,
}

impl ResidualEpsModel {
    pub fn new(frozen: DynModel, h_net: EpsNet) -> Result<Self> {
        if frozen.dim() != h_net.arch().d {
            return Err(Error::config("frozen model and h-network dimensions differ"));
        }
        if frozen.cond_kind() != CondKind::None {
            return Err(Error::config("the frozen part must be unconditional"));
        }
        if h_net.arch().cond != CondKind::Masked {
            return Err(Error::config(
                "the h-network must take motif-and-mask conditioning channels",
            ));
        }
        Ok(ResidualEpsModel { frozen, h_net })
    }

    pub fn h_net(&self) -> &EpsNet {
        &self.h_net
    }
}

impl ScoreModel for ResidualEpsModel {
    fn dim(&self) -> usize {
        self.h_net.arch().d
    }

    fn cond_kind(&self) -> CondKind {
        CondKind::Masked
    }

    fn eps_batch(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        cond: &CondData,
    ) -> Result<Array2<f64>> {
        let base = self.frozen.eps_batch(sch, times, x, &CondData::None)?;
        let res = self.h_net.predict(sch, times, x, cond)?;
        Ok(base + res)
    }

    fn eps_vjp_x(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        cond: &CondData,
        cot: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let a = self.frozen.eps_vjp_x(sch, times, x, &CondData::None, cot)?;
        let input = self.h_net.assemble_input(sch, times, x, cond)?;
        let (_, tape) = self.h_net.forward_tape(input.view());
        let (_, gi) = self.h_net.backward(&tape, cot);
        Ok(a + gi.slice(ndarray::s![.., 0..self.dim()]).to_owned())
    }
}

/// A score-scale control signal `f(k, x)` added to a base model on the eps
/// scale: `eps_total = eps_base - sqrt(1 - abar_k) f`.
pub trait Control: Sync {
    fn dim(&self) -> usize;
    fn eval_batch(&self, sch: &NoiseSchedule, k: usize, x: ArrayView2<f64>)
        -> Result<Array2<f64>>;
}

/// The zero control (uncontrolled chain).
pub struct ZeroControl(pub usize);

impl Control for ZeroControl {
    fn dim(&self) -> usize {
        self.0
    }
    fn eval_batch(
        &self,
        _sch: &NoiseSchedule,
        _k: usize,
        x: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        Ok(Array2::zeros(x.raw_dim()))
    }
}

/// The analytic optimal control: `f*(k, x) = grad ln p(y | X_k = x)`, i.e. the
/// generalised h-transform gradient.
pub struct OracleControl {
    h: HTransform,
}

impl OracleControl {
    pub fn new(h: HTransform) -> Self {
        OracleControl { h }
    }
}

impl Control for OracleControl {
    fn dim(&self) -> usize {
        self.h.prior().dim()
    }
    fn eval_batch(
        &self,
        sch: &NoiseSchedule,
        k: usize,
        x: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.h.grad_log_batch(sch, k, x)
    }
}

/// A trainable control network (unconditional architecture; output is the
/// score-scale control).
pub struct NetControl {
    net: EpsNet,
}

impl NetControl {
    pub fn new(net: EpsNet) -> Result<Self> {
        if net.arch().cond != CondKind::None {
            return Err(Error::config("control networks are unconditional"));
        }
        Ok(NetControl { net })
    }

    pub fn net(&self) -> &EpsNet {
        &self.net
    }
}

impl Control for NetControl {
    fn dim(&self) -> usize {
        self.net.arch().d
    }
    fn eval_batch(
        &self,
        sch: &NoiseSchedule,
        k: usize,
        x: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.net.predict(sch, &TimeInput::Uniform(k), x, &CondData::None)
    }
}

/// Base model driven by a control; used to sample from finetuned chains.
pub struct ControlledEpsModel<'a> {
    base: &'a dyn ScoreModel,
    control: &'a dyn Control,
}

impl<'a> ControlledEpsModel<'a> {
    pub fn new(base: &'a dyn ScoreModel, control: &'a dyn Control) -> Result<Self> {
        if base.dim() != control.dim() {
            return Err(Error::config("base model and control dimensions differ"));
        }
        Ok(ControlledEpsModel { base, control })
    }
}

impl ScoreModel for ControlledEpsModel<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eps_batch(
        &self,
        sch: &NoiseSchedule,
        times: &TimeInput,
        x: ArrayView2<f64>,
        cond: &CondData,
    ) -> Result<Array2<f64>> {
        let k = times
            .uniform_step()
            .ok_or_else(|| Error::unsupported("controlled models take a single shared step"))?;
        let eps = self.base.eps_batch(sch, times, x, cond)?;
        let f = self.control.eval_batch(sch, k, x)?;
        let c = (1.0 - sch.alpha_bar(k)).sqrt();
        Ok(eps - f.mapv(|v| c * v))
    }

    fn eps_vjp_x(
        &self,
        _sch: &NoiseSchedule,
        _times: &TimeInput,
        _x: ArrayView2<f64>,
        _cond: &CondData,
        _cot: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        Err(Error::unsupported(
            "input VJP through a controlled model is not needed by any sampler",
        ))
    }
}
