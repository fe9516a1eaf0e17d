//! Dense units and blocks, the ConvLSTM cell, Filter Modules and the
//! Recurrent Dense Block.
//!
//! Modules are plain descriptions (names and widths). Their parameters live in
//! a [`ParamStore`](crate::params::ParamStore) under `prefix.*`, registered
//! with `init` and read back through a [`Session`] in `forward`.

use serde::{Deserialize, Serialize};

use crate::engine::Var;
use crate::error::NnError;
use crate::params::{Init, Session};
use crate::tensor::{Float, Tensor};

/// Kernel size of the input-to-state convolutions and of every dense unit.
pub const INPUT_KERNEL: usize = 3;

fn check_channels<F: Float>(what: &str, x: &Var<F>, expected: usize) -> Result<(), NnError> {
    let (_, c, _, _) = x.dims4()?;
    if c != expected {
        return Err(NnError::ShapeMismatch(format!("{what}: expected {expected} channels, got {c}")));
    }
    Ok(())
}

/// `round(x)` with halves rounded up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Square "same" convolution. With `time_steps` set the input is a
/// time-major clip `(T * B, C, H, W)` and the kernel gains a temporal extent
/// of 3 (zero padded in time): three 2-D kernels `weight.t0..t2` applied to
/// frames `t - 1`, `t`, `t + 1`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub bias: bool,
    pub time_steps: Option<usize>,
}

impl Conv {
    pub fn new(prefix: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_channels,
            out_channels,
            kernel,
            bias: true,
            time_steps: None,
        }
    }

    pub fn temporal(mut self, time_steps: Option<usize>) -> Self {
        self.time_steps = time_steps;
        self
    }

    pub fn init<F: Float>(&self, init: &mut Init<'_, F>) -> Result<(), NnError> {
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        let fan_in = self.in_channels * self.kernel * self.kernel;
        match self.time_steps {
            None => init.kernel(&format!("{}.weight", self.prefix), &shape, fan_in)?,
            Some(_) => {
                for t in 0..3 {
                    init.kernel(&format!("{}.weight.t{t}", self.prefix), &shape, 3 * fan_in)?;
                }
            }
        }
        if self.bias {
            init.constant(&format!("{}.bias", self.prefix), &[self.out_channels], 0.0)?;
        }
        Ok(())
    }

    pub fn forward<F: Float>(&self, s: &mut Session<'_, F>, x: &Var<F>) -> Result<Var<F>, NnError> {
        check_channels(&self.prefix, x, self.in_channels)?;
        let Some(steps) = self.time_steps else {
            return s.conv(&self.prefix, x, self.bias);
        };
        let b = if self.bias {
            Some(s.param(&format!("{}.bias", self.prefix))?)
        } else {
            None
        };
        let w1 = s.param(&format!("{}.weight.t1", self.prefix))?;
        let mut y = s.tape.conv2d(x, &w1, b.as_ref())?;
        for (t, shift) in [(0, -1), (2, 1)] {
            let w = s.param(&format!("{}.weight.t{t}", self.prefix))?;
            let shifted = s.tape.time_shift(x, steps, shift)?;
            let part = s.tape.conv2d(&shifted, &w, None)?;
            y = s.tape.add(&y, &part)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseUnitSpec {
    pub in_channels: usize,
    pub growth: usize,
    #[serde(default)]
    pub dropout: f64,
}

/// Normalization, ReLU, 3x3 convolution to `growth` new feature maps, then dropout.
#[derive(Clone, Debug)]
pub struct DenseUnit {
    pub prefix: String,
    pub spec: DenseUnitSpec,
    conv: Conv,
}

impl DenseUnit {
    pub fn new(prefix: impl Into<String>, spec: DenseUnitSpec) -> Result<Self, NnError> {
        let prefix = prefix.into();
        if spec.growth == 0 || spec.in_channels == 0 {
            return Err(NnError::BadSpec(format!("{prefix}: dense unit needs nonzero widths")));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(NnError::BadSpec(format!("{prefix}: dropout {} not in [0, 1)", spec.dropout)));
        }
        let conv = Conv::new(format!("{prefix}.conv"), spec.in_channels, spec.growth, INPUT_KERNEL);
        Ok(Self { prefix, spec, conv })
    }

    pub fn temporal(mut self, time_steps: Option<usize>) -> Self {
        self.conv = self.conv.temporal(time_steps);
        self
    }

    pub fn init<F: Float>(&self, init: &mut Init<'_, F>) -> Result<(), NnError> {
        init.norm(&format!("{}.norm", self.prefix), self.spec.in_channels)?;
        self.conv.init(init)
    }

    pub fn forward<F: Float>(&self, s: &mut Session<'_, F>, x: &Var<F>) -> Result<Var<F>, NnError> {
        check_channels(&self.prefix, x, self.spec.in_channels)?;
        let a = s.pre_activation(&format!("{}.norm", self.prefix), x)?;
        let y = self.conv.forward(s, &a)?;
        s.dropout(&y, self.spec.dropout)
    }
}

/// `layers` dense units, each fed with the block input and every earlier unit's output.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub prefix: String,
    pub in_channels: usize,
    pub units: Vec<DenseUnit>,
}

impl DenseBlock {
    pub fn new(
        prefix: impl Into<String>,
        in_channels: usize,
        layers: usize,
        growth: usize,
        dropout: f64,
    ) -> Result<Self, NnError> {
        let prefix = prefix.into();
        if layers == 0 {
            return Err(NnError::BadSpec(format!("{prefix}: dense block needs at least one layer")));
        }
        let units = (0..layers)
            .map(|l| {
                let spec = DenseUnitSpec {
                    in_channels: in_channels + l * growth,
                    growth,
                    dropout,
                };
                DenseUnit::new(format!("{prefix}.unit{l}"), spec)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            prefix,
            in_channels,
            units,
        })
    }

    pub fn temporal(mut self, time_steps: Option<usize>) -> Self {
        self.units = self.units.into_iter().map(|u| u.temporal(time_steps)).collect();
        self
    }

    pub fn growth(&self) -> usize {
        self.units[0].spec.growth
    }

    pub fn new_channels(&self) -> usize {
        self.units.len() * self.growth()
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.new_channels()
    }

    pub fn init<F: Float>(&self, init: &mut Init<'_, F>) -> Result<(), NnError> {
        self.units.iter().try_for_each(|u| u.init(init))
    }

    /// Returns `(stack, new_features)`.
    pub fn forward<F: Float>(&self, s: &mut Session<'_, F>, x: &Var<F>) -> Result<(Var<F>, Var<F>), NnError> {
        check_channels(&self.prefix, x, self.in_channels)?;
        let mut stack = x.clone();
        let mut new = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let r = unit.forward(s, &stack)?;
            stack = s.tape.concat_channels(&[&stack, &r])?;
            new.push(r);
        }
        let refs: Vec<&Var<F>> = new.iter().collect();
        let new = s.tape.concat_channels(&refs)?;
        Ok((stack, new))
    }
}

/// Recurrent memory of one ConvLSTM. A missing state (`None`) stands for
/// all-zero `c` and `h`, and gives bit-identical results to [`ConvLstmState::zeros`].
#[derive(Clone, Debug)]
pub struct ConvLstmState<F> {
    pub c: Var<F>,
    pub h: Var<F>,
}

impl<F: Float> ConvLstmState<F> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        let z = Tensor::zeros(&[batch, channels, height, width]);
        Self {
            c: Var::constant(z.clone()),
            h: Var::constant(z),
        }
    }
}

/// Convolutional LSTM: 3x3 input-to-state kernels with bias, `hidden_kernel`
/// square state-to-state kernels without bias. Gate channel order is input,
/// forget, output, candidate.
#[derive(Clone, Debug)]
pub struct ConvLstm {
    pub prefix: String,
    pub in_channels: usize,
    pub hidden: usize,
    pub hidden_kernel: usize,
}

impl ConvLstm {
    pub fn new(prefix: impl Into<String>, in_channels: usize, hidden: usize, hidden_kernel: usize) -> Result<Self, NnError> {
        let prefix = prefix.into();
        if hidden_kernel % 2 == 0 || in_channels == 0 || hidden == 0 {
            return Err(NnError::BadSpec(format!(
                "{prefix}: ConvLSTM needs nonzero widths and an odd hidden kernel, got {hidden_kernel}"
            )));
        }
        Ok(Self {
            prefix,
            in_channels,
            hidden,
            hidden_kernel,
        })
    }

    /// `4 (C_in C_h 3^2 + C_h^2 k_h^2 + C_h)`.
    pub fn param_count(&self) -> usize {
        let (ci, ch, kh) = (self.in_channels, self.hidden, self.hidden_kernel);
        4 * (ci * ch * INPUT_KERNEL * INPUT_KERNEL + ch * ch * kh * kh + ch)
    }

    pub fn init<F: Float>(&self, init: &mut Init<'_, F>) -> Result<(), NnError> {
        let g = 4 * self.hidden;
        let (k, kh) = (INPUT_KERNEL, self.hidden_kernel);
        init.kernel(
            &format!("{}.input.weight", self.prefix),
            &[g, self.in_channels, k, k],
            self.in_channels * k * k,
        )?;
        init.kernel(
            &format!("{}.hidden.weight", self.prefix),
            &[g, self.hidden, kh, kh],
            self.hidden * kh * kh,
        )?;
        let mut bias = vec![0.0; g];
        bias[self.hidden..2 * self.hidden].fill(1.0);
        let bias = Tensor::from_vec(&[g], bias.into_iter().map(F::of).collect())?;
        init.store
            .insert(format!("{}.input.bias", self.prefix), bias, crate::params::ParamKind::Trainable)
    }

    pub fn step<F: Float>(
        &self,
        s: &mut Session<'_, F>,
        e: &Var<F>,
        state: Option<&ConvLstmState<F>>,
    ) -> Result<(Var<F>, ConvLstmState<F>), NnError> {
        let (b, c, h, w) = e.dims4()?;
        if c != self.in_channels {
            return Err(NnError::ShapeMismatch(format!(
                "{}: expected {} input channels, got {c}",
                self.prefix, self.in_channels
            )));
        }
        if let Some(st) = state {
            let want = [b, self.hidden, h, w];
            if st.c.shape() != want || st.h.shape() != want {
                return Err(NnError::ShapeMismatch(format!(
                    "{}: state {:?}/{:?} for input {:?}",
                    self.prefix,
                    st.c.shape(),
                    st.h.shape(),
                    e.shape()
                )));
            }
        }
        let mut gates = s.conv(&format!("{}.input", self.prefix), e, true)?;
        if let Some(st) = state {
            let wh = s.param(&format!("{}.hidden.weight", self.prefix))?;
            let rec = s.tape.conv2d(&st.h, &wh, None)?;
            gates = s.tape.add(&gates, &rec)?;
        }
        let ch = s.tape.lstm_pointwise(&gates, state.map(|st| &st.c))?;
        let c = s.tape.narrow_channels(&ch, 0, self.hidden)?;
        let h = s.tape.narrow_channels(&ch, self.hidden, self.hidden)?;
        Ok((h.clone(), ConvLstmState { c, h }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FmKind {
    Ff,
    Res,
    Ed,
    /// Pass-through without parameters or state. Only for testing.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterModuleSpec {
    pub kind: FmKind,
    pub channels: usize,
    #[serde(default)]
    pub alpha_ed: Option<f64>,
    pub hidden_kernel: usize,
}

impl FilterModuleSpec {
    /// ConvLSTM width: `C` for ff/res, `round(alpha_ed * C)` for ed, 0 for identity.
    pub fn hidden_channels(&self) -> Result<usize, NnError> {
        match self.kind {
            FmKind::Ff | FmKind::Res => Ok(self.channels),
            FmKind::Identity => Ok(0),
            FmKind::Ed => {
                let alpha = self
                    .alpha_ed
                    .ok_or_else(|| NnError::BadSpec("ed filter module needs alpha_ed".into()))?;
                let hidden = round_half_up(alpha * self.channels as f64);
                if !alpha.is_finite() || hidden < 1 {
                    return Err(NnError::BadAlpha {
                        alpha,
                        channels: self.channels,
                    });
                }
                Ok(hidden)
            }
        }
    }
}

/// Replaces crude features with temporally filtered ones of the same width.
#[derive(Clone, Debug)]
pub struct FilterModule {
    pub prefix: String,
    pub spec: FilterModuleSpec,
    lstm: Option<ConvLstm>,
    decoder: Option<DenseUnit>,
}

impl FilterModule {
    pub fn new(prefix: impl Into<String>, spec: FilterModuleSpec) -> Result<Self, NnError> {
        let prefix = prefix.into();
        let hidden = spec.hidden_channels()?;
        let lstm = match spec.kind {
            FmKind::Identity => None,
            _ => Some(ConvLstm::new(format!("{prefix}.lstm"), spec.channels, hidden, spec.hidden_kernel)?),
        };
        let decoder = match spec.kind {
            FmKind::Ed => Some(DenseUnit::new(
                format!("{prefix}.decoder"),
                DenseUnitSpec {
                    in_channels: hidden,
                    growth: spec.channels,
                    dropout: 0.0,
                },
            )?),
            _ => None,
        };
        Ok(Self {
            prefix,
            spec,
            lstm,
            decoder,
        })
    }

    pub fn is_stateful(&self) -> bool {
        self.lstm.is_some()
    }

    pub fn lstm(&self) -> Option<&ConvLstm> {
        self.lstm.as_ref()
    }

    pub fn init<F: Float>(&self, init: &mut Init<'_, F>) -> Result<(), NnError> {
        if let Some(lstm) = &self.lstm {
            init.norm(&format!("{}.norm", self.prefix), self.spec.channels)?;
            lstm.init(init)?;
        }
        if let Some(dec) = &self.decoder {
            dec.init(init)?;
        }
        Ok(())
    }

    /// Returns `(r_hat, new_state)`; the state stays `None` for the identity kind.
    pub fn forward<F: Float>(
        &self,
        s: &mut Session<'_, F>,
        r_bar: &Var<F>,
        state: Option<&ConvLstmState<F>>,
    ) -> Result<(Var<F>, Option<ConvLstmState<F>>), NnError> {
        check_channels(&self.prefix, r_bar, self.spec.channels)?;
        let Some(lstm) = &self.lstm else {
            return Ok((r_bar.clone(), None));
        };
        let a = s.pre_activation(&format!("{}.norm", self.prefix), r_bar)?;
        let (h, next) = lstm.step(s, &a, state)?;
        let r_hat = match self.spec.kind {
            FmKind::Ff => h,
            FmKind::Res => s.tape.add(r_bar, &h)?,
            FmKind::Ed => self.decoder.as_ref().expect("ed has a decoder").forward(s, &h)?,
            FmKind::Identity => unreachable!(),
        };
        Ok((r_hat, Some(next)))
    }
}

/// Dense block with a Filter Module after every unit; the filtered output is
/// what joins the stack.
#[derive(Clone, Debug)]
pub struct RecurrentDenseBlock {
    pub block: DenseBlock,
    pub filters: Vec<FilterModule>,
}

pub type BlockState<F> = Vec<Option<ConvLstmState<F>>>;

impl RecurrentDenseBlock {
    pub fn new(
        block: DenseBlock,
        kind: FmKind,
        alpha_ed: Option<f64>,
        hidden_kernel: usize,
    ) -> Result<Self, NnError> {
        let growth = block.growth();
        let filters = block
            .units
            .iter()
            .map(|u| {
                FilterModule::new(
                    format!("{}.filter", u.prefix),
                    FilterModuleSpec {
                        kind,
                        channels: growth,
                        alpha_ed,
                        hidden_kernel,
                    },
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { block, filters })
    }

    pub fn init<F: Float>(&self, init: &mut Init<'_, F>) -> Result<(), NnError> {
        self.block.init(init)?;
        self.filters.iter().try_for_each(|f| f.init(init))
    }

    pub fn zero_state<F>(&self) -> BlockState<F> {
        (0..self.filters.len()).map(|_| None).collect()
    }

    /// Returns `(stack, new_features, new_states)`.
    pub fn forward<F: Float>(
        &self,
        s: &mut Session<'_, F>,
        x: &Var<F>,
        states: &[Option<ConvLstmState<F>>],
    ) -> Result<(Var<F>, Var<F>, BlockState<F>), NnError> {
        if states.len() != self.filters.len() {
            return Err(NnError::StateCountMismatch {
                expected: self.filters.len(),
                actual: states.len(),
            });
        }
        check_channels(&self.block.prefix, x, self.block.in_channels)?;
        let mut stack = x.clone();
        let mut new = Vec::with_capacity(self.filters.len());
        let mut next = Vec::with_capacity(self.filters.len());
        for ((unit, fm), st) in self.block.units.iter().zip(&self.filters).zip(states) {
            let r_bar = unit.forward(s, &stack)?;
            let (r_hat, st) = fm.forward(s, &r_bar, st.as_ref())?;
            stack = s.tape.concat_channels(&[&stack, &r_hat])?;
            new.push(r_hat);
            next.push(st);
        }
        let refs: Vec<&Var<F>> = new.iter().collect();
        let new = s.tape.concat_channels(&refs)?;
        Ok((stack, new, next))
    }
}
