//! Named parameter storage and the per-forward [`Session`].

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Gradients, Tape, Var};
use crate::error::NnError;
use crate::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Trainable,
    /// Running statistics; saved with the model but never optimized.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub value: Arc<Tensor<F>>,
    pub kind: ParamKind,
}

/// Flat name -> tensor map. Iteration order is lexicographic by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, Param<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, kind: ParamKind) -> Result<(), NnError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NnError::BadSpec(format!("parameter `{name}` registered twice")));
        }
        self.entries.insert(
            name,
            Param {
                value: Arc::new(value),
                kind,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>, NnError> {
        self.entries
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<F>, NnError> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<(), NnError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "`{name}`: stored {:?}, new {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>, NnError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        Ok(Arc::make_mut(&mut entry.value))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.count_where(|_| true)
    }

    pub fn count_where(&self, mut pred: impl FnMut(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(n, p)| p.kind == ParamKind::Trainable && pred(n))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            value: Arc::new(p.value.cast()),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copies every entry of `other` whose name and shape match; returns the
    /// number of copied entries. A single-row buffer also fills every row of
    /// a per-step buffer of the same width.
    pub fn load_matching(&mut self, other: &ParamStore<F>) -> usize {
        let mut copied = 0;
        for (name, src) in &other.entries {
            let Some(dst) = self.entries.get_mut(name) else {
                continue;
            };
            if dst.kind != src.kind {
                continue;
            }
            if dst.value.shape() == src.value.shape() {
                dst.value = Arc::clone(&src.value);
                copied += 1;
            } else if src.kind == ParamKind::Buffer
                && src.value.shape().len() == 1
                && dst.value.shape().len() == 2
                && dst.value.shape()[1] == src.value.len()
            {
                let rows = dst.value.shape()[0];
                let data = src.value.data().repeat(rows);
                dst.value = Arc::new(Tensor::from_vec(dst.value.shape(), data).expect("shape checked"));
                copied += 1;
            }
        }
        copied
    }

    /// Gives every rank-1 buffer one row per time step, so normalization
    /// statistics are tracked separately for each frame of a sequence.
    pub fn per_step_buffers(&mut self, steps: usize) {
        for p in self.entries.values_mut() {
            if p.kind == ParamKind::Buffer && p.value.shape().len() == 1 {
                let shape = [steps, p.value.len()];
                p.value = Arc::new(Tensor::from_vec(&shape, p.value.data().repeat(steps)).expect("shape by construction"));
            }
        }
    }
}

/// Registers parameters of freshly built modules with a seeded initializer.
pub struct Init<'a, F> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<F: Float> Init<'_, F> {
    /// He-normal convolution kernel of the given shape; `fan_in` is explicit
    /// because transposed kernels store their axes differently.
    pub fn kernel(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<(), NnError> {
        let std = (2.0 / fan_in as f64).sqrt();
        let t = Tensor::randn(shape, std, self.rng);
        self.store.insert(name, t, ParamKind::Trainable)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<(), NnError> {
        self.store.insert(name, Tensor::full(shape, F::of(value)), ParamKind::Trainable)
    }

    /// Scale, shift and running statistics of a batch normalization layer.
    pub fn norm(&mut self, prefix: &str, channels: usize) -> Result<(), NnError> {
        self.constant(&format!("{prefix}.weight"), &[channels], 1.0)?;
        self.constant(&format!("{prefix}.bias"), &[channels], 0.0)?;
        self.store.insert(
            format!("{prefix}.running_mean"),
            Tensor::zeros(&[channels]),
            ParamKind::Buffer,
        )?;
        self.store.insert(
            format!("{prefix}.running_var"),
            Tensor::full(&[channels], F::one()),
            ParamKind::Buffer,
        )
    }
}

/// One forward (and optionally backward) pass: a tape bound to a parameter
/// store plus the train/eval mode.
pub struct Session<'a, F> {
    pub tape: Tape<F>,
    store: &'a mut ParamStore<F>,
    train: bool,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a, F: Float> Session<'a, F> {
    /// Training session: batch statistics, running-stat updates, dropout, gradient recording.
    pub fn train(store: &'a mut ParamStore<F>, seed: u64) -> Self {
        Self {
            tape: Tape::new(true),
            store,
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        }
    }

    /// Inference session: running statistics, no dropout, no recording.
    pub fn eval(store: &'a mut ParamStore<F>) -> Self {
        Self {
            tape: Tape::new(false),
            store,
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            step: 0,
        }
    }

    /// Eval-mode numerics with gradient recording, for gradient checks.
    pub fn eval_recording(store: &'a mut ParamStore<F>) -> Self {
        Self {
            tape: Tape::new(true),
            store,
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            step: 0,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Frame index within the current sequence. Selects the row of per-step
    /// normalization statistics; steps past the last row use the last row.
    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var<F>, NnError> {
        let p = self.store.get(name)?;
        let value = Arc::clone(&p.value);
        let trainable = p.kind == ParamKind::Trainable;
        Ok(self.tape.named_leaf(name, || value, trainable))
    }

    pub fn conv(&mut self, prefix: &str, x: &Var<F>, bias: bool) -> Result<Var<F>, NnError> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.param(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.tape.conv2d(x, &w, b.as_ref())
    }

    /// Batch normalization; in training mode the running statistics are
    /// updated in place with momentum [`BN_MOMENTUM`]. Buffers of shape
    /// `(steps, C)` hold one row per frame, picked by [`Session::set_step`].
    pub fn batch_norm(&mut self, prefix: &str, x: &Var<F>) -> Result<Var<F>, NnError> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let c = gamma.value().len();
        let row = |t: &Tensor<F>, step: usize| {
            let r = if t.shape().len() == 2 { step.min(t.shape()[0] - 1) } else { 0 };
            r * c..(r + 1) * c
        };
        if self.train {
            let out = self.tape.batch_norm(x, &gamma, &beta, None, BN_EPS)?;
            let m = F::of(BN_MOMENTUM);
            for (name, batch) in [(&mean_name, &out.mean), (&var_name, &out.var_unbiased)] {
                let running = self.store.get_mut(name)?;
                let range = row(running, self.step);
                for (r, &b) in running.data_mut()[range].iter_mut().zip(batch) {
                    *r = (F::one() - m) * *r + m * b;
                }
            }
            Ok(out.y)
        } else {
            let mean = Arc::clone(&self.store.get(&mean_name)?.value);
            let var = Arc::clone(&self.store.get(&var_name)?.value);
            let (rm, rv) = (row(&mean, self.step), row(&var, self.step));
            let out = self
                .tape
                .batch_norm(x, &gamma, &beta, Some((&mean.data()[rm], &var.data()[rv])), BN_EPS)?;
            Ok(out.y)
        }
    }

    /// Normalization followed by ReLU.
    pub fn pre_activation(&mut self, prefix: &str, x: &Var<F>) -> Result<Var<F>, NnError> {
        let y = self.batch_norm(prefix, x)?;
        Ok(self.tape.relu(&y))
    }

    /// Inverted dropout; identity outside training or for `p == 0`.
    pub fn dropout(&mut self, x: &Var<F>, p: f64) -> Result<Var<F>, NnError> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = F::of(1.0 / (1.0 - p));
        let mask = (0..x.value().len())
            .map(|_| if self.rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        self.tape.mask(x, mask)
    }

    /// Gradients of every trainable parameter touched in this session.
    pub fn param_grads(&self, grads: &Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        self.tape
            .named_leaves()
            .filter_map(|(name, var)| grads.get(var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}
