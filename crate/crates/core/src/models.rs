//! Whole networks: FC-DenseNet, RFC-DenseNet and the temporal baselines.
//!
//! Layout for depth `d`: a 3x3 convolution, `d` dense blocks each followed by
//! a transition down (BN, ReLU, 1x1 conv, 2x2 max pool), a bottleneck block,
//! then `d` levels of transition up (3x3 stride-2 transposed conv on the
//! previous block's new features), concatenation with the skip stack and a
//! dense block, and finally a 1x1 classifier.
//!
//! Parameter names: `conv0`, `down{i}`, `td{i}`, `bottleneck`, `tu{i}`,
//! `up{i}`, `global_filter`, `classifier`. Filter Modules of a recurrent block
//! live under `<block>.unit{l}.filter`, so an FC-DenseNet and an RFC-DenseNet
//! of the same widths share every non-filter name.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Var;
use crate::error::NnError;
use crate::nn::{BlockState, Conv, ConvLstmState, DenseBlock, FilterModule, FilterModuleSpec, FmKind, RecurrentDenseBlock};
use crate::params::{Init, ParamStore, Session};
use crate::tensor::{Float, Tensor};

pub const N_CLASSES: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Fcd,
    Rfcd,
    RmGf,
    Tm3d,
    TmSt,
}

impl Family {
    pub fn is_recurrent(self) -> bool {
        matches!(self, Family::Rfcd | Family::RmGf)
    }
}

fn default_kernels() -> Vec<usize> {
    vec![9, 5, 3, 5, 9]
}
fn default_classes() -> usize {
    N_CLASSES
}
fn default_sequence_length() -> usize {
    5
}
fn default_in_channels() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub depth: usize,
    pub layers_per_db: usize,
    pub growth: usize,
    pub first_conv_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fm_kind: Option<FmKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_ed: Option<f64>,
    /// One hidden-to-hidden kernel size per dense block, down path first.
    /// `rm_gf` uses the last entry for its global filter.
    #[serde(default = "default_kernels")]
    pub hidden_kernel_sizes: Vec<usize>,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_sequence_length")]
    pub sequence_length: usize,
    /// Image channels per frame.
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default)]
    pub dropout: f64,
}

pub const MODEL_NAMES: [&str; 9] = [
    "fcd_b", "fcd_s", "rfcd_ff", "rfcd_res", "rfcd_ed1", "rfcd_ed2", "rm_gf", "tm_3d", "tm_st",
];

impl ModelSpec {
    fn base(family: Family, layers_per_db: usize, growth: usize) -> Self {
        Self {
            family,
            depth: 2,
            layers_per_db,
            growth,
            first_conv_features: 48,
            fm_kind: None,
            alpha_ed: None,
            hidden_kernel_sizes: default_kernels(),
            n_classes: N_CLASSES,
            sequence_length: 5,
            in_channels: 1,
            dropout: 0.0,
        }
    }

    fn rfcd(kind: FmKind, alpha: Option<f64>) -> Self {
        Self {
            fm_kind: Some(kind),
            alpha_ed: alpha,
            ..Self::base(Family::Rfcd, 7, 8)
        }
    }

    /// Default full-size specs of the nine reference models.
    pub fn named(name: &str) -> Option<Self> {
        Some(match name {
            "fcd_b" => Self::base(Family::Fcd, 9, 12),
            "fcd_s" => Self::base(Family::Fcd, 7, 8),
            "rfcd_ff" => Self::rfcd(FmKind::Ff, None),
            "rfcd_res" => Self::rfcd(FmKind::Res, None),
            "rfcd_ed1" => Self::rfcd(FmKind::Ed, Some(1.0)),
            "rfcd_ed2" => Self::rfcd(FmKind::Ed, Some(2.0)),
            "rm_gf" => Self {
                alpha_ed: Some(0.625),
                ..Self::base(Family::RmGf, 7, 8)
            },
            // Widened until the parameter total is close to rfcd_ff's.
            "tm_3d" => Self {
                first_conv_features: 48,
                ..Self::base(Family::Tm3d, 7, 7)
            },
            "tm_st" => Self {
                first_conv_features: 64,
                ..Self::base(Family::TmSt, 7, 12)
            },
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::BadSpec(msg));
        if self.depth == 0 || self.layers_per_db == 0 || self.growth == 0 || self.first_conv_features == 0 {
            return bad("depth, layers_per_db, growth and first_conv_features must be positive".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.n_classes != N_CLASSES {
            return bad(format!("n_classes must be {N_CLASSES}, got {}", self.n_classes));
        }
        if self.hidden_kernel_sizes.len() != 2 * self.depth + 1 {
            return bad(format!(
                "depth {} needs {} hidden kernel sizes, got {}",
                self.depth,
                2 * self.depth + 1,
                self.hidden_kernel_sizes.len()
            ));
        }
        if self.hidden_kernel_sizes.iter().any(|k| k % 2 == 0) {
            return bad(format!("hidden kernel sizes must be odd: {:?}", self.hidden_kernel_sizes));
        }
        if self.sequence_length == 0 {
            return bad("sequence_length must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        match self.family {
            Family::Rfcd => match (self.fm_kind, self.alpha_ed) {
                (None, _) => return bad("rfcd needs fm_kind".into()),
                (Some(FmKind::Ed), None) => return bad("fm_kind ed needs alpha_ed".into()),
                (Some(k), Some(_)) if k != FmKind::Ed => return bad(format!("alpha_ed given for fm_kind {k:?}")),
                _ => {}
            },
            Family::RmGf => {
                if self.fm_kind.is_some() {
                    return bad("rm_gf always uses an ed filter; fm_kind is not allowed".into());
                }
                if self.alpha_ed.is_none() {
                    return bad("rm_gf needs alpha_ed".into());
                }
            }
            _ => {
                if self.fm_kind.is_some() || self.alpha_ed.is_some() {
                    return bad(format!("filter fields on non-recurrent family {:?}", self.family));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Block {
    Plain(DenseBlock),
    Recurrent(RecurrentDenseBlock),
}

impl Block {
    fn dense(&self) -> &DenseBlock {
        match self {
            Block::Plain(b) => b,
            Block::Recurrent(r) => &r.block,
        }
    }

    fn init<F: Float>(&self, init: &mut Init<'_, F>) -> Result<(), NnError> {
        match self {
            Block::Plain(b) => b.init(init),
            Block::Recurrent(r) => r.init(init),
        }
    }

    fn forward<F: Float>(
        &self,
        s: &mut Session<'_, F>,
        x: &Var<F>,
        state: Option<&mut BlockState<F>>,
    ) -> Result<(Var<F>, Var<F>), NnError> {
        match (self, state) {
            (Block::Plain(b), _) => b.forward(s, x),
            (Block::Recurrent(r), Some(st)) => {
                let (stack, new, next) = r.forward(s, x, st)?;
                *st = next;
                Ok((stack, new))
            }
            (Block::Recurrent(r), None) => {
                let (stack, new, _) = r.forward(s, x, &r.zero_state())?;
                Ok((stack, new))
            }
        }
    }
}

#[derive(Clone, Debug)]
struct TransitionDown {
    prefix: String,
    channels: usize,
    conv: Conv,
}

impl TransitionDown {
    fn new(prefix: String, channels: usize) -> Self {
        let conv = Conv::new(format!("{prefix}.conv"), channels, channels, 1);
        Self { prefix, channels, conv }
    }

    fn init<F: Float>(&self, init: &mut Init<'_, F>) -> Result<(), NnError> {
        init.norm(&format!("{}.norm", self.prefix), self.channels)?;
        self.conv.init(init)
    }

    fn forward<F: Float>(&self, s: &mut Session<'_, F>, x: &Var<F>, dropout: f64) -> Result<Var<F>, NnError> {
        let a = s.pre_activation(&format!("{}.norm", self.prefix), x)?;
        let y = self.conv.forward(s, &a)?;
        let y = s.dropout(&y, dropout)?;
        s.tape.max_pool2(&y)
    }
}

#[derive(Clone, Debug)]
struct TransitionUp {
    prefix: String,
    channels: usize,
}

impl TransitionUp {
    fn init<F: Float>(&self, init: &mut Init<'_, F>) -> Result<(), NnError> {
        let c = self.channels;
        init.kernel(&format!("{}.weight", self.prefix), &[c, c, 3, 3], c * 9)?;
        init.constant(&format!("{}.bias", self.prefix), &[c], 0.0)
    }

    fn forward<F: Float>(&self, s: &mut Session<'_, F>, x: &Var<F>) -> Result<Var<F>, NnError> {
        let w = s.param(&format!("{}.weight", self.prefix))?;
        let b = s.param(&format!("{}.bias", self.prefix))?;
        s.tape.conv_transpose2d(x, &w, Some(&b), 2, 1, 1)
    }
}

/// Recurrent memory of a whole network: one entry per Filter Module.
#[derive(Clone, Debug)]
pub struct NetState<F> {
    /// Indexed like `hidden_kernel_sizes`: down blocks, bottleneck, up blocks from deep to shallow.
    pub blocks: Vec<BlockState<F>>,
    pub global: Option<ConvLstmState<F>>,
    /// Frames consumed so far.
    pub step: usize,
}

/// Assembled network description. Holds no parameters.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ModelSpec,
    conv0: Conv,
    down: Vec<Block>,
    td: Vec<TransitionDown>,
    bottleneck: Block,
    tu: Vec<TransitionUp>,
    /// `up[i]` is the block at resolution level `i`.
    up: Vec<Block>,
    global: Option<FilterModule>,
    classifier: Conv,
}

impl Network {
    pub fn build(spec: &ModelSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let (d, l, k) = (spec.depth, spec.layers_per_db, spec.growth);
        let steps = (spec.family == Family::Tm3d).then_some(spec.sequence_length);
        let in_ch = match spec.family {
            Family::TmSt => spec.in_channels * spec.sequence_length,
            _ => spec.in_channels,
        };
        let make_block = |prefix: String, in_channels: usize, pos: usize| -> Result<Block, NnError> {
            let db = DenseBlock::new(prefix, in_channels, l, k, spec.dropout)?.temporal(steps);
            Ok(match (spec.family, spec.fm_kind) {
                (Family::Rfcd, Some(kind)) => Block::Recurrent(RecurrentDenseBlock::new(
                    db,
                    kind,
                    spec.alpha_ed,
                    spec.hidden_kernel_sizes[pos],
                )?),
                _ => Block::Plain(db),
            })
        };

        let conv0 = Conv::new("conv0", in_ch, spec.first_conv_features, 3).temporal(steps);
        let mut channels = spec.first_conv_features;
        let mut down = Vec::with_capacity(d);
        let mut td = Vec::with_capacity(d);
        let mut skips = Vec::with_capacity(d);
        for i in 0..d {
            let block = make_block(format!("down{i}"), channels, i)?;
            channels = block.dense().out_channels();
            skips.push(channels);
            td.push(TransitionDown::new(format!("td{i}"), channels));
            down.push(block);
        }
        let bottleneck = make_block("bottleneck".into(), channels, d)?;
        let mut new = bottleneck.dense().new_channels();
        let mut tu = Vec::with_capacity(d);
        let mut up = Vec::with_capacity(d);
        let mut last_input = channels;
        for i in (0..d).rev() {
            tu.push(TransitionUp {
                prefix: format!("tu{i}"),
                channels: new,
            });
            last_input = new + skips[i];
            let block = make_block(format!("up{i}"), last_input, 2 * d - i)?;
            new = block.dense().new_channels();
            channels = block.dense().out_channels();
            up.push(block);
        }
        tu.reverse();
        up.reverse();
        let global = match spec.family {
            Family::RmGf => Some(FilterModule::new(
                "global_filter",
                FilterModuleSpec {
                    kind: FmKind::Ed,
                    channels: new,
                    alpha_ed: spec.alpha_ed,
                    hidden_kernel: *spec.hidden_kernel_sizes.last().expect("validated"),
                },
            )?),
            _ => None,
        };
        debug_assert_eq!(last_input + new, channels);
        let classifier = Conv::new("classifier", channels, spec.n_classes, 1);
        Ok(Self {
            spec: spec.clone(),
            conv0,
            down,
            td,
            bottleneck,
            tu,
            up,
            global,
            classifier,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Channels entering the classifier.
    pub fn classifier_channels(&self) -> usize {
        self.classifier.in_channels
    }

    /// Output stack width of every dense block, in `hidden_kernel_sizes` order.
    pub fn block_channels(&self) -> Vec<usize> {
        self.blocks().map(|b| b.dense().out_channels()).collect()
    }

    fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.down
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.up.iter().rev())
    }

    /// Fresh parameters from a seeded He-normal initialization.
    pub fn init_params<F: Float>(&self, seed: u64) -> Result<ParamStore<F>, NnError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        self.conv0.init(&mut init)?;
        for (b, t) in self.down.iter().zip(&self.td) {
            b.init(&mut init)?;
            t.init(&mut init)?;
        }
        self.bottleneck.init(&mut init)?;
        for (t, b) in self.tu.iter().zip(&self.up).rev() {
            t.init(&mut init)?;
            b.init(&mut init)?;
        }
        if let Some(g) = &self.global {
            g.init(&mut init)?;
        }
        self.classifier.init(&mut init)?;
        if matches!(self.spec.family, Family::Rfcd | Family::RmGf) {
            store.per_step_buffers(self.spec.sequence_length);
        }
        Ok(store)
    }

    pub fn zero_state<F>(&self) -> NetState<F> {
        NetState {
            blocks: self
                .blocks()
                .map(|b| match b {
                    Block::Recurrent(r) => r.zero_state(),
                    Block::Plain(_) => Vec::new(),
                })
                .collect(),
            global: None,
            step: 0,
        }
    }

    fn check_frame<F: Float>(&self, x: &Var<F>, channels: usize) -> Result<(), NnError> {
        let (_, c, h, w) = x.dims4()?;
        let m = 1 << self.spec.depth;
        if c != channels || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(NnError::ShapeMismatch(format!(
                "input {:?}: need {channels} channels and sides divisible by {m}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn trunk<F: Float>(
        &self,
        s: &mut Session<'_, F>,
        x: &Var<F>,
        mut state: Option<&mut NetState<F>>,
    ) -> Result<Var<F>, NnError> {
        let d = self.spec.depth;
        let p = self.spec.dropout;
        let mut x = self.conv0.forward(s, x)?;
        let mut skips = Vec::with_capacity(d);
        for (i, (block, td)) in self.down.iter().zip(&self.td).enumerate() {
            let st = state.as_deref_mut().map(|st| &mut st.blocks[i]);
            let (stack, _) = block.forward(s, &x, st)?;
            x = td.forward(s, &stack, p)?;
            skips.push(stack);
        }
        let st = state.as_deref_mut().map(|st| &mut st.blocks[d]);
        let (mut stack, mut new) = self.bottleneck.forward(s, &x, st)?;
        let mut input = x;
        for i in (0..d).rev() {
            let upsampled = self.tu[i].forward(s, &new)?;
            input = s.tape.concat_channels(&[&upsampled, &skips[i]])?;
            let st = state.as_deref_mut().map(|st| &mut st.blocks[2 * d - i]);
            (stack, new) = self.up[i].forward(s, &input, st)?;
        }
        if let Some(g) = &self.global {
            let prev = state.as_ref().and_then(|st| st.global.clone());
            let (filtered, next) = g.forward(s, &new, prev.as_ref())?;
            if let Some(st) = state.as_deref_mut() {
                st.global = next;
            }
            stack = s.tape.concat_channels(&[&input, &filtered])?;
        }
        Ok(stack)
    }

    /// Scores for one frame, advancing the recurrent state. For the
    /// feed-forward families the state is ignored.
    pub fn step<F: Float>(&self, s: &mut Session<'_, F>, frame: &Var<F>, state: &mut NetState<F>) -> Result<Var<F>, NnError> {
        if matches!(self.spec.family, Family::Tm3d | Family::TmSt) {
            return Err(NnError::BadSpec(format!(
                "{:?} consumes whole clips; use forward_sequence",
                self.spec.family
            )));
        }
        self.check_frame(frame, self.spec.in_channels)?;
        s.set_step(state.step);
        let stack = self.trunk(s, frame, Some(state))?;
        state.step += 1;
        self.classifier.forward(s, &stack)
    }

    /// Class scores `(B, n_classes, H, W)` for the last of `frames`, each
    /// `(B, in_channels, H, W)`. Recurrent families start from zero state;
    /// `fcd` accepts any number of frames and looks only at the last.
    /// Frames are treated as data: no gradient flows back into them for `tm_3d`.
    pub fn forward_sequence<F: Float>(&self, s: &mut Session<'_, F>, frames: &[Var<F>]) -> Result<Var<F>, NnError> {
        let t = self.spec.sequence_length;
        let last = frames.last().ok_or(NnError::WrongSequenceLength { expected: t, actual: 0 })?;
        if self.spec.family != Family::Fcd && frames.len() != t {
            return Err(NnError::WrongSequenceLength {
                expected: t,
                actual: frames.len(),
            });
        }
        for f in frames {
            if f.shape() != last.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "frames differ in shape: {:?} vs {:?}",
                    f.shape(),
                    last.shape()
                )));
            }
        }
        match self.spec.family {
            Family::Fcd => {
                let mut state = self.zero_state();
                self.step(s, last, &mut state)
            }
            Family::Rfcd | Family::RmGf => {
                let mut state = self.zero_state();
                let mut scores = None;
                for f in frames {
                    scores = Some(self.step(s, f, &mut state)?);
                }
                Ok(scores.expect("nonempty"))
            }
            Family::TmSt => {
                let refs: Vec<&Var<F>> = frames.iter().collect();
                let x = s.tape.concat_channels(&refs)?;
                self.check_frame(&x, self.spec.in_channels * t)?;
                let stack = self.trunk(s, &x, None)?;
                self.classifier.forward(s, &stack)
            }
            Family::Tm3d => {
                self.check_frame(last, self.spec.in_channels)?;
                let values: Vec<&Tensor<F>> = frames.iter().map(Var::value).collect();
                let clip = Var::constant(Tensor::cat_batch(&values)?);
                let stack = self.trunk(s, &clip, None)?;
                let b = last.shape()[0];
                let stack = s.tape.narrow_batch(&stack, (t - 1) * b, b)?;
                self.classifier.forward(s, &stack)
            }
        }
    }

    /// Exact trainable-parameter counts per module group.
    pub fn count_params(&self) -> Result<ParamTable, NnError> {
        let store = self.init_params::<f32>(0)?;
        Ok(ParamTable::from_store(&store))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTable {
    pub feature_extractor: usize,
    pub filter_modules: usize,
    pub upsampling: usize,
    pub classifier: usize,
    pub total: usize,
}

impl ParamTable {
    pub fn from_store<F: Float>(store: &ParamStore<F>) -> Self {
        let mut t = ParamTable::default();
        for (name, p) in store.iter() {
            if p.kind != crate::params::ParamKind::Trainable {
                continue;
            }
            let n = p.value.len();
            let slot = if name.contains(".filter.") || name.starts_with("global_filter.") {
                &mut t.filter_modules
            } else if name.starts_with("classifier.") {
                &mut t.classifier
            } else if name.starts_with("tu") || name.starts_with("up") {
                &mut t.upsampling
            } else {
                &mut t.feature_extractor
            };
            *slot += n;
            t.total += n;
        }
        t
    }
}

impl fmt::Display for ParamTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("feature extractor", self.feature_extractor),
            ("filter modules", self.filter_modules),
            ("upsampling", self.upsampling),
            ("classifier", self.classifier),
            ("total", self.total),
        ];
        writeln!(f, "{:<20}{:>12}", "group", "params")?;
        for (name, n) in rows {
            writeln!(f, "{name:<20}{n:>12}")?;
        }
        Ok(())
    }
}
