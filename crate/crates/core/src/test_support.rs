//! Small models and scenes shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::mnist::{GlyphBank, GlyphSplit};
use crate::models::{Family, ModelSpec, N_CLASSES};
use crate::nn::FmKind;
use crate::scene::{generate_sequence, SceneConfig, SequenceSample};

pub(crate) fn tiny_spec(family: Family) -> ModelSpec {
    ModelSpec {
        family,
        depth: 1,
        layers_per_db: 2,
        growth: 3,
        first_conv_features: 6,
        fm_kind: (family == Family::Rfcd).then_some(FmKind::Ff),
        alpha_ed: None,
        hidden_kernel_sizes: vec![3, 3, 3],
        n_classes: N_CLASSES,
        sequence_length: 3,
        in_channels: 1,
        dropout: 0.0,
    }
}

pub(crate) fn tiny_sequences(n: usize, seed: u64) -> Vec<SequenceSample> {
    let cfg = SceneConfig {
        image_size: 32,
        sequence_length: 3,
        square_size: [6, 10],
        circle_radius: [2.0, 4.0],
        wall_length: [6, 12],
        ..Default::default()
    };
    let glyphs = GlyphBank::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| generate_sequence(&cfg, &glyphs, GlyphSplit::Train, &mut rng).unwrap())
        .collect()
}
