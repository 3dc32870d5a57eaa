//! Parameter initialization.
//!
//! Matrices draw from a normal(0, 0.02) truncated at two standard
//! deviations; norm gains start at exactly 1 and every other vector at
//! exactly 0. Draws consume one rng stream in parameter-table order, so a
//! seed pins the whole initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::checkpoint::ModelCheckpoint;
use crate::model::{encoder_param_specs, head_param_specs, EncoderConfig, HeadKind};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const TRUNC_AT: f64 = 2.0;

/// One draw from a truncated standard normal via Box-Muller, rejecting
/// |z| > 2. Uses 1 - u so the log argument stays in (0, 1].
fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= TRUNC_AT {
            return z * INIT_STD;
        }
    }
}

fn init_tensor(name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = if shape.len() >= 2 {
        (0..n).map(|_| truncated_normal(rng)).collect()
    } else if name.ends_with(".gain") {
        vec![1.0; n]
    } else {
        vec![0.0; n]
    };
    Tensor::new(shape, data)
}

/// Fresh random checkpoint with the given heads attached, tagged
/// `random_init`. Deterministic per seed.
pub fn init_model(
    config: &EncoderConfig,
    heads: &[HeadKind],
    seed: u64,
) -> Result<ModelCheckpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = indexmap::IndexMap::new();
    for (name, shape) in encoder_param_specs(config) {
        let tensor = init_tensor(&name, shape, &mut rng)?;
        params.insert(name, tensor);
    }
    for &kind in heads {
        for (name, shape) in head_param_specs(config, kind) {
            let tensor = init_tensor(&name, shape, &mut rng)?;
            params.insert(name, tensor);
        }
    }
    ModelCheckpoint::new(*config, params, vec!["random_init".into()], seed, None)
}

/// Fresh parameters for one head, for attaching to an existing model.
pub fn init_head_params(
    config: &EncoderConfig,
    kind: HeadKind,
    seed: u64,
) -> Result<Vec<(String, Tensor)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    head_param_specs(config, kind)
        .into_iter()
        .map(|(name, shape)| {
            let mut tensor = init_tensor(&name, shape, &mut rng)?;
            tensor.round_to_f32();
            Ok((name, tensor))
        })
        .collect()
}
