//! The finite-difference suite run by `bivex gradcheck`: every
//! differentiable building block plus a whole micro model, each on a few
//! random instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::gradcheck::{self, CheckResult};
use crate::autograd::Tensor;
use crate::decoder::{self, lstm_step, DecoderParams, LstmParams};
use crate::error::Result;
use crate::image::GrayImage;
use crate::model::{Model, ModelConfig, ModelFlags};
use crate::routing::{Direction, RoutedImage};

/// Tolerance for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the composed model, where roundoff accumulates.
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub op: &'static str,
    pub seed: u64,
    pub tolerance: f64,
    pub result: CheckResult,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.result.max_relative_error <= self.tolerance
    }
}

fn random(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x100) ^ salt);
    Tensor::uniform(shape, 1.0, &mut rng)
}

type Check = fn(u64) -> Result<CheckResult>;

const OPS: [(&str, Check); 7] = [
    ("matmul", check_matmul),
    ("conv2d", check_conv2d),
    ("maxpool", check_maxpool),
    ("lstm_step", check_lstm),
    ("softmax", check_softmax),
    ("cross_entropy", check_cross_entropy),
    ("attend", check_attend),
];

/// Runs every check for each seed. Model checks cover the baseline, mask
/// and selective-attention variants.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    for &(op, check) in &OPS {
        for &seed in seeds {
            entries.push(SuiteEntry {
                op,
                seed,
                tolerance: OP_TOLERANCE,
                result: check(seed)?,
            });
        }
    }
    for (op, flags) in [
        ("model:baseline", ModelFlags::BASELINE),
        ("model:dem", ModelFlags::DEM),
        ("model:san", ModelFlags::SAN),
    ] {
        for &seed in seeds {
            entries.push(SuiteEntry {
                op,
                seed,
                tolerance: MODEL_TOLERANCE,
                result: check_micro_model(flags, seed)?,
            });
        }
    }
    Ok(entries)
}

fn check_matmul(seed: u64) -> Result<CheckResult> {
    let inputs = [random(&[3, 4], seed, 1), random(&[4, 2], seed, 2)];
    Ok(gradcheck::check(&inputs, seed, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        t.sum(y)
    })?)
}

fn check_conv2d(seed: u64) -> Result<CheckResult> {
    let inputs = [random(&[2, 2, 5, 5], seed, 3), random(&[3, 2, 3, 3], seed, 4)];
    Ok(gradcheck::check(&inputs, seed, |t, v| t.conv2d(v[0], v[1], 1, 1))?)
}

fn check_maxpool(seed: u64) -> Result<CheckResult> {
    // well separated values keep every window's winner stable under the probe step
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = (0..72).map(|i| i as f64 * 0.1).collect();
    rand::seq::SliceRandom::shuffle(values.as_mut_slice(), &mut rng);
    let input = Tensor::new(&[2, 6, 6], values)?;
    Ok(gradcheck::check(&[input], seed, |t, v| t.maxpool2d(v[0], (2, 2), (2, 2)))?)
}

fn check_lstm(seed: u64) -> Result<CheckResult> {
    let (d_in, d_h) = (5, 8);
    let inputs = [
        random(&[d_in, 4 * d_h], seed, 5),
        random(&[d_h, 4 * d_h], seed, 6),
        random(&[4 * d_h], seed, 7),
        random(&[2, d_in], seed, 8),
        random(&[2, d_h], seed, 9),
        random(&[2, d_h], seed, 10),
    ];
    Ok(gradcheck::check(&inputs, seed, |t, v| {
        let params = LstmParams {
            w_x: v[0],
            w_h: v[1],
            bias: v[2],
        };
        let (h, c) = lstm_step(t, v[3], (v[4], v[5]), &params)?;
        t.add(h, c)
    })?)
}

fn check_softmax(seed: u64) -> Result<CheckResult> {
    Ok(gradcheck::check(&[random(&[7], seed, 11)], seed, |t, v| t.softmax(v[0]))?)
}

fn check_cross_entropy(seed: u64) -> Result<CheckResult> {
    let targets = [(seed as usize) % 10, 3, 9, 0];
    Ok(gradcheck::check(&[random(&[4, 10], seed, 12)], seed, |t, v| {
        t.cross_entropy(v[0], &targets)
    })?)
}

/// Attention over a batch of two with both heads live, so the selection
/// between them is exercised too.
fn check_attend(seed: u64) -> Result<CheckResult> {
    let (c, h, a) = (3, 4, 5);
    let inputs = [
        random(&[2, c, 2, 3], seed, 13),
        random(&[2, h], seed, 14),
        random(&[h, a], seed, 15),
        random(&[h, a], seed, 16),
        random(&[c, a], seed, 17),
        random(&[a, 1], seed, 18),
    ];
    Ok(gradcheck::check(&inputs, seed, |t, v| {
        let zero = t.constant(Tensor::zeros(&[1]));
        let params = DecoderParams {
            embed: zero,
            lstm: LstmParams {
                w_x: zero,
                w_h: zero,
                bias: zero,
            },
            w_s_h: v[2],
            w_s_v: Some(v[3]),
            w_f: v[4],
            v_a: v[5],
            w_out: zero,
            b_out: zero,
        };
        let grid = decoder::prepare_features(t, v[0], &params)?;
        let directions = [Direction::Horizontal, Direction::Vertical];
        let (context, _) = decoder::attend(t, v[1], &grid, &directions, &params)?;
        Ok::<_, crate::autograd::TensorError>(context)
    })?)
}

fn check_micro_model(flags: ModelFlags, seed: u64) -> Result<CheckResult> {
    let model = Model::new(ModelConfig::micro(flags), seed)?;
    let images = [
        GrayImage::from_fn(30, 10, |x, y| ((x * 37 + y * 11 + seed as usize) % 256) as u8),
        GrayImage::from_fn(9, 27, |x, y| ((x * 13 + y * 29) % 256) as u8),
    ];
    let routed: Vec<RoutedImage> = images.iter().map(|i| model.route(i)).collect::<Result<_>>()?;
    let refs: Vec<&RoutedImage> = routed.iter().collect();
    let labels = vec![vec![0, 2], vec![3, 1, 1]];
    let values: Vec<Tensor> = model.params.values().into_iter().cloned().collect();
    gradcheck::check(&values, seed, |tape, vars| {
        let mut it = vars.iter().copied();
        let params = model.params.map(|_, _| it.next().expect("one var per tensor"));
        model.loss(tape, &params, &refs, &labels, 7.0).map(|(l, _)| l)
    })
}
