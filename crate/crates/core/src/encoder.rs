//! VGG-style convolutional encoder producing the feature grid that the
//! decoder attends over.

use rand::Rng;

use crate::autograd::{conv_extent, pool_extent, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One `conv → ReLU → optional max-pool` stage. The pool window equals its
/// stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: Option<(usize, usize)>,
}

impl ConvLayer {
    /// 3×3, stride 1, padding 1.
    pub const fn same3(out_channels: usize, pool: Option<(usize, usize)>) -> Self {
        ConvLayer {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            pool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub layers: Vec<ConvLayer>,
}

impl EncoderConfig {
    /// Default CPU-sized stack: `8c3-pool2, 16c3-pool2, 32c3-pool(2,1),
    /// 32c3-pool(4,1)`. Maps a 32×100 input onto a single row of 25 cells
    /// with 32 channels, so attention only has to choose a column.
    pub fn desk(input_channels: usize) -> Self {
        EncoderConfig {
            input_channels,
            layers: vec![
                ConvLayer::same3(8, Some((2, 2))),
                ConvLayer::same3(16, Some((2, 2))),
                ConvLayer::same3(32, Some((2, 1))),
                ConvLayer::same3(32, Some((4, 1))),
            ],
        }
    }

    /// The wider `32c3-pool2, 64c3-pool2, 128c3, 128c3-pool(2,1)` stack with
    /// a 128×4×25 grid; roughly 16× the arithmetic of [`EncoderConfig::desk`].
    pub fn wide(input_channels: usize) -> Self {
        EncoderConfig {
            input_channels,
            layers: vec![
                ConvLayer::same3(32, Some((2, 2))),
                ConvLayer::same3(64, Some((2, 2))),
                ConvLayer::same3(128, None),
                ConvLayer::same3(128, Some((2, 1))),
            ],
        }
    }

    pub fn output_channels(&self) -> usize {
        self.layers
            .last()
            .map_or(self.input_channels, |l| l.out_channels)
    }
}

/// Pure shape arithmetic for `config` applied to a `(C, H, W)` input.
pub fn infer_output_shape(
    config: &EncoderConfig,
    (c, h, w): (usize, usize, usize),
) -> Result<(usize, usize, usize)> {
    if c != config.input_channels {
        return Err(Error::Config(format!(
            "input has {c} channels, encoder expects {}",
            config.input_channels
        )));
    }
    let (mut h, mut w, mut c) = (h, w, c);
    for (i, layer) in config.layers.iter().enumerate() {
        if layer.out_channels == 0 {
            return Err(Error::Config(format!("layer {i} has zero output channels")));
        }
        (h, w) = conv_extent(h, w, layer.kernel, layer.kernel, layer.stride, layer.pad)
            .map_err(|e| Error::Config(format!("layer {i} convolution: {e}")))?;
        if let Some((ph, pw)) = layer.pool {
            (h, w) = pool_extent(h, w, ph, pw, ph, pw)
                .map_err(|e| Error::Config(format!("layer {i} pooling: {e}")))?;
        }
        c = layer.out_channels;
    }
    Ok((c, h, w))
}

/// Per-layer `(filters, bias)`; generic so the same layout serves stored
/// tensors and tape handles.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub layers: Vec<(T, T)>,
}

impl EncoderParams<Tensor> {
    /// He-uniform filters, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Self {
        let mut c_in = config.input_channels;
        let layers = config
            .layers
            .iter()
            .map(|l| {
                let fan_in = (c_in * l.kernel * l.kernel) as f64;
                let w = Tensor::uniform(
                    &[l.out_channels, c_in, l.kernel, l.kernel],
                    (6.0 / fan_in).sqrt(),
                    rng,
                );
                c_in = l.out_channels;
                (w, Tensor::zeros(&[l.out_channels]))
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        let mut c_in = config.input_channels;
        let layers = config
            .layers
            .iter()
            .map(|l| {
                let w = Tensor::zeros(&[l.out_channels, c_in, l.kernel, l.kernel]);
                c_in = l.out_channels;
                (w, Tensor::zeros(&[l.out_channels]))
            })
            .collect();
        EncoderParams { layers }
    }
}

/// Runs the stack on `x` (`C×H×W` or `N×C×H×W`).
pub fn encode(
    tape: &mut Tape,
    config: &EncoderConfig,
    params: &EncoderParams<Var>,
    x: Var,
) -> Result<Var> {
    let channel_axis = tape.shape(x).len() - 3;
    let c_in = tape.shape(x)[channel_axis];
    if c_in != config.input_channels {
        return Err(Error::Tensor(crate::autograd::TensorError::Dimension {
            op: "encode",
            detail: format!("input has {c_in} channels, encoder expects {}", config.input_channels),
        }));
    }
    let mut h = x;
    for (layer, &(w, b)) in config.layers.iter().zip(&params.layers) {
        h = tape.conv2d(h, w, layer.stride, layer.pad)?;
        h = tape.add_channel_bias(h, b)?;
        h = tape.relu(h)?;
        if let Some(window) = layer.pool {
            h = tape.maxpool2d(h, window, window)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind(tape: &mut Tape, p: &EncoderParams<Tensor>) -> EncoderParams<Var> {
        EncoderParams {
            layers: p
                .layers
                .iter()
                .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())))
                .collect(),
        }
    }

    /// Independent shape oracle: walks the layer list with the textbook
    /// formulas, no shared helpers.
    fn oracle_shape(config: &EncoderConfig, (mut h, mut w): (usize, usize)) -> (usize, usize, usize) {
        for l in &config.layers {
            h = (h + 2 * l.pad - l.kernel) / l.stride + 1;
            w = (w + 2 * l.pad - l.kernel) / l.stride + 1;
            if let Some((ph, pw)) = l.pool {
                h /= ph;
                w /= pw;
            }
        }
        (config.output_channels(), h, w)
    }

    #[test]
    fn reference_stack_shape() {
        let wide = EncoderConfig::wide(2);
        assert_eq!(oracle_shape(&wide, (32, 100)), (128, 4, 25));
        assert_eq!(infer_output_shape(&wide, (2, 32, 100)).unwrap(), (128, 4, 25));
        let desk = EncoderConfig::desk(2);
        assert_eq!(oracle_shape(&desk, (32, 100)), (32, 1, 25));
        assert_eq!(infer_output_shape(&desk, (2, 32, 100)).unwrap(), (32, 1, 25));
        assert_eq!(infer_output_shape(&EncoderConfig::desk(1), (1, 32, 100)).unwrap().1, 1);
    }

    #[test]
    fn default_encode_shape_matches_inference() {
        let config = EncoderConfig::desk(2);
        let params = EncoderParams::init(&config, &mut ChaCha8Rng::seed_from_u64(3));
        let mut tape = Tape::new();
        let p = bind(&mut tape, &params);
        let x = tape.constant(Tensor::uniform(&[2, 32, 100], 0.5, &mut ChaCha8Rng::seed_from_u64(4)));
        let f = encode(&mut tape, &config, &p, x).unwrap();
        assert_eq!(tape.shape(f), &[32, 1, 25]);
    }

    #[test]
    fn single_conv_layer_shape() {
        let config = EncoderConfig {
            input_channels: 1,
            layers: vec![ConvLayer::same3(6, None)],
        };
        assert_eq!(infer_output_shape(&config, (1, 32, 100)).unwrap(), (6, 32, 100));
    }

    #[test]
    fn odd_extent_pools_by_floor() {
        let config = EncoderConfig {
            input_channels: 1,
            layers: vec![ConvLayer::same3(1, Some((2, 2)))],
        };
        assert_eq!(infer_output_shape(&config, (1, 7, 7)).unwrap(), (1, 3, 3));
    }

    #[test]
    fn collapsing_config_is_error() {
        let config = EncoderConfig {
            input_channels: 1,
            layers: vec![ConvLayer::same3(4, Some((2, 2))); 4],
        };
        assert!(matches!(infer_output_shape(&config, (1, 8, 8)), Err(Error::Config(_))));
        assert!(matches!(
            infer_output_shape(&EncoderConfig::desk(2), (1, 32, 100)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let config = EncoderConfig::desk(2);
        let params = EncoderParams::zeros(&config);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &params);
        let x = tape.constant(Tensor::zeros(&[1, 32, 100]));
        assert!(matches!(
            encode(&mut tape, &config, &p, x),
            Err(Error::Tensor(crate::autograd::TensorError::Dimension { .. }))
        ));
    }

    #[test]
    fn zero_everything_gives_zero_features() {
        let config = EncoderConfig::desk(2);
        let params = EncoderParams::zeros(&config);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &params);
        let x = tape.constant(Tensor::zeros(&[2, 32, 100]));
        let f = encode(&mut tape, &config, &p, x).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_layer_filter_gradient() {
        let config = EncoderConfig {
            input_channels: 2,
            layers: vec![
                ConvLayer::same3(3, Some((2, 2))),
                ConvLayer::same3(4, Some((2, 1))),
            ],
        };
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let params = EncoderParams::init(&config, &mut rng);
            let x = Tensor::uniform(&[2, 8, 16], 0.5, &mut rng);
            let rest = params.layers[1].clone();
            let bias0 = params.layers[0].1.clone();
            let r = gradcheck::check(&[params.layers[0].0.clone()], seed, |t, v| {
                let p = EncoderParams {
                    layers: vec![
                        (v[0], t.constant(bias0.clone())),
                        (t.constant(rest.0.clone()), t.constant(rest.1.clone())),
                    ],
                };
                let xv = t.constant(x.clone());
                let f = encode(t, &config, &p, xv)?;
                Ok::<_, Error>(t.sum(f)?)
            })
            .unwrap();
            assert!(r.max_relative_error <= 1e-4, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn pure_conv_is_translation_consistent() {
        let config = EncoderConfig {
            input_channels: 1,
            layers: vec![ConvLayer::same3(3, None), ConvLayer::same3(2, None)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = EncoderParams::init(&config, &mut rng);
        let (h, w) = (6, 12);
        let base = Tensor::uniform(&[1, h, w], 0.5, &mut rng);
        let mut shifted = Tensor::zeros(&[1, h, w]);
        for y in 0..h {
            for x in 1..w {
                shifted.data_mut()[y * w + x] = base.data()[y * w + x - 1];
            }
        }
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let p = bind(&mut tape, &params);
            let x = tape.constant(input.clone());
            let f = encode(&mut tape, &config, &p, x).unwrap();
            tape.value(f).clone()
        };
        let (a, b) = (run(&base), run(&shifted));
        // Receptive field of two 3×3 layers is 2 px on each side.
        for c in 0..2 {
            for y in 0..h {
                for x in 3..w - 2 {
                    let i = (c * h + y) * w;
                    assert!((b.data()[i + x] - a.data()[i + x - 1]).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn inferred_shape_matches_forward(
            c_in in 1usize..3,
            h in 6usize..20,
            w in 6usize..24,
            widths in proptest::collection::vec(1usize..4, 1..3),
            pools in proptest::collection::vec(0usize..3, 3),
        ) {
            let choices = [None, Some((2, 2)), Some((2, 1))];
            let config = EncoderConfig {
                input_channels: c_in,
                layers: widths.iter().enumerate()
                    .map(|(i, &oc)| ConvLayer::same3(oc, choices[pools[i]]))
                    .collect(),
            };
            let inferred = infer_output_shape(&config, (c_in, h, w));
            let params = EncoderParams::init(&config, &mut ChaCha8Rng::seed_from_u64(1));
            let mut tape = Tape::new();
            let p = bind(&mut tape, &params);
            let x = tape.constant(Tensor::zeros(&[c_in, h, w]));
            match (inferred, encode(&mut tape, &config, &p, x)) {
                (Ok(s), Ok(f)) => prop_assert_eq!(tape.shape(f), &[s.0, s.1, s.2]),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "disagree: {:?} vs {:?}", a.is_ok(), b.is_ok()),
            }
        }
    }
}
