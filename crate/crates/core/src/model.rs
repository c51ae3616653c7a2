//! The full recognizer: routing, optional direction mask channel, encoder
//! and attention decoder, with the three variants selected by flags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Tensor, Var};
use crate::decoder::{
    self, DecodeOutput, DecoderConfig, DecoderParams, LstmParams, Vocabulary,
};
use crate::encoder::{self, ConvLayer, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::routing::{self, Direction, ResizeFilter, RoutedImage, INPUT_HEIGHT, INPUT_WIDTH};

/// Variant switches. All off is the baseline network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ModelFlags {
    /// Append the directional encoding mask as a second input channel.
    pub use_dem: bool,
    /// Separate attention heads for horizontal and vertical text.
    pub use_san: bool,
    /// Exchange the sin/cos kernels of the mask.
    pub dem_kernel_swap: bool,
}

impl ModelFlags {
    pub const BASELINE: ModelFlags = ModelFlags {
        use_dem: false,
        use_san: false,
        dem_kernel_swap: false,
    };
    pub const DEM: ModelFlags = ModelFlags {
        use_dem: true,
        ..ModelFlags::BASELINE
    };
    pub const SAN: ModelFlags = ModelFlags {
        use_san: true,
        ..ModelFlags::BASELINE
    };

    pub fn variant_name(&self) -> &'static str {
        match (self.use_dem, self.use_san) {
            (false, false) => "baseline",
            (true, false) => "dem",
            (false, true) => "san",
            (true, true) => "dem+san",
        }
    }

    pub fn input_channels(&self) -> usize {
        if self.use_dem {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub flags: ModelFlags,
    /// Network frame `(height, width)`.
    pub input_size: (usize, usize),
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub vocab: Vocabulary,
}

impl ModelConfig {
    /// CPU-sized defaults: 32×100 input, the desk encoder stack, 128 LSTM
    /// units (512 at the original scale), 64-wide attention, 24 steps.
    pub fn desk(flags: ModelFlags) -> Self {
        ModelConfig {
            flags,
            input_size: (INPUT_HEIGHT, INPUT_WIDTH),
            encoder: EncoderConfig::desk(flags.input_channels()),
            decoder: DecoderConfig {
                use_san: flags.use_san,
                ..DecoderConfig::default()
            },
            vocab: Vocabulary::default(),
        }
    }

    /// A tiny configuration (8×12 input, two conv stages, 4 symbols) for
    /// gradient checks and fast tests.
    pub fn micro(flags: ModelFlags) -> Self {
        ModelConfig {
            flags,
            input_size: (8, 12),
            encoder: EncoderConfig {
                input_channels: flags.input_channels(),
                layers: vec![ConvLayer::same3(3, Some((2, 2))), ConvLayer::same3(4, Some((2, 2)))],
            },
            decoder: DecoderConfig {
                hidden: 16,
                attn_dim: 5,
                max_len: 4,
                use_san: flags.use_san,
            },
            vocab: Vocabulary::new("abcd").expect("micro alphabet"),
        }
    }

    /// Checks internal consistency and returns the feature map shape
    /// `(C_f, H_f, W_f)`.
    pub fn validate(&self) -> Result<(usize, usize, usize)> {
        if self.encoder.input_channels != self.flags.input_channels() {
            return Err(Error::Config(format!(
                "encoder takes {} channels but the mask flag implies {}",
                self.encoder.input_channels,
                self.flags.input_channels()
            )));
        }
        if self.decoder.use_san != self.flags.use_san {
            return Err(Error::Config("decoder head count disagrees with flags".into()));
        }
        if self.decoder.hidden == 0 || self.decoder.attn_dim == 0 || self.decoder.max_len == 0 {
            return Err(Error::Config("decoder widths and step limit must be positive".into()));
        }
        let (h, w) = self.input_size;
        encoder::infer_output_shape(&self.encoder, (self.encoder.input_channels, h, w))
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder.output_channels()
    }
}

/// Every learnable tensor of the model. Generic so the same layout holds
/// stored values (`Tensor`), tape handles (`Var`) or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
}

impl<T> ModelParams<T> {
    /// Parameters in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), w));
            out.push((format!("encoder.conv{i}.bias"), b));
        }
        let d = &self.decoder;
        out.push(("decoder.embed".into(), &d.embed));
        out.push(("decoder.lstm.w_x".into(), &d.lstm.w_x));
        out.push(("decoder.lstm.w_h".into(), &d.lstm.w_h));
        out.push(("decoder.lstm.bias".into(), &d.lstm.bias));
        out.push(("decoder.attn.w_s_h".into(), &d.w_s_h));
        if let Some(v) = &d.w_s_v {
            out.push(("decoder.attn.w_s_v".into(), v));
        }
        out.push(("decoder.attn.w_f".into(), &d.w_f));
        out.push(("decoder.attn.v_a".into(), &d.v_a));
        out.push(("decoder.out.w".into(), &d.w_out));
        out.push(("decoder.out.b".into(), &d.b_out));
        out
    }

    /// Maps every parameter in canonical order.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        let mut layers = Vec::with_capacity(self.encoder.layers.len());
        for (i, (w, b)) in self.encoder.layers.iter().enumerate() {
            layers.push((
                f(&format!("encoder.conv{i}.weight"), w)?,
                f(&format!("encoder.conv{i}.bias"), b)?,
            ));
        }
        let d = &self.decoder;
        let embed = f("decoder.embed", &d.embed)?;
        let lstm = LstmParams {
            w_x: f("decoder.lstm.w_x", &d.lstm.w_x)?,
            w_h: f("decoder.lstm.w_h", &d.lstm.w_h)?,
            bias: f("decoder.lstm.bias", &d.lstm.bias)?,
        };
        let w_s_h = f("decoder.attn.w_s_h", &d.w_s_h)?;
        let w_s_v = match &d.w_s_v {
            Some(v) => Some(f("decoder.attn.w_s_v", v)?),
            None => None,
        };
        Ok(ModelParams {
            encoder: EncoderParams { layers },
            decoder: DecoderParams {
                embed,
                lstm,
                w_s_h,
                w_s_v,
                w_f: f("decoder.attn.w_f", &d.w_f)?,
                v_a: f("decoder.attn.v_a", &d.v_a)?,
                w_out: f("decoder.out.w", &d.w_out)?,
                b_out: f("decoder.out.b", &d.b_out)?,
            },
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        self.try_map(|n, t| Ok::<U, std::convert::Infallible>(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    pub fn values(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn len(&self) -> usize {
        self.named().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl ModelParams<Tensor> {
    /// Rebuilds a parameter set in the layout of `self` from a flat list in
    /// canonical order.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self> {
        let mut it = values.into_iter();
        let rebuilt = self.try_map(|name, old| {
            let t = it
                .next()
                .ok_or_else(|| Error::Config(format!("missing value for {name}")))?;
            if t.shape() != old.shape() {
                return Err(Error::Config(format!(
                    "{name}: shape {:?} where {:?} is expected",
                    t.shape(),
                    old.shape()
                )));
            }
            Ok(t)
        })?;
        if it.next().is_some() {
            return Err(Error::Config("too many parameter values".into()));
        }
        Ok(rebuilt)
    }

    pub fn count(&self) -> usize {
        self.values().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|t| t.is_finite())
    }
}

/// Result of recognizing one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Recognition {
    pub text: String,
    pub direction: Direction,
    pub output: DecodeOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    /// Fresh randomly initialised model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (c_f, _, _) = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams {
            encoder: EncoderParams::init(&config.encoder, &mut rng),
            decoder: DecoderParams::init(&config.decoder, c_f, &config.vocab, &mut rng),
        };
        Ok(Model { config, params })
    }

    /// All-zero parameters.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let (c_f, _, _) = config.validate()?;
        let params = ModelParams {
            encoder: EncoderParams::zeros(&config.encoder),
            decoder: DecoderParams::zeros(&config.decoder, c_f, &config.vocab),
        };
        Ok(Model { config, params })
    }

    /// Assembles a model from stored parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, values: Vec<Tensor>) -> Result<Self> {
        let template = Model::zeros(config)?;
        let params = template.params.with_values(values)?;
        Ok(Model {
            config: template.config,
            params,
        })
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.params.map(|_, t| tape.leaf(t.clone()))
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_constant(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.params.map(|_, t| tape.constant(t.clone()))
    }

    pub fn route(&self, image: &GrayImage) -> Result<RoutedImage> {
        Ok(routing::route(image, self.config.input_size, ResizeFilter::Bilinear)?)
    }

    /// Stacks routed images into the `N×C×H×W` network input, adding the
    /// mask channel when enabled.
    pub fn stack_inputs(&self, images: &[&RoutedImage]) -> Result<Tensor> {
        let (h, w) = self.config.input_size;
        let c = self.config.flags.input_channels();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::Argument(format!(
                    "routed image is {}×{}, network frame is {h}×{w}",
                    img.height(),
                    img.width()
                )));
            }
            let x = routing::concat_dem(img, self.config.flags.use_dem, self.config.flags.dem_kernel_swap);
            data.extend_from_slice(x.data());
        }
        Ok(Tensor::new(&[images.len(), c, h, w], data)?)
    }

    /// Encodes a batch of routed images into the attention grid.
    fn features(
        &self,
        tape: &mut Tape,
        params: &ModelParams<Var>,
        images: &[&RoutedImage],
    ) -> Result<decoder::FeatureGrid> {
        let x = tape.constant(self.stack_inputs(images)?);
        let f = encoder::encode(tape, &self.config.encoder, &params.encoder, x)?;
        Ok(decoder::prepare_features(tape, f, &params.decoder)?)
    }

    /// Teacher-forced cross entropy summed over every labelled step (EOS
    /// included) and divided by `divisor`. Returns the loss and the number
    /// of scored steps.
    pub fn loss(
        &self,
        tape: &mut Tape,
        params: &ModelParams<Var>,
        images: &[&RoutedImage],
        labels: &[Vec<usize>],
        divisor: f64,
    ) -> Result<(Var, usize)> {
        let directions: Vec<Direction> = images.iter().map(|i| i.direction).collect();
        let grid = self.features(tape, params, images)?;
        let step_logits = decoder::teacher_forced_logits(
            tape,
            &self.config.decoder,
            &self.config.vocab,
            &grid,
            &directions,
            &params.decoder,
            labels,
        )?;
        let mut total: Option<Var> = None;
        let mut scored = 0;
        for (t, logits) in step_logits.into_iter().enumerate() {
            let targets = decoder::step_targets(&self.config.vocab, labels, t);
            scored += targets.iter().flatten().count();
            let ce = tape.cross_entropy_sum(logits, &targets, divisor)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        let total = total.ok_or_else(|| Error::Argument("empty batch".into()))?;
        Ok((total, scored))
    }

    /// Greedy recognition of a batch of routed images.
    pub fn recognize_routed(&self, images: &[&RoutedImage]) -> Result<Vec<Recognition>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let params = self.bind_constant(&mut tape);
        let directions: Vec<Direction> = images.iter().map(|i| i.direction).collect();
        let grid = self.features(&mut tape, &params, images)?;
        let outputs = decoder::decode_batch(
            &mut tape,
            &self.config.decoder,
            &self.config.vocab,
            &grid,
            &directions,
            &params.decoder,
            None,
        )?;
        Ok(outputs
            .into_iter()
            .zip(directions)
            .map(|(output, direction)| Recognition {
                text: output.text.clone(),
                direction,
                output,
            })
            .collect())
    }

    /// Teacher-forced decoding of one routed image (diagnostics and tests).
    pub fn decode_teacher(&self, image: &RoutedImage, label: &[usize]) -> Result<DecodeOutput> {
        let mut tape = Tape::new();
        let params = self.bind_constant(&mut tape);
        let grid = self.features(&mut tape, &params, &[image])?;
        let mut out = decoder::decode_batch(
            &mut tape,
            &self.config.decoder,
            &self.config.vocab,
            &grid,
            &[image.direction],
            &params.decoder,
            Some(&[label.to_vec()]),
        )?;
        Ok(out.remove(0))
    }

    pub fn recognize(&self, image: &GrayImage) -> Result<Recognition> {
        let routed = self.route(image)?;
        Ok(self.recognize_routed(&[&routed])?.remove(0))
    }

    /// A hand-built model that spells `label` whatever the image shows.
    ///
    /// The encoder is all zeros, so the attention context vanishes and each
    /// step sees only the previous character. Every distinct character (and
    /// the start symbol) owns one embedding slot and one LSTM unit, and the
    /// output layer maps each slot to its successor in `label`, ending with
    /// EOS. Characters of `label` must be distinct.
    pub fn planted(label: &str, flags: ModelFlags) -> Result<Self> {
        let config = ModelConfig::desk(flags);
        let mut model = Model::zeros(config)?;
        let vocab = model.config.vocab.clone();
        let chars = vocab.encode(label)?;
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::Argument(format!("planted label {label:?} repeats a character")));
            }
        }
        let hidden = model.config.decoder.hidden;
        let c_f = model.config.feature_channels();
        if chars.len() + 1 > c_f.min(hidden) || chars.len() + 1 > model.config.decoder.max_len {
            return Err(Error::Argument(format!("planted label {label:?} is too long")));
        }
        let d = &mut model.params.decoder;
        let v = vocab.len();
        // slot 0: start symbol; slot k: chars[k - 1]
        let mut prev_classes = vec![vocab.start()];
        prev_classes.extend_from_slice(&chars);
        for (slot, &class) in prev_classes.iter().enumerate() {
            d.embed.data_mut()[class * c_f + slot] = 3.0;
            // candidate gate of unit `slot` reads input dimension `slot`
            d.lstm.w_x.data_mut()[slot * 4 * hidden + 2 * hidden + slot] = 1.0;
            let next = chars.get(slot).copied().unwrap_or(vocab.eos());
            d.w_out.data_mut()[slot * v + next] = 20.0;
        }
        let bias = d.lstm.bias.data_mut();
        bias[..hidden].fill(20.0);
        bias[hidden..2 * hidden].fill(-20.0);
        bias[3 * hidden..].fill(20.0);
        Ok(model)
    }
}
