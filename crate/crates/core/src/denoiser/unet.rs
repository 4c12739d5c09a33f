//! Attention UNet noise predictor with additive source/interval conditioning.
//!
//! ```text
//! fused = F(x_t) + H(S) + P(delta)        F, H: 3x3x3 convs; P: linear on sin(delta)
//! eps   = D(E(fused, t), t)               E/D: residual blocks, t added per block
//! ```
//!
//! Every encoder level is one residual block (plus self-attention at the
//! configured levels) followed by 2x average pooling; the decoder mirrors it
//! with nearest-neighbour upsampling and concatenated skip connections. The
//! output convolution is zero-initialised so a fresh model predicts `eps = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, Parameters};
use super::{Denoiser, DenoiserInput};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Tape, Tensor, Var};
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// One entry per resolution level; level `l` has `base * mult[l]` channels.
    pub channel_multipliers: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub delta_embed_dim: usize,
    pub groups_for_norm: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![1],
            time_embed_dim: 32,
            delta_embed_dim: 32,
            groups_for_norm: 8,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// Every spatial dimension must be a multiple of this.
    pub fn required_divisor(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.levels() < 2 {
            return bad(format!("UNet needs at least 2 levels, got {}", self.levels()));
        }
        if self.base_channels == 0 || self.channel_multipliers.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.groups_for_norm == 0 {
            return bad("groups_for_norm must be positive".into());
        }
        if !self.base_channels.is_multiple_of(self.groups_for_norm) {
            return bad(format!(
                "base_channels {} not divisible by groups_for_norm {}",
                self.base_channels, self.groups_for_norm
            ));
        }
        for dim in [self.time_embed_dim, self.delta_embed_dim] {
            if dim == 0 || dim % 2 != 0 {
                return bad(format!(
                    "embedding dimensions must be positive and even, got {dim}"
                ));
            }
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return bad(format!(
                "attention level {l} out of range for {} levels",
                self.levels()
            ));
        }
        Ok(())
    }

    pub fn check_shape(&self, shape: [usize; 3]) -> Result<()> {
        let div = self.required_divisor();
        if shape.iter().any(|&s| s % div != 0) {
            return Err(Error::Config(format!(
                "volume shape {shape:?} not divisible by {div} for a {}-level UNet",
                self.levels()
            )));
        }
        Ok(())
    }

    fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("base_channels".into(), self.base_channels.to_string()),
            ("channel_multipliers".into(), list(&self.channel_multipliers)),
            ("attention_levels".into(), list(&self.attention_levels)),
            ("time_embed_dim".into(), self.time_embed_dim.to_string()),
            ("delta_embed_dim".into(), self.delta_embed_dim.to_string()),
            ("groups_for_norm".into(), self.groups_for_norm.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let find = |key: &str| {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::CorruptHeader(format!("missing key `{key}`")))
        };
        let num = |key: &str| -> Result<usize> {
            find(key)?
                .parse()
                .map_err(|_| Error::CorruptHeader(format!("bad integer for `{key}`")))
        };
        let list = |key: &str| -> Result<Vec<usize>> {
            let v = find(key)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::CorruptHeader(format!("bad list for `{key}`")))
                })
                .collect()
        };
        let cfg = Self {
            base_channels: num("base_channels")?,
            channel_multipliers: list("channel_multipliers")?,
            attention_levels: list("attention_levels")?,
            time_embed_dim: num("time_embed_dim")?,
            delta_embed_dim: num("delta_embed_dim")?,
            groups_for_norm: num("groups_for_norm")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    FanIn(usize),
    Zero,
    One,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    scale: usize,
    shift: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Affine,
    time: Affine,
    norm2: Norm,
    conv2: Affine,
    skip: Option<Affine>,
}

#[derive(Debug, Clone)]
struct Attention {
    norm: Norm,
    query: Affine,
    key: Affine,
    value: Affine,
    proj: Affine,
}

#[derive(Debug, Clone)]
struct Level {
    res: ResBlock,
    attn: Option<Attention>,
}

#[derive(Debug, Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, kernel: usize) -> Affine {
        let fan_in = cin * kernel * kernel * kernel;
        Affine {
            weight: self.add(
                format!("{prefix}.weight"),
                vec![cout, cin, kernel, kernel, kernel],
                Init::FanIn(fan_in),
            ),
            bias: self.add(format!("{prefix}.bias"), vec![cout], Init::Zero),
        }
    }

    fn zero_conv(&mut self, prefix: &str, cin: usize, cout: usize, kernel: usize) -> Affine {
        Affine {
            weight: self.add(
                format!("{prefix}.weight"),
                vec![cout, cin, kernel, kernel, kernel],
                Init::Zero,
            ),
            bias: self.add(format!("{prefix}.bias"), vec![cout], Init::Zero),
        }
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> Affine {
        Affine {
            weight: self.add(
                format!("{prefix}.weight"),
                vec![output, input],
                Init::FanIn(input),
            ),
            bias: self.add(format!("{prefix}.bias"), vec![output], Init::Zero),
        }
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> Norm {
        Norm {
            scale: self.add(format!("{prefix}.scale"), vec![channels], Init::One),
            shift: self.add(format!("{prefix}.shift"), vec![channels], Init::Zero),
        }
    }

    fn res_block(&mut self, prefix: &str, cin: usize, cout: usize, temb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{prefix}.norm1"), cin),
            conv1: self.conv(&format!("{prefix}.conv1"), cin, cout, 3),
            time: self.linear(&format!("{prefix}.time"), temb, cout),
            norm2: self.norm(&format!("{prefix}.norm2"), cout),
            conv2: self.conv(&format!("{prefix}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| self.conv(&format!("{prefix}.skip"), cin, cout, 1)),
        }
    }

    fn attention(&mut self, prefix: &str, channels: usize) -> Attention {
        Attention {
            norm: self.norm(&format!("{prefix}.norm"), channels),
            query: self.conv(&format!("{prefix}.query"), channels, channels, 1),
            key: self.conv(&format!("{prefix}.key"), channels, channels, 1),
            value: self.conv(&format!("{prefix}.value"), channels, channels, 1),
            proj: self.conv(&format!("{prefix}.proj"), channels, channels, 1),
        }
    }
}

/// Network structure; the weights live separately in [`Parameters`].
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    specs: Vec<ParamSpec>,
    stem_x: Affine,
    stem_source: Affine,
    stem_delta: Affine,
    time_fc1: Affine,
    time_fc2: Affine,
    encoder: Vec<Level>,
    middle: ResBlock,
    decoder: Vec<Level>,
    out_norm: Norm,
    out_conv: Affine,
}

/// Intermediate stem tensors, exposed to test the additive fusion.
#[derive(Debug, Clone)]
pub struct StemOutputs {
    pub image: Tensor,
    pub source: Tensor,
    pub delta: Tensor,
    pub fused: Tensor,
}

struct StemVars {
    image: Var,
    source: Var,
    delta: Var,
    fused: Var,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = LayoutBuilder::default();
        let base = config.base_channels;
        let temb = config.time_embed_dim;

        let stem_x = b.conv("stem.image", 1, base, 3);
        let stem_source = b.conv("stem.source", 1, base, 3);
        let stem_delta = b.linear("stem.delta", config.delta_embed_dim, base);
        let time_fc1 = b.linear("time.fc1", temb, temb);
        let time_fc2 = b.linear("time.fc2", temb, temb);

        let mut encoder = Vec::new();
        let mut cur = base;
        for l in 0..config.levels() {
            let ch = config.channels(l);
            let res = b.res_block(&format!("enc{l}.res"), cur, ch, temb);
            let attn = config
                .has_attention(l)
                .then(|| b.attention(&format!("enc{l}.attn"), ch));
            encoder.push(Level { res, attn });
            cur = ch;
        }
        let middle = b.res_block("mid.res", cur, cur, temb);

        let mut decoder = Vec::new();
        for l in (0..config.levels()).rev() {
            let ch = config.channels(l);
            let res = b.res_block(&format!("dec{l}.res"), cur + ch, ch, temb);
            let attn = config
                .has_attention(l)
                .then(|| b.attention(&format!("dec{l}.attn"), ch));
            decoder.push(Level { res, attn });
            cur = ch;
        }
        let out_norm = b.norm("out.norm", cur);
        let out_conv = b.zero_conv("out.conv", cur, 1, 3);

        Ok(Self {
            config,
            specs: b.specs,
            stem_x,
            stem_source,
            stem_delta,
            time_fc1,
            time_fc2,
            encoder,
            middle,
            decoder,
            out_norm,
            out_conv,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Fan-in scaled normal weights, unit norm scales, zero biases and a
    /// zero output convolution.
    pub fn init_params(&self, seed: u64) -> Parameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Parameters::default();
        for spec in &self.specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::FanIn(fan_in) => {
                    let std = 1.0 / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                }
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
            };
            params.push(
                spec.name.clone(),
                Tensor::new(spec.shape.clone(), data).expect("spec shape"),
            );
        }
        params
    }

    /// Like [`UNet::init_params`], then perturbs every tensor (including
    /// biases, norm parameters and the output conv) with `N(0, scale^2)`.
    /// Used where a zero output would hide the paths under test.
    pub fn random_params(&self, seed: u64, scale: f64) -> Parameters {
        let mut params = self.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for e in params.iter_mut() {
            for v in e.tensor.data_mut() {
                *v += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        params
    }

    pub fn zero_params(&self) -> Parameters {
        let mut params = self.init_params(0);
        for e in params.iter_mut() {
            e.tensor.data_mut().fill(0.0);
        }
        params
    }

    fn check_params(&self, params: &Parameters) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, found {}",
                self.specs.len(),
                params.len()
            )));
        }
        for (spec, e) in self.specs.iter().zip(params.iter()) {
            if spec.name != e.name || spec.shape != e.tensor.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` {:?} does not match layout `{}` {:?}",
                    e.name,
                    e.tensor.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite {
                what: "parameter",
                name: name.to_string(),
            });
        }
        Ok(())
    }

    fn check_input(&self, input: &DenoiserInput<'_>) -> Result<()> {
        input.validate()?;
        self.config.check_shape(input.xt.shape())
    }

    fn volume_tensor(v: &Volume) -> Tensor {
        let [d, h, w] = v.shape();
        Tensor::new(vec![1, d, h, w], v.voxels().to_vec()).expect("volume tensor")
    }

    fn stem(&self, tape: &mut Tape, p: &[Var], input: &DenoiserInput<'_>) -> StemVars {
        let xt = tape.constant(Self::volume_tensor(input.xt));
        let src = tape.constant(Self::volume_tensor(input.source));
        let emb = sinusoidal_embedding(input.delta, self.config.delta_embed_dim);
        let emb = tape.constant(Tensor::new(vec![emb.len()], emb).expect("embedding"));

        let image = tape.conv3d(xt, p[self.stem_x.weight], p[self.stem_x.bias]);
        let source = tape.conv3d(src, p[self.stem_source.weight], p[self.stem_source.bias]);
        let delta = tape.linear(emb, p[self.stem_delta.weight], p[self.stem_delta.bias]);
        let sum = tape.add(image, source);
        let fused = tape.add_channel_bias(sum, delta);
        StemVars {
            image,
            source,
            delta,
            fused,
        }
    }

    fn res_block(&self, tape: &mut Tape, p: &[Var], blk: &ResBlock, x: Var, temb: Var) -> Var {
        let g = self.config.groups_for_norm;
        let h = tape.group_norm(x, p[blk.norm1.scale], p[blk.norm1.shift], g);
        let h = tape.silu(h);
        let h = tape.conv3d(h, p[blk.conv1.weight], p[blk.conv1.bias]);
        let tb = tape.linear(temb, p[blk.time.weight], p[blk.time.bias]);
        let h = tape.add_channel_bias(h, tb);
        let h = tape.group_norm(h, p[blk.norm2.scale], p[blk.norm2.shift], g);
        let h = tape.silu(h);
        let h = tape.conv3d(h, p[blk.conv2.weight], p[blk.conv2.bias]);
        let skip = match blk.skip {
            Some(s) => tape.conv3d(x, p[s.weight], p[s.bias]),
            None => x,
        };
        tape.add(skip, h)
    }

    /// Single-head self-attention over all spatial positions, residual.
    fn attention(&self, tape: &mut Tape, p: &[Var], blk: &Attention, x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let c = shape[0];
        let n: usize = shape[1..].iter().product();
        let h = tape.group_norm(
            x,
            p[blk.norm.scale],
            p[blk.norm.shift],
            self.config.groups_for_norm,
        );
        let q = tape.conv3d(h, p[blk.query.weight], p[blk.query.bias]);
        let k = tape.conv3d(h, p[blk.key.weight], p[blk.key.bias]);
        let v = tape.conv3d(h, p[blk.value.weight], p[blk.value.bias]);
        let q = tape.reshape(q, vec![c, n]);
        let k = tape.reshape(k, vec![c, n]);
        let v = tape.reshape(v, vec![c, n]);
        let scores = tape.matmul(q, true, k, false);
        let scores = tape.scale(scores, 1.0 / (c as f64).sqrt());
        let weights = tape.softmax_rows(scores);
        let o = tape.matmul(v, false, weights, true);
        let o = tape.reshape(o, shape);
        let o = tape.conv3d(o, p[blk.proj.weight], p[blk.proj.bias]);
        tape.add(x, o)
    }

    fn build(&self, tape: &mut Tape, p: &[Var], input: &DenoiserInput<'_>) -> Var {
        let stem = self.stem(tape, p, input);

        let t_emb = sinusoidal_embedding(input.t as f64, self.config.time_embed_dim);
        let t_emb = tape.constant(Tensor::new(vec![t_emb.len()], t_emb).expect("embedding"));
        let temb = tape.linear(t_emb, p[self.time_fc1.weight], p[self.time_fc1.bias]);
        let temb = tape.silu(temb);
        let temb = tape.linear(temb, p[self.time_fc2.weight], p[self.time_fc2.bias]);
        let temb = tape.silu(temb);

        let mut h = stem.fused;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (l, level) in self.encoder.iter().enumerate() {
            h = self.res_block(tape, p, &level.res, h, temb);
            if let Some(a) = &level.attn {
                h = self.attention(tape, p, a, h);
            }
            skips.push(h);
            if l + 1 < self.encoder.len() {
                h = tape.avg_pool2(h);
            }
        }
        h = self.res_block(tape, p, &self.middle, h, temb);
        let levels = self.decoder.len();
        for (i, level) in self.decoder.iter().enumerate() {
            let l = levels - 1 - i;
            h = tape.concat(h, skips[l]);
            h = self.res_block(tape, p, &level.res, h, temb);
            if let Some(a) = &level.attn {
                h = self.attention(tape, p, a, h);
            }
            if l > 0 {
                h = tape.upsample2(h);
            }
        }
        let h = tape.group_norm(
            h,
            p[self.out_norm.scale],
            p[self.out_norm.shift],
            self.config.groups_for_norm,
        );
        let h = tape.silu(h);
        tape.conv3d(h, p[self.out_conv.weight], p[self.out_conv.bias])
    }

    fn param_vars(tape: &mut Tape, params: &Parameters) -> Vec<Var> {
        params
            .iter()
            .enumerate()
            .map(|(i, e)| tape.param(i, e.tensor.clone()))
            .collect()
    }

    /// Records a forward pass that can later be differentiated.
    pub fn trace<'p>(&self, params: &'p Parameters, input: &DenoiserInput<'_>) -> Result<Trace<'p>> {
        self.check_params(params)?;
        self.check_input(input)?;
        let mut tape = Tape::new();
        let p = Self::param_vars(&mut tape, params);
        let output = self.build(&mut tape, &p, input);
        Ok(Trace {
            tape,
            output,
            params,
            shape: input.xt.shape(),
        })
    }

    /// Predicted noise, same shape as `input.xt`.
    pub fn forward(&self, params: &Parameters, input: &DenoiserInput<'_>) -> Result<Volume> {
        Ok(self.trace(params, input)?.output())
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the predicted noise.
    pub fn backward(
        &self,
        params: &Parameters,
        input: &DenoiserInput<'_>,
        output_gradient: &Volume,
    ) -> Result<Gradients> {
        self.trace(params, input)?.backward(output_gradient)
    }

    /// The three conditioning branches and their sum.
    pub fn stem_outputs(&self, params: &Parameters, input: &DenoiserInput<'_>) -> Result<StemOutputs> {
        self.check_params(params)?;
        self.check_input(input)?;
        let mut tape = Tape::new();
        let p = Self::param_vars(&mut tape, params);
        let s = self.stem(&mut tape, &p, input);
        Ok(StemOutputs {
            image: tape.value(s.image).clone(),
            source: tape.value(s.source).clone(),
            delta: tape.value(s.delta).clone(),
            fused: tape.value(s.fused).clone(),
        })
    }
}

/// A recorded forward pass.
pub struct Trace<'p> {
    tape: Tape,
    output: Var,
    params: &'p Parameters,
    shape: [usize; 3],
}

impl Trace<'_> {
    pub fn output(&self) -> Volume {
        Volume::new(self.shape, self.tape.value(self.output).data().to_vec()).expect("output shape")
    }

    pub fn backward(&self, output_gradient: &Volume) -> Result<Gradients> {
        output_gradient.ensure_same_shape(self.shape)?;
        let seed = Tensor::new(
            self.tape.value(self.output).shape().to_vec(),
            output_gradient.voxels().to_vec(),
        )?;
        let mut grads = self.params.zeros_like();
        for (i, g) in self.tape.backward(self.output, seed) {
            grads.entry_mut(i).tensor = g;
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                name: name.to_string(),
            });
        }
        Ok(grads)
    }
}

/// A UNet bound to a set of weights.
#[derive(Debug, Clone)]
pub struct NeuralDenoiser {
    pub unet: UNet,
    pub params: Parameters,
}

impl NeuralDenoiser {
    pub fn new(unet: UNet, params: Parameters) -> Result<Self> {
        unet.check_params(&params)?;
        Ok(Self { unet, params })
    }
}

impl Denoiser for NeuralDenoiser {
    fn predict_noise(&self, input: &DenoiserInput<'_>) -> Result<Volume> {
        self.unet.forward(&self.params, input)
    }
}
