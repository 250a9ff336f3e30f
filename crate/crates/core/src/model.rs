//! U-net encoder, detachable localizer head and decoder.
//!
//! A model starts life as a localizer (encoder + linear head regressing an
//! `(x, y)` centre). [`UNetModel::extend_to_unet`] drops the head, freezes
//! every encoder parameter and its batch-norm statistics, and attaches a
//! freshly initialized decoder. [`UNetModel::build_unet`] builds the same
//! full network from scratch with nothing frozen.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{format_err, param_err, shape_err, Error, Result};
use crate::tensor::{Graph, Mode, Parameter, RunningStats, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input side length; a power of two.
    pub input_size: usize,
    /// Number of 2×2 poolings in the encoder.
    pub levels: usize,
    /// Channels at level 0; doubled at every deeper level.
    pub base_filters: usize,
    /// Dropout after the second conv block of each encoder level.
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            levels: 4,
            base_filters: 16,
            dropout_rate: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 16 {
            return Err(param_err!("levels must be in 1..=16, got {}", self.levels));
        }
        if !self.input_size.is_power_of_two() || self.input_size < 1 << self.levels {
            return Err(param_err!(
                "input_size {} must be a power of two of at least 2^levels = {}",
                self.input_size,
                1usize << self.levels
            ));
        }
        if self.base_filters == 0 {
            return Err(param_err!("base_filters must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(param_err!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Side length of the pooled output of the deepest level.
    pub fn deepest_size(&self) -> usize {
        self.input_size >> self.levels
    }

    /// Flattened feature count fed to the localizer head.
    pub fn head_inputs(&self) -> usize {
        self.channels(self.levels - 1) * self.deepest_size() * self.deepest_size()
    }
}

/// Which stage of the two-phase scheme a model is in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Encoder + centroid regression head.
    Localizer,
    /// Frozen pretrained encoder + trainable decoder.
    Pretrained,
    /// Randomly initialized, fully trainable U-net.
    Baseline,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Localizer => 0,
            ModelKind::Pretrained => 1,
            ModelKind::Baseline => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Localizer),
            1 => Ok(ModelKind::Pretrained),
            2 => Ok(ModelKind::Baseline),
            t => Err(format_err!("unknown model kind tag {t}")),
        }
    }

    pub fn is_segmenter(self) -> bool {
        self != ModelKind::Localizer
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Localizer => "localizer",
            ModelKind::Pretrained => "pretrained",
            ModelKind::Baseline => "baseline",
        }
    }
}

/// conv 3×3 → batch norm → relu, as indices into the model's stores.
#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Decoder {
    /// Deepest level first.
    levels: Vec<[ConvBlock; 2]>,
    head: Dense,
}

#[derive(Debug, Clone)]
pub struct UNetModel {
    cfg: ModelConfig,
    kind: ModelKind,
    params: Vec<Parameter>,
    stats: Vec<(String, RunningStats)>,
    encoder: Vec<[ConvBlock; 2]>,
    /// Number of leading entries of `params` / `stats` owned by the encoder.
    encoder_params: usize,
    head: Option<Dense>,
    decoder: Option<Decoder>,
}

fn he_uniform<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

impl UNetModel {
    fn empty(cfg: &ModelConfig, kind: ModelKind) -> Result<Self> {
        cfg.validate()?;
        Ok(UNetModel {
            cfg: cfg.clone(),
            kind,
            params: Vec::new(),
            stats: Vec::new(),
            encoder: Vec::new(),
            encoder_params: 0,
            head: None,
            decoder: None,
        })
    }

    fn add_param(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    fn add_conv_block<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        cin: usize,
        cout: usize,
    ) -> ConvBlock {
        let weight = self.add_param(
            format!("{prefix}.weight"),
            he_uniform(rng, vec![cout, cin, 3, 3], cin * 9),
        );
        let bias = self.add_param(format!("{prefix}.bias"), Tensor::zeros(vec![cout]));
        let gamma = self.add_param(format!("{prefix}.bn.gamma"), Tensor::full(vec![cout], 1.0));
        let beta = self.add_param(format!("{prefix}.bn.beta"), Tensor::zeros(vec![cout]));
        self.stats
            .push((format!("{prefix}.bn"), RunningStats::new(cout)));
        ConvBlock {
            weight,
            bias,
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn add_encoder<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut cin = 1;
        for level in 0..self.cfg.levels {
            let c = self.cfg.channels(level);
            let a = self.add_conv_block(rng, &format!("enc{level}.conv0"), cin, c);
            let b = self.add_conv_block(rng, &format!("enc{level}.conv1"), c, c);
            self.encoder.push([a, b]);
            cin = c;
        }
        self.encoder_params = self.params.len();
    }

    fn add_head<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let f = self.cfg.head_inputs();
        let weight = self.add_param("head.weight".into(), he_uniform(rng, vec![2, f], f));
        let bias = self.add_param("head.bias".into(), Tensor::zeros(vec![2]));
        self.head = Some(Dense { weight, bias });
    }

    fn add_decoder<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let levels = self.cfg.levels;
        let mut below = self.cfg.channels(levels - 1);
        let mut blocks = Vec::with_capacity(levels);
        for level in (0..levels).rev() {
            let c = self.cfg.channels(level);
            let a = self.add_conv_block(rng, &format!("dec{level}.conv0"), c + below, c);
            let b = self.add_conv_block(rng, &format!("dec{level}.conv1"), c, c);
            blocks.push([a, b]);
            below = c;
        }
        let c0 = self.cfg.channels(0);
        let weight = self.add_param("out.weight".into(), he_uniform(rng, vec![1, c0, 1, 1], c0));
        let bias = self.add_param("out.bias".into(), Tensor::zeros(vec![1]));
        self.decoder = Some(Decoder {
            levels: blocks,
            head: Dense { weight, bias },
        });
    }

    /// Encoder plus a two-output linear head, He-uniform weights, zero
    /// biases, unit gamma and zero beta.
    pub fn build_localizer<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut m = Self::empty(cfg, ModelKind::Localizer)?;
        m.add_encoder(rng);
        m.add_head(rng);
        Ok(m)
    }

    /// Full U-net with random initialization and nothing frozen.
    pub fn build_unet<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut m = Self::empty(cfg, ModelKind::Baseline)?;
        m.add_encoder(rng);
        m.add_decoder(rng);
        Ok(m)
    }

    /// Drops the localizer head, freezes the encoder (weights, affine
    /// batch-norm parameters and running statistics) and attaches a new decoder.
    pub fn extend_to_unet<R: Rng + ?Sized>(mut self, rng: &mut R) -> Result<Self> {
        if self.kind != ModelKind::Localizer {
            return Err(Error::State(format!(
                "only a localizer can be extended, this model is {}",
                self.kind.name()
            )));
        }
        self.params.truncate(self.encoder_params);
        self.head = None;
        for p in &mut self.params {
            p.frozen = true;
            p.zero_grad();
        }
        self.kind = ModelKind::Pretrained;
        self.add_decoder(rng);
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Named batch-norm running statistics, in checkpoint order.
    pub fn running_stats(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params[..self.encoder_params]
            .iter()
            .map(|p| p.value.numel())
            .sum()
    }

    fn encoder_frozen(&self) -> bool {
        self.params[..self.encoder_params].iter().all(|p| p.frozen)
    }

    /// Adds the gradients a backward pass left in `g` onto the parameters.
    pub fn accumulate_grads(&mut self, g: &Graph) {
        for (id, grad) in g.param_grads() {
            for (a, b) in self.params[id].grad.data_mut().iter_mut().zip(grad) {
                *a += b;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let [_, c, h, w] = g.value(x).dims4()?;
        let s = self.cfg.input_size;
        if c != 1 || h != s || w != s {
            return Err(shape_err!(
                "model expects [B, 1, {s}, {s}] input, got {:?}",
                g.value(x).shape()
            ));
        }
        Ok(())
    }

    fn conv_block(&mut self, g: &mut Graph, x: Var, blk: ConvBlock, mode: Mode) -> Result<Var> {
        let w = g.param(blk.weight, &self.params[blk.weight]);
        let b = g.param(blk.bias, &self.params[blk.bias]);
        let gamma = g.param(blk.gamma, &self.params[blk.gamma]);
        let beta = g.param(blk.beta, &self.params[blk.beta]);
        let y = g.conv2d(x, w, b)?;
        let y = g.batch_norm(y, gamma, beta, &mut self.stats[blk.stats].1, mode)?;
        Ok(g.relu(y))
    }

    /// Runs the encoder; returns the per-level features before pooling (the
    /// skip tensors) and the pooled output of the deepest level. A frozen
    /// encoder always runs in eval mode.
    fn encode<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<Var>, Var)> {
        self.check_input(g, x)?;
        let mode = if self.encoder_frozen() {
            Mode::Eval
        } else {
            mode
        };
        let mut skips = Vec::with_capacity(self.cfg.levels);
        let mut cur = x;
        for level in 0..self.cfg.levels {
            let [a, b] = self.encoder[level];
            let y = self.conv_block(g, cur, a, mode)?;
            let y = self.conv_block(g, y, b, mode)?;
            let y = g.dropout(y, self.cfg.dropout_rate, mode, rng)?;
            skips.push(y);
            cur = g.maxpool2(y)?;
        }
        Ok((skips, cur))
    }

    /// Deepest pooled feature volume for `batch`, evaluated in eval mode.
    pub fn encoder_features(&mut self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let mut rng = idle_rng();
        let (_, deep) = self.encode(&mut g, x, Mode::Eval, &mut rng)?;
        Ok(g.value(deep).clone())
    }

    /// `[B, 1, S, S]` images to `[B, 2]` predicted `(x, y)` pixel coordinates.
    pub fn forward_localize<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let head = self.head.ok_or_else(|| {
            Error::State(format!("{} model has no localizer head", self.kind.name()))
        })?;
        let (_, deep) = self.encode(g, x, mode, rng)?;
        let flat = g.flatten(deep);
        let w = g.param(head.weight, &self.params[head.weight]);
        let b = g.param(head.bias, &self.params[head.bias]);
        g.linear(flat, w, b)
    }

    /// `[B, 1, S, S]` images to `[B, 1, S, S]` foreground probabilities.
    pub fn forward_segment<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let dec = self
            .decoder
            .clone()
            .ok_or_else(|| Error::State("model has not been extended to a U-net".into()))?;
        let (skips, deep) = self.encode(g, x, mode, rng)?;
        let mut cur = deep;
        for (blocks, skip) in dec.levels.iter().zip(skips.iter().rev()) {
            let up = g.upsample2(cur)?;
            let cat = g.concat_channels(*skip, up)?;
            let y = self.conv_block(g, cat, blocks[0], mode)?;
            cur = self.conv_block(g, y, blocks[1], mode)?;
        }
        let w = g.param(dec.head.weight, &self.params[dec.head.weight]);
        let b = g.param(dec.head.bias, &self.params[dec.head.bias]);
        let logits = g.conv1x1(cur, w, b)?;
        Ok(g.sigmoid(logits))
    }

    /// Eval-mode centroid predictions as a `[B, 2]` tensor.
    pub fn predict_centroids(&mut self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let mut rng = idle_rng();
        let y = self.forward_localize(&mut g, x, Mode::Eval, &mut rng)?;
        Ok(g.value(y).clone())
    }

    /// Eval-mode probability maps as a `[B, 1, S, S]` tensor.
    pub fn predict_probs(&mut self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let mut rng = idle_rng();
        let y = self.forward_segment(&mut g, x, Mode::Eval, &mut rng)?;
        Ok(g.value(y).clone())
    }

    /// Serializes the model; see [`UNetModel::from_bytes`] for the layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        for v in [self.cfg.input_size, self.cfg.levels, self.cfg.base_filters] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.cfg.dropout_rate.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_name(&mut out, &p.name);
            out.push(p.frozen as u8);
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.stats.len() as u32).to_le_bytes());
        for (name, st) in &self.stats {
            put_name(&mut out, name);
            out.extend_from_slice(&(st.mean.len() as u32).to_le_bytes());
            for v in st.mean.iter().chain(&st.var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Checkpoint layout, all integers and floats little-endian:
    ///
    /// ```text
    /// magic "DSEGCKPT" | version u32 | kind u8 (0 localizer, 1 pretrained, 2 baseline)
    /// input_size u32 | levels u32 | base_filters u32 | dropout_rate f64
    /// param count u32, then per parameter in build order:
    ///     name (u16 length + UTF-8) | frozen u8 | rank u8 | dims u32… | values f64…
    /// stats count u32, then per batch-norm layer in build order:
    ///     name (u16 length + UTF-8) | channels u32 | mean f64… | var f64…
    /// ```
    ///
    /// Build order is encoder levels shallow to deep (conv0, conv1; each
    /// weight, bias, gamma, beta), then the localizer head or the decoder
    /// levels deep to shallow followed by the 1×1 output conv.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(format_err!("not a model checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            ));
        }
        let kind = ModelKind::from_tag(r.u8()?)?;
        let cfg = ModelConfig {
            input_size: r.u32()? as usize,
            levels: r.u32()? as usize,
            base_filters: r.u32()? as usize,
            dropout_rate: r.f64()?,
        };
        cfg.validate()
            .map_err(|e| format_err!("checkpoint config invalid: {e}"))?;
        // Rebuild the skeleton, then overwrite every tensor.
        let mut rng = idle_rng();
        let mut m = match kind {
            ModelKind::Localizer => Self::build_localizer(&cfg, &mut rng)?,
            ModelKind::Baseline => Self::build_unet(&cfg, &mut rng)?,
            ModelKind::Pretrained => {
                Self::build_localizer(&cfg, &mut rng)?.extend_to_unet(&mut rng)?
            }
        };
        let n = r.u32()? as usize;
        if n != m.params.len() {
            return Err(format_err!(
                "checkpoint holds {n} parameters, a {} model has {}",
                kind.name(),
                m.params.len()
            ));
        }
        for p in &mut m.params {
            let name = r.name()?;
            if name != p.name {
                return Err(format_err!(
                    "expected parameter {:?}, found {name:?}",
                    p.name
                ));
            }
            p.frozen = match r.u8()? {
                0 => false,
                1 => true,
                f => return Err(format_err!("bad frozen flag {f} for {name}")),
            };
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != p.value.shape() {
                return Err(format_err!(
                    "parameter {name} has shape {dims:?}, expected {:?}",
                    p.value.shape()
                ));
            }
            for v in p.value.data_mut() {
                *v = r.f64()?;
            }
        }
        let ns = r.u32()? as usize;
        if ns != m.stats.len() {
            return Err(format_err!(
                "checkpoint holds {ns} batch-norm layers, expected {}",
                m.stats.len()
            ));
        }
        for (name, st) in &mut m.stats {
            let got = r.name()?;
            if &got != name {
                return Err(format_err!("expected stats {name:?}, found {got:?}"));
            }
            let c = r.u32()? as usize;
            if c != st.mean.len() {
                return Err(format_err!(
                    "stats {name} has {c} channels, expected {}",
                    st.mean.len()
                ));
            }
            for v in st.mean.iter_mut().chain(st.var.iter_mut()) {
                *v = r.f64()?;
            }
        }
        if r.pos != bytes.len() {
            return Err(format_err!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            ));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DSEGCKPT";
const CHECKPOINT_VERSION: u32 = 1;

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| format_err!("checkpoint truncated at byte {}", self.pos))?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn name(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| format_err!("parameter name is not UTF-8"))
    }
}

/// Placeholder generator for eval-mode passes (dropout is then the identity)
/// and for skeletons whose tensors are overwritten right away.
fn idle_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}
