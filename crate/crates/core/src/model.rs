//! OG-Net assembly: Omni-scale modules, pooling head and identity classifier.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{DEFAULT_K, GROUPING_RATES};
use crate::layers::{
    Aggregation, BatchNorm, GraphKeys, Linear, ModuleConfig, ModuleTrace, OmniScaleModule,
    Positions,
};
use crate::params::{BnId, Forward, ParamStore};
use crate::tensor::{read_checkpoint, write_checkpoint, BatchStats, Checkpoint, Entry, Mode, Tape, Tensor, Var};

/// Point counts after each downsampling stage at the reference input size.
pub const POINT_SCHEDULE: [usize; 4] = [768, 384, 192, 96];
pub const EMBEDDING_DIM: usize = 512;
pub const DROPOUT_P: f64 = 0.7;
/// Input channels per point: xyz then rgb.
pub const INPUT_CHANNELS: usize = 6;
const CLASSIFIER_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Ogn,
    OgnSmall,
    OgnDeep,
}

impl Variant {
    pub fn channels(self) -> Vec<usize> {
        match self {
            Variant::Ogn => vec![64, 128, 256, 512],
            Variant::OgnSmall => vec![48, 96, 192, 384],
            Variant::OgnDeep => vec![48, 96, 96, 192, 192, 384, 384],
        }
    }

    /// Which modules downsample. Deep interleaves width-preserving
    /// shortcut modules after every stage but the first.
    pub fn downsamples(self) -> Vec<bool> {
        match self {
            Variant::Ogn | Variant::OgnSmall => vec![true; 4],
            Variant::OgnDeep => vec![true, true, false, true, false, true, false],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ogn => "ogn",
            Variant::OgnSmall => "ogn_small",
            Variant::OgnDeep => "ogn_deep",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ogn" => Ok(Variant::Ogn),
            "ogn_small" => Ok(Variant::OgnSmall),
            "ogn_deep" => Ok(Variant::OgnDeep),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OgNetConfig {
    pub variant: Variant,
    pub channel_schedule: Vec<usize>,
    /// One flag per module.
    pub downsample: Vec<bool>,
    /// One target per downsampling module, strictly decreasing.
    pub point_schedule: Vec<usize>,
    pub k: usize,
    pub rates: Vec<usize>,
    /// Residual connection on width-preserving modules.
    pub shortcut: bool,
    pub dropout_p: f64,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub aggregation: Aggregation,
    pub use_se: bool,
    /// `false` swaps every graph convolution for a per-point linear layer.
    pub use_graph: bool,
    /// Key space of the final module's graph.
    pub last_graph: GraphKeys,
    pub no_rgb: bool,
}

impl OgNetConfig {
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        Self {
            variant,
            channel_schedule: variant.channels(),
            downsample: variant.downsamples(),
            point_schedule: POINT_SCHEDULE.to_vec(),
            k: DEFAULT_K,
            rates: GROUPING_RATES.to_vec(),
            shortcut: variant == Variant::OgnDeep,
            dropout_p: DROPOUT_P,
            embedding_dim: EMBEDDING_DIM,
            num_classes,
            aggregation: Aggregation::Sum,
            use_se: true,
            use_graph: true,
            last_graph: GraphKeys::AppearancePosition,
            no_rgb: false,
        }
    }

    /// Rescales the point schedule to an input of `m` points, keeping the
    /// reference ratio `768 / 4096` for the first stage.
    pub fn scaled_points(mut self, m: usize) -> Self {
        self.point_schedule = POINT_SCHEDULE
            .iter()
            .map(|&p| (p * m / 4096).max(1))
            .collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channel_schedule.is_empty() || self.channel_schedule.len() != self.downsample.len() {
            return bad(format!(
                "{} channel entries for {} modules",
                self.channel_schedule.len(),
                self.downsample.len()
            ));
        }
        let downs = self.downsample.iter().filter(|&&d| d).count();
        if downs != self.point_schedule.len() {
            return bad(format!(
                "{} point targets for {downs} downsampling modules",
                self.point_schedule.len()
            ));
        }
        if self.point_schedule.windows(2).any(|w| w[0] <= w[1]) || self.point_schedule.contains(&0) {
            return bad(format!("point schedule {:?} is not strictly decreasing", self.point_schedule));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.rates.is_empty() || self.rates.contains(&0) {
            return bad(format!("bad grouping rates {:?}", self.rates));
        }
        if self.embedding_dim == 0 {
            return bad("embedding width must be >= 1".into());
        }
        Ok(())
    }

    /// `key=value` lines, parsed back by [`OgNetConfig::from_text`].
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let flags = self
            .downsample
            .iter()
            .map(|&d| if d { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(",");
        let last = match self.last_graph {
            GraphKeys::Position => "position",
            GraphKeys::AppearancePosition => "appearance_position",
        };
        format!(
            "variant={}\nchannels={}\ndownsample={}\npoints={}\nk={}\nrates={}\nshortcut={}\n\
             dropout={}\nembedding_dim={}\nnum_classes={}\naggregation={}\nse={}\ngraph={}\n\
             last_graph={}\nno_rgb={}\n",
            self.variant,
            list(&self.channel_schedule),
            flags,
            list(&self.point_schedule),
            self.k,
            list(&self.rates),
            self.shortcut,
            self.dropout_p,
            self.embedding_dim,
            self.num_classes,
            self.aggregation.as_str(),
            self.use_se,
            self.use_graph,
            last,
            self.no_rgb,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg: Option<Self> = None;
        let mut pairs = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            pairs.push((key.trim(), value.trim()));
        }
        for (key, value) in &pairs {
            if *key == "variant" {
                cfg = Some(Self::new(value.parse()?, 2));
            }
        }
        let mut cfg = cfg.ok_or_else(|| Error::Config("missing variant".into()))?;
        for (key, value) in pairs {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|s| num(key, s.trim())).collect()
        }
        match key {
            "variant" => {
                let v: Variant = value.parse()?;
                if v != self.variant {
                    let classes = self.num_classes;
                    *self = Self::new(v, classes);
                }
            }
            "channels" => self.channel_schedule = list(key, value)?,
            "downsample" => {
                self.downsample = value
                    .split(',')
                    .map(|s| match s.trim() {
                        "1" | "true" => Ok(true),
                        "0" | "false" => Ok(false),
                        o => Err(Error::Config(format!("bad downsample flag {o:?}"))),
                    })
                    .collect::<Result<_>>()?
            }
            "points" => self.point_schedule = list(key, value)?,
            "k" => self.k = num(key, value)?,
            "rates" => self.rates = list(key, value)?,
            "shortcut" => self.shortcut = num(key, value)?,
            "dropout" => self.dropout_p = num(key, value)?,
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "aggregation" => self.aggregation = value.parse()?,
            "se" => self.use_se = num(key, value)?,
            "graph" => self.use_graph = num(key, value)?,
            "last_graph" => {
                self.last_graph = match value {
                    "position" => GraphKeys::Position,
                    "appearance_position" => GraphKeys::AppearancePosition,
                    o => return Err(Error::Config(format!("unknown last_graph {o:?}"))),
                }
            }
            "no_rgb" => self.no_rgb = num(key, value)?,
            other => return Err(Error::Config(format!("unknown model key {other:?}"))),
        }
        Ok(())
    }

    fn module_configs(&self) -> Vec<ModuleConfig> {
        let mut c_in = 3;
        let mut targets = self.point_schedule.iter();
        let last = self.channel_schedule.len() - 1;
        self.channel_schedule
            .iter()
            .zip(&self.downsample)
            .enumerate()
            .map(|(i, (&c_out, &down))| {
                let cfg = ModuleConfig {
                    c_in,
                    c_out,
                    target: if down { targets.next().copied() } else { None },
                    k: self.k,
                    rates: self.rates.clone(),
                    shortcut: self.shortcut && !down && c_in == c_out,
                    keys: if i == last { self.last_graph } else { GraphKeys::Position },
                    aggregation: self.aggregation,
                    use_graph: self.use_graph,
                    use_se: self.use_se,
                };
                c_in = c_out;
                cfg
            })
            .collect()
    }
}

/// Result of one forward pass recorded on a tape.
pub struct ForwardOutput {
    pub logits: Var,
    /// Post-BN embedding, before dropout and the classifier.
    pub embedding: Var,
    /// Max-pool and mean-pool concatenation.
    pub pooled: Var,
    pub trace: Vec<ModuleTrace>,
    pub bn_updates: Vec<(BnId, BatchStats)>,
    /// Parameter leaves aligned with [`OgNet::params`].
    pub param_vars: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct OgNet {
    config: OgNetConfig,
    store: ParamStore,
    modules: Vec<OmniScaleModule>,
    head: Linear,
    head_bn: BatchNorm,
    classifier: Linear,
}

impl OgNet {
    pub fn build(variant: Variant, num_classes: usize, seed: u64) -> Result<Self> {
        Self::from_config(OgNetConfig::new(variant, num_classes), seed)
    }

    pub fn from_config(config: OgNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let modules = config
            .module_configs()
            .into_iter()
            .enumerate()
            .map(|(i, mc)| OmniScaleModule::new(&mut store, &format!("module{i}"), mc, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let width = 2 * config.channel_schedule.last().unwrap();
        let head = Linear::new(&mut store, "head.fc", width, config.embedding_dim, true, &mut rng);
        let head_bn = BatchNorm::new(&mut store, "head.bn", config.embedding_dim);
        let classifier = Linear::with_std(
            &mut store,
            "classifier",
            config.embedding_dim,
            config.num_classes,
            CLASSIFIER_STD,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            modules,
            head,
            head_bn,
            classifier,
        })
    }

    pub fn config(&self) -> &OgNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn modules(&self) -> &[OmniScaleModule] {
        &self.modules
    }

    /// All trainable scalars, BN running statistics excluded.
    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    /// Trainable scalars on the embedding path (classifier excluded).
    pub fn count_embedding_parameters(&self) -> usize {
        let classifier = self.config.embedding_dim * self.config.num_classes + self.config.num_classes;
        self.store.count() - classifier
    }

    /// Smallest input size the point schedule accepts.
    pub fn min_points(&self) -> usize {
        self.config.point_schedule.first().copied().unwrap_or(1).max(2)
    }

    /// Splits a `[n, m, 6]` batch into positions and the 3-channel input feature.
    fn split_input(&self, input: &Tensor) -> Result<(Positions, Tensor)> {
        let shape = input.shape();
        if shape.len() != 3 || shape[2] != INPUT_CHANNELS {
            return Err(Error::Shape(format!("expected [n, m, 6] input, got {shape:?}")));
        }
        let (n, m) = (shape[0], shape[1]);
        if m < self.min_points() {
            return Err(Error::Shape(format!(
                "{m} points per cloud, schedule needs at least {}",
                self.min_points()
            )));
        }
        let data = input.data();
        let mut xyz = Vec::with_capacity(n * m);
        let mut feat = Vec::with_capacity(n * m * 3);
        for row in data.chunks_exact(INPUT_CHANNELS) {
            xyz.push([row[0], row[1], row[2]]);
            if self.config.no_rgb {
                feat.extend_from_slice(&row[..3]);
            } else {
                feat.extend_from_slice(&row[3..6]);
            }
        }
        Ok((Positions::new(n, m, xyz)?, Tensor::new(vec![n * m, 3], feat)?))
    }

    /// Records a full forward pass on `tape`. `rng` drives dropout in train mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let vars = self.store.bind(tape);
        self.forward_with(tape, vars, input, mode, rng)
    }

    /// Like [`OgNet::forward`] with parameter leaves already on the tape.
    pub fn forward_with<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        param_vars: Vec<Var>,
        input: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let (mut pos, feat) = self.split_input(input)?;
        let n = pos.n;
        let mut fx = Forward::with_vars(tape, param_vars, mode);
        let mut x = fx.tape.constant(feat);
        let mut trace = Vec::with_capacity(self.modules.len());
        for module in &self.modules {
            let (y, p, t) = module.forward(&mut fx, &self.store, x, &pos)?;
            x = y;
            pos = p;
            trace.push(t);
        }
        let c = fx.tape.value(x).last_dim();
        let grouped = fx.tape.reshape(x, &[n, pos.m, c])?;
        let max = fx.tape.max_axis(grouped, 1)?;
        let mean = fx.tape.mean_axis(grouped, 1)?;
        let pooled = fx.tape.concat(&[max, mean], 1)?;
        let h = self.head.forward(&mut fx, pooled)?;
        let embedding = self.head_bn.forward(&mut fx, &self.store, h)?;
        let dropped = fx.tape.dropout(embedding, self.config.dropout_p, mode, rng)?;
        let logits = self.classifier.forward(&mut fx, dropped)?;
        let (vars, bn_updates) = fx.finish();
        Ok(ForwardOutput {
            logits,
            embedding,
            pooled,
            trace,
            bn_updates,
            param_vars: vars,
        })
    }

    /// Eval-mode logits as an `[n, K]` tensor.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_constant(&mut tape, input, &mut rng)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Eval-mode `[n, 512]` embedding: post-BN, before dropout and classifier.
    pub fn extract_embedding(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_constant(&mut tape, input, &mut rng)?;
        Ok(tape.value(out.embedding).clone())
    }

    fn forward_constant(&self, tape: &mut Tape, input: &Tensor, rng: &mut ChaCha8Rng) -> Result<ForwardOutput> {
        let vars = self
            .store
            .tensors()
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        self.forward_with(tape, vars, input, Mode::Eval, rng)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        ckpt.push(Entry::from_bytes("config", self.config.to_text().as_bytes()));
        self.store.to_checkpoint(&mut ckpt);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let entry = ckpt
            .get("config")
            .ok_or_else(|| Error::Config("checkpoint has no config entry".into()))?;
        let text = std::str::from_utf8(&entry.payload)
            .map_err(|_| Error::Config("checkpoint config is not UTF-8".into()))?;
        let mut net = Self::from_config(OgNetConfig::from_text(text)?, 0)?;
        net.store.load_checkpoint(ckpt)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        write_checkpoint(&self.to_checkpoint(), file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint(BufReader::new(File::open(path)?))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Packs clouds of equal size into an `[n, m, 6]` input tensor.
pub fn batch_input(clouds: &[&crate::geometry::PointCloud]) -> Result<Tensor> {
    let m = clouds
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?
        .len();
    let mut data = Vec::with_capacity(clouds.len() * m * INPUT_CHANNELS);
    for cloud in clouds {
        if cloud.len() != m {
            return Err(Error::Shape(format!(
                "clouds in a batch must share a size, got {m} and {}",
                cloud.len()
            )));
        }
        for (p, c) in cloud.positions().iter().zip(cloud.colors()) {
            data.extend(p.iter().chain(c).map(|&v| v as f64));
        }
    }
    Tensor::new(vec![clouds.len(), m, INPUT_CHANNELS], data)
}
