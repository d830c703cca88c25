//! Architecture and training configuration, plus the flat `key = value`
//! config file format used by the CLI.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Scalar width used for a run: `f32` for training, `f64` for the
/// verification suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Which cost volumes the model builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeVariant {
    Cat,
    Gwc,
    GwcCat,
}

impl VolumeVariant {
    pub fn name(self) -> &'static str {
        match self {
            VolumeVariant::Cat => "cat",
            VolumeVariant::Gwc => "gwc",
            VolumeVariant::GwcCat => "gwc-cat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cat" => Ok(VolumeVariant::Cat),
            "gwc" => Ok(VolumeVariant::Gwc),
            "gwc-cat" | "gwccat" => Ok(VolumeVariant::GwcCat),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected cat, gwc or gwc-cat)"
            ))),
        }
    }
}

/// Feature-extractor stage widths derived from the unary channel count.
#[derive(Clone, Copy, Debug)]
pub struct StageWidths {
    pub stem: usize,
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
    pub s4: usize,
}

/// Scaled architecture hyperparameters.
#[derive(Clone, Debug)]
pub struct NetworkConfig {
    /// Unary feature channels Nc (concatenated stages 2-4).
    pub unary_channels: usize,
    /// Correlation groups Ng; each group owns `Nc / Ng` channels.
    pub gwc_groups: usize,
    /// Per-image channels after compression for the concatenation volume.
    pub concat_channels: usize,
    /// Maximum disparity in full-resolution pixels.
    pub d_max: usize,
    /// Channel width of the 3D aggregation trunk.
    pub base_3d_channels: usize,
    pub num_hourglasses: usize,
    /// Residual block counts of feature stages 1-4.
    pub blocks: [usize; 4],
    pub use_gwc_volume: bool,
    pub use_concat_volume: bool,
    /// Per-channel normalization applied to [0,1] images.
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl NetworkConfig {
    /// Desk-scale defaults: trains in minutes on a CPU while preserving
    /// every structural ratio of the full-scale network.
    pub fn desk() -> Self {
        NetworkConfig {
            unary_channels: 32,
            gwc_groups: 8,
            concat_channels: 4,
            d_max: 32,
            base_3d_channels: 8,
            num_hourglasses: 3,
            blocks: [1, 2, 1, 1],
            use_gwc_volume: true,
            use_concat_volume: true,
            norm_mean: 0.5,
            norm_std: 0.5,
        }
    }

    /// Full-scale layout: 320 unary channels, 40 groups of 8, a 24-channel
    /// concatenation volume and a 32-channel aggregation trunk with
    /// disparities up to 192.
    pub fn full_scale() -> Self {
        NetworkConfig {
            unary_channels: 320,
            gwc_groups: 40,
            concat_channels: 12,
            d_max: 192,
            base_3d_channels: 32,
            num_hourglasses: 3,
            blocks: [3, 16, 3, 3],
            use_gwc_volume: true,
            use_concat_volume: true,
            norm_mean: 0.5,
            norm_std: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unary_channels == 0 || self.base_3d_channels == 0 || self.num_hourglasses == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.d_max == 0 || self.d_max % 4 != 0 {
            return Err(Error::Config(format!(
                "d_max must be a positive multiple of 4, got {}",
                self.d_max
            )));
        }
        if !self.use_gwc_volume && !self.use_concat_volume {
            return Err(Error::Config(
                "at least one of use_gwc_volume / use_concat_volume must be set".into(),
            ));
        }
        if self.use_gwc_volume
            && (self.gwc_groups == 0 || self.unary_channels % self.gwc_groups != 0)
        {
            return Err(Error::Config(format!(
                "unary_channels {} must divide into gwc_groups {}",
                self.unary_channels, self.gwc_groups
            )));
        }
        if self.use_concat_volume && self.concat_channels == 0 {
            return Err(Error::Config("concat_channels must be positive".into()));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config("stage block counts must be positive".into()));
        }
        let w = self.stage_widths();
        if w.s2 == 0 {
            return Err(Error::Config(format!(
                "unary_channels {} too small to split across stages",
                self.unary_channels
            )));
        }
        Ok(())
    }

    /// Disparity levels of the quarter-resolution cost volume.
    pub fn d_levels(&self) -> usize {
        self.d_max / 4
    }

    /// Channel count of the volume handed to the aggregation network.
    pub fn volume_channels(&self) -> usize {
        let g = if self.use_gwc_volume { self.gwc_groups } else { 0 };
        let c = if self.use_concat_volume {
            2 * self.concat_channels
        } else {
            0
        };
        g + c
    }

    pub fn num_outputs(&self) -> usize {
        self.num_hourglasses + 1
    }

    /// Stage widths proportional to the full-scale 64/128/128 split of the
    /// 320 unary channels, with a 1/10-width stem floored at 8 channels so
    /// desk-scale extractors keep enough half-resolution capacity.
    pub fn stage_widths(&self) -> StageWidths {
        let nc = self.unary_channels;
        let s3 = 2 * nc / 5;
        let s4 = s3;
        let s2 = nc - s3 - s4;
        let stem = (nc / 10).max(8);
        StageWidths {
            stem,
            s1: stem,
            s2,
            s3,
            s4,
        }
    }

    /// Hidden width of the two-convolution compression head.
    pub fn compress_mid_channels(&self) -> usize {
        (2 * self.unary_channels / 5).max(self.concat_channels).max(1)
    }

    pub fn variant(&self) -> VolumeVariant {
        match (self.use_gwc_volume, self.use_concat_volume) {
            (true, true) => VolumeVariant::GwcCat,
            (true, false) => VolumeVariant::Gwc,
            _ => VolumeVariant::Cat,
        }
    }

    pub fn set_variant(&mut self, v: VolumeVariant) {
        self.use_gwc_volume = matches!(v, VolumeVariant::Gwc | VolumeVariant::GwcCat);
        self.use_concat_volume = matches!(v, VolumeVariant::Cat | VolumeVariant::GwcCat);
    }
}

/// Optimizer, loss and loop settings.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    /// Iteration indices after which the learning rate is divided by
    /// `lr_decay_factor`. Must be sorted ascending.
    pub lr_milestones: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Loss coefficients for output modules 0..=3.
    pub lambdas: Vec<f64>,
    pub seed: u64,
    pub precision: Precision,
    pub val_interval: usize,
    /// Stop as soon as validation EPE drops below this value.
    pub early_stop_epe: Option<f64>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 2,
            max_iters: 3000,
            lr_milestones: vec![1800, 2400, 2800],
            lr_decay_factor: 2.0,
            lambdas: vec![0.5, 0.5, 0.7, 1.0],
            seed: 0,
            precision: Precision::F32,
            val_interval: 250,
            early_stop_epe: None,
        }
    }

    pub fn validate(&self, num_outputs: usize) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !self.lr_milestones.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::Config(
                "lr_milestones must be sorted ascending".into(),
            ));
        }
        if self.lr_decay_factor <= 0.0 {
            return Err(Error::Config("lr_decay_factor must be positive".into()));
        }
        if self.lambdas.len() != num_outputs {
            return Err(Error::Config(format!(
                "lambdas has {} coefficients but the model has {} output modules",
                self.lambdas.len(),
                num_outputs
            )));
        }
        if self.lambdas.iter().any(|&l| l < 0.0) {
            return Err(Error::Config("lambdas must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.val_interval == 0 {
            return Err(Error::Config("batch_size and val_interval must be positive".into()));
        }
        Ok(())
    }
}

/// Settings for the channel-reduction sweep.
#[derive(Clone, Debug)]
pub struct SweepSettings {
    pub base_channels: Vec<usize>,
    pub variants: Vec<VolumeVariant>,
    pub train_samples: usize,
    pub val_samples: usize,
    pub height: usize,
    pub width: usize,
}

impl SweepSettings {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels.is_empty() || self.base_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("sweep base channels must be positive".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("sweep needs at least one variant".into()));
        }
        Ok(())
    }
}

/// One parsed config file: network plus training settings.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate(self.net.num_outputs())
    }
}

struct Reader {
    entries: HashMap<String, (usize, String)>,
}

impl Reader {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::ConfigParse {
                line: line_no,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), (line_no, value)).is_some() {
                return Err(Error::ConfigParse {
                    line: line_no,
                    msg: format!("duplicate key '{key}'"),
                });
            }
        }
        Ok(Reader { entries })
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn parse_value<T: std::str::FromStr>(key: &str, line: usize, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::ConfigParse {
            line,
            msg: format!("invalid value '{v}' for key '{key}'"),
        })
    }

    fn opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            Some((line, v)) => Ok(Some(Self::parse_value(key, line, &v)?)),
            None => Ok(None),
        }
    }

    fn req<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        match self.take(key) {
            Some((line, v)) => Self::parse_value(key, line, &v),
            None => Err(Error::Config(format!("missing required config key '{key}'"))),
        }
    }

    fn opt_list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.take(key) {
            Some((line, v)) => {
                let mut out = Vec::new();
                for item in v.split(',') {
                    out.push(Self::parse_value(key, line, item.trim())?);
                }
                Ok(Some(out))
            }
            None => Ok(None),
        }
    }

    fn opt_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.take(key) {
            Some((line, v)) => match v.as_str() {
                "true" | "1" | "yes" => Ok(Some(true)),
                "false" | "0" | "no" => Ok(Some(false)),
                other => Err(Error::ConfigParse {
                    line,
                    msg: format!("invalid boolean '{other}' for key '{key}'"),
                }),
            },
            None => Ok(None),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::ConfigParse {
                line,
                msg: format!("unknown config key '{key}'"),
            });
        }
        Ok(())
    }
}

fn read_run_config(r: &mut Reader) -> Result<RunConfig> {
    let mut net = NetworkConfig::desk();
    let mut train = TrainConfig::desk();

    // required keys
    net.d_max = r.req("d_max")?;
    train.max_iters = r.req("max_iters")?;
    train.lr = r.req("lr")?;
    train.batch_size = r.req("batch_size")?;
    train.seed = r.req("seed")?;

    // optional network keys
    if let Some(v) = r.opt("unary_channels")? {
        net.unary_channels = v;
    }
    if let Some(v) = r.opt("gwc_groups")? {
        net.gwc_groups = v;
    }
    if let Some(v) = r.opt("concat_channels")? {
        net.concat_channels = v;
    }
    if let Some(v) = r.opt("base_3d_channels")? {
        net.base_3d_channels = v;
    }
    if let Some(v) = r.opt("num_hourglasses")? {
        net.num_hourglasses = v;
    }
    if let Some(v) = r.opt_list::<usize>("blocks")? {
        if v.len() != 4 {
            return Err(Error::Config("blocks must list four stage counts".into()));
        }
        net.blocks = [v[0], v[1], v[2], v[3]];
    }
    if let Some(v) = r.opt_bool("use_gwc_volume")? {
        net.use_gwc_volume = v;
    }
    if let Some(v) = r.opt_bool("use_concat_volume")? {
        net.use_concat_volume = v;
    }
    if let Some(v) = r.opt("norm_mean")? {
        net.norm_mean = v;
    }
    if let Some(v) = r.opt("norm_std")? {
        net.norm_std = v;
    }

    // optional training keys
    if let Some(v) = r.opt("beta1")? {
        train.beta1 = v;
    }
    if let Some(v) = r.opt("beta2")? {
        train.beta2 = v;
    }
    if let Some(v) = r.opt("adam_eps")? {
        train.adam_eps = v;
    }
    if let Some(v) = r.opt_list::<usize>("lr_milestones")? {
        train.lr_milestones = v;
    }
    if let Some(v) = r.opt("lr_decay_factor")? {
        train.lr_decay_factor = v;
    }
    if let Some(v) = r.opt_list::<f64>("lambdas")? {
        train.lambdas = v;
    }
    if let Some(v) = r.opt::<String>("precision")? {
        train.precision = match v.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => {
                return Err(Error::Config(format!(
                    "precision must be f32 or f64, got '{other}'"
                )))
            }
        };
    }
    if let Some(v) = r.opt("val_interval")? {
        train.val_interval = v;
    }
    if let Some(v) = r.opt("early_stop_epe")? {
        train.early_stop_epe = Some(v);
    }

    Ok(RunConfig { net, train })
}

/// Parses a training config file.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut r = Reader::parse(text)?;
    let cfg = read_run_config(&mut r)?;
    r.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a sweep config file: the shared training budget plus `sweep_*` keys.
pub fn parse_sweep_config(text: &str) -> Result<(RunConfig, SweepSettings)> {
    let mut r = Reader::parse(text)?;
    let cfg = read_run_config(&mut r)?;
    let base_channels: Vec<usize> = r
        .opt_list("sweep_base_channels")?
        .ok_or_else(|| Error::Config("missing required config key 'sweep_base_channels'".into()))?;
    let variant_names: Vec<String> = r
        .opt_list("sweep_variants")?
        .ok_or_else(|| Error::Config("missing required config key 'sweep_variants'".into()))?;
    let variants = variant_names
        .iter()
        .map(|s| VolumeVariant::parse(s))
        .collect::<Result<Vec<_>>>()?;
    let settings = SweepSettings {
        base_channels,
        variants,
        train_samples: r.opt("sweep_train_samples")?.unwrap_or(16),
        val_samples: r.opt("sweep_val_samples")?.unwrap_or(6),
        height: r.opt("sweep_height")?.unwrap_or(32),
        width: r.opt("sweep_width")?.unwrap_or(64),
    };
    r.finish()?;
    cfg.validate()?;
    settings.validate()?;
    Ok((cfg, settings))
}
