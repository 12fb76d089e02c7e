//! The Stateformer layer, the layer stack, the direction head, and the
//! complete model from feature tensor to per-frame unit vectors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::bimamba::{BiMamba, SsmConfig};
use crate::error::{invalid, io_err, Error};
use crate::fa_block::{to_sequence, FaBlock, Frontend};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::numerics::{ParamId, ParamStore, Rng, Tensor, TensorError, TensorFile};
use crate::seconformer::{ConvModule, FfnExpand, FfnSqueeze, Mhsa, ShiftSpec};

/// Version of the model config text format and of checkpoint layouts.
pub const CONFIG_VERSION: u64 = 1;

/// Guard added under the square root when normalizing head outputs.
pub const HEAD_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct StateformerConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub shift: bool,
    pub dropout: f64,
    pub max_sources: usize,
    pub ssm_state: usize,
    pub ssm_expand: usize,
    pub ssm_conv: usize,
    pub frontend_channels: Vec<usize>,
    pub fa_reduction: usize,
    pub bins: usize,
    pub planes: usize,
    /// Length of the learned positional table; longer inputs are chunked.
    pub max_frames: usize,
    /// Use Bi-Mamba+ only in the first layer and attention/convolution only
    /// in the remaining layers.
    pub mamba_first_layer_only: bool,
    pub dytanh_alpha: f64,
}

impl StateformerConfig {
    /// D=96, four layers, four heads, shifted kernel 15.
    pub fn full() -> Self {
        StateformerConfig {
            d_model: 96,
            layers: 4,
            heads: 4,
            conv_kernel: 15,
            shift: true,
            dropout: 0.1,
            max_sources: 2,
            ssm_state: 16,
            ssm_expand: 2,
            ssm_conv: 4,
            frontend_channels: vec![32, 64, 128],
            fa_reduction: 4,
            bins: 256,
            planes: 4,
            max_frames: 512,
            mamba_first_layer_only: false,
            dytanh_alpha: 0.5,
        }
    }

    /// Small configuration for single-core training runs.
    pub fn desk() -> Self {
        StateformerConfig { d_model: 32, layers: 2, heads: 2, conv_kernel: 7, frontend_channels: vec![4, 8, 16], ..Self::full() }
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig { expand: self.ssm_expand, state: self.ssm_state, conv_kernel: self.ssm_conv, ..SsmConfig::new(self.d_model) }
    }

    pub fn shift_spec(&self) -> ShiftSpec {
        ShiftSpec { kernel: self.conv_kernel, enabled: self.shift }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |reason: String| Err(invalid("model config", reason));
        let d = self.d_model;
        if d == 0 || d % 8 != 0 {
            return bad(format!("d_model {d} must be a positive multiple of 8"));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return bad(format!("d_model {d} not divisible by {} heads", self.heads));
        }
        if self.layers == 0 {
            return bad("at least one layer is required".into());
        }
        if self.conv_kernel == 0 || self.ssm_conv == 0 || self.ssm_state == 0 || self.ssm_expand == 0 || self.fa_reduction == 0 {
            return bad("kernel, state, expansion and reduction sizes must be positive".into());
        }
        if self.max_sources != 2 {
            return bad(format!("max_sources must be 2, got {}", self.max_sources));
        }
        if self.frontend_channels.is_empty() || self.frontend_channels.contains(&0) {
            return bad("frontend_channels must be a non-empty list of positive sizes".into());
        }
        let pool = crate::fa_block::POOL.pow(self.frontend_channels.len() as u32);
        if self.bins % pool != 0 {
            return bad(format!("{} bins not divisible by total pooling {pool}", self.bins));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.dytanh_alpha > 0.0) || self.max_frames == 0 {
            return bad("dropout must be in [0, 1), dytanh_alpha positive, max_frames positive".into());
        }
        Ok(())
    }

    /// Flattened width entering the sequence projection.
    pub fn flat_width(&self) -> usize {
        self.frontend_channels.last().copied().unwrap_or(0) * self.bins / crate::fa_block::POOL.pow(self.frontend_channels.len() as u32)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let list = self.frontend_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("d_model", self.d_model.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("shift", self.shift.to_string()),
            ("dropout", self.dropout.to_string()),
            ("max_sources", self.max_sources.to_string()),
            ("ssm_state", self.ssm_state.to_string()),
            ("ssm_expand", self.ssm_expand.to_string()),
            ("ssm_conv", self.ssm_conv.to_string()),
            ("frontend_channels", list),
            ("fa_reduction", self.fa_reduction.to_string()),
            ("bins", self.bins.to_string()),
            ("planes", self.planes.to_string()),
            ("max_frames", self.max_frames.to_string()),
            ("mamba_first_layer_only", self.mamba_first_layer_only.to_string()),
            ("dytanh_alpha", self.dytanh_alpha.to_string()),
        ]
    }

    /// `key = value` text, one entry per line, led by `format_version`.
    pub fn to_text(&self) -> String {
        let mut s = format!("format_version = {CONFIG_VERSION}\n");
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    fn from_map(map: &BTreeMap<String, String>, what: &str) -> Result<Self, Error> {
        let malformed = |reason: String| Error::Format { what: what.to_string(), reason };
        let version = map.get("format_version").ok_or_else(|| malformed("missing format_version".into()))?;
        let version: u64 = version.parse().map_err(|_| malformed(format!("format_version {version:?} is not an integer")))?;
        if version != CONFIG_VERSION {
            return Err(Error::Version { what: what.to_string(), found: version, expected: CONFIG_VERSION });
        }
        let mut cfg = StateformerConfig::full();
        for (k, v) in map {
            let num = || v.parse::<usize>().map_err(|_| malformed(format!("{k} = {v:?} is not a non-negative integer")));
            let float = || v.parse::<f64>().map_err(|_| malformed(format!("{k} = {v:?} is not a number")));
            let flag = || v.parse::<bool>().map_err(|_| malformed(format!("{k} = {v:?} is not true/false")));
            match k.as_str() {
                "format_version" => {}
                "d_model" => cfg.d_model = num()?,
                "layers" => cfg.layers = num()?,
                "heads" => cfg.heads = num()?,
                "conv_kernel" => cfg.conv_kernel = num()?,
                "shift" => cfg.shift = flag()?,
                "dropout" => cfg.dropout = float()?,
                "max_sources" => cfg.max_sources = num()?,
                "ssm_state" => cfg.ssm_state = num()?,
                "ssm_expand" => cfg.ssm_expand = num()?,
                "ssm_conv" => cfg.ssm_conv = num()?,
                "frontend_channels" => {
                    cfg.frontend_channels = v
                        .split(',')
                        .map(|p| p.trim().parse::<usize>().map_err(|_| malformed(format!("bad channel list {v:?}"))))
                        .collect::<Result<_, _>>()?
                }
                "fa_reduction" => cfg.fa_reduction = num()?,
                "bins" => cfg.bins = num()?,
                "planes" => cfg.planes = num()?,
                "max_frames" => cfg.max_frames = num()?,
                "mamba_first_layer_only" => cfg.mamba_first_layer_only = flag()?,
                "dytanh_alpha" => cfg.dytanh_alpha = float()?,
                other => return Err(malformed(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not given
    /// keep their full-configuration defaults.
    pub fn from_text(text: &str) -> Result<Self, Error> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                what: "model config".into(),
                reason: format!("line {}: expected key = value", i + 1),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_map(&map, "model config")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| io_err(path, e))?)
    }
}

/// `γ ⊙ tanh(α x) + β` with a scalar `α`.
#[derive(Clone, Debug)]
pub struct DyTanh {
    pub alpha: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl DyTanh {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, alpha: f64) -> Result<Self, TensorError> {
        Ok(DyTanh {
            alpha: store.add(format!("{name}.alpha"), &[1], vec![alpha])?,
            gamma: store.add(format!("{name}.gamma"), &[d], vec![1.0; d])?,
            beta: store.add(format!("{name}.beta"), &[d], vec![0.0; d])?,
        })
    }

    pub fn param_count(d: usize) -> usize {
        1 + 2 * d
    }

    pub fn forward(&self, ctx: &Ctx, x: &Tensor) -> Result<Tensor, TensorError> {
        x.mul(ctx.p(self.alpha))?.tanh().mul(ctx.p(self.gamma))?.add(ctx.p(self.beta))
    }
}

/// The sub-transforms a layer composes. Absent stages are skipped.
pub trait LayerStages {
    fn ffn_in(&self, z: &Tensor) -> Result<Tensor, TensorError>;
    fn mamba(&self, z: &Tensor) -> Option<Result<Tensor, TensorError>>;
    fn dytanh(&self, z: &Tensor) -> Option<Result<Tensor, TensorError>>;
    fn ffn_squeeze(&self, z: &Tensor) -> Result<Tensor, TensorError>;
    fn mhsa(&self, z: &Tensor) -> Option<Result<Tensor, TensorError>>;
    fn conv(&self, z: &Tensor) -> Option<Result<Tensor, TensorError>>;
    fn ffn_out(&self, z: &Tensor) -> Result<Tensor, TensorError>;
    fn norm(&self, z: &Tensor) -> Result<Tensor, TensorError>;
}

/// Weight of the residual FFN branches.
pub const FFN_RESIDUAL: f64 = 0.5;

/// The layer pipeline with residual FFN weight `half`:
///
/// ```text
/// Ẑ   = Z + h·FFN_E(Z)
/// Z'  = DyTanh(Ẑ + BiMamba(Ẑ))
/// Z'' = Z' + h·FFN_S(Z')
/// Z''' = Z'' + MHSA(Z'')
/// Ż   = Z''' + Conv(Z''')
/// Z̈   = Ż + h·FFN_E(Ż)
/// out = LN(Z̈)
/// ```
pub fn compose_with(stages: &impl LayerStages, z: &Tensor, half: f64) -> Result<Tensor, TensorError> {
    let z1 = z.add(&stages.ffn_in(z)?.scale(half))?;
    let z2 = match stages.mamba(&z1) {
        Some(m) => {
            let s = z1.add(&m?)?;
            stages.dytanh(&s).unwrap_or(Ok(s))?
        }
        None => z1,
    };
    let z3 = z2.add(&stages.ffn_squeeze(&z2)?.scale(half))?;
    let z4 = match stages.mhsa(&z3) {
        Some(a) => z3.add(&a?)?,
        None => z3,
    };
    let z5 = match stages.conv(&z4) {
        Some(c) => z4.add(&c?)?,
        None => z4,
    };
    let z6 = z5.add(&stages.ffn_out(&z5)?.scale(half))?;
    stages.norm(&z6)
}

#[derive(Clone, Debug)]
pub struct StateformerLayer {
    pub ffn_in: FfnExpand,
    pub mamba: Option<BiMamba>,
    pub dytanh: Option<DyTanh>,
    pub ffn_squeeze: FfnSqueeze,
    pub mhsa: Option<Mhsa>,
    pub conv: Option<ConvModule>,
    pub ffn_out: FfnExpand,
    pub norm: LayerNorm,
}

impl StateformerLayer {
    /// `index` selects the layer role when `mamba_first_layer_only` is set.
    pub fn new(store: &mut ParamStore, name: &str, cfg: &StateformerConfig, index: usize, rng: &mut Rng) -> Result<Self, TensorError> {
        let d = cfg.d_model;
        let (with_mamba, with_attention) = if cfg.mamba_first_layer_only { (index == 0, index != 0) } else { (true, true) };
        let ffn_in = FfnExpand::new(store, &format!("{name}.ffn_in"), d, cfg.dropout, rng)?;
        let (mamba, dytanh) = if with_mamba {
            (
                Some(BiMamba::new(store, &format!("{name}.mamba"), cfg.ssm(), rng)?),
                Some(DyTanh::new(store, &format!("{name}.dytanh"), d, cfg.dytanh_alpha)?),
            )
        } else {
            (None, None)
        };
        let ffn_squeeze = FfnSqueeze::new(store, &format!("{name}.ffn_squeeze"), d, rng)?;
        let (mhsa, conv) = if with_attention {
            (
                Some(Mhsa::new(store, &format!("{name}.mhsa"), d, cfg.heads, rng)?),
                Some(ConvModule::new(store, &format!("{name}.conv"), d, cfg.shift_spec(), cfg.dropout, rng)?),
            )
        } else {
            (None, None)
        };
        let ffn_out = FfnExpand::new(store, &format!("{name}.ffn_out"), d, cfg.dropout, rng)?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d)?;
        Ok(StateformerLayer { ffn_in, mamba, dytanh, ffn_squeeze, mhsa, conv, ffn_out, norm })
    }

    pub fn param_count(cfg: &StateformerConfig, index: usize) -> usize {
        let d = cfg.d_model;
        let (with_mamba, with_attention) = if cfg.mamba_first_layer_only { (index == 0, index != 0) } else { (true, true) };
        let mut n = 2 * FfnExpand::param_count(d) + FfnSqueeze::param_count(d) + LayerNorm::param_count(d);
        if with_mamba {
            n += BiMamba::param_count(&cfg.ssm()) + DyTanh::param_count(d);
        }
        if with_attention {
            n += Mhsa::param_count(d) + ConvModule::param_count(d, cfg.conv_kernel);
        }
        n
    }

    pub fn forward(&self, ctx: &Ctx, z: &Tensor) -> Result<Tensor, TensorError> {
        compose_with(&BoundLayer { layer: self, ctx }, z, FFN_RESIDUAL)
    }
}

struct BoundLayer<'a, 'b> {
    layer: &'a StateformerLayer,
    ctx: &'a Ctx<'b>,
}

impl LayerStages for BoundLayer<'_, '_> {
    fn ffn_in(&self, z: &Tensor) -> Result<Tensor, TensorError> {
        self.layer.ffn_in.forward(self.ctx, z)
    }
    fn mamba(&self, z: &Tensor) -> Option<Result<Tensor, TensorError>> {
        self.layer.mamba.as_ref().map(|m| m.forward(self.ctx, z))
    }
    fn dytanh(&self, z: &Tensor) -> Option<Result<Tensor, TensorError>> {
        self.layer.dytanh.as_ref().map(|m| m.forward(self.ctx, z))
    }
    fn ffn_squeeze(&self, z: &Tensor) -> Result<Tensor, TensorError> {
        self.layer.ffn_squeeze.forward(self.ctx, z)
    }
    fn mhsa(&self, z: &Tensor) -> Option<Result<Tensor, TensorError>> {
        self.layer.mhsa.as_ref().map(|m| m.forward(self.ctx, z))
    }
    fn conv(&self, z: &Tensor) -> Option<Result<Tensor, TensorError>> {
        self.layer.conv.as_ref().map(|m| m.forward(self.ctx, z))
    }
    fn ffn_out(&self, z: &Tensor) -> Result<Tensor, TensorError> {
        self.layer.ffn_out.forward(self.ctx, z)
    }
    fn norm(&self, z: &Tensor) -> Result<Tensor, TensorError> {
        self.layer.norm.forward(self.ctx, z)
    }
}

/// Linear map to `S × 3` per frame, each 3-vector scaled to unit length.
pub fn doa_head(ctx: &Ctx, head: &Linear, seq: &Tensor, sources: usize) -> Result<Tensor, TensorError> {
    let l = seq.dim(0);
    let raw = head.forward(ctx, seq)?.reshape(&[l, sources, 3])?;
    let norm = raw.square().sum_axis(2, true)?.add_scalar(HEAD_EPS).sqrt();
    raw.div(&norm)
}

/// The complete network and its parameters.
#[derive(Clone, Debug)]
pub struct Stateformer {
    pub cfg: StateformerConfig,
    pub params: ParamStore,
    pub frontend: Frontend,
    pub fa: FaBlock,
    pub proj: Linear,
    pub pos: ParamId,
    pub layers: Vec<StateformerLayer>,
    pub head: Linear,
}

impl Stateformer {
    pub fn new(cfg: StateformerConfig, seed: u64) -> Result<Self, Error> {
        cfg.validate()?;
        let mut rng = Rng::labeled(seed, "model-init");
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let frontend = Frontend::new(&mut store, "frontend", cfg.planes, &cfg.frontend_channels, &mut rng)?;
        let channels = *cfg.frontend_channels.last().expect("validated");
        let fa = FaBlock::new(&mut store, "fa", channels, cfg.fa_reduction, &mut rng)?;
        let proj = Linear::new(&mut store, "proj", cfg.flat_width(), d, true, &mut rng)?;
        let pos = store.add("pos", &[cfg.max_frames, d], rng.normal_vec(cfg.max_frames * d, 0.02))?;
        let layers = (0..cfg.layers)
            .map(|i| StateformerLayer::new(&mut store, &format!("layer{i}"), &cfg, i, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let head = Linear::new(&mut store, "head", d, cfg.max_sources * 3, true, &mut rng)?;
        Ok(Stateformer { cfg, params: store, frontend, fa, proj, pos, layers, head })
    }

    /// Closed-form parameter count of a configuration.
    pub fn param_count(cfg: &StateformerConfig) -> usize {
        let d = cfg.d_model;
        let channels = *cfg.frontend_channels.last().unwrap_or(&0);
        Frontend::param_count(cfg.planes, &cfg.frontend_channels)
            + FaBlock::param_count(channels, cfg.fa_reduction)
            + Linear::param_count(cfg.flat_width(), d, true)
            + cfg.max_frames * d
            + (0..cfg.layers).map(|i| StateformerLayer::param_count(cfg, i)).sum::<usize>()
            + Linear::param_count(d, cfg.max_sources * 3, true)
    }

    /// Parameter totals per top-level module, in forward order.
    pub fn module_counts(&self) -> Vec<(String, usize)> {
        let mut names: Vec<String> = vec!["frontend".into(), "fa".into(), "proj".into(), "pos".into()];
        names.extend((0..self.layers.len()).map(|i| format!("layer{i}")));
        names.push("head".into());
        names.into_iter().map(|n| (n.clone(), self.params.count_prefix(&format!("{n}.")) + self.exact_count(&n))).collect()
    }

    fn exact_count(&self, name: &str) -> usize {
        self.params.find(name).map_or(0, |id| self.params.get(id).numel())
    }

    /// `features` is `planes × F × T` with `T ≤ max_frames`; returns
    /// `T × S × 3` unit vectors.
    pub fn forward(&self, ctx: &Ctx, features: &Tensor) -> Result<Tensor, TensorError> {
        let t = features.dim(features.rank().saturating_sub(1));
        if features.rank() != 3 || t == 0 || t > self.cfg.max_frames {
            return Err(TensorError::InvalidShape {
                op: "stateformer",
                shape: features.shape().to_vec(),
                reason: format!("expected {} × {} × T with 1 ≤ T ≤ {}", self.cfg.planes, self.cfg.bins, self.cfg.max_frames),
            });
        }
        let map = self.fa.forward(ctx, &self.frontend.forward(ctx, features)?)?;
        let mut z = to_sequence(ctx, &self.proj, &map)?.add(&ctx.p(self.pos).slice(0, 0, t)?)?;
        for layer in &self.layers {
            z = layer.forward(ctx, &z)?;
        }
        doa_head(ctx, &self.head, &z, self.cfg.max_sources)
    }

    /// Forward over arbitrarily long inputs in chunks of `max_frames`.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<f64>, TensorError> {
        let ctx = Ctx::eval(&self.params);
        let t = features.dim(2);
        let mut out = Vec::with_capacity(t * self.cfg.max_sources * 3);
        crate::numerics::no_grad(|| {
            for start in (0..t).step_by(self.cfg.max_frames) {
                let chunk = features.slice(2, start, (start + self.cfg.max_frames).min(t))?;
                out.extend_from_slice(self.forward(&ctx, &chunk)?.data());
            }
            Ok(out)
        })
    }

    pub fn to_container(&self) -> TensorFile {
        let mut f = TensorFile::new();
        f.push_meta("kind", "checkpoint");
        f.push_meta("config.format_version", CONFIG_VERSION);
        for (k, v) in self.cfg.entries() {
            f.push_meta(format!("config.{k}"), v);
        }
        for p in self.params.iter() {
            f.push(p.name.clone(), p.tensor.shape(), p.tensor.to_vec());
        }
        f
    }

    pub fn from_container(file: &TensorFile, what: &str) -> Result<Self, Error> {
        let map: BTreeMap<String, String> =
            file.meta.iter().filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone()))).collect();
        let cfg = StateformerConfig::from_map(&map, what)?;
        let mut model = Stateformer::new(cfg, 0)?;
        for id in model.params.ids_with_prefix("") {
            let name = model.params.name(id).to_string();
            let t = file.get(&name).ok_or_else(|| Error::Format { what: what.into(), reason: format!("missing tensor {name}") })?;
            if t.shape != model.params.get(id).shape() {
                return Err(Error::Format { what: what.into(), reason: format!("tensor {name} has shape {:?}, expected {:?}", t.shape, model.params.get(id).shape()) });
            }
            model.params.set(id, t.data.clone())?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), Error> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let file = TensorFile::load(path)?;
        Self::from_container(&file, &format!("checkpoint {}", path.display()))
    }
}
