//! The counting network.
//!
//! An encoder (thirteen 3x3 conv layers in five blocks with four 2x2 max
//! pools, a bilinear x2 upsample of the 1/16 deep path, concatenation with
//! the 1/8 skip feature, and a 1x1 fusion) produces F_in at 1/8 input
//! resolution. A configurable stack of modules then alternates a multi-scale
//! pyramid (ASP) with a channel attention unit; each module emits a
//! single-channel weighted density map for supervision and passes its gated
//! feature map to the next. A final 1x1 convolution regresses the prediction
//! map F_pre.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

fn default_base_channels() -> usize {
    64
}
fn default_reduction_ratio() -> usize {
    16
}
fn default_iiao_stack() -> usize {
    2
}
fn default_encoder_widths() -> Vec<usize> {
    vec![16, 32, 64, 64]
}
fn default_branch_kernels() -> Vec<(usize, usize)> {
    vec![(1, 1), (1, 3), (1, 5), (3, 5)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channel count of F_in and of every module's input/output.
    pub base_channels: usize,
    /// Channel bottleneck factor inside the attention unit.
    pub reduction_ratio: usize,
    /// How many pyramid+attention modules to stack.
    pub iiao_stack: usize,
    /// Widths of encoder blocks 1..4 (block 5 reuses the block-4 width).
    pub encoder_widths: Vec<usize>,
    /// Kernel-size pair (first conv, second conv) for each of the four
    /// pyramid branches, ordered by growing receptive field.
    pub asp_branch_kernels: Vec<(usize, usize)>,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: default_base_channels(),
            reduction_ratio: default_reduction_ratio(),
            iiao_stack: default_iiao_stack(),
            encoder_widths: default_encoder_widths(),
            asp_branch_kernels: default_branch_kernels(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Every problem with the config, empty when valid. Collected rather
    /// than returned one at a time so a user can fix a config in one pass.
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        let c = self.base_channels;
        if c == 0 || !c.is_multiple_of(16) {
            out.push(format!(
                "model: base_channels must be a positive multiple of 16 (pyramid compresses by 4 twice), got {}",
                c
            ));
        }
        if self.reduction_ratio == 0 {
            out.push("model: reduction_ratio must be at least 1".to_string());
        } else if !c.is_multiple_of(self.reduction_ratio) {
            out.push(format!(
                "model: base_channels {} not divisible by reduction_ratio {}",
                c, self.reduction_ratio
            ));
        }
        if self.iiao_stack < 1 {
            out.push("model: iiao_stack must be at least 1".to_string());
        }
        if self.encoder_widths.len() != 4 {
            out.push(format!(
                "model: encoder_widths needs exactly 4 entries, got {}",
                self.encoder_widths.len()
            ));
        } else if self.encoder_widths.contains(&0) {
            out.push("model: encoder widths must all be positive".to_string());
        }
        if self.asp_branch_kernels.len() != 4 {
            out.push(format!(
                "model: asp_branch_kernels needs exactly 4 pairs, got {}",
                self.asp_branch_kernels.len()
            ));
        } else {
            for (i, &(k1, k2)) in self.asp_branch_kernels.iter().enumerate() {
                if k1 % 2 == 0 || k2 % 2 == 0 || k1 == 0 || k2 == 0 {
                    out.push(format!(
                        "model: branch {} kernels ({}, {}) must be odd for same-padding",
                        i + 1,
                        k1,
                        k2
                    ));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { issues })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// (name, output channels, input channels) for the thirteen encoder convs,
/// in forward order. Blocks 1 and 2 hold two layers, blocks 3 to 5 three;
/// block 5 keeps the block-4 width.
fn encoder_conv_table(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let w = &cfg.encoder_widths;
    let blocks = [
        (1, 2, 3, w[0]),
        (2, 2, w[0], w[1]),
        (3, 3, w[1], w[2]),
        (4, 3, w[2], w[3]),
        (5, 3, w[3], w[3]),
    ];
    let mut out = Vec::new();
    for (b, n_convs, in_c, out_c) in blocks {
        let mut prev = in_c;
        for j in 1..=n_convs {
            out.push((format!("enc.b{}.conv{}", b, j), out_c, prev));
            prev = out_c;
        }
    }
    out
}

/// Declares every parameter tensor (name and shape) the config implies, in
/// network order. Initialization, checkpoint I/O, and the optimizer all
/// derive their view of the parameter set from this one list.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.base_channels;
    let w = &cfg.encoder_widths;
    let mut out = Vec::new();
    let mut conv = |name: String, out_c: usize, in_c: usize, k: usize| {
        out.push(ParamSpec {
            name: format!("{}.weight", name),
            shape: vec![out_c, in_c, k, k],
        });
        out.push(ParamSpec {
            name: format!("{}.bias", name),
            shape: vec![out_c],
        });
    };

    for (name, out_c, in_c) in encoder_conv_table(cfg) {
        conv(name, out_c, in_c, 3);
    }
    conv("enc.fuse".to_string(), c, w[3] + w[2], 1);

    for m in 1..=cfg.iiao_stack {
        let p = format!("iiao{}", m);
        conv(format!("{}.asp.compress", p), c / 4, c, 1);
        for (j, &(k1, k2)) in cfg.asp_branch_kernels.iter().enumerate() {
            conv(format!("{}.asp.b{}.conv1", p, j + 1), c / 16, c / 4, k1);
            conv(format!("{}.asp.b{}.conv2", p, j + 1), c / 4, c / 16, k2);
        }
        conv(format!("{}.tau.reduce", p), c / cfg.reduction_ratio, c, 1);
        conv(format!("{}.tau.expand", p), c, c / cfg.reduction_ratio, 1);
    }
    conv("head".to_string(), 1, c, 1);
    out
}

/// Named parameter tensors. The map is ordered, so iteration (and therefore
/// every optimizer update and checkpoint byte) has a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    params: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_map(params: BTreeMap<String, Tensor>) -> Self {
        ModelParams { params }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Draws all weights i.i.d. from Gaussian(0, 0.01^2) in declaration order
/// and zeroes all biases. Bit-identical for a given config.
pub fn init_params(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = BTreeMap::new();
    for spec in param_specs(cfg) {
        let t = if spec.name.ends_with(".bias") {
            Tensor::zeros(&spec.shape)
        } else {
            Tensor::randn(&spec.shape, 0.0, 0.01, &mut rng)
        };
        params.insert(spec.name, t);
    }
    Ok(ModelParams { params })
}

/// Graph leaves for every parameter, so a forward pass can be built and the
/// backward sweep can deposit per-parameter gradients.
pub struct ParamNodes {
    ids: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{}`", name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

pub fn insert_params(g: &mut Graph, params: &ModelParams) -> ParamNodes {
    let ids = params
        .iter()
        .map(|(name, t)| (name.clone(), g.leaf(t.clone())))
        .collect();
    ParamNodes { ids }
}

fn conv_layer(
    g: &mut Graph,
    x: NodeId,
    p: &ParamNodes,
    name: &str,
    stride: usize,
    padding: usize,
) -> Result<NodeId> {
    let w = p.id(&format!("{}.weight", name));
    let b = p.id(&format!("{}.bias", name));
    g.conv2d(x, w, b, stride, padding)
}

fn conv_relu(g: &mut Graph, x: NodeId, p: &ParamNodes, name: &str, padding: usize) -> Result<NodeId> {
    let c = conv_layer(g, x, p, name, 1, padding)?;
    Ok(g.relu(c))
}

/// Front end: image (B, 3, H, W) with H, W divisible by 16 down to F_in at
/// (B, C, H/8, W/8). The deep 1/16 path is upsampled and fused with the 1/8
/// skip taken after the third pool.
pub fn encoder_forward(g: &mut Graph, image: NodeId, p: &ParamNodes, cfg: &ModelConfig) -> Result<NodeId> {
    let (_, c_in, h, w) = g.value(image).dims4()?;
    if c_in != 3 {
        return Err(Error::shape(
            "encoder",
            format!("expected a 3-channel image, got {} channels", c_in),
        ));
    }
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::invalid(
            "encoder",
            format!("input extent {}x{} must be divisible by 16", h, w),
        ));
    }

    let mut x = image;
    let mut skip = None;
    let table = encoder_conv_table(cfg);
    let mut layer = 0;
    for (block, n_convs) in [(1, 2), (2, 2), (3, 3), (4, 3), (5, 3)] {
        for _ in 0..n_convs {
            let (name, _, _) = &table[layer];
            x = conv_relu(g, x, p, name, 1)?;
            layer += 1;
        }
        if block <= 4 {
            x = g.maxpool2(x)?;
        }
        if block == 3 {
            skip = Some(x);
        }
    }
    let up = g.bilinear_up2(x)?;
    let cat = g.concat_channels(up, skip.expect("skip captured at block 3"))?;
    conv_layer(g, cat, p, "enc.fuse", 1, 0)
}

/// Adaptive scale pyramid: compress channels to C/4 with a 1x1 conv, run
/// four same-padded two-conv branches (C/4 -> C/16 -> C/4, ReLU after each
/// conv), and concatenate back to C channels (F_mul).
pub fn asp_forward(
    g: &mut Graph,
    f_in: NodeId,
    p: &ParamNodes,
    cfg: &ModelConfig,
    prefix: &str,
) -> Result<NodeId> {
    let compressed = conv_layer(g, f_in, p, &format!("{}.asp.compress", prefix), 1, 0)?;
    let mut branches = Vec::with_capacity(4);
    for (j, &(k1, k2)) in cfg.asp_branch_kernels.iter().enumerate() {
        let name = format!("{}.asp.b{}", prefix, j + 1);
        let a = conv_relu(g, compressed, p, &format!("{}.conv1", name), (k1 - 1) / 2)?;
        let b = conv_relu(g, a, p, &format!("{}.conv2", name), (k2 - 1) / 2)?;
        branches.push(b);
    }
    let mut out = branches[0];
    for &b in &branches[1..] {
        out = g.concat_channels(out, b)?;
    }
    Ok(out)
}

/// Transitive attention unit: 1x1 bottleneck to C/r with ReLU, 1x1 back to
/// C, sigmoid. Output values are strictly inside (0, 1).
pub fn tau_forward(
    g: &mut Graph,
    f_in: NodeId,
    p: &ParamNodes,
    prefix: &str,
) -> Result<NodeId> {
    let reduced = conv_relu(g, f_in, p, &format!("{}.tau.reduce", prefix), 0)?;
    let expanded = conv_layer(g, reduced, p, &format!("{}.tau.expand", prefix), 1, 0)?;
    Ok(g.sigmoid(expanded))
}

/// Fuses attention with the pyramid features. Returns the gated feature map
/// passed to the next module, f_out = f_att * f_mul, and the weighted
/// density map f_wei whose pixel (b, i, j) is the dot product of the
/// channel-softmaxed attention and f_mul at that pixel. Gradients flow into
/// both inputs through both outputs.
pub fn soft_block(g: &mut Graph, f_att: NodeId, f_mul: NodeId) -> Result<(NodeId, NodeId)> {
    let f_out = g.mul(f_att, f_mul)?;
    let sm = g.channel_softmax(f_att)?;
    let weighted = g.mul(sm, f_mul)?;
    let f_wei = g.sum_channels(weighted)?;
    Ok((f_out, f_wei))
}

/// One supervised map per stacked module plus the final prediction map; all
/// share the same (B, 1, H/8, W/8) shape.
pub struct ForwardOutputs {
    pub f_wei: Vec<NodeId>,
    pub f_pre: NodeId,
}

pub fn network_forward(
    g: &mut Graph,
    image: NodeId,
    p: &ParamNodes,
    cfg: &ModelConfig,
) -> Result<ForwardOutputs> {
    let f_in = encoder_forward(g, image, p, cfg)?;
    let mut x = f_in;
    let mut f_wei = Vec::with_capacity(cfg.iiao_stack);
    for m in 1..=cfg.iiao_stack {
        let prefix = format!("iiao{}", m);
        let f_mul = asp_forward(g, x, p, cfg, &prefix)?;
        let f_att = tau_forward(g, x, p, &prefix)?;
        let (f_out, wei) = soft_block(g, f_att, f_mul)?;
        f_wei.push(wei);
        x = f_out;
    }
    let f_pre = conv_layer(g, x, p, "head", 1, 0)?;
    Ok(ForwardOutputs { f_wei, f_pre })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: magic, version, embedded JSON config, then each
/// parameter as (name, dims, little-endian f64 payload) in map order.
/// Round-trips bit-exactly.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg_json = serde_json::to_vec(cfg).expect("config serialization cannot fail");
    bytes.extend_from_slice(&(cfg_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&cfg_json);
    bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params.iter() {
        bytes.extend_from_slice(&(name.len() as u64).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                path: self.path.to_path_buf(),
                detail: format!("truncated at byte {} (wanted {} more)", self.pos, n),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let bad = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };

    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("wrong magic, not a checkpoint file".to_string()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "version {} unsupported (expected {})",
            version, CHECKPOINT_VERSION
        )));
    }
    let cfg_len = r.u64()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| bad(format!("embedded config unreadable: {}", e)))?;
    cfg.validate()?;

    let n_params = r.u64()? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..n_params {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| bad("parameter name is not UTF-8".to_string()))?;
        let ndim = r.u64()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(8 * numel)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(shape, data)?;
        if !t.is_finite() {
            return Err(bad(format!("parameter `{}` holds non-finite values", name)));
        }
        if params.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate parameter `{}`", name)));
        }
    }

    for spec in param_specs(&cfg) {
        match params.get(&spec.name) {
            None => return Err(bad(format!("missing parameter `{}`", spec.name))),
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(bad(format!(
                    "parameter `{}` has shape {:?}, config implies {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )))
            }
            Some(_) => {}
        }
    }
    if params.len() != param_specs(&cfg).len() {
        return Err(bad("checkpoint carries parameters the config does not declare".to_string()));
    }

    Ok((cfg, ModelParams { params }))
}
