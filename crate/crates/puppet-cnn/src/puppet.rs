//! The executed network ("puppet"): planning the layer sequence from a
//! channel template and running it on image tensors. In the generated
//! modes none of the executed kernels are stored — they are produced per
//! input by the puppeteer; the fixed and shared modes are conventional
//! baselines with stored kernels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::complexity::{adapt, complexity, AdaptationParams, ImageU8};
use crate::error::{Error, Result};
use crate::puppeteer::{
    generate_on_tape, DerivativeNet, GeneratedLayer, LayerRole, LayerSpec,
};
use crate::tape::{NormMode, RunningStats, Tape, VarId};
use crate::tensor::Tensor;

/// Batch-norm running-stat EMA momentum. Statistics update once per sample
/// (samples run on private tapes), so the averaging horizon is 1/momentum
/// samples; 0.002 spans roughly one pass over a desk-scale training split.
/// A per-batch momentum like 0.1 would leave the running stats hostage to
/// the last handful of samples seen.
pub const BN_MOMENTUM: f64 = 0.002;

/// How kernels are provided and wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Generated kernels, sequential wiring.
    Plain,
    /// Generated kernels; same-channel blocks add a skip connection.
    Residual,
    /// Stored kernels, one shared per stage, applied as residual repeats.
    Shared,
    /// Stored independent kernels per layer (conventional CNN).
    Fixed,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Plain => 0,
            Mode::Residual => 1,
            Mode::Shared => 2,
            Mode::Fixed => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Mode::Plain),
            1 => Some(Mode::Residual),
            2 => Some(Mode::Shared),
            3 => Some(Mode::Fixed),
            _ => None,
        }
    }

    /// Whether kernels come from the generator rather than storage.
    pub fn is_generated(self) -> bool {
        matches!(self, Mode::Plain | Mode::Residual)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "plain" | "puppet" => Mode::Plain,
            "residual" => Mode::Residual,
            "shared" => Mode::Shared,
            "fixed" => Mode::Fixed,
            other => {
                return Err(Error::config(format!(
                    "unknown mode '{other}' (expected puppet, plain, residual, shared, or fixed)"
                )))
            }
        })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Plain => "plain",
            Mode::Residual => "residual",
            Mode::Shared => "shared",
            Mode::Fixed => "fixed",
        })
    }
}

/// Channel template describing the network family to plan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PuppetTemplate {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub mode: Mode,
}

impl PuppetTemplate {
    pub fn new(
        channels: Vec<usize>,
        kernel: usize,
        num_classes: usize,
        in_channels: usize,
        mode: Mode,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::contract("template needs at least one stage channel"));
        }
        if channels[0] == 0 || channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::contract(format!(
                "stage channels must be positive and strictly increasing, got {channels:?}"
            )));
        }
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::contract(format!("kernel must be odd, got {kernel}")));
        }
        if num_classes == 0 {
            return Err(Error::contract("num_classes must be positive"));
        }
        if in_channels != 1 && in_channels != 3 {
            return Err(Error::contract(format!(
                "in_channels must be 1 or 3, got {in_channels}"
            )));
        }
        Ok(PuppetTemplate {
            channels,
            kernel,
            num_classes,
            in_channels,
            mode,
        })
    }

    /// The reference four-stage ladder [c/8, c/4, c/2, c].
    pub fn scaled(c_max: usize, num_classes: usize, in_channels: usize, mode: Mode) -> Result<Self> {
        if c_max < 8 {
            return Err(Error::contract(format!(
                "scaled template needs a channel maximum of at least 8, got {c_max}"
            )));
        }
        PuppetTemplate::new(
            vec![c_max / 8, c_max / 4, c_max / 2, c_max],
            3,
            num_classes,
            in_channels,
            mode,
        )
    }

    pub fn c_out_max(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }
}

/// Concrete layer sequence for one realized depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedNetwork {
    pub specs: Vec<LayerSpec>,
    pub pool_after: Vec<usize>,
    pub depth_per_stage: usize,
}

/// Emit `d` conv layers per stage (the first transitions from the previous
/// width) plus one 1x1 head; a 2x2 max-pool is marked after each stage's
/// last layer.
pub fn plan_layers(template: &PuppetTemplate, d: usize) -> Result<PlannedNetwork> {
    if d < 1 {
        return Err(Error::contract("planned depth must be at least 1"));
    }
    let mut specs = Vec::with_capacity(d * template.channels.len() + 1);
    let mut pool_after = Vec::with_capacity(template.channels.len());
    let mut prev = template.in_channels;
    for &cs in &template.channels {
        for layer in 0..d {
            specs.push(LayerSpec {
                c_in: if layer == 0 { prev } else { cs },
                c_out: cs,
                k: template.kernel,
                role: LayerRole::Conv,
            });
        }
        pool_after.push(specs.len() - 1);
        prev = cs;
    }
    specs.push(LayerSpec {
        c_in: prev,
        c_out: template.num_classes,
        k: 1,
        role: LayerRole::Head,
    });
    Ok(PlannedNetwork {
        specs,
        pool_after,
        depth_per_stage: d,
    })
}

/// Highest per-stage layer count that keeps its own normalization
/// statistics; deeper slots share the last one.
pub const DEFAULT_D_MAX: usize = 64;

/// Batch-norm running statistics, one slot per (stage, layer-in-stage).
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub stages: Vec<Vec<RunningStats>>,
    pub d_max: usize,
}

impl BnState {
    pub fn init(template: &PuppetTemplate, d_max: usize) -> Self {
        BnState {
            stages: template
                .channels
                .iter()
                .map(|&c| (0..d_max).map(|_| RunningStats::init(c)).collect())
                .collect(),
            d_max,
        }
    }
}

/// Execution counters for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Body convolutions executed (head excluded).
    pub conv_layers: usize,
    /// Multiply-adds over every convolution, the head included.
    pub multadds: u64,
}

fn check_input(tape: &Tape, x: VarId, template: &PuppetTemplate) -> Result<()> {
    let xs = tape.value(x).shape();
    if xs.len() != 4 || xs[0] != 1 {
        return Err(Error::dim(format!(
            "expected a single (1,C,H,W) input, got {xs:?}"
        )));
    }
    if xs[1] != template.in_channels {
        return Err(Error::dim(format!(
            "input has {} channels, template expects {}",
            xs[1], template.in_channels
        )));
    }
    if xs[2] == 0 || xs[3] == 0 {
        return Err(Error::dim("input spatial dims must be at least 1"));
    }
    Ok(())
}

fn conv_multadds(tape: &Tape, out: VarId, spec: &LayerSpec) -> u64 {
    let os = tape.value(out).shape();
    (spec.c_out * os[2] * os[3] * spec.c_in * spec.k * spec.k) as u64
}

/// Global average pool then the 1x1 head as a linear map to logits.
fn apply_head(
    tape: &mut Tape,
    x: VarId,
    head: (VarId, VarId),
    spec: &LayerSpec,
    stats: &mut ForwardStats,
) -> Result<VarId> {
    let xs = tape.value(x).shape().to_vec();
    let pooled = tape.adaptive_avg_pool(x, &[1, xs[1], 1, 1])?;
    let logits4 = tape.conv2d(pooled, head.0, head.1, 1, 0)?;
    stats.multadds += (spec.c_out * spec.c_in) as u64;
    tape.reshape(logits4, &[spec.c_out])
}

fn pool_if_room(tape: &mut Tape, x: VarId) -> Result<VarId> {
    let xs = tape.value(x).shape();
    if xs[2] >= 2 && xs[3] >= 2 {
        tape.max_pool2d(x, 2, 2)
    } else {
        Ok(x)
    }
}

/// Run the planned sequence with one kernel pair per spec (plain, residual,
/// and fixed wiring). Returns logits of shape (num_classes,).
pub fn forward(
    tape: &mut Tape,
    x: VarId,
    layers: &[(VarId, VarId)],
    plan: &PlannedNetwork,
    template: &PuppetTemplate,
    bn: &mut BnState,
    mode: NormMode,
) -> Result<(VarId, ForwardStats)> {
    check_input(tape, x, template)?;
    if layers.len() != plan.specs.len() {
        return Err(Error::dim(format!(
            "{} kernel pairs supplied for {} planned layers",
            layers.len(),
            plan.specs.len()
        )));
    }
    if bn.stages.len() != template.channels.len() {
        return Err(Error::dim(
            "normalization state does not cover every template stage",
        ));
    }
    let d = plan.depth_per_stage;
    let mut stats = ForwardStats::default();
    let mut cur = x;
    for (idx, spec) in plan.specs.iter().enumerate() {
        if spec.role == LayerRole::Head {
            break;
        }
        let (w, b) = layers[idx];
        let pad = (spec.k - 1) / 2;
        let conv = tape.conv2d(cur, w, b, 1, pad)?;
        stats.multadds += conv_multadds(tape, conv, spec);
        stats.conv_layers += 1;
        let pre = if template.mode == Mode::Residual && spec.c_in == spec.c_out {
            tape.add(cur, conv)?
        } else {
            conv
        };
        let (stage, layer) = (idx / d, idx % d);
        let slot = layer.min(bn.d_max - 1);
        let normed = tape.batch_norm2d(pre, &mut bn.stages[stage][slot], mode, BN_MOMENTUM, 1e-5)?;
        cur = tape.relu(normed);
        if plan.pool_after.contains(&idx) {
            cur = pool_if_room(tape, cur)?;
        }
    }
    let head_spec = plan.specs.last().expect("plan always ends with a head");
    let logits = apply_head(tape, cur, layers[plan.specs.len() - 1], head_spec, &mut stats)?;
    Ok((logits, stats))
}

/// Residual iteration with one shared kernel: X <- X + Conv(X, P),
/// `repeats` times, with no normalization or activation in between.
pub fn shared_forward(
    tape: &mut Tape,
    x: VarId,
    weight: VarId,
    bias: VarId,
    repeats: usize,
) -> Result<VarId> {
    let ws = tape.value(weight).shape().to_vec();
    if ws.len() != 4 || ws[0] != ws[1] {
        return Err(Error::dim(format!(
            "shared kernel must map a channel count to itself, got {ws:?}"
        )));
    }
    if tape.value(x).shape()[1] != ws[0] {
        return Err(Error::dim(format!(
            "input has {} channels, shared kernel expects {}",
            tape.value(x).shape()[1],
            ws[0]
        )));
    }
    if repeats < 1 {
        return Err(Error::contract("shared block needs at least one repeat"));
    }
    let pad = (ws[2] - 1) / 2;
    let mut cur = x;
    for _ in 0..repeats {
        let conv = tape.conv2d(cur, weight, bias, 1, pad)?;
        cur = tape.add(cur, conv)?;
    }
    Ok(cur)
}

/// Stored parameters of the shared-kernel baseline: one transition and one
/// shared kernel per stage, plus the head. Storage does not grow with
/// depth — only the repeat count does.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedStageParams {
    pub transitions: Vec<GeneratedLayer>,
    pub kernels: Vec<GeneratedLayer>,
    pub head: GeneratedLayer,
}

/// Stored parameters of the conventional baseline: independent kernels for
/// every planned layer, head included.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedParams {
    pub layers: Vec<GeneratedLayer>,
}

fn random_layer(spec: &LayerSpec, rng: &mut impl Rng) -> GeneratedLayer {
    let fan_in = (spec.c_in * spec.k * spec.k) as f64;
    GeneratedLayer {
        weight: Tensor::randn(
            &[spec.c_out, spec.c_in, spec.k, spec.k],
            (2.0 / fan_in).sqrt(),
            rng,
        ),
        bias: Tensor::zeros(&[spec.c_out]),
    }
}

impl FixedParams {
    pub fn init(template: &PuppetTemplate, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        let plan = plan_layers(template, depth)?;
        Ok(FixedParams {
            layers: plan.specs.iter().map(|s| random_layer(s, rng)).collect(),
        })
    }
}

impl SharedStageParams {
    pub fn init(template: &PuppetTemplate, rng: &mut impl Rng) -> Self {
        let mut transitions = Vec::new();
        let mut kernels = Vec::new();
        let mut prev = template.in_channels;
        for &cs in &template.channels {
            transitions.push(random_layer(
                &LayerSpec {
                    c_in: prev,
                    c_out: cs,
                    k: template.kernel,
                    role: LayerRole::Conv,
                },
                rng,
            ));
            kernels.push(random_layer(
                &LayerSpec {
                    c_in: cs,
                    c_out: cs,
                    k: template.kernel,
                    role: LayerRole::Conv,
                },
                rng,
            ));
            prev = cs;
        }
        let head = random_layer(
            &LayerSpec {
                c_in: prev,
                c_out: template.num_classes,
                k: 1,
                role: LayerRole::Head,
            },
            rng,
        );
        SharedStageParams {
            transitions,
            kernels,
            head,
        }
    }
}

/// Shared-mode network: per stage, a stored transition (conv, norm, relu)
/// followed by depth-1 shared residual repeats, then the usual pooling;
/// global average pool and head as elsewhere.
#[allow(clippy::too_many_arguments)]
pub fn forward_shared(
    tape: &mut Tape,
    x: VarId,
    transitions: &[(VarId, VarId)],
    kernels: &[(VarId, VarId)],
    head: (VarId, VarId),
    template: &PuppetTemplate,
    depth: usize,
    bn: &mut BnState,
    mode: NormMode,
) -> Result<(VarId, ForwardStats)> {
    check_input(tape, x, template)?;
    if transitions.len() != template.channels.len() || kernels.len() != template.channels.len() {
        return Err(Error::dim(
            "shared parameters must provide one transition and one kernel per stage",
        ));
    }
    if depth < 1 {
        return Err(Error::contract("depth must be at least 1"));
    }
    let mut stats = ForwardStats::default();
    let mut cur = x;
    let mut prev = template.in_channels;
    for (stage, &cs) in template.channels.iter().enumerate() {
        let spec = LayerSpec {
            c_in: prev,
            c_out: cs,
            k: template.kernel,
            role: LayerRole::Conv,
        };
        let (w, b) = transitions[stage];
        let conv = tape.conv2d(cur, w, b, 1, (spec.k - 1) / 2)?;
        stats.multadds += conv_multadds(tape, conv, &spec);
        stats.conv_layers += 1;
        let normed = tape.batch_norm2d(conv, &mut bn.stages[stage][0], mode, BN_MOMENTUM, 1e-5)?;
        cur = tape.relu(normed);
        if depth > 1 {
            let (sw, sb) = kernels[stage];
            cur = shared_forward(tape, cur, sw, sb, depth - 1)?;
            let os = tape.value(cur).shape();
            stats.multadds +=
                ((depth - 1) * cs * os[2] * os[3] * cs * spec.k * spec.k) as u64;
            stats.conv_layers += depth - 1;
        }
        cur = pool_if_room(tape, cur)?;
        prev = cs;
    }
    let head_spec = LayerSpec {
        c_in: prev,
        c_out: template.num_classes,
        k: 1,
        role: LayerRole::Head,
    };
    let logits = apply_head(tape, cur, head, &head_spec, &mut stats)?;
    Ok((logits, stats))
}

/// Image as a normalized (1,C,H,W) tensor with pixels in [0,1].
pub fn image_to_input(img: &ImageU8) -> Tensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = vec![0.0; c * h * w];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                data[(ch * h + i) * w + j] = img.data()[(i * w + j) * c + ch] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![1, c, h, w], data).expect("sizes agree by construction")
}

/// Parameter storage for each mode family.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams {
    Generated(DerivativeNet),
    PerLayer(FixedParams),
    PerStage(SharedStageParams),
}

/// A complete, runnable model: template, stored parameters, normalization
/// state, and the adaptation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub template: PuppetTemplate,
    /// Static depth: used directly by stored-kernel modes and as the pinned
    /// value when depth adaptation is off.
    pub depth: usize,
    pub depth_adapt: bool,
    pub param_adapt: bool,
    pub bn: BnState,
    pub params: ModelParams,
    /// Optimizer step counter, persisted with the parameters.
    pub step: u64,
}

/// One staged sample: the tape holding the whole computation, the logits
/// node, and the trainable leaves in canonical order.
pub struct SampleRun {
    pub tape: Tape,
    pub logits: VarId,
    pub params: Vec<VarId>,
    pub stats: ForwardStats,
    pub adaptation: Option<AdaptationParams>,
    pub realized_depth: usize,
}

/// Inference result for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub class: usize,
    pub logits: Vec<f64>,
    pub adaptation: Option<AdaptationParams>,
    pub realized_depth: usize,
    pub stats: ForwardStats,
}

impl Model {
    pub fn new(
        template: PuppetTemplate,
        depth: usize,
        depth_adapt: bool,
        param_adapt: bool,
        d_max: usize,
        seed: u64,
    ) -> Result<Self> {
        if depth < 1 {
            return Err(Error::contract("model depth must be at least 1"));
        }
        if d_max < 1 {
            return Err(Error::contract("normalization slot count must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = match template.mode {
            Mode::Plain | Mode::Residual => {
                ModelParams::Generated(DerivativeNet::init(template.c_out_max(), &mut rng)?)
            }
            Mode::Fixed => ModelParams::PerLayer(FixedParams::init(&template, depth, &mut rng)?),
            Mode::Shared => ModelParams::PerStage(SharedStageParams::init(&template, &mut rng)),
        };
        let bn = BnState::init(&template, d_max);
        Ok(Model {
            template,
            depth,
            depth_adapt,
            param_adapt,
            bn,
            params,
            step: 0,
        })
    }

    /// Trainable tensors with their checkpoint names, in the canonical
    /// order used by staging, gradients, and the optimizer.
    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        match &self.params {
            ModelParams::Generated(net) => net
                .params()
                .iter()
                .map(|(n, t)| (n.to_string(), *t))
                .collect(),
            ModelParams::PerLayer(fixed) => fixed
                .layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| {
                    [
                        (format!("fixed/layer{i}/weight"), &l.weight),
                        (format!("fixed/layer{i}/bias"), &l.bias),
                    ]
                })
                .collect(),
            ModelParams::PerStage(shared) => {
                let mut out = Vec::new();
                for (i, t) in shared.transitions.iter().enumerate() {
                    out.push((format!("shared/stage{i}/transition/weight"), &t.weight));
                    out.push((format!("shared/stage{i}/transition/bias"), &t.bias));
                }
                for (i, k) in shared.kernels.iter().enumerate() {
                    out.push((format!("shared/stage{i}/kernel/weight"), &k.weight));
                    out.push((format!("shared/stage{i}/kernel/bias"), &k.bias));
                }
                out.push(("shared/head/weight".to_string(), &shared.head.weight));
                out.push(("shared/head/bias".to_string(), &shared.head.bias));
                out
            }
        }
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match &mut self.params {
            ModelParams::Generated(net) => net
                .params_mut()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t))
                .collect(),
            ModelParams::PerLayer(fixed) => fixed
                .layers
                .iter_mut()
                .enumerate()
                .flat_map(|(i, l)| {
                    [
                        (format!("fixed/layer{i}/weight"), &mut l.weight),
                        (format!("fixed/layer{i}/bias"), &mut l.bias),
                    ]
                })
                .collect(),
            ModelParams::PerStage(shared) => {
                let mut out: Vec<(String, &mut Tensor)> = Vec::new();
                for (i, t) in shared.transitions.iter_mut().enumerate() {
                    out.push((format!("shared/stage{i}/transition/weight"), &mut t.weight));
                    out.push((format!("shared/stage{i}/transition/bias"), &mut t.bias));
                }
                for (i, k) in shared.kernels.iter_mut().enumerate() {
                    out.push((format!("shared/stage{i}/kernel/weight"), &mut k.weight));
                    out.push((format!("shared/stage{i}/kernel/bias"), &mut k.bias));
                }
                out.push(("shared/head/weight".to_string(), &mut shared.head.weight));
                out.push(("shared/head/bias".to_string(), &mut shared.head.bias));
                out
            }
        }
    }

    pub fn stored_param_count(&self) -> usize {
        self.param_entries().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Build the full computation for one image on a fresh tape.
    pub fn run_sample(&mut self, img: &ImageU8, mode: NormMode) -> Result<SampleRun> {
        if img.channels() != self.template.in_channels {
            return Err(Error::dim(format!(
                "image has {} channels, model expects {}",
                img.channels(),
                self.template.in_channels
            )));
        }
        let x_value = image_to_input(img);
        let mut tape = Tape::new();
        match &self.params {
            ModelParams::Generated(net) => {
                let mut adaptation = adapt(complexity(img).combined)?;
                if !self.depth_adapt {
                    adaptation.depth = self.depth;
                }
                if !self.param_adapt {
                    adaptation.depth_scale = 1.0;
                    adaptation.param_scale = 1.0;
                }
                let vars = net.stage(&mut tape);
                let generation =
                    generate_on_tape(&mut tape, &vars, &self.template, adaptation)?;
                let x = tape.leaf(x_value);
                let (logits, stats) = forward(
                    &mut tape,
                    x,
                    &generation.layers,
                    &generation.plan,
                    &self.template,
                    &mut self.bn,
                    mode,
                )?;
                Ok(SampleRun {
                    tape,
                    logits,
                    params: vars.ids().to_vec(),
                    stats,
                    adaptation: Some(adaptation),
                    realized_depth: adaptation.depth,
                })
            }
            ModelParams::PerLayer(fixed) => {
                let plan = plan_layers(&self.template, self.depth)?;
                if fixed.layers.len() != plan.specs.len() {
                    return Err(Error::dim(format!(
                        "{} stored layers for {} planned specs",
                        fixed.layers.len(),
                        plan.specs.len()
                    )));
                }
                let mut params = Vec::with_capacity(fixed.layers.len() * 2);
                let mut layer_vars = Vec::with_capacity(fixed.layers.len());
                for layer in &fixed.layers {
                    let w = tape.leaf(layer.weight.clone());
                    let b = tape.leaf(layer.bias.clone());
                    params.extend([w, b]);
                    layer_vars.push((w, b));
                }
                let x = tape.leaf(x_value);
                let (logits, stats) = forward(
                    &mut tape,
                    x,
                    &layer_vars,
                    &plan,
                    &self.template,
                    &mut self.bn,
                    mode,
                )?;
                Ok(SampleRun {
                    tape,
                    logits,
                    params,
                    stats,
                    adaptation: None,
                    realized_depth: self.depth,
                })
            }
            ModelParams::PerStage(shared) => {
                let mut params = Vec::new();
                let mut transitions = Vec::new();
                let mut kernels = Vec::new();
                for layer in &shared.transitions {
                    let w = tape.leaf(layer.weight.clone());
                    let b = tape.leaf(layer.bias.clone());
                    params.extend([w, b]);
                    transitions.push((w, b));
                }
                for layer in &shared.kernels {
                    let w = tape.leaf(layer.weight.clone());
                    let b = tape.leaf(layer.bias.clone());
                    params.extend([w, b]);
                    kernels.push((w, b));
                }
                let hw = tape.leaf(shared.head.weight.clone());
                let hb = tape.leaf(shared.head.bias.clone());
                params.extend([hw, hb]);
                let x = tape.leaf(x_value);
                let (logits, stats) = forward_shared(
                    &mut tape,
                    x,
                    &transitions,
                    &kernels,
                    (hw, hb),
                    &self.template,
                    self.depth,
                    &mut self.bn,
                    mode,
                )?;
                Ok(SampleRun {
                    tape,
                    logits,
                    params,
                    stats,
                    adaptation: None,
                    realized_depth: self.depth,
                })
            }
        }
    }

    /// Classify one image with running statistics; the model is untouched.
    pub fn predict(&self, img: &ImageU8) -> Result<Prediction> {
        let mut scratch = self.clone();
        let run = scratch.run_sample(img, NormMode::Infer)?;
        let logits = run.tape.value(run.logits).data().to_vec();
        Ok(Prediction {
            class: argmax(&logits),
            logits,
            adaptation: run.adaptation,
            realized_depth: run.realized_depth,
            stats: run.stats,
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
