//! Model assembly for the four fusion strategies.
//!
//! Parameter census, with `V = 12D² + 9D` (one pre-norm encoder block, also
//! the size of one fusion block), `I = k³D + 12D² + 11D` (integration block),
//! `E = M·P²C·D + S·T·D` (patch projection and positional table) and `n`
//! classes:
//!
//! ```text
//! parallel  E + M·D + N·M·V + K·(V + I) + D + ((M+1)·D + 1)·n
//! cascade   E + M·D + N·M·V + N·V + K·I + D + ((M+1)·D + 1)·n
//! early     E + D + N·V + (D + 1)·n
//! late      E + M·D + N·M·V + (M·D + 1)·n
//! ```

use crate::config::{FusionStrategy, ModelConfig};
use crate::data::SyntheticClip;
use crate::decompose::{intra_unview, intra_view};
use crate::error::{Error, Result};
use crate::integration::{dynamic_pos_embed, synthesizer_update, IntegrationParams};
use crate::paf::{paf_block, PafParams};
use crate::params::{Binder, Init, Initializer, ParamSource, ParamStore};
use crate::patch::{embed, embed_patches, patchify, EmbeddingParams, TokenState};
use crate::tensor::Tensor;
use crate::vit::{inter_stream_layer, vit_block, ExpertParams, VitBlockParams};

pub struct Classifier {
    /// `[F, n_classes]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Classifier {
    fn declare(src: &mut impl ParamSource, features: usize, classes: usize) -> Result<Self> {
        Ok(Classifier {
            weight: src.take("classifier.weight", &[features, classes], Init::Normal)?,
            bias: src.take("classifier.bias", &[classes], Init::Zeros)?,
        })
    }

    /// `features · W + b` on a `[F]` feature vector.
    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        let f = features.numel();
        let n = self.bias.numel();
        if self.weight.shape()[0] != f {
            return Err(Error::Dimension(format!(
                "classifier expects {} features, got {f}",
                self.weight.shape()[0]
            )));
        }
        features.reshape(&[1, f])?.matmul(&self.weight)?.reshape(&[n])?.add(&self.bias)
    }
}

/// `concat(h, class tokens) · W + b`.
pub fn classify(h: &Tensor, class_tokens: &Tensor, params: &Classifier) -> Result<Tensor> {
    let d = h.numel();
    let features = Tensor::concat(&[h.reshape(&[d])?, class_tokens.reshape(&[class_tokens.numel()])?], 0)?;
    params.apply(&features)
}

/// One layer's blocks; which are present depends on the strategy and depth.
pub struct Layer {
    pub experts: Option<ExpertParams>,
    pub block: Option<VitBlockParams>,
    pub paf: Option<PafParams>,
    pub integration: Option<IntegrationParams>,
}

/// The full parameter structure, bound to either initial values or graph leaves.
pub struct Network {
    pub embedding: EmbeddingParams,
    /// Shared class token of the early-fusion sequence, `[D]`.
    pub shared_class: Option<Tensor>,
    /// Initial synthesizer `h_init`, `[D]`.
    pub synth_init: Option<Tensor>,
    pub layers: Vec<Layer>,
    pub classifier: Classifier,
}

/// Declares every parameter of `c` in a fixed order.
pub fn declare(src: &mut impl ParamSource, c: &ModelConfig) -> Result<Network> {
    let early = c.fusion == FusionStrategy::Early;
    let embedding = EmbeddingParams::declare(src, c, !early)?;
    let shared_class = if early {
        Some(src.take("embed.shared_class", &[c.dim], Init::Normal)?)
    } else {
        None
    };
    let synthesizing = matches!(c.fusion, FusionStrategy::Parallel | FusionStrategy::Cascade);
    let synth_init = if synthesizing {
        Some(src.take("synth_init", &[c.dim], Init::Normal)?)
    } else {
        None
    };
    let mut layers = Vec::with_capacity(c.layers);
    for i in 0..c.layers {
        let prefix = format!("layer{i}");
        let with_synth = synthesizing && i >= c.first_synth_layer();
        let layer = Layer {
            experts: if early {
                None
            } else {
                Some(ExpertParams::declare(src, &format!("{prefix}.inter"), c.modalities, c.dim, c.heads)?)
            },
            block: if early {
                Some(VitBlockParams::declare(src, &format!("{prefix}.block"), c.dim, c.heads)?)
            } else {
                None
            },
            paf: if with_synth || c.fusion == FusionStrategy::Cascade {
                Some(PafParams::declare(src, &format!("{prefix}.paf"), c.dim, c.heads)?)
            } else {
                None
            },
            integration: if with_synth {
                Some(IntegrationParams::declare(
                    src,
                    &format!("{prefix}.integration"),
                    c.dim,
                    c.heads,
                    c.conv_kernel,
                )?)
            } else {
                None
            },
        };
        layers.push(layer);
    }
    let classifier = Classifier::declare(src, classifier_inputs(c), c.classes)?;
    Ok(Network {
        embedding,
        shared_class,
        synth_init,
        layers,
        classifier,
    })
}

/// Feature width seen by the classifier.
pub fn classifier_inputs(c: &ModelConfig) -> usize {
    match c.fusion {
        FusionStrategy::Parallel | FusionStrategy::Cascade => (c.modalities + 1) * c.dim,
        FusionStrategy::Early => c.dim,
        FusionStrategy::Late => c.modalities * c.dim,
    }
}

/// Closed-form parameter count (see the module docs).
pub fn census_formula(c: &ModelConfig) -> usize {
    let (m, d, n, k) = (c.modalities, c.dim, c.layers, c.synth_layers);
    let v = 12 * d * d + 9 * d;
    let integ = c.conv_kernel.pow(3) * d + 12 * d * d + 11 * d;
    let e = m * c.patch_len() * d + c.spatial() * c.frames * d;
    let head = |f: usize| (f + 1) * c.classes;
    match c.fusion {
        FusionStrategy::Parallel => e + m * d + n * m * v + k * (v + integ) + d + head((m + 1) * d),
        FusionStrategy::Cascade => e + m * d + n * m * v + n * v + k * integ + d + head((m + 1) * d),
        FusionStrategy::Early => e + d + n * v + head(d),
        FusionStrategy::Late => e + m * d + n * m * v + head(m * d),
    }
}

fn parallel(net: &Network, c: &ModelConfig, patches: &Tensor) -> Result<Tensor> {
    let mut x = embed(patches, &net.embedding, c.grid())?;
    for (i, layer) in net.layers.iter().enumerate() {
        if i == c.first_synth_layer() {
            x.synthesizer = net.synth_init.clone();
        }
        let experts = layer.experts.as_ref().ok_or_else(|| missing("experts", i))?;
        let mut next = inter_stream_layer(&x, experts)?;
        if let (Some(paf), Some(integ)) = (&layer.paf, &layer.integration) {
            let fused = intra_unview(&paf_block(&intra_view(&x.patches)?, paf)?, x.spatial(), x.frames())?;
            let x_hat = dynamic_pos_embed(&fused, x.grid, integ)?;
            next.synthesizer = Some(synthesizer_update(x.synthesizer.as_ref(), &x_hat, integ)?);
        }
        x = next;
    }
    finish(net, &x)
}

fn cascade(net: &Network, c: &ModelConfig, patches: &Tensor) -> Result<Tensor> {
    let mut x = embed(patches, &net.embedding, c.grid())?;
    for (i, layer) in net.layers.iter().enumerate() {
        if i == c.first_synth_layer() {
            x.synthesizer = net.synth_init.clone();
        }
        let experts = layer.experts.as_ref().ok_or_else(|| missing("experts", i))?;
        let paf = layer.paf.as_ref().ok_or_else(|| missing("fusion block", i))?;
        let inter = inter_stream_layer(&x, experts)?;
        let fused = intra_unview(&paf_block(&intra_view(&inter.patches)?, paf)?, x.spatial(), x.frames())?;
        let mut synthesizer = inter.synthesizer.clone();
        if let Some(integ) = &layer.integration {
            let x_hat = dynamic_pos_embed(&fused, x.grid, integ)?;
            synthesizer = Some(synthesizer_update(synthesizer.as_ref(), &x_hat, integ)?);
        }
        x = TokenState::new(fused, inter.class_tokens, synthesizer, x.grid)?;
    }
    finish(net, &x)
}

fn early(net: &Network, c: &ModelConfig, patches: &Tensor) -> Result<Tensor> {
    let tokens = embed_patches(patches, &net.embedding)?;
    let cls = net
        .shared_class
        .as_ref()
        .ok_or_else(|| Error::Contract("early fusion: no shared class token".into()))?;
    let mut seq = Tensor::concat(
        &[cls.reshape(&[1, c.dim])?, tokens.reshape(&[tokens.numel() / c.dim, c.dim])?],
        0,
    )?;
    for (i, layer) in net.layers.iter().enumerate() {
        seq = vit_block(&seq, layer.block.as_ref().ok_or_else(|| missing("encoder block", i))?)?;
    }
    net.classifier.apply(&seq.narrow(0, 0, 1)?)
}

fn late(net: &Network, c: &ModelConfig, patches: &Tensor) -> Result<Tensor> {
    let mut x = embed(patches, &net.embedding, c.grid())?;
    for (i, layer) in net.layers.iter().enumerate() {
        x = inter_stream_layer(&x, layer.experts.as_ref().ok_or_else(|| missing("experts", i))?)?;
    }
    net.classifier.apply(&x.class_tokens)
}

fn finish(net: &Network, x: &TokenState) -> Result<Tensor> {
    let h = x
        .synthesizer
        .as_ref()
        .ok_or_else(|| Error::Contract("final layer carries no synthesizer".into()))?;
    classify(h, &x.class_tokens, &net.classifier)
}

fn missing(what: &str, layer: usize) -> Error {
    Error::Contract(format!("layer {layer} has no {what}"))
}

/// Logits `[n_classes]` for patchified input `[M, S, T, P²C]`.
pub fn forward(net: &Network, c: &ModelConfig, patches: &Tensor) -> Result<Tensor> {
    match c.fusion {
        FusionStrategy::Parallel => parallel(net, c, patches),
        FusionStrategy::Cascade => cascade(net, c, patches),
        FusionStrategy::Early => early(net, c, patches),
        FusionStrategy::Late => late(net, c, patches),
    }
}

/// A configured model and its parameter values.
#[derive(Debug, Clone)]
pub struct MultiFuser {
    config: ModelConfig,
    store: ParamStore,
}

/// Loss and per-parameter gradients for one sample, in store order.
pub struct SampleGrad {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
}

impl MultiFuser {
    /// Seeded initialization from `config.seed` and `config.init_std`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(config.seed, config.init_std)?;
        declare(&mut init, &config)?;
        Ok(MultiFuser {
            store: init.finish(),
            config,
        })
    }

    /// Wraps existing values after checking them against the layout of `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let model = MultiFuser { config, store };
        model.bind(false)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn census(&self) -> usize {
        self.store.census()
    }

    /// Binds the stored values as graph leaves.
    pub fn bind(&self, requires_grad: bool) -> Result<(Network, Vec<Tensor>)> {
        let leaves = self.store.leaves(requires_grad);
        let mut binder = Binder::new(self.store.entries(), &leaves);
        let net = declare(&mut binder, &self.config)?;
        binder.finish()?;
        Ok((net, leaves))
    }

    pub fn check_clip(&self, clip: &SyntheticClip) -> Result<()> {
        let c = &self.config;
        let d = clip.dims;
        if (d.modalities, d.frames, d.height, d.width, d.channels) != (c.modalities, c.frames, c.height, c.width, c.channels) {
            return Err(Error::Dimension(format!(
                "clip {}x{}x{}x{}x{} does not match model {}x{}x{}x{}x{}",
                d.modalities, d.frames, d.height, d.width, d.channels, c.modalities, c.frames, c.height, c.width, c.channels
            )));
        }
        if clip.label >= c.classes {
            return Err(Error::Contract(format!("label {} of {} classes", clip.label, c.classes)));
        }
        Ok(())
    }

    /// Logits without recording a graph.
    pub fn logits(&self, clip: &SyntheticClip) -> Result<Vec<f64>> {
        self.check_clip(clip)?;
        let (net, _) = self.bind(false)?;
        Ok(forward(&net, &self.config, &patchify(clip, &self.config)?)?.to_vec())
    }

    /// Cross-entropy loss and its gradient with respect to every parameter.
    pub fn gradient(&self, clip: &SyntheticClip) -> Result<SampleGrad> {
        self.check_clip(clip)?;
        let (net, leaves) = self.bind(true)?;
        let logits = forward(&net, &self.config, &patchify(clip, &self.config)?)?;
        let loss = logits.cross_entropy(clip.label)?;
        loss.backward()?;
        let grads = leaves
            .iter()
            .map(|l| l.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; l.numel()]))
            .collect();
        Ok(SampleGrad {
            loss: loss.item(),
            logits: logits.to_vec(),
            grads,
        })
    }
}

/// The early-fusion depth whose census is closest to the parallel model's
/// for the same width, heads and modality count.
pub fn budget_matched(c: &ModelConfig, strategy: FusionStrategy) -> ModelConfig {
    let mut out = ModelConfig {
        fusion: strategy,
        ..c.clone()
    };
    if strategy != FusionStrategy::Early {
        return out;
    }
    let target = census_formula(&ModelConfig {
        fusion: FusionStrategy::Parallel,
        ..c.clone()
    }) as i64;
    let best = (c.synth_layers.max(1)..=c.layers * (c.modalities + 2))
        .min_by_key(|&n| {
            let probe = ModelConfig { layers: n, ..out.clone() };
            (census_formula(&probe) as i64 - target).abs()
        })
        .unwrap_or(c.layers);
    out.layers = best;
    out
}
