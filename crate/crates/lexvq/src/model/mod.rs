//! Encoder/decoder networks, the transfer-codebook model, the baseline
//! directly-learned-codebook model, and the training loop.

pub mod ppm;
pub mod synth;
mod train;

pub use synth::synth_dataset;
pub use train::{
    build_model, load_dataset, load_priors, metrics_to_csv, train, CodebookSnapshot,
    DatasetSource, EpochMetrics, PriorsSource, TrainConfig, TrainOutputs, TrainingReport,
    Variant, METRICS_HEADER,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::nn::{Binder, Conv2dLayer, ParamStore};
use crate::priors::PlmCodebooks;
use crate::tensor::{Tape, Tensor, Var};
use crate::transfer::{FinalActivation, GeneratedCodebooks, TransferNetwork};
use crate::vq::{
    dual_quantize, quantize_single, vq_loss, DualQuantization, IndexGrid, SingleQuantization,
    VqLossTerms, VqLossVars,
};

/// Architecture hyperparameters shared by both model variants.
#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Spatial downsample factor, 2 or 4 (one or two stride-2 blocks).
    pub downsample: usize,
    /// Latent channels; must be even so the map can split into halves.
    pub n_c: usize,
}

impl EncoderConfig {
    fn validate(&self) -> Result<()> {
        if !matches!(self.downsample, 2 | 4) {
            return Err(Error::Config(format!(
                "downsample must be 2 or 4, got {}",
                self.downsample
            )));
        }
        if !self.n_c.is_multiple_of(2) || self.n_c == 0 {
            return Err(Error::Config(format!(
                "n_c must be positive and even, got {}",
                self.n_c
            )));
        }
        Ok(())
    }
}

/// Stride-2 k4 blocks down to the latent grid, then a k3 projection.
#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<Conv2dLayer>,
    downsample: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let mut layers = Vec::new();
        // k4 s2 p1 halves even spatial dims exactly; k3 s2 would not divide.
        layers.push(Conv2dLayer::new(store, rng, "encoder.conv0", cfg.in_channels, w, 4, 2, 1)?);
        if cfg.downsample == 4 {
            layers.push(Conv2dLayer::new(store, rng, "encoder.conv1", w, w, 4, 2, 1)?);
        }
        let idx = layers.len();
        layers.push(Conv2dLayer::new(
            store,
            rng,
            &format!("encoder.conv{idx}"),
            w,
            cfg.n_c,
            3,
            1,
            1,
        )?);
        Ok(Encoder {
            layers,
            downsample: cfg.downsample,
        })
    }

    /// `B x C x H x W -> B x n_c x H/f x W/f`; H and W must be divisible by f.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4
            || !shape[2].is_multiple_of(self.downsample)
            || !shape[3].is_multiple_of(self.downsample)
        {
            return Err(Error::Invalid(format!(
                "encoder input {:?} not divisible by downsample factor {}",
                shape, self.downsample
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, binder, store, h)?;
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Mirror of the encoder: k3 convs with nearest-neighbor 2x upsampling
/// between them, ending in a linear projection back to image channels.
#[derive(Debug, Clone)]
pub struct Decoder {
    layers: Vec<Conv2dLayer>,
    upsamples: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let half = (w / 2).max(4);
        let mut layers = Vec::new();
        let chain: Vec<(usize, usize)> = if cfg.downsample == 4 {
            vec![(cfg.n_c, w), (w, half), (half, cfg.in_channels)]
        } else {
            vec![(cfg.n_c, w), (w, cfg.in_channels)]
        };
        for (i, (cin, cout)) in chain.iter().enumerate() {
            layers.push(Conv2dLayer::new(
                store,
                rng,
                &format!("decoder.conv{i}"),
                *cin,
                *cout,
                3,
                1,
                1,
            )?);
        }
        Ok(Decoder {
            layers,
            upsamples: if cfg.downsample == 4 { 2 } else { 1 },
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        z_q: Var,
    ) -> Result<Var> {
        let mut h = z_q;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, binder, store, h)?;
            if i != last {
                h = tape.relu(h);
            }
            if i < self.upsamples {
                h = tape.upsample_nearest2x(h)?;
            }
        }
        Ok(h)
    }
}

/// Quantization outcome of either model variant.
#[derive(Debug, Clone)]
pub enum Quantization {
    Dual(DualQuantization),
    Single(SingleQuantization),
}

impl Quantization {
    pub fn z_q(&self) -> Var {
        match self {
            Quantization::Dual(q) => q.z_q,
            Quantization::Single(q) => q.z_q,
        }
    }

    pub fn z_q_st(&self) -> Var {
        match self {
            Quantization::Dual(q) => q.z_q_st,
            Quantization::Single(q) => q.z_q_st,
        }
    }

    /// Named index grids: `[("adj", ..), ("noun", ..)]` or `[("code", ..)]`.
    pub fn grids(&self) -> Vec<(&'static str, &IndexGrid)> {
        match self {
            Quantization::Dual(q) => vec![("adj", &q.adj_indices), ("noun", &q.noun_indices)],
            Quantization::Single(q) => vec![("code", &q.indices)],
        }
    }
}

/// Everything one forward pass produced, including the live tape.
pub struct ModelForward {
    pub tape: Tape,
    pub binder: Binder,
    pub x: Var,
    pub z: Var,
    pub x_hat: Var,
    pub quant: Quantization,
    /// Tape handles of the active codebooks: `[e]` or `[c_adj, c_noun]`.
    pub codebook_vars: Vec<Var>,
    /// The frozen word-prior leaf (transfer variant only).
    pub priors_node: Option<Var>,
    pub loss: VqLossVars,
    pub terms: VqLossTerms,
}

/// The transfer-codebook model: encoder, codebook transfer network over the
/// modifying graph, decoder. The quantization codebooks are regenerated from
/// the frozen priors on every forward pass.
pub struct VqctModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub transfer: TransferNetwork,
    pub priors: PlmCodebooks,
    pub a_hat: NormalizedAdjacency,
    pub beta: f64,
}

impl VqctModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &EncoderConfig,
        d_hidden: usize,
        final_activation: FinalActivation,
        priors: PlmCodebooks,
        a_hat: NormalizedAdjacency,
        beta: f64,
    ) -> Result<Self> {
        let encoder = Encoder::new(store, rng, cfg)?;
        let decoder = Decoder::new(store, rng, cfg)?;
        let transfer = TransferNetwork::new(
            store,
            rng,
            priors.dim(),
            d_hidden,
            cfg.n_c / 2,
            final_activation,
        )?;
        Ok(VqctModel {
            encoder,
            decoder,
            transfer,
            priors,
            a_hat,
            beta,
        })
    }

    pub fn generate(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
    ) -> Result<GeneratedCodebooks> {
        self.transfer
            .generate_codebooks(tape, binder, store, &self.a_hat, &self.priors)
    }

    pub fn forward(&self, store: &ParamStore, batch: &Tensor) -> Result<ModelForward> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.leaf(batch);
        let gen = self.generate(&mut tape, &mut binder, store)?;
        let z = self.encoder.forward(&mut tape, &mut binder, store, x)?;
        let quant = dual_quantize(&mut tape, z, &gen)?;
        let x_hat = self
            .decoder
            .forward(&mut tape, &mut binder, store, quant.z_q_st)?;
        let (loss, terms) = vq_loss(&mut tape, x, x_hat, z, quant.z_q, self.beta)?;
        Ok(ModelForward {
            tape,
            binder,
            x,
            z,
            x_hat,
            codebook_vars: vec![gen.c_adj, gen.c_noun],
            priors_node: Some(gen.priors_node),
            quant: Quantization::Dual(quant),
            loss,
            terms,
        })
    }

    /// Current codebook matrices without running an image batch.
    pub fn codebook_matrices(&self, store: &ParamStore) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let gen = self.generate(&mut tape, &mut binder, store)?;
        Ok(vec![tape.to_tensor(gen.c_adj), tape.to_tensor(gen.c_noun)])
    }
}

/// The baseline: the codebook is itself a trainable parameter, quantizing
/// whole latent vectors against a single code table.
pub struct BaselineModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook_name: String,
    pub k: usize,
    pub beta: f64,
}

impl BaselineModel {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &EncoderConfig,
        k: usize,
        beta: f64,
    ) -> Result<Self> {
        let encoder = Encoder::new(store, rng, cfg)?;
        let decoder = Decoder::new(store, rng, cfg)?;
        let name = "codebook.e".to_string();
        let spread = 1.0 / k as f64;
        let data = (0..k * cfg.n_c)
            .map(|_| rng.gen_range(-spread..spread))
            .collect();
        store.register(&name, Tensor::new(data, &[k, cfg.n_c])?)?;
        Ok(BaselineModel {
            encoder,
            decoder,
            codebook_name: name,
            k,
            beta,
        })
    }

    pub fn forward(&self, store: &ParamStore, batch: &Tensor) -> Result<ModelForward> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.leaf(batch);
        let e = binder.bind(&mut tape, store, &self.codebook_name)?;
        let z = self.encoder.forward(&mut tape, &mut binder, store, x)?;
        let quant = quantize_single(&mut tape, z, e)?;
        let x_hat = self
            .decoder
            .forward(&mut tape, &mut binder, store, quant.z_q_st)?;
        let (loss, terms) = vq_loss(&mut tape, x, x_hat, z, quant.z_q, self.beta)?;
        Ok(ModelForward {
            tape,
            binder,
            x,
            z,
            x_hat,
            codebook_vars: vec![e],
            priors_node: None,
            quant: Quantization::Single(quant),
            loss,
            terms,
        })
    }

    pub fn codebook_matrices(&self, store: &ParamStore) -> Result<Vec<Tensor>> {
        let e = store
            .get(&self.codebook_name)
            .ok_or_else(|| Error::Invalid("baseline codebook not registered".into()))?;
        Ok(vec![e.clone().with_requires_grad(false)])
    }
}

/// Either model variant behind one forward interface.
pub enum Arch {
    Baseline(BaselineModel),
    Vqct(Box<VqctModel>),
}

impl Arch {
    pub fn forward(&self, store: &ParamStore, batch: &Tensor) -> Result<ModelForward> {
        match self {
            Arch::Baseline(m) => m.forward(store, batch),
            Arch::Vqct(m) => m.forward(store, batch),
        }
    }

    pub fn codebook_matrices(&self, store: &ParamStore) -> Result<Vec<Tensor>> {
        match self {
            Arch::Baseline(m) => m.codebook_matrices(store),
            Arch::Vqct(m) => m.codebook_matrices(store),
        }
    }

    /// Total code count across the active codebooks.
    pub fn code_count(&self) -> usize {
        match self {
            Arch::Baseline(m) => m.k,
            Arch::Vqct(m) => m.priors.k_adj() + m.priors.k_noun(),
        }
    }

    pub fn beta(&self) -> f64 {
        match self {
            Arch::Baseline(m) => m.beta,
            Arch::Vqct(m) => m.beta,
        }
    }
}

/// Stacks `3 x H x W` images into one `B x 3 x H x W` batch tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let shape = first.shape();
    if shape.len() != 3 {
        return Err(Error::Invalid(format!(
            "expected 3-d images, got {:?}",
            shape
        )));
    }
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                left: shape.to_vec(),
                right: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(data, &[images.len(), shape[0], shape[1], shape[2]])
}
