//! The training loop: deterministic batching, per-epoch metrics, codebook
//! snapshots, and bit-exact checkpoint/resume.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::analysis::psnr_from_l2;
use crate::error::{Error, Result};
use crate::graph::{self, normalize};
use crate::io::atomic_write_string;
use crate::model::{
    ppm, stack_images, synth, Arch, BaselineModel, EncoderConfig, VqctModel,
};
use crate::nn::{save_train_state, load_train_state, Optimizer, OptimizerKind, ParamStore};
use crate::priors::{self, PlmCodebooks, PosLexicon};
use crate::tensor::Tensor;
use crate::transfer::FinalActivation;

/// Which model the run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline { k: usize },
    Vqct { k_adj: usize, k_noun: usize },
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    /// `n` procedurally generated images of `size x size`.
    Synth { n: usize, size: usize },
    /// A directory of `*.ppm` files.
    Dir(PathBuf),
}

/// Where the word priors come from (transfer variant only).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PriorsSource {
    /// Built-in demo vocabulary with seeded embeddings and corpus.
    Synth { dim: usize, sentences: usize },
    /// Real files; the graph comes from `corpus` (bigram rule) or a
    /// precomputed `edges` list, exactly one of which must be set.
    Files {
        embeddings: PathBuf,
        lexicon: PathBuf,
        corpus: Option<PathBuf>,
        edges: Option<PathBuf>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub n_c: usize,
    pub base_width: usize,
    pub downsample: usize,
    pub variant: Variant,
    pub dataset: DatasetSource,
    pub priors: PriorsSource,
    pub d_hidden: usize,
    pub final_activation: FinalActivation,
    pub use_sgd: bool,
    pub max_grad_norm: Option<f64>,
    /// Snapshot/checkpoint cadence in epochs.
    pub checkpoint_every: usize,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            beta: 0.25,
            n_c: 32,
            base_width: 12,
            downsample: 4,
            variant: Variant::Vqct {
                k_adj: 32,
                k_noun: 32,
            },
            dataset: DatasetSource::Synth { n: 256, size: 32 },
            priors: PriorsSource::Synth {
                dim: 16,
                sentences: 400,
            },
            d_hidden: 64,
            final_activation: FinalActivation::Relu,
            use_sgd: false,
            max_grad_norm: None,
            checkpoint_every: 20,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.beta < 0.0 {
            return Err(Error::Config("learning_rate must be positive, beta non-negative".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        match self.variant {
            Variant::Baseline { k: 0 } => {
                return Err(Error::Config("baseline codebook size k must be positive".into()))
            }
            Variant::Vqct { k_adj, k_noun } if k_adj == 0 || k_noun == 0 => {
                return Err(Error::Config("k_adj and k_noun must be positive".into()))
            }
            _ => {}
        }
        if let Variant::Vqct { .. } = self.variant {
            if let PriorsSource::Files { corpus, edges, .. } = &self.priors {
                if corpus.is_some() == edges.is_some() {
                    return Err(Error::Config(
                        "exactly one of corpus/edges must be set for file priors".into(),
                    ));
                }
            }
        }
        if let DatasetSource::Synth { n, size } = self.dataset {
            if n == 0 || size == 0 || size % self.downsample != 0 {
                return Err(Error::Config(format!(
                    "synthetic dataset needs n > 0 and size divisible by {}",
                    self.downsample
                )));
            }
        }
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            base_width: self.base_width,
            downsample: self.downsample,
            n_c: self.n_c,
        }
    }
}

/// One metrics row; losses are image-count-weighted means over the epoch's
/// batches, utilization is the fraction of codes selected at least once
/// within the epoch, and psnr derives from the epoch-mean reconstruction
/// error. For the baseline the single codebook's fraction fills both
/// utilization columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_codebook: f64,
    pub l_commit: f64,
    pub total: f64,
    pub util_adj: f64,
    pub util_noun: f64,
    pub psnr: f64,
}

pub const METRICS_HEADER: &str = "epoch,l_rec,l_codebook,l_commit,total,util_adj,util_noun,psnr";

pub fn metrics_to_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.l_rec, r.l_codebook, r.l_commit, r.total, r.util_adj, r.util_noun, r.psnr
        ));
    }
    out
}

/// Codebook matrices captured at one epoch.
#[derive(Debug, Clone)]
pub struct CodebookSnapshot {
    pub epoch: usize,
    pub matrices: Vec<Tensor>,
}

/// Everything a finished run hands back, including the trained model.
pub struct TrainingReport {
    pub metrics: Vec<EpochMetrics>,
    pub snapshots: Vec<CodebookSnapshot>,
    pub arch: Arch,
    pub store: ParamStore,
    pub images: Vec<Tensor>,
}

/// File names a run writes under its output directory.
pub struct TrainOutputs;

impl TrainOutputs {
    pub const METRICS: &'static str = "metrics.csv";
    pub const FINAL_CHECKPOINT: &'static str = "checkpoint-final.ckpt";

    pub fn checkpoint_name(epoch: usize) -> String {
        format!("checkpoint-{epoch:04}.ckpt")
    }
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 over (seed, tag) so derived streams never collide.
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_DATA: u64 = 1;
const TAG_PRIORS: u64 = 2;
const TAG_PARAMS: u64 = 3;
const TAG_SHUFFLE: u64 = 4;

/// Loads or synthesizes the image set.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Vec<Tensor>> {
    let images = match &cfg.dataset {
        DatasetSource::Synth { n, size } => {
            synth::synth_dataset(*n, *size, sub_seed(cfg.seed, TAG_DATA))
        }
        DatasetSource::Dir(dir) => ppm::read_ppm_dir(dir)?
            .into_iter()
            .map(|(_, img)| img)
            .collect(),
    };
    if images.is_empty() {
        return Err(Error::Invalid("dataset is empty".into()));
    }
    Ok(images)
}

/// Builds the word priors and modifying graph for the transfer variant.
pub fn load_priors(cfg: &TrainConfig) -> Result<(PlmCodebooks, PosLexicon, graph::ModifyingGraph)> {
    let (k_adj, k_noun) = match cfg.variant {
        Variant::Vqct { k_adj, k_noun } => (k_adj, k_noun),
        Variant::Baseline { .. } => {
            return Err(Error::Invalid("baseline variant has no word priors".into()))
        }
    };
    match &cfg.priors {
        PriorsSource::Synth { dim, sentences } => {
            let seed = sub_seed(cfg.seed, TAG_PRIORS);
            let table = priors::parse_embeddings(&synth::demo_embeddings_text(*dim, seed), "demo")?;
            let lex = priors::parse_lexicon(&synth::demo_lexicon_text(), "demo")?;
            let cb = priors::build_plm_codebooks(&table, &lex, k_adj, k_noun)?;
            let (g, _) = graph::build_from_corpus_text(
                &synth::demo_corpus_text(*sentences, seed),
                &lex,
                &cb,
            );
            Ok((cb, lex, g))
        }
        PriorsSource::Files {
            embeddings,
            lexicon,
            corpus,
            edges,
        } => {
            let table = priors::load_embeddings(embeddings)?;
            let lex = priors::load_lexicon(lexicon)?;
            let cb = priors::build_plm_codebooks(&table, &lex, k_adj, k_noun)?;
            let g = match (corpus, edges) {
                (Some(path), None) => graph::build_from_corpus(path, &lex, &cb)?.0,
                (None, Some(path)) => graph::load_edge_list(path, &cb)?.0,
                _ => {
                    return Err(Error::Config(
                        "exactly one of corpus/edges must be set".into(),
                    ))
                }
            };
            Ok((cb, lex, g))
        }
    }
}

/// Builds an untrained model (and its parameter store) from the config.
pub fn build_model(cfg: &TrainConfig) -> Result<(Arch, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(sub_seed(cfg.seed, TAG_PARAMS));
    let enc_cfg = cfg.encoder_config();
    let arch = match cfg.variant {
        Variant::Baseline { k } => Arch::Baseline(BaselineModel::new(
            &mut store, &mut rng, &enc_cfg, k, cfg.beta,
        )?),
        Variant::Vqct { .. } => {
            let (cb, _, g) = load_priors(cfg)?;
            let a_hat = normalize(&g);
            Arch::Vqct(Box::new(VqctModel::new(
                &mut store,
                &mut rng,
                &enc_cfg,
                cfg.d_hidden,
                cfg.final_activation,
                cb,
                a_hat,
                cfg.beta,
            )?))
        }
    };
    Ok((arch, store))
}

fn make_optimizer(cfg: &TrainConfig) -> Optimizer {
    let mut opt = if cfg.use_sgd {
        Optimizer::new(OptimizerKind::Sgd, cfg.learning_rate)
    } else {
        Optimizer::new(OptimizerKind::adam_default(), cfg.learning_rate)
    };
    opt.max_grad_norm = cfg.max_grad_norm;
    opt
}

/// Runs the configured training, optionally writing metrics and checkpoints
/// under `out_dir`. Fixed seed and config give a bit-identical report.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainingReport> {
    cfg.validate()?;
    let images = load_dataset(cfg)?;
    let (arch, mut store) = build_model(cfg)?;
    let mut opt = make_optimizer(cfg);

    let mut start_epoch = 0usize;
    if let Some(resume) = &cfg.resume {
        start_epoch = load_train_state(resume, &mut store, &mut opt)?;
    }

    let mut metrics = Vec::new();
    let mut snapshots = Vec::new();
    let checkpoint = |epoch: usize,
                          store: &ParamStore,
                          opt: &Optimizer,
                          snapshots: &mut Vec<CodebookSnapshot>|
     -> Result<()> {
        snapshots.push(CodebookSnapshot {
            epoch,
            matrices: arch.codebook_matrices(store)?,
        });
        if let Some(dir) = out_dir {
            save_train_state(&dir.join(TrainOutputs::checkpoint_name(epoch)), store, opt, epoch)?;
        }
        Ok(())
    };

    if start_epoch == 0 {
        checkpoint(0, &store, &opt, &mut snapshots)?;
    }

    let mut global_step = start_epoch * images.len().div_ceil(cfg.batch_size);
    for epoch in start_epoch + 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut shuffle_rng =
            ChaCha12Rng::seed_from_u64(sub_seed(sub_seed(cfg.seed, TAG_SHUFFLE), epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }

        let mut image_count = 0usize;
        let mut sums = [0.0f64; 4]; // l_rec, l_codebook, l_commit, total
        let mut counts: Vec<Vec<u64>> = Vec::new();

        for batch_ids in order.chunks(cfg.batch_size) {
            let batch_imgs: Vec<&Tensor> = batch_ids.iter().map(|&i| &images[i]).collect();
            let batch = stack_images(&batch_imgs)?;
            let mut fwd = arch.forward(&store, &batch)?;
            global_step += 1;
            if !fwd.terms.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: global_step,
                });
            }
            fwd.tape.backward(fwd.loss.total)?;
            fwd.binder.harvest(&fwd.tape, &mut store)?;
            opt.step(&mut store)?;

            let n = batch_ids.len() as f64;
            sums[0] += fwd.terms.l_rec * n;
            sums[1] += fwd.terms.l_codebook * n;
            sums[2] += fwd.terms.l_commit * n;
            sums[3] += fwd.terms.total * n;
            image_count += batch_ids.len();

            let grids = fwd.quant.grids();
            if counts.is_empty() {
                for (i, (_, grid)) in grids.iter().enumerate() {
                    let k = fwd.tape.shape(fwd.codebook_vars[i])[0];
                    counts.push(vec![0u64; k]);
                    let _ = grid;
                }
            }
            for (i, (_, grid)) in grids.iter().enumerate() {
                for &idx in &grid.indices {
                    counts[i][idx] += 1;
                }
            }
        }

        let n = image_count as f64;
        let used_fraction = |c: &Vec<u64>| {
            c.iter().filter(|&&v| v > 0).count() as f64 / c.len() as f64
        };
        let (util_adj, util_noun) = match counts.len() {
            2 => (used_fraction(&counts[0]), used_fraction(&counts[1])),
            1 => {
                let u = used_fraction(&counts[0]);
                (u, u)
            }
            _ => (0.0, 0.0),
        };
        let l_rec = sums[0] / n;
        metrics.push(EpochMetrics {
            epoch,
            l_rec,
            l_codebook: sums[1] / n,
            l_commit: sums[2] / n,
            total: sums[3] / n,
            util_adj,
            util_noun,
            psnr: psnr_from_l2(l_rec),
        });

        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            checkpoint(epoch, &store, &opt, &mut snapshots)?;
        }
    }

    if let Some(dir) = out_dir {
        atomic_write_string(&dir.join(TrainOutputs::METRICS), &metrics_to_csv(&metrics))?;
        save_train_state(
            &dir.join(TrainOutputs::FINAL_CHECKPOINT),
            &store,
            &opt,
            cfg.epochs,
        )?;
    }

    Ok(TrainingReport {
        metrics,
        snapshots,
        arch,
        store,
        images,
    })
}
