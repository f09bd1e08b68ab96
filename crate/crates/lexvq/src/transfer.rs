//! The codebook transfer network: three graph convolutions over the
//! modifying graph that map frozen word-embedding node features to the
//! quantization codebooks. The codebooks are regenerated on every forward
//! pass and are never parameters themselves; only the network weights are
//! optimized, which is what couples the updates of all codes together.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::nn::{Binder, GraphConvLayer, ParamStore};
use crate::priors::PlmCodebooks;
use crate::tensor::{Tape, Tensor, Var};

/// Whether the final layer's output passes through ReLU.
///
/// With ReLU the generated codes are non-negative, which materially shapes
/// code geometry, so both choices are exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalActivation {
    Relu,
    None,
}

impl std::str::FromStr for FinalActivation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(FinalActivation::Relu),
            "none" => Ok(FinalActivation::None),
            other => Err(Error::Config(format!(
                "final_activation must be relu|none, got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransferNetwork {
    layer1: GraphConvLayer,
    layer2: GraphConvLayer,
    layer3: GraphConvLayer,
    final_activation: FinalActivation,
}

/// Tape handles for the generated codebooks of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GeneratedCodebooks {
    pub c_adj: Var,
    pub c_noun: Var,
    pub k_adj: usize,
    pub k_noun: usize,
    pub dim: usize,
    /// The frozen prior features' leaf; carries no gradient by construction.
    pub priors_node: Var,
}

impl TransferNetwork {
    /// Registers the three layers under `transfer.*`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d_plm: usize,
        d_hidden: usize,
        d_out: usize,
        final_activation: FinalActivation,
    ) -> Result<Self> {
        Ok(TransferNetwork {
            layer1: GraphConvLayer::new(store, rng, "transfer.gc1", d_plm, d_hidden)?,
            layer2: GraphConvLayer::new(store, rng, "transfer.gc2", d_hidden, d_hidden)?,
            layer3: GraphConvLayer::new(store, rng, "transfer.gc3", d_hidden, d_out)?,
            final_activation,
        })
    }

    pub fn d_in(&self) -> usize {
        self.layer1.d_in
    }

    pub fn d_out(&self) -> usize {
        self.layer3.d_out
    }

    pub fn param_names(&self) -> Vec<&str> {
        vec![
            &self.layer1.weight,
            &self.layer1.bias,
            &self.layer2.weight,
            &self.layer2.bias,
            &self.layer3.weight,
            &self.layer3.bias,
        ]
    }

    /// Runs the stack over `[r_adj; r_noun]` and slices the output rows back
    /// into the two codebooks by the node-ordering contract.
    pub fn generate_codebooks(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        a_hat: &NormalizedAdjacency,
        cb: &PlmCodebooks,
    ) -> Result<GeneratedCodebooks> {
        if cb.dim() != self.layer1.d_in {
            return Err(Error::ShapeMismatch {
                op: "generate_codebooks",
                left: vec![cb.node_features().shape()[0], cb.dim()],
                right: vec![self.layer1.d_in, self.layer1.d_out],
            });
        }
        if a_hat.size() != cb.k_adj() + cb.k_noun() {
            return Err(Error::Invalid(format!(
                "graph has {} nodes but codebooks have {}",
                a_hat.size(),
                cb.k_adj() + cb.k_noun()
            )));
        }
        // Priors enter as a no-gradient leaf: they are frozen inputs.
        let h0 = tape.leaf(&cb.node_features());
        let m = a_hat.matrix();
        let h1 = self.layer1.forward(tape, binder, store, m, h0)?;
        let h1 = tape.relu(h1);
        let h2 = self.layer2.forward(tape, binder, store, m, h1)?;
        let h2 = tape.relu(h2);
        let h3 = self.layer3.forward(tape, binder, store, m, h2)?;
        let h3 = match self.final_activation {
            FinalActivation::Relu => tape.relu(h3),
            FinalActivation::None => h3,
        };
        let c_adj = tape.slice_rows(h3, 0, cb.k_adj())?;
        let c_noun = tape.slice_rows(h3, cb.k_adj(), cb.k_noun())?;
        Ok(GeneratedCodebooks {
            c_adj,
            c_noun,
            k_adj: cb.k_adj(),
            k_noun: cb.k_noun(),
            dim: self.layer3.d_out,
            priors_node: h0,
        })
    }
}

/// Cosine-similarity matrix between the rows of a 2-d tensor. Rows with zero
/// norm get similarity 0 by convention.
pub fn cosine_similarity_matrix(rows: &Tensor) -> Tensor {
    assert_eq!(rows.shape().len(), 2, "similarity needs a 2-d tensor");
    let k = rows.shape()[0];
    let norms: Vec<f64> = (0..k)
        .map(|i| rows.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = rows
                    .row(i)
                    .iter()
                    .zip(rows.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                out[i * k + j] = dot / (norms[i] * norms[j]);
            }
        }
    }
    Tensor::new(out, &[k, k]).expect("square by construction")
}

/// Pairwise cosine similarity of each generated codebook.
pub fn generated_similarity(tape: &Tape, gen: &GeneratedCodebooks) -> (Tensor, Tensor) {
    (
        cosine_similarity_matrix(&tape.to_tensor(gen.c_adj)),
        cosine_similarity_matrix(&tape.to_tensor(gen.c_noun)),
    )
}
