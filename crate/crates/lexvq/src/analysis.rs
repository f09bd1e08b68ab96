//! Quantitative probes: codebook utilization and perplexity, pixel-level
//! reconstruction metrics, similarity drift across checkpoints, and the
//! two-dimensional toy comparison of direct versus generative codebook
//! optimization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::graph::{normalize, ModifyingGraph};
use crate::model::{stack_images, Arch};
use crate::nn::{Binder, Optimizer, ParamStore};
use crate::tensor::{Tape, Tensor};
use crate::transfer::{cosine_similarity_matrix, FinalActivation, TransferNetwork};

/// Per-codebook selection counts over one dataset pass.
#[derive(Debug, Clone)]
pub struct UtilizationReport {
    /// One histogram per codebook, indexed by code.
    pub counts: Vec<Vec<u64>>,
    /// Fraction of codes selected at least once, per codebook.
    pub used_fraction: Vec<f64>,
    /// exp(entropy) of the empirical code distribution, per codebook.
    pub perplexity: Vec<f64>,
    /// Used codes across all codebooks over total code count.
    pub combined_used_fraction: f64,
}

/// Counts argmin selections per code over a full pass of `images`.
pub fn utilization(
    arch: &Arch,
    store: &ParamStore,
    images: &[Tensor],
    batch_size: usize,
) -> Result<UtilizationReport> {
    if images.is_empty() {
        return Err(Error::Invalid("utilization needs a non-empty dataset".into()));
    }
    let mut counts: Vec<Vec<u64>> = Vec::new();
    for chunk in images.chunks(batch_size.max(1)) {
        let batch = stack_images(&chunk.iter().collect::<Vec<_>>())?;
        let fwd = arch.forward(store, &batch)?;
        let grids = fwd.quant.grids();
        if counts.is_empty() {
            for (i, _) in grids.iter().enumerate() {
                let k = fwd.tape.shape(fwd.codebook_vars[i])[0];
                counts.push(vec![0u64; k]);
            }
        }
        for (i, (_, grid)) in grids.iter().enumerate() {
            for &idx in &grid.indices {
                counts[i][idx] += 1;
            }
        }
    }
    Ok(report_from_counts(counts))
}

/// Builds the report directly from histograms (used by tests to inject
/// synthetic distributions).
pub fn report_from_counts(counts: Vec<Vec<u64>>) -> UtilizationReport {
    let mut used_fraction = Vec::new();
    let mut perplexity = Vec::new();
    let mut used_total = 0usize;
    let mut code_total = 0usize;
    for histogram in &counts {
        let used = histogram.iter().filter(|&&c| c > 0).count();
        used_total += used;
        code_total += histogram.len();
        used_fraction.push(used as f64 / histogram.len() as f64);
        let total: u64 = histogram.iter().sum();
        let mut entropy = 0.0;
        if total > 0 {
            for &c in histogram {
                if c > 0 {
                    let p = c as f64 / total as f64;
                    entropy -= p * p.ln();
                }
            }
        }
        perplexity.push(entropy.exp());
    }
    UtilizationReport {
        counts,
        used_fraction,
        perplexity,
        combined_used_fraction: used_total as f64 / code_total.max(1) as f64,
    }
}

/// PSNR in dB from a mean-squared error over [0, 1] signals; zero error is
/// reported as the infinity sentinel.
pub fn psnr_from_l2(l2: f64) -> f64 {
    if l2 == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / l2).log10()
    }
}

/// `(psnr, l1, l2)` between same-shape tensors with values in [0, 1].
pub fn pixel_metrics(x: &Tensor, x_hat: &Tensor) -> Result<(f64, f64, f64)> {
    if x.shape() != x_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "pixel_metrics",
            left: x.shape().to_vec(),
            right: x_hat.shape().to_vec(),
        });
    }
    let n = x.numel() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for (a, b) in x.data().iter().zip(x_hat.data()) {
        let d = a - b;
        abs_sum += d.abs();
        sq_sum += d * d;
    }
    let l1 = abs_sum / n;
    let l2 = sq_sum / n;
    Ok((psnr_from_l2(l2), l1, l2))
}

/// Mean absolute change of the probe codes' cosine-similarity matrix,
/// relative to the first checkpoint.
#[derive(Debug, Clone)]
pub struct SimilarityDrift {
    /// One value per checkpoint; the first is 0 by construction.
    pub drifts: Vec<f64>,
}

/// `checkpoints` holds, per checkpoint, the codebook matrices of that epoch
/// (two for the transfer model, one for the baseline); rows pool across
/// codebooks and `probes` index into the pooled rows.
pub fn similarity_drift(checkpoints: &[Vec<Tensor>], probes: &[usize]) -> Result<SimilarityDrift> {
    if checkpoints.len() < 2 {
        return Err(Error::Invalid("similarity drift needs at least 2 checkpoints".into()));
    }
    if probes.is_empty() {
        return Err(Error::Invalid("empty probe set".into()));
    }
    let mut matrices = Vec::new();
    for matrices_at_t in checkpoints {
        let pooled = Tensor::vstack(&matrices_at_t.iter().collect::<Vec<_>>())?;
        let rows = pooled.shape()[0];
        let dim = pooled.shape()[1];
        if let Some(&bad) = probes.iter().find(|&&p| p >= rows) {
            return Err(Error::Invalid(format!(
                "probe index {bad} out of range for {rows} pooled codes"
            )));
        }
        let mut probe_rows = Vec::with_capacity(probes.len() * dim);
        for &p in probes {
            probe_rows.extend_from_slice(pooled.row(p));
        }
        let probe_mat = Tensor::new(probe_rows, &[probes.len(), dim])?;
        matrices.push(cosine_similarity_matrix(&probe_mat));
    }
    let s0 = &matrices[0];
    let drifts = matrices
        .iter()
        .map(|st| {
            let sum: f64 = st
                .data()
                .iter()
                .zip(s0.data())
                .map(|(a, b)| (a - b).abs())
                .sum();
            sum / st.numel() as f64
        })
        .collect();
    Ok(SimilarityDrift { drifts })
}

/// Seeded probe selection over a pooled code count.
pub fn pick_probes(total_codes: usize, n_probes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..total_codes).collect();
    for i in (1..all.len()).rev() {
        all.swap(i, rng.gen_range(0..=i));
    }
    all.truncate(n_probes.min(total_codes));
    all.sort_unstable();
    all
}

/// Seeded probe selection among codes selected at least once, padded with
/// unused codes only when fewer than `n_probes` are alive. A dead code's
/// similarities are frozen by definition, so drift measured on them says
/// nothing about how optimization treats code relationships; probing the
/// alive set is what makes the drift comparison meaningful.
pub fn pick_live_probes(counts: &[Vec<u64>], n_probes: usize, seed: u64) -> Vec<usize> {
    let mut live = Vec::new();
    let mut dead = Vec::new();
    let mut base = 0usize;
    for histogram in counts {
        for (i, &c) in histogram.iter().enumerate() {
            if c > 0 {
                live.push(base + i);
            } else {
                dead.push(base + i);
            }
        }
        base += histogram.len();
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in (1..live.len()).rev() {
        live.swap(i, rng.gen_range(0..=i));
    }
    live.truncate(n_probes);
    if live.len() < n_probes {
        for i in (1..dead.len()).rev() {
            dead.swap(i, rng.gen_range(0..=i));
        }
        live.extend(dead.into_iter().take(n_probes - live.len()));
    }
    live.sort_unstable();
    live
}

const TOY_K_ADJ: usize = 4;
const TOY_K_NOUN: usize = 4;
const TOY_LR: f64 = 0.2;

/// Trajectories of all codes under (a) direct per-code updates and (b)
/// generative transfer updates, from the same initial codebook and target
/// stream.
#[derive(Debug, Clone)]
pub struct Toy2dRun {
    pub initial: Tensor,
    /// `steps + 1` position matrices of shape `[K, 2]`, starting at initial.
    pub direct_positions: Vec<Tensor>,
    pub transfer_positions: Vec<Tensor>,
    /// Selected code per step: `(direct, transfer)`.
    pub selections: Vec<(usize, usize)>,
}

impl Toy2dRun {
    pub fn code_count(&self) -> usize {
        self.initial.shape()[0]
    }

    /// Rows that changed between consecutive position matrices of a variant.
    pub fn changed_rows(before: &Tensor, after: &Tensor) -> usize {
        let k = before.shape()[0];
        (0..k)
            .filter(|&i| {
                before
                    .row(i)
                    .iter()
                    .zip(after.row(i))
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            })
            .count()
    }
}

/// Runs the 2-D toy experiment: 8 codes, a seeded stream of target points,
/// one squared-error step on the selected code per iteration.
///
/// Variant (a) optimizes the code matrix directly, so only the selected row
/// can move. Variant (b) starts from the same generated codes but optimizes
/// the transfer map's parameters; the map's final layer is linear here so
/// the gradient path is alive at any seed.
pub fn toy2d(steps: usize, seed: u64) -> Result<Toy2dRun> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let k_total = TOY_K_ADJ + TOY_K_NOUN;

    // Fixed 2-D priors and a random modifying graph.
    let priors_data: Vec<f64> = (0..k_total * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let priors = Tensor::new(priors_data, &[k_total, 2])?;
    let mut graph = ModifyingGraph::new(TOY_K_ADJ, TOY_K_NOUN);
    for i in 0..TOY_K_ADJ {
        for j in 0..TOY_K_NOUN {
            if rng.gen_bool(0.5) {
                graph.insert_edge(i, j)?;
            }
        }
    }
    let a_hat = normalize(&graph);

    let mut transfer_store = ParamStore::new();
    let net = TransferNetwork::new(
        &mut transfer_store,
        &mut rng,
        2,
        8,
        2,
        FinalActivation::None,
    )?;

    // The toy pools adj and noun codes: generate through the standard
    // interface and stack the two outputs.
    let cb = toy_codebooks(&priors)?;
    let generate_pooled = |store: &ParamStore| -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let gen = net.generate_codebooks(&mut tape, &mut binder, store, &a_hat, &cb)?;
        Tensor::vstack(&[&tape.to_tensor(gen.c_adj), &tape.to_tensor(gen.c_noun)])
    };

    let initial = generate_pooled(&transfer_store)?;

    // Variant (a) starts from the same codebook, held as a direct parameter.
    let mut direct_store = ParamStore::new();
    direct_store.register("toy.codes", initial.clone())?;

    let mut direct_opt = Optimizer::sgd(TOY_LR);
    let mut transfer_opt = Optimizer::sgd(TOY_LR);

    let targets: Vec<[f64; 2]> = (0..steps)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();

    let mut run = Toy2dRun {
        direct_positions: vec![initial.clone()],
        transfer_positions: vec![initial.clone()],
        initial,
        selections: Vec::with_capacity(steps),
    };

    for target in &targets {
        // (a) direct: loss only touches the selected row of the parameter.
        let codes_a = run.direct_positions.last().unwrap().clone();
        let sel_a = nearest_row(&codes_a, target);
        {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let codes = binder.bind(&mut tape, &direct_store, "toy.codes")?;
            let row = tape.slice_rows(codes, sel_a, 1)?;
            let t = tape.leaf_parts(target.to_vec(), &[1, 2], false);
            let loss = tape.mse(row, t)?;
            tape.backward(loss)?;
            binder.harvest(&tape, &mut direct_store)?;
            direct_opt.step(&mut direct_store)?;
        }
        run.direct_positions
            .push(direct_store.get("toy.codes").unwrap().clone().with_requires_grad(false));

        // (b) transfer: the same loss, but the variable is the map.
        let codes_b = run.transfer_positions.last().unwrap().clone();
        let sel_b = nearest_row(&codes_b, target);
        {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let gen = net.generate_codebooks(&mut tape, &mut binder, &transfer_store, &a_hat, &cb)?;
            let row = if sel_b < TOY_K_ADJ {
                tape.slice_rows(gen.c_adj, sel_b, 1)?
            } else {
                tape.slice_rows(gen.c_noun, sel_b - TOY_K_ADJ, 1)?
            };
            let t = tape.leaf_parts(target.to_vec(), &[1, 2], false);
            let loss = tape.mse(row, t)?;
            tape.backward(loss)?;
            binder.harvest(&tape, &mut transfer_store)?;
            transfer_opt.step(&mut transfer_store)?;
        }
        run.transfer_positions.push(generate_pooled(&transfer_store)?);

        run.selections.push((sel_a, sel_b));
    }
    Ok(run)
}

fn nearest_row(codes: &Tensor, target: &[f64; 2]) -> usize {
    let k = codes.shape()[0];
    let mut best = (0usize, f64::INFINITY);
    for i in 0..k {
        let row = codes.row(i);
        let d = (row[0] - target[0]).powi(2) + (row[1] - target[1]).powi(2);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Wraps the pooled 2-D priors as adjective/noun codebooks for the toy.
fn toy_codebooks(priors: &Tensor) -> Result<crate::priors::PlmCodebooks> {
    let adj_rows = priors.data()[..TOY_K_ADJ * 2].to_vec();
    let noun_rows = priors.data()[TOY_K_ADJ * 2..].to_vec();
    Ok(crate::priors::PlmCodebooks {
        adj_words: (0..TOY_K_ADJ).map(|i| format!("adj{i}")).collect(),
        r_adj: Tensor::new(adj_rows, &[TOY_K_ADJ, 2])?,
        noun_words: (0..TOY_K_NOUN).map(|i| format!("noun{i}")).collect(),
        r_noun: Tensor::new(noun_rows, &[TOY_K_NOUN, 2])?,
    })
}

/// Trajectory CSV: `step,variant,code_id,x,y` for both variants, step 0
/// being the shared initial positions.
pub fn toy2d_to_csv(run: &Toy2dRun) -> String {
    let mut out = String::from("step,variant,code_id,x,y\n");
    let k = run.code_count();
    for (variant, positions) in [
        ("direct", &run.direct_positions),
        ("transfer", &run.transfer_positions),
    ] {
        for (step, mat) in positions.iter().enumerate() {
            for code in 0..k {
                let row = mat.row(code);
                out.push_str(&format!("{step},{variant},{code},{},{}\n", row[0], row[1]));
            }
        }
    }
    out
}

/// Selection trace CSV: `step,direct_selected,transfer_selected`.
pub fn toy2d_selections_to_csv(run: &Toy2dRun) -> String {
    let mut out = String::from("step,direct_selected,transfer_selected\n");
    for (i, (a, b)) in run.selections.iter().enumerate() {
        out.push_str(&format!("{},{a},{b}\n", i + 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_distribution_has_unit_perplexity() {
        let report = report_from_counts(vec![vec![64, 0, 0, 0]]);
        assert_eq!(report.used_fraction[0], 0.25);
        assert!((report.perplexity[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_distribution_has_perplexity_k() {
        let report = report_from_counts(vec![vec![5; 16]]);
        assert_eq!(report.used_fraction[0], 1.0);
        assert!((report.perplexity[0] - 16.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_bounds_hold_on_random_histograms() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        for _ in 0..50 {
            let k = rng.gen_range(1..40usize);
            let hist: Vec<u64> = (0..k).map(|_| rng.gen_range(0..100u64)).collect();
            if hist.iter().all(|&c| c == 0) {
                continue;
            }
            let report = report_from_counts(vec![hist]);
            assert!(report.perplexity[0] >= 1.0 - 1e-12);
            assert!(report.perplexity[0] <= k as f64 + 1e-9);
            assert!((0.0..=1.0).contains(&report.used_fraction[0]));
        }
    }

    #[test]
    fn pixel_metrics_closed_forms() {
        let zeros = Tensor::zeros(&[2, 3, 4]);
        let ones = Tensor::filled(&[2, 3, 4], 1.0);
        let halves = Tensor::filled(&[2, 3, 4], 0.5);

        let (psnr, l1, l2) = pixel_metrics(&zeros, &zeros).unwrap();
        assert_eq!((l1, l2), (0.0, 0.0));
        assert!(psnr.is_infinite() && psnr > 0.0);

        let (psnr, l1, l2) = pixel_metrics(&zeros, &ones).unwrap();
        assert_eq!((l1, l2), (1.0, 1.0));
        assert_eq!(psnr, 0.0);

        let (psnr, _, l2) = pixel_metrics(&zeros, &halves).unwrap();
        assert_eq!(l2, 0.25);
        assert!((psnr - 6.020599913279624).abs() < 1e-6);
    }

    #[test]
    fn pixel_metrics_match_scalar_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..60).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ta = Tensor::new(a.clone(), &[3, 4, 5]).unwrap();
        let tb = Tensor::new(b.clone(), &[3, 4, 5]).unwrap();
        let (psnr, l1, l2) = pixel_metrics(&ta, &tb).unwrap();

        let mut l1_ref = 0.0;
        let mut l2_ref = 0.0;
        for i in 0..60 {
            l1_ref += (a[i] - b[i]).abs();
            l2_ref += (a[i] - b[i]) * (a[i] - b[i]);
        }
        l1_ref /= 60.0;
        l2_ref /= 60.0;
        assert!((l1 - l1_ref).abs() < 1e-12);
        assert!((l2 - l2_ref).abs() < 1e-12);
        assert!((psnr - 10.0 * (1.0 / l2_ref).log10()).abs() < 1e-12);
    }

    #[test]
    fn identical_checkpoints_have_zero_drift() {
        let m = Tensor::new(vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0], &[3, 2]).unwrap();
        let ckpts = vec![vec![m.clone()], vec![m.clone()], vec![m]];
        let drift = similarity_drift(&ckpts, &[0, 1, 2]).unwrap();
        assert_eq!(drift.drifts, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_probe_drift_is_zero() {
        let a = Tensor::new(vec![1.0, 0.0, 0.5, 0.5], &[2, 2]).unwrap();
        let b = Tensor::new(vec![2.0, 1.0, -0.5, 0.25], &[2, 2]).unwrap();
        let drift = similarity_drift(&[vec![a], vec![b]], &[1]).unwrap();
        assert_eq!(drift.drifts[1], 0.0);
    }

    #[test]
    fn drift_rejects_bad_probes_and_short_series() {
        let m = Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap();
        assert!(similarity_drift(&[vec![m.clone()]], &[0]).is_err());
        let m2 = m.clone();
        assert!(similarity_drift(&[vec![m], vec![m2]], &[5]).is_err());
    }

    #[test]
    fn toy_direct_updates_move_exactly_one_code() {
        let run = toy2d(5, 3).unwrap();
        for w in run.direct_positions.windows(2) {
            assert_eq!(Toy2dRun::changed_rows(&w[0], &w[1]), 1);
        }
    }

    #[test]
    fn toy_transfer_updates_move_many_codes() {
        let mut ok = 0;
        for seed in 0..20 {
            let run = toy2d(1, seed).unwrap();
            let changed =
                Toy2dRun::changed_rows(&run.transfer_positions[0], &run.transfer_positions[1]);
            if changed > 1 {
                ok += 1;
            }
        }
        assert!(ok >= 19, "cooperative update only on {ok}/20 seeds");
    }

    #[test]
    fn toy_zero_steps_returns_initial_positions() {
        let run = toy2d(0, 1).unwrap();
        assert_eq!(run.direct_positions.len(), 1);
        assert_eq!(run.transfer_positions.len(), 1);
        assert!(run.direct_positions[0].bit_eq(&run.initial));
    }

    #[test]
    fn trajectory_csv_row_count() {
        let run = toy2d(5, 1).unwrap();
        let csv = toy2d_to_csv(&run);
        let data_rows = csv.lines().count() - 1;
        assert_eq!(data_rows, 2 * (5 + 1) * 8);
    }

    #[test]
    fn probe_picker_is_deterministic_and_in_range() {
        let a = pick_probes(64, 10, 5);
        let b = pick_probes(64, 10, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|&p| p < 64));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
