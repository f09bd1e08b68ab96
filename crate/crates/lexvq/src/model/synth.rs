//! Procedural stand-ins for the real inputs: a synthetic image set whose
//! color/shape factors loosely mirror the adjective/noun split, and demo
//! embedding/lexicon/corpus text for running the transfer pipeline without
//! external files.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::tensor::Tensor;

const PALETTE: &[(&str, [f64; 3])] = &[
    ("red", [0.90, 0.15, 0.15]),
    ("orange", [0.95, 0.55, 0.10]),
    ("yellow", [0.92, 0.90, 0.20]),
    ("green", [0.20, 0.75, 0.30]),
    ("cyan", [0.20, 0.80, 0.80]),
    ("blue", [0.20, 0.35, 0.85]),
    ("purple", [0.55, 0.25, 0.75]),
    ("gray", [0.55, 0.55, 0.55]),
];

/// Deterministically generates `n` images of `3 x size x size`: a colored
/// rectangle, disk, or stripe pattern over a differently colored background.
pub fn synth_dataset(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n).map(|_| synth_image(size, &mut rng)).collect()
}

fn synth_image(size: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let bg = PALETTE[rng.gen_range(0..PALETTE.len())].1;
    let fg = loop {
        let c = PALETTE[rng.gen_range(0..PALETTE.len())].1;
        if c != bg {
            break c;
        }
    };
    let mut data = vec![0.0f64; 3 * size * size];
    let mut put = |x: usize, y: usize, c: [f64; 3]| {
        for ch in 0..3 {
            data[ch * size * size + y * size + x] = c[ch];
        }
    };
    for y in 0..size {
        for x in 0..size {
            put(x, y, bg);
        }
    }
    match rng.gen_range(0..3) {
        0 => {
            // rectangle
            let w = rng.gen_range(size / 4..size / 2 + 1);
            let h = rng.gen_range(size / 4..size / 2 + 1);
            let x0 = rng.gen_range(0..size - w);
            let y0 = rng.gen_range(0..size - h);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    put(x, y, fg);
                }
            }
        }
        1 => {
            // disk
            let r = rng.gen_range(size / 6..size / 3 + 1) as isize;
            let cx = rng.gen_range(r as usize..size - r as usize) as isize;
            let cy = rng.gen_range(r as usize..size - r as usize) as isize;
            for y in 0..size as isize {
                for x in 0..size as isize {
                    if (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r {
                        put(x as usize, y as usize, fg);
                    }
                }
            }
        }
        _ => {
            // stripes
            let period = *[4usize, 8].get(rng.gen_range(0..2)).unwrap();
            let phase = rng.gen_range(0..period);
            let vertical = rng.gen_bool(0.5);
            for y in 0..size {
                for x in 0..size {
                    let t = if vertical { x } else { y };
                    if (t + phase) % period < period / 2 {
                        put(x, y, fg);
                    }
                }
            }
        }
    }
    Tensor::new(data, &[3, size, size]).expect("square image buffer")
}

const ADJ_GROUPS: &[&[&str]] = &[
    &["red", "orange", "yellow", "crimson", "scarlet", "amber", "golden", "tawny"],
    &["blue", "cyan", "azure", "teal", "indigo", "navy", "turquoise", "cobalt"],
    &["white", "black", "gray", "silver", "pale", "dark", "bright", "dim"],
    &["striped", "spotted", "dotted", "banded", "smooth", "rough", "shiny", "matte"],
    &["tiny", "small", "large", "huge", "wide", "narrow", "thick", "thin"],
];

const NOUN_GROUPS: &[&[&str]] = &[
    &["circle", "disk", "ring", "dot", "ball", "sphere", "oval", "blob"],
    &["square", "box", "rectangle", "block", "slab", "panel", "frame", "tile"],
    &["stripe", "band", "bar", "line", "strip", "rail", "rod", "beam"],
    &["wing", "beak", "tail", "breast", "belly", "crown", "throat", "nape"],
    &["background", "border", "edge", "corner", "center", "field", "patch", "spot"],
];

const FILLERS: &[&str] = &["the", "a", "with", "on", "over", "and"];

/// Demo embedding table text: every adjective/noun gets a vector near its
/// group's center, so the priors carry the cluster structure a real
/// embedding table would.
pub fn demo_embeddings_text(dim: usize, seed: u64) -> String {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = String::new();
    let emit_groups = |groups: &[&[&str]], rng: &mut ChaCha12Rng, out: &mut String| {
        for group in groups {
            let center: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for word in *group {
                out.push_str(word);
                for c in &center {
                    let v = c + rng.gen_range(-0.3..0.3);
                    out.push_str(&format!(" {v:.6}"));
                }
                out.push('\n');
            }
        }
    };
    emit_groups(ADJ_GROUPS, &mut rng, &mut out);
    emit_groups(NOUN_GROUPS, &mut rng, &mut out);
    out
}

/// Demo lexicon text. "orange" is dual-tagged to exercise words that belong
/// to both codebooks.
pub fn demo_lexicon_text() -> String {
    let mut out = String::new();
    for group in ADJ_GROUPS {
        for word in *group {
            if *word == "orange" {
                out.push_str("orange\ta,n\n");
            } else {
                out.push_str(&format!("{word}\ta\n"));
            }
        }
    }
    for group in NOUN_GROUPS {
        for word in *group {
            out.push_str(&format!("{word}\tn\n"));
        }
    }
    for word in FILLERS {
        out.push_str(&format!("{word}\tother\n"));
    }
    out
}

/// Demo corpus text: `sentences` lines of "the <adj> <noun>" with fillers,
/// adjectives preferring the noun groups they plausibly modify.
pub fn demo_corpus_text(sentences: usize, seed: u64) -> String {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let mut out = String::new();
    for _ in 0..sentences {
        let adj_group = rng.gen_range(0..ADJ_GROUPS.len());
        let adj = ADJ_GROUPS[adj_group][rng.gen_range(0..8)];
        // colors modify anything; texture/size words lean toward shapes
        let noun_group = if adj_group >= 3 && rng.gen_bool(0.7) {
            rng.gen_range(0..3)
        } else {
            rng.gen_range(0..NOUN_GROUPS.len())
        };
        let noun = NOUN_GROUPS[noun_group][rng.gen_range(0..8)];
        let filler = FILLERS[rng.gen_range(0..FILLERS.len())];
        out.push_str(&format!("{filler} {adj} {noun}\n"));
    }
    out
}
