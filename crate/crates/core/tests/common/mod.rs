#![allow(dead_code)]

use std::path::Path;

use capsprom_core::capsnet::CapsPromConfig;
use capsprom_core::data::registry::MANIFEST_FILE;
use capsprom_core::data::{write_fasta, DatasetKey, DatasetManifest, ManifestEntry, SourceFile};
use capsprom_core::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error `|a - n|₂ / (|a|₂ + |n|₂)` over all inputs between
/// reverse-mode gradients and central differences of step `h`.
///
/// `f` builds a scalar from the input leaves on a fresh graph.
pub fn gradcheck(inputs: &[Tensor], h: f64, f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars);
        g.item(out)
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for i in 0..t.numel() {
            let mut ins = inputs.to_vec();
            ins[k].data_mut()[i] = t.data()[i] + h;
            let up = eval(&ins);
            ins[k].data_mut()[i] = t.data()[i] - h;
            let down = eval(&ins);
            numeric[i] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic[k].iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic[k].iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Reduces any output to a scalar with fixed random weights so every
/// output element contributes to the checked gradient.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let w = random_tensor(g.shape(x), &mut rng(seed));
    let wv = g.constant(&w);
    let p = g.mul(x, wv).unwrap();
    g.sum_all(p)
}

/// Straightforward convolution oracle, `input[L × Cin]`,
/// `kernels[K × Cin × Cout]`, output `[Lout × Cout]`.
pub fn naive_conv1d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Vec<f64> {
    let (len, cin) = (input.shape()[0], input.shape()[1]);
    let (k, cout) = (kernels.shape()[0], kernels.shape()[2]);
    let out_len = (len - k) / stride + 1;
    let mut out = Vec::with_capacity(out_len * cout);
    for t in 0..out_len {
        for o in 0..cout {
            let mut acc = bias.data()[o];
            for dk in 0..k {
                for c in 0..cin {
                    acc += input.at(&[t * stride + dk, c]) * kernels.at(&[dk, c, o]);
                }
            }
            out.push(acc);
        }
    }
    out
}

pub fn naive_maxpool(x: &Tensor, window: usize) -> Vec<f64> {
    let (len, ch) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::new();
    for w in 0..len / window {
        for c in 0..ch {
            let best = (0..window)
                .map(|i| x.at(&[w * window + i, c]))
                .fold(f64::NEG_INFINITY, f64::max);
            out.push(best);
        }
    }
    out
}

/// Recomputes the six metrics directly from `(predicted, actual)` pairs.
pub fn brute_force_metrics(pairs: &[(u8, u8)]) -> [f64; 6] {
    let count = |p: u8, a: u8| pairs.iter().filter(|&&x| x == (p, a)).count() as f64;
    let (tp, tn, fp, fn_) = (count(1, 1), count(0, 0), count(1, 0), count(0, 1));
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let prec = div(tp, tp + fp);
    let sn = div(tp, tp + fn_);
    let sp = div(tn, tn + fp);
    let acc = div(tp + tn, pairs.len() as f64);
    let f1 = div(2.0 * prec * sn, prec + sn);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    let mcc = if den == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / den.sqrt() };
    [prec, sn, f1, sp, acc, mcc]
}

/// The reduced architecture used by gradient checks: 20 bp, 3-dim
/// embedding, 8 filters, 4 primary capsules.
pub fn toy_capsprom() -> CapsPromConfig {
    CapsPromConfig {
        seq_len: 20,
        embedding_dim: 3,
        conv_filters: 8,
        primary_filters: 16,
        head_hidden: Some(6),
        ..CapsPromConfig::default()
    }
}

pub fn random_dna(len: usize, rng: &mut impl Rng) -> String {
    (0..len).map(|_| ['A', 'C', 'G', 'T'][rng.gen_range(0..4)]).collect()
}

/// Writes a synthetic two-class dataset under `dir` with a manifest
/// registering it as `key`. Positives carry a planted TATAAT-like motif.
pub fn write_synthetic_dataset(dir: &Path, key: DatasetKey, bp: usize, pos: usize, neg: usize, seed: u64) {
    let mut r = rng(seed);
    let mut make = |n: usize, motif: bool, prefix: &str| -> Vec<(String, String)> {
        (0..n)
            .map(|i| {
                let mut s = random_dna(bp, &mut r);
                if motif {
                    let at = r.gen_range(0..bp - 6);
                    s.replace_range(at..at + 6, "TATAAT");
                }
                (format!("{prefix}{i}"), s)
            })
            .collect()
    };
    let p = make(pos, true, "p");
    let n = make(neg, false, "n");
    for (file, recs) in [("pos.fa", &p), ("neg.fa", &n)] {
        let f = std::fs::File::create(dir.join(file)).unwrap();
        write_fasta(f, recs.iter().map(|(a, b)| (a.as_str(), b.as_str())), 60).unwrap();
    }
    let mut m = DatasetManifest::default();
    m.datasets.insert(
        key,
        ManifestEntry {
            bp,
            positive: SourceFile {
                file: "pos.fa".into(),
                expected: pos,
                sha256: None,
            },
            negative: SourceFile {
                file: "neg.fa".into(),
                expected: neg,
                sha256: None,
            },
        },
    );
    m.save(&dir.join(MANIFEST_FILE)).unwrap();
}
