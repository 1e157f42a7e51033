//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use xlembed::autodiff::{grad_check, Graph, Tensor, Var};
use xlembed::contrastive::{simcse_loss, train, Sampling, TrainConfig};
use xlembed::data::{gen_synthetic_parallel, pairs_to_triplets, CorpusSpec, Label, PairRecord};
use xlembed::encoder::{mean_pool, tokenize, Binder, Encoder, EncoderConfig, Linear, ParamMode, Preset, Projection, Vocab};
use xlembed::eval::{f1_score, mine_bitext, nearest_neighbors, retrieval_accuracy, spearman_rho, tune_threshold, EmbeddingSet, Matching, Pair};
use xlembed::experiment::{run_cell, ExperimentConfig};
use xlembed::lora::{apply_lora, wrap_linear, LoraConfig, LoraTarget};
use xlembed::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const SEEDS: u64 = 10;
const GRAD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;

// ---- gradient correctness --------------------------------------------------

/// Reduces a tensor to a scalar with fixed random weights so no coordinate
/// of the gradient is trivially constant.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(Tensor::randn(g.shape(y), 1.0, &mut rng(seed ^ 0x5eed)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph, Var, u64) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    fn c(seed: u64, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut rng(seed.wrapping_mul(31) + shape.iter().sum::<usize>() as u64))
    }
    let mask = [1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0];
    let mut cases: Vec<OpCase> = vec![
        ("matmul lhs", vec![3, 4], Box::new(|g, x, s| {
            let b = g.constant(c(s, &[4, 5]));
            let y = g.matmul(x, b)?;
            weighted_sum(g, y, s)
        })),
        ("matmul rhs", vec![4, 5], Box::new(|g, x, s| {
            let a = g.constant(c(s, &[3, 4]));
            let y = g.matmul(a, x)?;
            weighted_sum(g, y, s)
        })),
        ("matmul 3-D by 2-D", vec![2, 3, 4], Box::new(|g, x, s| {
            let b = g.constant(c(s, &[5, 4]));
            let y = g.matmul_t(x, b, false, true)?;
            weighted_sum(g, y, s)
        })),
        ("matmul batched rhs", vec![2, 5, 4], Box::new(|g, x, s| {
            let a = g.constant(c(s, &[2, 3, 4]));
            let y = g.matmul_t(a, x, false, true)?;
            weighted_sum(g, y, s)
        })),
        ("matmul batched lhs", vec![2, 3, 4], Box::new(|g, x, s| {
            let b = g.constant(c(s, &[2, 4, 5]));
            let y = g.matmul(x, b)?;
            weighted_sum(g, y, s)
        })),
        ("add", vec![3, 4], Box::new(|g, x, s| {
            let b = g.constant(c(s, &[3, 4]));
            let y = g.add(x, b)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, s)
        })),
        ("add bias", vec![4], Box::new(|g, x, s| {
            let a = g.constant(c(s, &[2, 3, 4]));
            let y = g.add(a, x)?;
            let y = g.mul(y, y)?;
            weighted_sum(g, y, s)
        })),
        ("mul", vec![3, 4], Box::new(|g, x, s| {
            let b = g.constant(c(s, &[3, 4]));
            let y = g.mul(x, b)?;
            let y = g.mul(y, x)?;
            weighted_sum(g, y, s)
        })),
        ("scale", vec![3, 4], Box::new(|g, x, s| {
            let y = g.scale(x, -2.5)?;
            weighted_sum(g, y, s)
        })),
        ("softmax", vec![3, 5], Box::new(|g, x, s| {
            let y = g.softmax(x)?;
            weighted_sum(g, y, s)
        })),
        ("masked_softmax", vec![2, 4, 8], Box::new(move |g, x, s| {
            let y = g.masked_softmax(x, &mask)?;
            weighted_sum(g, y, s)
        })),
        ("layer_norm x", vec![3, 6], Box::new(|g, x, s| {
            let gamma = g.constant(c(s, &[6]));
            let beta = g.constant(c(s + 1, &[6]));
            let y = g.layer_norm(x, gamma, beta, 1e-5)?;
            weighted_sum(g, y, s)
        })),
        ("layer_norm gamma", vec![6], Box::new(|g, x, s| {
            let input = g.constant(c(s, &[3, 6]));
            let beta = g.constant(c(s + 1, &[6]));
            let y = g.layer_norm(input, x, beta, 1e-5)?;
            weighted_sum(g, y, s)
        })),
        ("layer_norm beta", vec![6], Box::new(|g, x, s| {
            let input = g.constant(c(s, &[3, 6]));
            let gamma = g.constant(c(s + 1, &[6]));
            let y = g.layer_norm(input, gamma, x, 1e-5)?;
            weighted_sum(g, y, s)
        })),
        ("gelu", vec![4, 5], Box::new(|g, x, s| {
            let y = g.gelu(x)?;
            weighted_sum(g, y, s)
        })),
        ("masked_row_mean", vec![2, 4, 3], Box::new(|g, x, s| {
            let y = g.masked_row_mean(x, &[1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0])?;
            weighted_sum(g, y, s)
        })),
        ("transpose", vec![2, 3, 4], Box::new(|g, x, s| {
            let y = g.transpose(x)?;
            weighted_sum(g, y, s)
        })),
        ("concat", vec![2, 3], Box::new(|g, x, s| {
            let other = g.constant(c(s, &[2, 2]));
            let y = g.concat(&[other, x, x], 1)?;
            weighted_sum(g, y, s)
        })),
        ("slice", vec![4, 5], Box::new(|g, x, s| {
            let y = g.slice(x, 1, 1, 4)?;
            weighted_sum(g, y, s)
        })),
        ("dropout", vec![4, 5], Box::new(|g, x, s| {
            let y = g.dropout(x, 0.3, &mut rng(s + 77))?;
            weighted_sum(g, y, s)
        })),
        ("l2_normalize", vec![3, 5], Box::new(|g, x, s| {
            let y = g.l2_normalize(x)?;
            weighted_sum(g, y, s)
        })),
        ("gather", vec![5, 3], Box::new(|g, x, s| {
            let y = g.gather(x, &[4, 0, 4, 2])?;
            weighted_sum(g, y, s)
        })),
        ("sum", vec![3, 4], Box::new(|g, x, _| {
            let y = g.mul(x, x)?;
            g.sum(y)
        })),
        ("mean", vec![3, 4], Box::new(|g, x, _| {
            let y = g.mul(x, x)?;
            g.mean(y)
        })),
        ("reshape", vec![3, 4], Box::new(|g, x, s| {
            let y = g.reshape(x, &[2, 6])?;
            weighted_sum(g, y, s)
        })),
        ("split_heads", vec![2, 3, 8], Box::new(|g, x, s| {
            let y = g.split_heads(x, 4)?;
            weighted_sum(g, y, s)
        })),
        ("merge_heads", vec![8, 3, 2], Box::new(|g, x, s| {
            let y = g.merge_heads(x, 4)?;
            weighted_sum(g, y, s)
        })),
        ("cross_entropy", vec![4, 6], Box::new(|g, x, _| g.cross_entropy(x, &[0, 5, 2, 2]))),
    ];
    for (name, idx) in [("simcse_loss premises", 0usize), ("simcse_loss positives", 1), ("simcse_loss negatives", 2)] {
        cases.push((name, vec![4, 6], Box::new(move |g, x, s| {
            let mut blocks = [x; 3];
            for (k, b) in blocks.iter_mut().enumerate() {
                if k != idx {
                    *b = g.constant(c(s + k as u64, &[4, 6]));
                }
            }
            simcse_loss(g, blocks[0], blocks[1], blocks[2], 0.05)
        })));
    }
    cases
}

/// Finite-difference check of a named model tensor: `run(value)` rebuilds the
/// model with that tensor, runs the forward pass and returns the loss and the
/// analytic gradient of the tensor.
fn param_check(x: &Tensor, run: impl Fn(&Tensor) -> Result<(f64, Tensor)>) -> Result<f64> {
    let (_, analytic) = run(x)?;
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_EPS;
        let up = run(&probe)?.0;
        probe.data_mut()[i] = orig - FD_EPS;
        let down = run(&probe)?.0;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_EPS);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

fn tiny_encoder(seed: u64) -> Encoder {
    Encoder::new(EncoderConfig {
        vocab_size: 7,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
        max_len: 6,
        seed,
        token_init_std: 1.0,
        position_init_std: 0.3,
        dropout: 0.0,
    })
    .unwrap()
}

fn named_tensor<'a>(model: &'a mut Encoder, name: &str) -> &'a mut Arc<Tensor> {
    match name {
        "embed.tokens" => return &mut model.tokens,
        "embed.positions" => return &mut model.positions,
        "final_norm.gamma" => return &mut model.final_norm.gamma,
        "final_norm.beta" => return &mut model.final_norm.beta,
        _ => {}
    }
    let rest = name.strip_prefix("blocks.").unwrap();
    let (idx, rest) = rest.split_once('.').unwrap();
    let block = &mut model.blocks[idx.parse::<usize>().unwrap()];
    let (owner, field) = rest.rsplit_once('.').unwrap();
    match owner {
        "ln_attn" | "ln_ffn" => {
            let norm = if owner == "ln_attn" { &mut block.ln_attn } else { &mut block.ln_ffn };
            if field == "gamma" {
                &mut norm.gamma
            } else {
                &mut norm.beta
            }
        }
        slot => match block.linear_mut(slot).unwrap() {
            Projection::Plain(l) => {
                if field == "weight" {
                    &mut l.weight
                } else {
                    &mut l.bias
                }
            }
            Projection::Adapted(_) => panic!("adapted slot {name}"),
        },
    }
}

fn set_adapter(model: &mut Encoder, name: &str, t: &Tensor) {
    let (slot, factor) = name.rsplit_once('.').unwrap();
    let lora = model.linear_mut(slot).and_then(Projection::adapter_mut).unwrap();
    let (a, b) = (lora.a().as_ref().clone(), lora.b().as_ref().clone());
    if factor == "lora_a" {
        lora.set_factors(t.clone(), b).unwrap();
    } else {
        lora.set_factors(a, t.clone()).unwrap();
    }
}

/// Weighted sum of mean-pooled encoder outputs and its gradients.
fn pooled_loss(model: &Encoder, mode: ParamMode, seed: u64) -> Result<(f64, Vec<(String, Tensor)>)> {
    let vocab = Vocab::from_tokens(["a", "b", "c", "d", "e"])?;
    let batch = tokenize(&["a b c d", "e a", "c"], &vocab, 6)?;
    let mut g = Graph::new();
    let mut binder = Binder::new(mode);
    let reps = model.encode(&mut g, &batch, &mut binder)?;
    let pooled = mean_pool(&mut g, reps, &batch.mask)?;
    let loss = weighted_sum(&mut g, pooled, seed)?;
    let value = g.value(loss).item()?;
    g.backward(loss)?;
    let grads = binder
        .bound()
        .iter()
        .map(|(n, v)| (n.clone(), g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v)))))
        .collect();
    Ok((value, grads))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checks = 0usize;
    let mut record = |err: f64, what: String| {
        checks += 1;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, what);
        }
    };

    for (name, shape, f) in op_cases() {
        for seed in 0..SEEDS {
            let x = Tensor::randn(&shape, 1.0, &mut rng(1000 + seed));
            let err = grad_check(|g, x| f(g, x, seed), &x, FD_EPS).unwrap();
            record(err, format!("{name} seed {seed}"));
        }
    }

    for seed in 0..SEEDS {
        let cfg = LoraConfig { rank: 2, ..LoraConfig::default() };
        let mut l = wrap_linear(Linear::init(5, 4, &mut rng(seed)), &cfg, &mut rng(seed + 1)).unwrap();
        l.set_factors(l.a().as_ref().clone(), Tensor::randn(&[4, 2], 0.5, &mut rng(seed + 2))).unwrap();
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng(seed + 3));
        let err = grad_check(
            |g, x| {
                let y = l.forward(g, x, &mut Binder::new(ParamMode::Frozen), "l")?;
                weighted_sum(g, y, seed)
            },
            &x,
            FD_EPS,
        )
        .unwrap();
        record(err, format!("LoraLinear input seed {seed}"));
        for factor in ["lora_a", "lora_b"] {
            let current = if factor == "lora_a" { l.a() } else { l.b() };
            let err = param_check(current, |t| {
                let mut m = l.clone();
                if factor == "lora_a" {
                    m.set_factors(t.clone(), l.b().as_ref().clone())?;
                } else {
                    m.set_factors(l.a().as_ref().clone(), t.clone())?;
                }
                let mut g = Graph::new();
                let mut binder = Binder::new(ParamMode::Adapters);
                let xv = g.constant(x.clone());
                let y = m.forward(&mut g, xv, &mut binder, "l")?;
                let loss = weighted_sum(&mut g, y, seed)?;
                let value = g.value(loss).item()?;
                g.backward(loss)?;
                let v = binder.var(&format!("l.{factor}")).unwrap();
                Ok((value, g.grad(v).unwrap().clone()))
            })
            .unwrap();
            record(err, format!("LoraLinear {factor} seed {seed}"));
        }
    }

    // mean_pool after encode, against every named tensor of a plain model and
    // every adapter factor of an adapted one.
    for seed in 0..SEEDS {
        let plain = tiny_encoder(seed);
        let (_, grads) = pooled_loss(&plain, ParamMode::All, seed).unwrap();
        for (name, _) in &grads {
            let mut probe_model = plain.clone();
            let current = named_tensor(&mut probe_model, name).as_ref().clone();
            let err = param_check(&current, |t| {
                let mut m = plain.clone();
                *named_tensor(&mut m, name) = Arc::new(t.clone());
                let (v, gs) = pooled_loss(&m, ParamMode::All, seed)?;
                Ok((v, gs.into_iter().find(|(n, _)| n == name).unwrap().1))
            })
            .unwrap();
            record(err, format!("encode {name} seed {seed}"));
        }

        let mut adapted = tiny_encoder(seed);
        apply_lora(&mut adapted, &LoraConfig { rank: 2, seed, ..LoraConfig::default() }).unwrap();
        let names: Vec<String> = xlembed::lora::adapters(&adapted).into_iter().map(|(n, _)| n).collect();
        for (i, n) in names.iter().enumerate() {
            let b = Tensor::randn(adapted.linear_mut(n).unwrap().adapter().unwrap().b().shape(), 0.3, &mut rng(seed * 100 + i as u64));
            set_adapter(&mut adapted, &format!("{n}.lora_b"), &b);
        }
        for n in &names {
            for factor in ["lora_a", "lora_b"] {
                let full = format!("{n}.{factor}");
                let lora = adapted.linears().find(|(k, _)| k == n).unwrap().1.adapter().unwrap().clone();
                let current = if factor == "lora_a" { lora.a().as_ref().clone() } else { lora.b().as_ref().clone() };
                let err = param_check(&current, |t| {
                    let mut m = adapted.clone();
                    set_adapter(&mut m, &full, t);
                    let (v, gs) = pooled_loss(&m, ParamMode::Adapters, seed)?;
                    Ok((v, gs.into_iter().find(|(k, _)| *k == full).unwrap().1))
                })
                .unwrap();
                record(err, format!("encode {full} seed {seed}"));
            }
        }
    }

    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 <= GRAD_TOL && secs < 60.0,
        format!(
            "{checks} checks over {SEEDS} seeds, max rel err {:.2e} ({}) (tol {GRAD_TOL:e}), {secs:.1} s (limit 60 s)",
            worst.0, worst.1
        ),
    )
}

// ---- CLI helpers -------------------------------------------------------------

fn xlembed(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_xlembed")).args(args).current_dir(dir).output().expect("binary runs");
    assert!(out.status.success(), "xlembed {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_corpus_cfg(dir: &Path) {
    std::fs::write(
        dir.join("run.cfg"),
        "max_len = 16\ncorpus.n_triplets = 120\ncorpus.n_heldout = 30\ncorpus.n_sts = 30\n\
         train.batch_size = 16\ntrain.lr = 0.003\ntrain.sampling = cross_lingual\ntrain.max_steps = 6\n",
    )
    .unwrap();
}

// ---- identity at initialisation ----------------------------------------------

fn identity_at_init() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus_cfg(d);
    xlembed(d, &["gen-corpus", "--config", "run.cfg", "--out", "corpus"]);
    let mut compared = Vec::new();
    let mut equal = true;
    for preset in ["small", "medium", "large"] {
        std::fs::write(d.join(format!("{preset}.cfg")), format!("preset = \"{preset}\"\nmax_len = 16\n")).unwrap();
        for (tag, extra) in [("lora", None), ("base", Some("--no-adapters"))] {
            let ckpt = format!("{preset}.{tag}.ckpt");
            let mut args = vec!["init", "--config", &format!("{preset}.cfg")[..], "--vocab", "corpus/vocab.txt", "--out", &ckpt[..]]
                .into_iter()
                .map(String::from)
                .collect::<Vec<_>>();
            if let Some(e) = extra {
                args.push(e.into());
            }
            xlembed(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
            xlembed(d, &["embed", "--checkpoint", &ckpt, "--data", "corpus/heldout.test.l2.txt", "--out", &format!("{preset}.{tag}.mste")]);
        }
        let a = std::fs::read(d.join(format!("{preset}.lora.mste"))).unwrap();
        let b = std::fs::read(d.join(format!("{preset}.base.mste"))).unwrap();
        equal &= a == b;
        compared.push(format!("{preset} {} bytes {}", a.len(), if a == b { "identical" } else { "DIFFER" }));
    }
    outcome(equal, format!("fresh-adapter vs base embedding files: {}", compared.join(", ")))
}

// ---- frozen base -------------------------------------------------------------

fn frozen_base() -> Outcome {
    let spec = CorpusSpec { n_triplets: 400, ..CorpusSpec::default() };
    let corpus = gen_synthetic_parallel(&spec).unwrap();
    let vocab = corpus.vocab();
    let config = Preset::Small.config(vocab.size(), 16, 11);
    let mut model = Encoder::new(config.clone()).unwrap();
    apply_lora(&mut model, &LoraConfig { seed: 11, ..LoraConfig::default() }).unwrap();
    let before: Vec<(String, Vec<f64>)> = xlembed::lora::adapters(&model).iter().map(|(n, l)| (n.clone(), l.b().data().to_vec())).collect();
    let cfg = TrainConfig {
        batch_size: 32,
        lr: 3e-3,
        sampling: Sampling::CrossLingual,
        epochs: 10,
        max_steps: Some(50),
        ..TrainConfig::default()
    };
    let out = train(&mut model, &vocab, &corpus.triplet_corpus(), &cfg).unwrap();
    let reference = Encoder::new(config).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let ours = model.base_tensors();
    let theirs = reference.base_tensors();
    let same = ours.len() == theirs.len() && ours.iter().zip(&theirs).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape() && bits(t1) == bits(t2));
    let moved = xlembed::lora::adapters(&model)
        .iter()
        .zip(&before)
        .filter(|((_, l), (_, b0))| l.b().data() != &b0[..])
        .count();
    outcome(
        same && out.steps == 50 && moved == before.len(),
        format!(
            "{} base tensors bit-identical to initialisation after {} steps; {moved}/{} adapters updated",
            theirs.len(),
            out.steps,
            before.len()
        ),
    )
}

// ---- loss oracle ---------------------------------------------------------------

fn oracle_loss(p: &[Vec<f64>], pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let n = p.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += (cos(&p[i], &pos[j]) / tau).exp();
            denom += (cos(&p[i], &neg[j]) / tau).exp();
        }
        total += -((cos(&p[i], &pos[i]) / tau).exp() / denom).ln();
    }
    total / n as f64
}

fn loss_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for b in 2..=4usize {
        for seed in 0..20u64 {
            let mut r = rng(b as u64 * 1000 + seed);
            let mut block = || (0..b).map(|_| (0..8).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).collect::<Vec<_>>();
            let (p, pos, neg) = (block(), block(), block());
            let mut g = Graph::new();
            let mut leaf = |rows: &Vec<Vec<f64>>| g.constant(Tensor::from_rows(rows).unwrap());
            let (vp, vpos, vneg) = (leaf(&p), leaf(&pos), leaf(&neg));
            let l = simcse_loss(&mut g, vp, vpos, vneg, 0.05).unwrap();
            let ours = g.value(l).item().unwrap();
            let expect = oracle_loss(&p, &pos, &neg, 0.05);
            worst = worst.max((ours - expect).abs());
            cases += 1;
        }
    }
    outcome(worst <= 1e-12, format!("{cases} batches (B = 2, 3, 4), max abs diff {worst:.2e} (tol 1e-12)"))
}

// ---- metric oracles ------------------------------------------------------------

fn oracle_ranks(xs: &[f64]) -> Vec<f64> {
    // Rank = 1 + (number strictly smaller) + (number of equal others) / 2.
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

fn unit_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = Tensor::randn(&[d], 1.0, r).into_data();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// A mining instance whose gold pairs all score above every other pair:
/// `n` source rows, of which `matched` have a noisy copy among the
/// targets, and `extra` distractor targets.
fn separated_instance(seed: u64, n: usize, matched: usize, extra: usize) -> (EmbeddingSet, EmbeddingSet, Vec<Pair>, f64, f64) {
    let mut r = rng(seed);
    loop {
        let src = unit_rows(&mut r, n, 48);
        let mut tgt = unit_rows(&mut r, extra, 48);
        let mut slots: Vec<usize> = (0..matched + extra).collect();
        for i in (1..slots.len()).rev() {
            slots.swap(i, r.gen_range(0..=i));
        }
        let mut all = vec![Vec::new(); matched + extra];
        let mut gold = Vec::new();
        for (i, &slot) in slots.iter().take(matched).enumerate() {
            all[slot] = src[i].iter().map(|x| x + r.gen_range(-0.02..0.02)).collect();
            gold.push((i, slot));
        }
        for (slot, row) in slots.iter().skip(matched).zip(tgt.drain(..)) {
            all[*slot] = row;
        }
        let a = EmbeddingSet::from_rows(&src).unwrap();
        let b = EmbeddingSet::from_rows(&all).unwrap();
        let sims = xlembed::eval::similarity_matrix(&a, &b).unwrap();
        let m = b.len();
        let gold_min = gold.iter().map(|&(i, j)| sims[i * m + j]).fold(f64::INFINITY, f64::min);
        let other_max = (0..n * m).filter(|k| !gold.contains(&(k / m, k % m))).map(|k| sims[k]).fold(f64::NEG_INFINITY, f64::max);
        if gold_min > 0.95 && other_max < 0.75 {
            return (a, b, gold, gold_min, other_max);
        }
    }
}

fn metric_oracles() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // Spearman against rank-then-Pearson on tie-heavy integer data.
    let mut worst: f64 = 0.0;
    let mut r = rng(7);
    let mut tested = 0;
    while tested < 100 {
        let n = r.gen_range(3..40);
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(0..6) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| r.gen_range(0..6) as f64 * 0.5).collect();
        let (rx, ry) = (oracle_ranks(&x), oracle_ranks(&y));
        if rx.iter().all(|&v| v == rx[0]) || ry.iter().all(|&v| v == ry[0]) {
            continue;
        }
        let ours = spearman_rho(&x, &y).unwrap();
        worst = worst.max((ours - oracle_pearson(&rx, &ry)).abs());
        tested += 1;
    }
    pass &= worst <= 1e-12;
    notes.push(format!("spearman 100 inputs max diff {worst:.1e}"));

    // F1 against explicit set arithmetic.
    let mut f1_ok = true;
    for seed in 0..200 {
        let mut r = rng(10_000 + seed);
        let mut pairs = |k: usize| (0..k).map(|_| (r.gen_range(0..5), r.gen_range(0..5))).collect::<Vec<Pair>>();
        let (pred, gold) = (pairs(seed as usize % 9), pairs(seed as usize % 7));
        let ps: std::collections::BTreeSet<Pair> = pred.iter().copied().collect();
        let gs: std::collections::BTreeSet<Pair> = gold.iter().copied().collect();
        let tp = ps.intersection(&gs).count() as f64;
        let precision = if ps.is_empty() { if gs.is_empty() { 1.0 } else { 0.0 } } else { tp / ps.len() as f64 };
        let recall = if gs.is_empty() { 1.0 } else { tp / gs.len() as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        let ours = f1_score(&pred, &gold);
        f1_ok &= ours.precision == precision && ours.recall == recall && ours.f1 == f1;
    }
    pass &= f1_ok;
    notes.push(format!("f1 200 sets {}", if f1_ok { "exact" } else { "MISMATCH" }));

    // Retrieval against exhaustive argmax with first-index tie breaking.
    let mut retrieval_ok = true;
    for seed in 0..200 {
        let mut r = rng(20_000 + seed);
        let n = 1 + seed as usize % 10;
        let mut src = unit_rows(&mut r, n, 4);
        let mut tgt = unit_rows(&mut r, n, 4);
        if n > 2 && seed % 3 == 0 {
            // Duplicate rows force exact ties.
            tgt[n - 1] = tgt[0].clone();
            src[1] = src[0].clone();
        }
        let a = EmbeddingSet::from_rows(&src).unwrap();
        let b = EmbeddingSet::from_rows(&tgt).unwrap();
        let sims = xlembed::eval::similarity_matrix(&a, &b).unwrap();
        let argmax: Vec<usize> = (0..n)
            .map(|i| (0..n).fold(0, |best, j| if sims[i * n + j] > sims[i * n + best] { j } else { best }))
            .collect();
        let hits = argmax.iter().enumerate().filter(|(i, j)| i == *j).count() as f64 / n as f64;
        retrieval_ok &= nearest_neighbors(&a, &b).unwrap() == argmax;
        retrieval_ok &= retrieval_accuracy(&a, &b).unwrap().metric("accuracy") == Some(hits);
    }
    pass &= retrieval_ok;
    notes.push(format!("retrieval 200 instances N<=10 {}", if retrieval_ok { "exact" } else { "MISMATCH" }));

    // Tune on one separated instance, mine a fresh one.
    let mut mining_min: f64 = 1.0;
    for seed in 0..20 {
        let (da, db, dgold, ..) = separated_instance(30_000 + seed, 12, 9, 5);
        let (ta, tb, tgold, ..) = separated_instance(40_000 + seed, 12, 9, 5);
        let choice = tune_threshold(&da, &db, &dgold, Matching::Greedy).unwrap();
        let mined = mine_bitext(&ta, &tb, choice.threshold, Matching::Greedy).unwrap();
        mining_min = mining_min.min(f1_score(&mined, &tgold).f1).min(choice.scores.f1);
    }
    pass &= mining_min == 1.0;
    notes.push(format!("tuned mining 20 separated instances min F1 {mining_min}"));
    outcome(pass, notes.join("; "))
}

// ---- triplet construction ------------------------------------------------------

fn triplet_construction() -> Outcome {
    let labels = [Label::Entailment, Label::Neutral, Label::Contradiction];
    let mut worst = String::new();
    let mut total = 0usize;
    for seed in 0..1000u64 {
        let mut r = rng(50_000 + seed);
        let n = r.gen_range(0..25);
        let pairs: Vec<PairRecord> = (0..n)
            .map(|_| {
                PairRecord::new(
                    format!("p{}", r.gen_range(0..4)),
                    format!("h{}", r.gen_range(0..6)),
                    labels[r.gen_range(0..3)],
                    ["en", "de"][r.gen_range(0..2)],
                )
                .unwrap()
            })
            .collect();
        let built = pairs_to_triplets(&pairs);

        let mut expected = Vec::new();
        for e in &pairs {
            for c in &pairs {
                if e.label == Label::Entailment && c.label == Label::Contradiction && e.premise == c.premise && e.lang == c.lang {
                    expected.push((e.lang.clone(), e.premise.clone(), e.hypothesis.clone(), c.hypothesis.clone()));
                }
            }
        }
        let mut keys: Vec<(&str, &str)> = pairs.iter().map(|p| (p.lang.as_str(), p.premise.as_str())).collect();
        keys.sort();
        keys.dedup();
        let complete = keys
            .iter()
            .filter(|(l, p)| {
                let has = |lab: Label| pairs.iter().any(|x| x.lang == *l && x.premise == *p && x.label == lab);
                has(Label::Entailment) && has(Label::Contradiction)
            })
            .count();

        let mut got: Vec<(String, String, String, String)> = built
            .triplets
            .iter()
            .map(|t| (t.lang_p.clone(), t.premise.clone(), t.entailment.clone(), t.contradiction.clone()))
            .collect();
        expected.sort();
        got.sort();
        total += expected.len();
        if got != expected || built.skipped_premises != keys.len() - complete {
            worst = format!("seed {seed}: {} triplets vs oracle {}", got.len(), expected.len());
            break;
        }
    }
    outcome(
        worst.is_empty(),
        if worst.is_empty() {
            format!("1000 random pair sets, {total} triplets, all equal to the brute-force oracle")
        } else {
            worst
        },
    )
}

// ---- learning on the synthetic task -------------------------------------------

fn e2e_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

struct Cells {
    all_linear: Vec<xlembed::experiment::CellResult>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn end_to_end(cells: &mut Option<Cells>) -> Outcome {
    let start = Instant::now();
    let cfg = e2e_config();
    let corpus = gen_synthetic_parallel(&cfg.corpus).unwrap();
    let results: Vec<_> = (0..3).map(|seed| run_cell(&corpus, &cfg, Preset::Small, seed).unwrap().1).collect();
    let secs = start.elapsed().as_secs_f64();
    let retrieval = mean(results.iter().map(|c| c.retrieval));
    let rho = mean(results.iter().map(|c| c.sts_spearman));
    let n = corpus.heldout_test[0].len();
    let chance = 1.0 / n as f64;
    let steps = results.iter().map(|c| c.steps).max().unwrap();
    let per_seed: Vec<String> = results.iter().map(|c| format!("{:.3}/{:.3}", c.retrieval, c.sts_spearman)).collect();
    let pass = retrieval >= 0.90 && retrieval >= 10.0 * chance && rho >= 0.5 && secs < 300.0 && steps <= 500;
    let detail = format!(
        "{} langs, {} triplets, {} topics, {} steps: retrieval {retrieval:.4} (>= 0.90 and >= {:.3}), STS rho {rho:.4} (>= 0.5), per seed {}, {secs:.0} s (limit 300 s)",
        cfg.corpus.n_langs,
        cfg.corpus.n_triplets,
        cfg.corpus.topic_count,
        steps,
        10.0 * chance,
        per_seed.join(" "),
    );
    *cells = Some(Cells { all_linear: results });
    outcome(pass, detail)
}

fn target_ordering(cells: &Option<Cells>) -> Outcome {
    let cfg = e2e_config();
    let corpus = gen_synthetic_parallel(&cfg.corpus).unwrap();
    let all_linear = match cells {
        Some(c) => c.all_linear.iter().map(|c| c.sts_spearman).collect::<Vec<_>>(),
        None => (0..3).map(|seed| run_cell(&corpus, &cfg, Preset::Small, seed).unwrap().1.sts_spearman).collect(),
    };
    let qv_cfg = ExperimentConfig {
        lora: LoraConfig { target: LoraTarget::QueryValue, ..cfg.lora.clone() },
        ..cfg.clone()
    };
    let qv: Vec<f64> = (0..3).map(|seed| run_cell(&corpus, &qv_cfg, Preset::Small, seed).unwrap().1.sts_spearman).collect();
    let (al, q) = (mean(all_linear.iter().copied()), mean(qv.iter().copied()));
    outcome(al >= q, format!("mean STS rho all_linear {al:.4} >= query_value {q:.4} over 3 seeds"))
}

// ---- scaling -------------------------------------------------------------------

fn scaling() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("scale.cfg"),
        "max_len = 16\ntrain.batch_size = 32\ntrain.lr = 0.003\ntrain.sampling = cross_lingual\ntrain.epochs = 100\ntrain.max_steps = 150\n",
    )
    .unwrap();
    let start = Instant::now();
    xlembed(d, &["scaling", "--config", "scale.cfg", "--presets", "small,medium,large", "--seeds", "0,1,2", "--out", "out"]);
    let secs = start.elapsed().as_secs_f64();
    let report = read_json(&d.join("out/scaling.json"));
    let rows = report["rows"].as_array().unwrap();
    let row = |name: &str| rows.iter().find(|r| r["preset"] == name).unwrap();
    let acc = |name: &str| row(name)["mean_retrieval"].as_f64().unwrap();
    let counts: Vec<u64> = ["small", "medium", "large"].iter().map(|p| row(p)["trainable_params"].as_u64().unwrap()).collect();

    // Trainable parameters of an all-linear adapter set: r (d_in + d_out) per
    // map, four d x d attention maps and the two feed-forward maps per layer.
    let expected: Vec<u64> = [Preset::Small, Preset::Medium, Preset::Large]
        .iter()
        .map(|p| {
            let (d, layers, _, ff) = p.dims();
            (layers * 8 * (4 * 2 * d + 2 * (d + ff))) as u64
        })
        .collect();
    let monotone = counts.windows(2).all(|w| w[0] <= w[1]);
    let pass = acc("large") > acc("small") && monotone && counts == expected;
    outcome(
        pass,
        format!(
            "mean retrieval small {:.4} medium {:.4} large {:.4} (large > small required); trainable {:?} (expected {:?}); {secs:.0} s",
            acc("small"),
            acc("medium"),
            acc("large"),
            counts,
            expected
        ),
    )
}

// ---- determinism ---------------------------------------------------------------

/// Runs a short pipeline in `dir` and returns every manifest's summary.
fn pipeline(dir: &Path) -> BTreeMap<String, (Value, Value)> {
    small_corpus_cfg(dir);
    std::fs::write(dir.join("pairs.tsv"), "P\tH1\tentailment\nP\tH2\tcontradiction\nP\tH3\tcontradiction\n").unwrap();
    std::fs::write(dir.join("tiny.cfg"), "max_len = 16\ncorpus.n_triplets = 120\ntrain.batch_size = 8\ntrain.sampling = cross_lingual\ntrain.max_steps = 2\n").unwrap();
    let steps: Vec<Vec<&str>> = vec![
        vec!["gen-corpus", "--config", "run.cfg", "--out", "corpus"],
        vec!["triplets", "--data", "pairs.tsv", "--out", "t.tsv"],
        vec![
            "train", "--config", "run.cfg", "--vocab", "corpus/vocab.txt", "--dev", "corpus/sts.dev.tsv", "--data", "corpus/triplets.l0.tsv",
            "--data", "corpus/triplets.l1.tsv", "--data", "corpus/triplets.l2.tsv", "--out", "run",
        ],
        vec!["embed", "--checkpoint", "run/adapter.ckpt", "--data", "corpus/heldout.test.l0.txt", "--out", "l0.mste"],
        vec!["embed", "--checkpoint", "run/adapter.ckpt", "--data", "corpus/heldout.test.l1.txt", "--out", "l1.mste"],
        vec!["embed", "--checkpoint", "run/adapter.ckpt", "--data", "corpus/sts.test.a.txt", "--out", "a.mste"],
        vec!["embed", "--checkpoint", "run/adapter.ckpt", "--data", "corpus/sts.test.b.txt", "--out", "b.mste"],
        vec!["eval", "--task", "retrieval", "--data", "l0.mste", "l1.mste", "--out", "retrieval.json"],
        vec!["eval", "--task", "sts", "--data", "a.mste", "b.mste", "--gold", "corpus/sts.test.tsv", "--out", "sts.json"],
        vec![
            "eval", "--task", "mine", "--data", "l0.mste", "l1.mste", "--gold", "corpus/mine.test.l1.gold.tsv", "--threshold", "0.5", "--out",
            "mine.json",
        ],
        vec!["scaling", "--config", "tiny.cfg", "--presets", "small,medium", "--seeds", "0", "--out", "scale"],
    ];
    for args in &steps {
        xlembed(dir, args);
    }
    let manifests = [
        "corpus/manifest.json",
        "t.tsv.manifest.json",
        "run/manifest.json",
        "l0.mste.manifest.json",
        "a.mste.manifest.json",
        "retrieval.json.manifest.json",
        "sts.json.manifest.json",
        "mine.json.manifest.json",
        "scale/manifest.json",
    ];
    manifests
        .iter()
        .map(|m| {
            let v = read_json(&dir.join(m));
            (m.to_string(), (v["metrics"].clone(), v["fingerprint"].clone()))
        })
        .collect()
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline(a.path()), pipeline(b.path()));
    let differing: Vec<&String> = ra.keys().filter(|k| ra[*k] != rb[*k]).collect();
    let files = ["run/loss.csv", "run/adapter.ckpt", "l0.mste", "retrieval.json", "scale/scaling.json"];
    let file_diff: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap())
        .collect();
    outcome(
        differing.is_empty() && file_diff.is_empty(),
        format!(
            "{} commands rerun: metrics and fingerprints {}; {} outputs {}",
            ra.len(),
            if differing.is_empty() { "equal".to_string() } else { format!("differ in {differing:?}") },
            files.len(),
            if file_diff.is_empty() { "byte-identical".to_string() } else { format!("differ: {file_diff:?}") }
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let mut cells = None;
    let criteria: [Criterion; 6] = [
        ("gradient correctness", gradient_correctness),
        ("identity at initialisation", identity_at_init),
        ("frozen base", frozen_base),
        ("contrastive loss oracle", loss_oracle),
        ("metric oracles", metric_oracles),
        ("triplet construction", triplet_construction),
    ];
    let mut failed = 0;
    let mut report = |name: &str, result: std::thread::Result<Outcome>| {
        let (pass, detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        if !pass {
            failed += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };
    for (name, f) in criteria {
        report(name, catch_unwind(f));
    }
    report("end-to-end learning", catch_unwind(AssertUnwindSafe(|| end_to_end(&mut cells))));
    report("adapter target ordering", catch_unwind(AssertUnwindSafe(|| target_ordering(&cells))));
    report("scaling", catch_unwind(AssertUnwindSafe(scaling)));
    report("determinism", catch_unwind(AssertUnwindSafe(determinism)));
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
