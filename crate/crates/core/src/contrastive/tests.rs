use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Graph, Tensor};
use crate::encoder::{Encoder, Preset, Vocab};
use crate::error::Error;
use crate::lora::{apply_lora, LoraConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn loss_of(p: &Tensor, pos: &Tensor, neg: &Tensor, tau: f64) -> f64 {
    let mut g = Graph::new();
    let (p, pos, neg) = (g.constant(p.clone()), g.constant(pos.clone()), g.constant(neg.clone()));
    let l = simcse_loss(&mut g, p, pos, neg, tau).unwrap();
    g.value(l).item().unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn double_loop(p: &Tensor, pos: &Tensor, neg: &Tensor, tau: f64) -> f64 {
    let n = p.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += (cos(p.row(i), pos.row(j)) / tau).exp() + (cos(p.row(i), neg.row(j)) / tau).exp();
        }
        total += -((cos(p.row(i), pos.row(i)) / tau).exp() / denom).ln();
    }
    total / n as f64
}

#[test]
fn loss_closed_forms() {
    let e = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let orth = Tensor::new(vec![1, 2], vec![0.0, 3.0]).unwrap();
    let l = loss_of(&e, &e, &orth, 0.05);
    assert!((l - (-20f64).exp().ln_1p()).abs() < 1e-20);
    assert!((l - 2.061e-9).abs() < 1e-12);
    assert!((loss_of(&e, &e, &e, 0.05) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn loss_matches_double_loop() {
    for seed in 0..20 {
        for b in 2..=4 {
            let mut r = rng(seed * 10 + b as u64);
            let p = Tensor::randn(&[b, 6], 1.0, &mut r);
            let pos = Tensor::randn(&[b, 6], 1.0, &mut r);
            let neg = Tensor::randn(&[b, 6], 1.0, &mut r);
            let got = loss_of(&p, &pos, &neg, 0.05);
            let want = double_loop(&p, &pos, &neg, 0.05);
            assert!((got - want).abs() <= 1e-12, "seed {seed} b {b}: {got} vs {want}");
        }
    }
}

#[test]
fn loss_is_invariant_to_row_scale_and_joint_permutation() {
    let mut r = rng(7);
    let (p, pos, neg) = (Tensor::randn(&[4, 5], 1.0, &mut r), Tensor::randn(&[4, 5], 1.0, &mut r), Tensor::randn(&[4, 5], 1.0, &mut r));
    let base = loss_of(&p, &pos, &neg, 0.05);

    let mut scaled = neg.clone();
    for v in &mut scaled.data_mut()[5..10] {
        *v *= 37.5;
    }
    assert!((loss_of(&p, &pos, &scaled, 0.05) - base).abs() <= 1e-10);

    let perm = [2, 0, 3, 1];
    let permute = |t: &Tensor| {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    assert!((loss_of(&permute(&p), &permute(&pos), &permute(&neg), 0.05) - base).abs() <= 1e-12);
}

#[test]
fn loss_gradients_pass_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let blocks = [Tensor::randn(&[3, 4], 1.0, &mut r), Tensor::randn(&[3, 4], 1.0, &mut r), Tensor::randn(&[3, 4], 1.0, &mut r)];
        for role in 0..3 {
            let err = grad_check(
                |g, x| {
                    let vars: Vec<_> = (0..3).map(|k| if k == role { x } else { g.constant(blocks[k].clone()) }).collect();
                    simcse_loss(g, vars[0], vars[1], vars[2], 0.5)
                },
                &blocks[role],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed} role {role}: {err}");
        }
    }
}

#[test]
fn loss_rejects_zero_rows_and_bad_shapes() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let q = g.constant(Tensor::full(&[2, 2], 1.0));
    assert!(matches!(simcse_loss(&mut g, p, q, q, 0.05), Err(Error::ZeroNorm { row: 1 })));
    let r = g.constant(Tensor::full(&[3, 2], 1.0));
    assert!(matches!(simcse_loss(&mut g, q, q, r, 0.05), Err(Error::Shape { .. })));
    assert!(matches!(simcse_loss(&mut g, q, q, q, 0.0), Err(Error::Config(_))));
}

#[test]
fn adamw_examples() {
    let mut p = Tensor::scalar(1.0);
    let zero = Tensor::scalar(0.0);
    let mut s = AdamState::new();
    adamw_step(&mut [&mut p], &[&zero], &mut s, 0.1, 0.0).unwrap();
    assert_eq!(p.item().unwrap(), 1.0);
    assert_eq!(s.t, 1);

    let mut p = Tensor::scalar(1.0);
    let mut s = AdamState::new();
    adamw_step(&mut [&mut p], &[&Tensor::scalar(1.0)], &mut s, 0.1, 0.0).unwrap();
    assert!((p.item().unwrap() - 0.9).abs() < 1e-8);

    let mut p = Tensor::scalar(2.0);
    let mut s = AdamState::new();
    adamw_step(&mut [&mut p], &[&zero], &mut s, 0.1, 0.5).unwrap();
    assert_eq!(p.item().unwrap(), 2.0 * (1.0 - 0.05));

    let mut p = Tensor::zeros(&[2]);
    assert!(matches!(
        adamw_step(&mut [&mut p], &[&zero], &mut AdamState::new(), 0.1, 0.0),
        Err(Error::Shape { .. })
    ));
}

fn group(langs: &[&str]) -> TripletGroup {
    TripletGroup {
        variants: langs
            .iter()
            .map(|l| Triplet::new(format!("p{l}"), format!("e{l}"), format!("c{l}"), l).unwrap())
            .collect(),
    }
}

#[test]
fn sampling_passthrough_and_single_language() {
    let g = group(&["en", "fr"]);
    assert_eq!(sample_triplet(&g, Sampling::AsIs, false, &mut rng(0)).unwrap(), g.variants[0]);
    let one = group(&["en"]);
    for s in 0..5 {
        assert_eq!(sample_triplet(&one, Sampling::CrossLingual, false, &mut rng(s)).unwrap(), one.variants[0]);
    }
}

#[test]
fn cross_lingual_role_languages_are_uniform() {
    let g = group(&["a", "b", "c"]);
    let n = 10_000;
    let mut counts = [[0usize; 3]; 3];
    let mut r = rng(42);
    for _ in 0..n {
        let t = sample_triplet(&g, Sampling::CrossLingual, false, &mut r).unwrap();
        for (role, lang) in [&t.lang_p, &t.lang_e, &t.lang_c].into_iter().enumerate() {
            counts[role][(lang.as_bytes()[0] - b'a') as usize] += 1;
        }
        assert_eq!(t.premise, format!("p{}", t.lang_p));
        assert_eq!(t.contradiction, format!("c{}", t.lang_c));
    }
    let (mean, sd) = (n as f64 / 3.0, (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt());
    for row in counts {
        for c in row {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
    }
}

#[test]
fn distinct_languages_never_repeat() {
    let g = group(&["a", "b", "c", "d"]);
    let mut r = rng(1);
    for _ in 0..200 {
        let t = sample_triplet(&g, Sampling::CrossLingual, true, &mut r).unwrap();
        assert!(t.lang_p != t.lang_e && t.lang_e != t.lang_c && t.lang_p != t.lang_c);
    }
    assert!(sample_triplet(&group(&["a", "b"]), Sampling::CrossLingual, true, &mut r).is_err());
}

fn toy_corpus(n: usize, langs: usize) -> (TripletCorpus, Vocab) {
    let mut r = rng(5);
    let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    let mut sets = vec![Vec::new(); langs];
    for _ in 0..n {
        let sent = |r: &mut ChaCha8Rng| (0..4).map(|_| words[r.gen_range(0..20)].clone()).collect::<Vec<_>>();
        let (p, e, c) = (sent(&mut r), sent(&mut r), sent(&mut r));
        for (l, set) in sets.iter_mut().enumerate() {
            let tag = |s: &[String]| s.iter().map(|w| format!("{w}_{l}")).collect::<Vec<_>>().join(" ");
            set.push(Triplet::new(tag(&p), tag(&e), tag(&c), &format!("x{l}")).unwrap());
        }
    }
    let corpus = TripletCorpus::parallel(sets).unwrap();
    let texts: Vec<String> = corpus.flatten().into_iter().flat_map(|t| [t.premise, t.entailment, t.contradiction]).collect();
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    (corpus, vocab)
}

fn tiny_model(vocab: &Vocab) -> Encoder {
    let mut m = Encoder::new(Preset::Small.config(vocab.size(), 8, 3)).unwrap();
    apply_lora(&mut m, &LoraConfig::default()).unwrap();
    m
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        lr: 1e-3,
        sampling: Sampling::CrossLingual,
        max_steps: Some(2),
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_leaves_the_base_alone() {
    let (corpus, vocab) = toy_corpus(12, 2);
    let run = || {
        let mut m = tiny_model(&vocab);
        let before: Vec<Tensor> = m.base_tensors().into_iter().map(|(_, t)| (**t).clone()).collect();
        let out = train(&mut m, &vocab, &corpus, &quick_cfg()).unwrap();
        let after: Vec<Tensor> = m.base_tensors().into_iter().map(|(_, t)| (**t).clone()).collect();
        assert_eq!(before, after);
        (out, m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a.steps, 2);
    assert_eq!(a.losses, b.losses);
    assert_eq!(ma, mb);
    // The zero-initialized up-projections have moved.
    assert!(crate::lora::adapters(&ma).iter().any(|(_, l)| l.b().data().iter().any(|&v| v != 0.0)));
}

#[test]
fn loss_falls_on_the_synthetic_corpus() {
    let spec = crate::data::CorpusSpec { n_triplets: 300, ..Default::default() };
    let corpus = crate::data::gen_synthetic_parallel(&spec).unwrap();
    let vocab = corpus.vocab();
    let mut m = Encoder::new(Preset::Small.config(vocab.size(), 16, 1)).unwrap();
    apply_lora(&mut m, &LoraConfig::default()).unwrap();
    let cfg = TrainConfig { batch_size: 16, lr: 3e-3, epochs: 20, max_steps: Some(200), ..quick_cfg() };
    let out = train(&mut m, &vocab, &corpus.triplet_corpus(), &cfg).unwrap();
    assert_eq!(out.steps, 200);
    // Single batches are noisy; compare the first and last ten.
    let head: f64 = out.losses[..10].iter().sum();
    let tail: f64 = out.losses[190..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn training_config_and_data_errors() {
    let (corpus, vocab) = toy_corpus(3, 2);
    let mut m = tiny_model(&vocab);
    let cfg = TrainConfig { batch_size: 8, ..quick_cfg() };
    assert!(matches!(train(&mut m, &vocab, &corpus, &cfg), Err(Error::Config(_))));

    let (mono, vocab) = toy_corpus(6, 1);
    let mut m = tiny_model(&vocab);
    assert!(matches!(train(&mut m, &vocab, &mono, &quick_cfg()), Err(Error::Data(_))));
    let as_is = TrainConfig { sampling: Sampling::AsIs, ..quick_cfg() };
    train(&mut m, &vocab, &mono, &as_is).unwrap();

    let mut plain = Encoder::new(Preset::Small.config(vocab.size(), 8, 3)).unwrap();
    assert!(matches!(train(&mut plain, &vocab, &mono, &as_is), Err(Error::Config(_))));
    assert!(TrainConfig { batch_size: 1, ..quick_cfg() }.validate().is_err());
    assert!(TrainConfig { temperature: 0.0, ..quick_cfg() }.validate().is_err());
}

#[test]
fn loss_csv_layout() {
    assert_eq!(format_loss_csv(&[0.5, 0.25]), "step,loss\n0,0.5\n1,0.25\n");
}

#[test]
fn defaults() {
    let c = TrainConfig::default();
    assert_eq!((c.batch_size, c.epochs, c.temperature, c.weight_decay), (128, 1, 0.05, 0.01));
    assert_eq!(c.lr_candidates, vec![1e-5, 5e-5, 1e-4, 5e-4]);
}
