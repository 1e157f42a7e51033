use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tsv::{ParallelRow, StsPair};
use crate::contrastive::{Triplet, TripletCorpus};
use crate::encoder::Vocab;
use crate::error::{Error, Result};

/// Shape of a generated parallel corpus.
///
/// Word `k` of language 0 is `l0w{k}`; language `l` renames it through a
/// fixed permutation. Words `0..topic_count` are topic words and every
/// sentence carries exactly one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_langs: usize,
    pub vocab_per_lang: usize,
    pub n_triplets: usize,
    pub topic_count: usize,
    pub seed: u64,
    /// Premise length range in words, topic included.
    pub min_len: usize,
    pub max_len: usize,
    /// Parallel sentences kept out of training, per split.
    pub n_heldout: usize,
    /// Scored pairs per STS split.
    pub n_sts: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_langs: 3,
            vocab_per_lang: 48,
            n_triplets: 2000,
            topic_count: 8,
            seed: 0,
            min_len: 4,
            max_len: 8,
            n_heldout: 200,
            n_sts: 200,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("corpus: {m}")));
        if self.n_langs == 0 {
            return bad("n_langs must be at least 1".into());
        }
        if self.topic_count < 2 {
            return bad("topic_count must be at least 2".into());
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return bad(format!("need 2 <= min_len <= max_len, got {}..{}", self.min_len, self.max_len));
        }
        // Sentences use distinct content words, plus one spare for edits.
        if self.vocab_per_lang < self.topic_count + self.max_len {
            return bad(format!(
                "vocab_per_lang {} too small for topic_count {} and max_len {}",
                self.vocab_per_lang, self.topic_count, self.max_len
            ));
        }
        Ok(())
    }

    pub fn lang_tag(l: usize) -> String {
        format!("l{l}")
    }
}

/// A generated corpus. Row `i` of every per-language list is the same
/// sentence (or triplet) in that language.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub langs: Vec<String>,
    /// `perms[l][k]` is the language-`l` word for language-0 word `k`.
    pub perms: Vec<Vec<usize>>,
    pub train: Vec<Vec<Triplet>>,
    pub heldout_dev: Vec<Vec<String>>,
    pub heldout_test: Vec<Vec<String>>,
    pub sts_dev: Vec<StsPair>,
    pub sts_test: Vec<StsPair>,
}

type Sentence = Vec<usize>;

/// Two sentence collections and the gold translation pairs between them.
#[derive(Clone, Debug, PartialEq)]
pub struct MiningTask {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub gold: Vec<(usize, usize)>,
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn sentence(&mut self) -> Sentence {
        let s = self.spec;
        let len = self.rng.gen_range(s.min_len..=s.max_len);
        let content: Vec<usize> = (s.topic_count..s.vocab_per_lang).collect();
        let mut words: Vec<usize> = content.choose_multiple(&mut self.rng, len - 1).copied().collect();
        let topic = self.rng.gen_range(0..s.topic_count);
        let at = self.rng.gen_range(0..len);
        words.insert(at, topic);
        words
    }

    fn other_topic(&mut self, t: usize) -> usize {
        let k = self.rng.gen_range(0..self.spec.topic_count - 1);
        if k >= t {
            k + 1
        } else {
            k
        }
    }

    fn triplet(&mut self) -> (Sentence, Sentence, Sentence) {
        let p = self.sentence();
        let topic_at = p.iter().position(|&w| w < self.spec.topic_count).unwrap_or(0);
        let mut drop = self.rng.gen_range(0..p.len() - 1);
        if drop >= topic_at {
            drop += 1;
        }
        let mut e = p.clone();
        e.remove(drop);
        let mut c = p.clone();
        c[topic_at] = self.other_topic(p[topic_at]);
        (p, e, c)
    }

    /// Replaces `edits` random positions, keeping words distinct.
    fn perturb(&mut self, s: &Sentence, edits: usize) -> Sentence {
        let topics = self.spec.topic_count;
        let mut out = s.clone();
        let mut positions: Vec<usize> = (0..s.len()).collect();
        positions.shuffle(&mut self.rng);
        for &at in positions.iter().take(edits) {
            if out[at] < topics {
                out[at] = self.other_topic(out[at]);
            } else {
                let free: Vec<usize> = (topics..self.spec.vocab_per_lang).filter(|w| !out.contains(w)).collect();
                out[at] = free[self.rng.gen_range(0..free.len())];
            }
        }
        out
    }
}

/// Jaccard similarity of two word multisets.
pub fn multiset_jaccard(a: &[usize], b: &[usize]) -> f64 {
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    for &w in a {
        *ca.entry(w).or_default() += 1;
    }
    for &w in b {
        *cb.entry(w).or_default() += 1;
    }
    let keys: HashSet<usize> = ca.keys().chain(cb.keys()).copied().collect();
    let (mut inter, mut union) = (0usize, 0usize);
    for k in keys {
        let (x, y) = (ca.get(&k).copied().unwrap_or(0), cb.get(&k).copied().unwrap_or(0));
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Generates a corpus deterministically from `spec.seed`. Training,
/// held-out and STS sentences come from separate random streams, so growing
/// one part leaves the others unchanged.
pub fn gen_synthetic_parallel(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(k);
        r
    };
    let langs: Vec<String> = (0..spec.n_langs).map(CorpusSpec::lang_tag).collect();

    let mut perm_rng = stream(1);
    let perms: Vec<Vec<usize>> = (0..spec.n_langs)
        .map(|l| {
            let mut p: Vec<usize> = (0..spec.vocab_per_lang).collect();
            if l > 0 {
                p.shuffle(&mut perm_rng);
            }
            p
        })
        .collect();
    let render = |s: &Sentence, l: usize| -> String {
        let words: Vec<String> = s.iter().map(|&w| format!("{}w{}", langs[l], perms[l][w])).collect();
        words.join(" ")
    };

    let mut gen = Generator { spec, rng: stream(2) };
    let mut seen: HashSet<Sentence> = HashSet::new();
    let mut train: Vec<Vec<Triplet>> = vec![Vec::with_capacity(spec.n_triplets); spec.n_langs];
    for _ in 0..spec.n_triplets {
        let (p, e, c) = gen.triplet();
        for (l, tag) in langs.iter().enumerate() {
            train[l].push(Triplet {
                premise: render(&p, l),
                entailment: render(&e, l),
                contradiction: render(&c, l),
                lang_p: tag.clone(),
                lang_e: tag.clone(),
                lang_c: tag.clone(),
            });
        }
        seen.extend([p, e, c]);
    }

    // Held-out sentences never occur in training and never repeat.
    let mut gen = Generator { spec, rng: stream(3) };
    let mut heldout = |n: usize| -> Vec<Vec<String>> {
        let mut rows: Vec<Vec<String>> = vec![Vec::with_capacity(n); spec.n_langs];
        let mut made = 0;
        let mut attempts = 0;
        while made < n {
            attempts += 1;
            if attempts > 1000 * (n + 1) {
                break;
            }
            let s = gen.sentence();
            if !seen.insert(s.clone()) {
                continue;
            }
            for (l, row) in rows.iter_mut().enumerate() {
                row.push(render(&s, l));
            }
            made += 1;
        }
        rows
    };
    let heldout_dev = heldout(spec.n_heldout);
    let heldout_test = heldout(spec.n_heldout);
    if heldout_dev[0].len() < spec.n_heldout || heldout_test[0].len() < spec.n_heldout {
        return Err(Error::Config("corpus: vocabulary too small for the requested held-out size".into()));
    }

    let mut gen = Generator { spec, rng: stream(4) };
    let mut sts = |n: usize| -> Vec<StsPair> {
        (0..n)
            .map(|_| {
                let a = gen.sentence();
                let edits = gen.rng.gen_range(0..=a.len());
                let b = gen.perturb(&a, edits);
                let (la, lb) = (gen.rng.gen_range(0..spec.n_langs), gen.rng.gen_range(0..spec.n_langs));
                StsPair {
                    a: render(&a, la),
                    b: render(&b, lb),
                    score: multiset_jaccard(&a, &b),
                    lang_a: langs[la].clone(),
                    lang_b: langs[lb].clone(),
                }
            })
            .collect()
    };
    let sts_dev = sts(spec.n_sts);
    let sts_test = sts(spec.n_sts);

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        langs,
        perms,
        train,
        heldout_dev,
        heldout_test,
        sts_dev,
        sts_test,
    })
}

impl SyntheticCorpus {
    /// Every word of every language.
    pub fn vocab(&self) -> Vocab {
        let tokens = self
            .langs
            .iter()
            .flat_map(|tag| (0..self.spec.vocab_per_lang).map(move |k| format!("{tag}w{k}")));
        Vocab::from_tokens(tokens).expect("generated words are unique")
    }

    /// Training triplets grouped by translation.
    pub fn triplet_corpus(&self) -> TripletCorpus {
        TripletCorpus::parallel(self.train.clone()).expect("languages are aligned")
    }

    /// Maps a sentence in language `lang` back to language-0 word indices.
    pub fn to_pivot(&self, text: &str, lang: usize) -> Result<Vec<usize>> {
        let prefix = format!("{}w", self.langs[lang]);
        let mut inverse = vec![0; self.spec.vocab_per_lang];
        for (k, &w) in self.perms[lang].iter().enumerate() {
            inverse[w] = k;
        }
        text.split_whitespace()
            .map(|tok| {
                tok.strip_prefix(&prefix)
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&n| n < inverse.len())
                    .map(|n| inverse[n])
                    .ok_or_else(|| Error::Data(format!("{tok:?} is not a {} word", self.langs[lang])))
            })
            .collect()
    }

    /// (language-0 sentence, translation) pairs of the test split, for every
    /// other language. Empty for a single-language corpus.
    pub fn parallel_pairs(&self) -> Vec<(String, String, String)> {
        (1..self.langs.len())
            .flat_map(|l| {
                self.heldout_test[0]
                    .iter()
                    .zip(&self.heldout_test[l])
                    .map(move |(a, b)| (a.clone(), self.langs[l].clone(), b.clone()))
            })
            .collect()
    }

    /// A mining problem between language 0 and `lang` on one held-out split.
    ///
    /// The source side holds every pivot sentence. The target side keeps a
    /// `keep` fraction of their translations, shuffled, so some sources have
    /// no partner. Gold pairs index into the two lists.
    pub fn mining_task(&self, split: &[Vec<String>], lang: usize, keep: f64, seed: u64) -> Result<MiningTask> {
        if lang == 0 || lang >= self.langs.len() {
            return Err(Error::Config(format!("mining needs a non-pivot language, got {lang}")));
        }
        if !(0.0..=1.0).contains(&keep) {
            return Err(Error::Config(format!("keep fraction {keep} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = split[0].len();
        let mut kept: Vec<usize> = (0..n).collect();
        kept.shuffle(&mut rng);
        kept.truncate((keep * n as f64).round() as usize);
        let tgt = kept.iter().map(|&i| split[lang][i].clone()).collect();
        let mut gold: Vec<(usize, usize)> = kept.iter().enumerate().map(|(j, &i)| (i, j)).collect();
        gold.sort_unstable();
        Ok(MiningTask {
            src: split[0].clone(),
            tgt,
            gold,
        })
    }

    /// Rows for a parallel-sentence file; ids are `{prefix}{index}`.
    pub fn parallel_rows(split: &[Vec<String>], langs: &[String], prefix: &str) -> Vec<ParallelRow> {
        if langs.len() < 2 {
            return Vec::new();
        }
        let n = split.first().map_or(0, Vec::len);
        (0..n)
            .flat_map(|i| {
                langs.iter().zip(split).map(move |(lang, rows)| ParallelRow {
                    id: format!("{prefix}{i}"),
                    lang: lang.clone(),
                    text: rows[i].clone(),
                })
            })
            .collect()
    }
}
