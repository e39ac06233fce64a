#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use affectmt::data::LabelSchema;
use affectmt::model::{CatExample, Encoded, VadExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PLANTED_VOCAB: usize = 48;

/// A joint dataset whose labels and VAD scores come from a random linear
/// teacher over bag-of-words features.
pub struct Planted {
    pub texts: Vec<String>,
    pub labels: Vec<Vec<u8>>,
    pub vad: Vec<[f64; 3]>,
}

pub fn planted(n: usize, n_labels: usize, seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wl: Vec<Vec<f64>> = (0..PLANTED_VOCAB)
        .map(|_| (0..n_labels).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let wv: Vec<[f64; 3]> = (0..PLANTED_VOCAB)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    let mut out = Planted {
        texts: Vec::new(),
        labels: Vec::new(),
        vad: Vec::new(),
    };
    for _ in 0..n {
        let len = rng.gen_range(4..9);
        let words: Vec<usize> = (0..len).map(|_| rng.gen_range(0..PLANTED_VOCAB)).collect();
        let mean = |f: &dyn Fn(usize) -> f64| words.iter().map(|&w| f(w)).sum::<f64>() / len as f64;
        out.labels
            .push((0..n_labels).map(|j| u8::from(mean(&|w| wl[w][j]) > 0.0)).collect());
        let score = |d: usize| 1.0 + 4.0 / (1.0 + (-2.0 * mean(&|w| wv[w][d])).exp());
        out.vad.push([score(0), score(1), score(2)]);
        out.texts
            .push(words.iter().map(|w| format!("w{w:02}")).collect::<Vec<_>>().join(" "));
    }
    out
}

/// Writes `cat.tsv`, `vad.csv` (all rows split `train`) and `schema.txt`.
pub fn write_planted(p: &Planted, dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let n_labels = p.labels[0].len();
    let names: Vec<String> = (0..n_labels).map(|j| format!("emo{j}")).collect();
    let schema = dir.join("schema.txt");
    std::fs::write(&schema, LabelSchema::new(names.clone()).unwrap().to_file_string()).unwrap();

    let mut cat = format!("ID\tTweet\t{}\n", names.join("\t"));
    for (i, (t, l)) in p.texts.iter().zip(&p.labels).enumerate() {
        let bits: Vec<String> = l.iter().map(u8::to_string).collect();
        writeln!(cat, "c{i}\t{t}\t{}", bits.join("\t")).unwrap();
    }
    let cat_path = dir.join("cat.tsv");
    std::fs::write(&cat_path, cat).unwrap();

    let mut vad = String::from("id,split,V,A,D,text\n");
    for (i, (t, s)) in p.texts.iter().zip(&p.vad).enumerate() {
        writeln!(vad, "v{i},train,{},{},{},{t}", s[0], s[1], s[2]).unwrap();
    }
    let vad_path = dir.join("vad.csv");
    std::fs::write(&vad_path, vad).unwrap();
    (cat_path, vad_path, schema)
}

/// Random already-encoded examples for direct trainer tests.
pub fn random_examples(
    n: usize,
    vocab: usize,
    n_labels: usize,
    lexicon_dim: usize,
    seed: u64,
) -> (Vec<CatExample>, Vec<VadExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = |rng: &mut ChaCha8Rng| {
        let len = rng.gen_range(1..7);
        let mut ids = vec![2];
        ids.extend((0..len).map(|_| rng.gen_range(1..vocab)));
        ids.resize(8, 0);
        Encoded {
            ids,
            lexicon: (lexicon_dim > 0).then(|| (0..lexicon_dim).map(|_| rng.gen_range(0.0..1.0)).collect()),
        }
    };
    let cat = (0..n)
        .map(|_| CatExample {
            input: input(&mut rng),
            labels: (0..n_labels).map(|_| u8::from(rng.gen_bool(0.3))).collect(),
        })
        .collect();
    let vad = (0..n)
        .map(|_| VadExample {
            input: input(&mut rng),
            target: [rng.gen_range(1.0..=5.0), rng.gen_range(1.0..=5.0), rng.gen_range(1.0..=5.0)],
        })
        .collect();
    (cat, vad)
}

pub fn args(parts: &[&str]) -> Vec<String> {
    std::iter::once("affectmt").chain(parts.iter().copied()).map(String::from).collect()
}
