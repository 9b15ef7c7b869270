//! Helpers shared by the integration tests.
#![allow(dead_code)]

use detox_core::distributions::TokenDistribution;
use detox_core::providers::{NgramModel, TokenizerMode, Vocabulary};
use rand::Rng;

/// Exact minimum-cost transport between `p` and `q` with ground cost |i - j|,
/// by successive shortest paths on the residual graph.
pub fn exact_transport_cost(p: &[f64], q: &[f64]) -> f64 {
    const TOL: f64 = 1e-15;
    let n = p.len();
    let mut supply = p.to_vec();
    let mut demand = q.to_vec();
    let mut flow = vec![vec![0.0f64; n]; n];
    let cost = |i: usize, j: usize| (i as f64 - j as f64).abs();

    // Nodes: 0..n sources, n..2n sinks, 2n super source, 2n+1 super sink.
    let s = 2 * n;
    let t = 2 * n + 1;
    loop {
        if supply.iter().sum::<f64>() <= 1e-13 || demand.iter().sum::<f64>() <= 1e-13 {
            break;
        }
        let mut edges: Vec<(usize, usize, f64, f64)> = Vec::new();
        for i in 0..n {
            if supply[i] > TOL {
                edges.push((s, i, 0.0, supply[i]));
            }
            for j in 0..n {
                edges.push((i, n + j, cost(i, j), f64::INFINITY));
                if flow[i][j] > TOL {
                    edges.push((n + j, i, -cost(i, j), flow[i][j]));
                }
            }
        }
        for j in 0..n {
            if demand[j] > TOL {
                edges.push((n + j, t, 0.0, demand[j]));
            }
        }
        let mut dist = vec![f64::INFINITY; 2 * n + 2];
        let mut prev: Vec<Option<usize>> = vec![None; 2 * n + 2];
        dist[s] = 0.0;
        for _ in 0..2 * n + 2 {
            let mut changed = false;
            for (e, &(a, b, c, _)) in edges.iter().enumerate() {
                if dist[a] + c < dist[b] - 1e-15 {
                    dist[b] = dist[a] + c;
                    prev[b] = Some(e);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if dist[t].is_infinite() {
            break;
        }
        let mut path = Vec::new();
        let mut v = t;
        while v != s {
            let e = prev[v].expect("path");
            path.push(e);
            v = edges[e].0;
        }
        let amount = path.iter().map(|&e| edges[e].3).fold(f64::INFINITY, f64::min);
        for &e in &path {
            let (a, b, _, _) = edges[e];
            if a == s {
                supply[b] -= amount;
            } else if b == t {
                demand[a - n] -= amount;
            } else if a < n {
                flow[a][b - n] += amount;
            } else {
                flow[b][a - n] -= amount;
            }
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += flow[i][j] * cost(i, j);
        }
    }
    total
}

/// A random probability vector with some exact zeros.
pub fn random_probs<R: Rng>(rng: &mut R, v: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..v)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(1e-6..1.0) })
        .collect();
    if w.iter().all(|x| *x == 0.0) {
        w[rng.random_range(0..v)] = 1.0;
    }
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

pub fn dist(values: Vec<f64>) -> TokenDistribution {
    TokenDistribution::probs(values).expect("valid distribution")
}

pub fn random_logits<R: Rng>(rng: &mut R, v: usize, scale: f64) -> Vec<f64> {
    (0..v).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Thirty toxic stems for the synthetic corpus.
pub const TOXIC_WORDS: [&str; 30] = [
    "idiot", "stupid", "moron", "dumb", "loser", "jerk", "fool", "trash", "pathetic", "creep",
    "scum", "ugly", "worthless", "clown", "garbage", "freak", "lame", "nasty", "disgusting",
    "coward", "liar", "slob", "brat", "dimwit", "imbecile", "lowlife", "pig", "rat", "snake",
    "toad",
];

pub const CLEAN_WORDS: [&str; 30] = [
    "friend", "kind", "helpful", "smart", "calm", "gentle", "bright", "honest", "patient",
    "clever", "brave", "decent", "polite", "careful", "fair", "warm", "neat", "good", "nice",
    "thoughtful", "wise", "cheerful", "generous", "humble", "steady", "loyal", "quiet", "able",
    "capable", "sincere",
];

const SUBJECTS: [&str; 5] = ["you", "he", "she", "they", "that guy"];
const VERBS: [&str; 4] = ["are", "is", "seems", "looks"];
const PLACES: [&str; 20] = [
    "today", "again", "lately", "honestly", "at", "work", "home", "school", "online", "outside",
    "in", "class", "the", "morning", "park", "office", "meeting", "party", "garden", "library",
];

/// `n` toxic source records; each sentence carries two lexicon words.
pub fn toxic_corpus_jsonl(n: usize) -> String {
    let mut out = String::new();
    for i in 0..n {
        let subj = SUBJECTS[i % SUBJECTS.len()];
        let verb = VERBS[i % VERBS.len()];
        let a = TOXIC_WORDS[i % 30];
        let b = TOXIC_WORDS[(i * 7 + 3) % 30];
        let text = format!("{subj} {verb} such a {a} and a {b}");
        out.push_str(&format!("{{\"id\":\"r{i:02}\",\"text\":\"{text}\",\"batch\":{}}}\n", i % 3));
    }
    out
}

/// Answer-tagged clean sentences. Every `sprinkle`-th line swaps one word
/// for a lexicon word, cycling through the whole lexicon; 0 disables that.
pub fn clean_lines(lines: usize, sprinkle: usize) -> String {
    let mut out = String::new();
    let mut next_toxic = 0;
    for i in 0..lines {
        let subj = SUBJECTS[i % SUBJECTS.len()];
        let verb = VERBS[(i / 5) % VERBS.len()];
        let a = CLEAN_WORDS[i % 30];
        let b = if sprinkle > 0 && i % sprinkle == 0 {
            next_toxic += 1;
            TOXIC_WORDS[next_toxic % 30]
        } else {
            CLEAN_WORDS[(i * 11 + 5) % 30]
        };
        let (p, q) = (PLACES[i % 20], PLACES[(i * 3 + 1) % 20]);
        out.push_str(&format!("<answer> {subj} {verb} such a {a} and a {b} {p} {q} </answer>\n"));
    }
    out
}

/// Answer-tagged sentences dense in lexicon words.
pub fn toxic_lines(lines: usize) -> String {
    let mut out = String::new();
    for i in 0..lines {
        let subj = SUBJECTS[i % SUBJECTS.len()];
        let verb = VERBS[(i / 5) % VERBS.len()];
        let a = TOXIC_WORDS[i % 30];
        let b = TOXIC_WORDS[(i * 11 + 5) % 30];
        out.push_str(&format!("<answer> {subj} {verb} such a {a} and a {b} </answer>\n"));
    }
    out
}

/// Bigram base and toxic models over one shared vocabulary. The base model
/// sees mostly clean text; one line in six carries a single lexicon word.
pub fn bigram_pair() -> (NgramModel, NgramModel) {
    let clean = clean_lines(300, 6);
    let toxic = toxic_lines(300);
    let mode = TokenizerMode::Whitespace;
    let vocab = Vocabulary::from_tokens(
        mode,
        clean.lines().chain(toxic.lines()).flat_map(|l| mode.split(l)),
    );
    let base = NgramModel::train_with_vocab(&clean, 2, 0.01, vocab.clone()).expect("base model");
    let tox = NgramModel::train_with_vocab(&toxic, 2, 0.01, vocab).expect("toxic model");
    (base, tox)
}
