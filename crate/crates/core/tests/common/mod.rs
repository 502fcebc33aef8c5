#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use concept_mil::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

pub fn cmil(args: &[&str]) -> Output {
    cmil_env(args, &[])
}

pub fn cmil_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cmil"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("cmil runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn schema(name: &str) -> serde_json::Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

pub fn random_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// P(at most `m` of the events happen) for independent events with
/// probabilities `q` (Poisson-binomial dynamic program).
fn at_most(q: &[f64], m: usize) -> f64 {
    let mut dist = vec![0.0; m + 2];
    dist[0] = 1.0;
    for &qj in q {
        for c in (0..=m + 1).rev() {
            let stay = dist[c] * (1.0 - qj);
            let moved = if c > 0 { dist[c - 1] * qj } else { 0.0 };
            dist[c] = stay + moved;
        }
    }
    dist[..=m].iter().sum()
}

/// Inclusion probability of every index in the top-`k` of `alpha + sigma·z`,
/// `z` standard normal, by composite Simpson integration over the value of
/// the index's own perturbed score.
pub fn topk_inclusion_oracle(alpha: &[f64], k: usize, sigma: f64) -> Vec<f64> {
    let std = Normal::new(0.0, 1.0).unwrap();
    let lo = alpha.iter().cloned().fold(f64::INFINITY, f64::min) - 12.0 * sigma;
    let hi = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 12.0 * sigma;
    let steps = 20_000;
    let h = (hi - lo) / steps as f64;
    (0..alpha.len())
        .map(|i| {
            let f = |x: f64| {
                let others: Vec<f64> = (0..alpha.len())
                    .filter(|&j| j != i)
                    .map(|j| 1.0 - std.cdf((x - alpha[j]) / sigma))
                    .collect();
                std.pdf((x - alpha[i]) / sigma) / sigma * at_most(&others, k - 1)
            };
            let mut s = f(lo) + f(hi);
            for t in 1..steps {
                let w = if t % 2 == 1 { 4.0 } else { 2.0 };
                s += w * f(lo + t as f64 * h);
            }
            s * h / 3.0
        })
        .collect()
}

/// SHA-256 of every file under `dir`, keyed by relative path.
pub fn tree_digest(dir: &Path) -> Vec<(String, Vec<u8>)> {
    use sha2::{Digest, Sha256};
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, Sha256::digest(std::fs::read(&path).unwrap()).to_vec()));
            }
        }
    }
    out.sort();
    out
}
