#![allow(dead_code)]

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use qe_core::corpus::{write_tsv, LangPair, Segment, Split};
use qe_core::pipeline::RunManifest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TEST_ID_OFFSET: u64 = 100_000;

/// Gold score with one decimal drawn from the seeded stream.
pub fn random_score(rng: &mut ChaCha8Rng) -> f64 {
    f64::from(rng.random_range(0..=1000u32)) / 10.0
}

pub fn segments(pair: &LangPair, split: Split, n: u64, seed: u64) -> Vec<Segment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (offset, tag) = match split {
        Split::Train => (0, "train"),
        Split::Test => (TEST_ID_OFFSET, "test"),
    };
    (0..n)
        .map(|i| {
            let id = offset + i;
            Segment::new(
                id,
                format!("{tag}-source-{id} the cat sat on the mat"),
                format!("{tag}-translation-{id} die Katze sass auf der Matte"),
                random_score(&mut rng),
                pair.clone(),
                split,
            )
            .unwrap()
        })
        .collect()
}

/// Writes `{pair}.train.tsv`, `{pair}.test.tsv` and appends the pair to
/// `corpora.jsonl` in `dir`.
pub fn write_corpus(dir: &Path, pair: &str, n_train: u64, n_test: u64) {
    let p: LangPair = pair.parse().unwrap();
    let train = segments(&p, Split::Train, n_train, 1);
    let test = segments(&p, Split::Test, n_test, 2);
    write_tsv(&train, fs::File::create(dir.join(format!("{pair}.train.tsv"))).unwrap()).unwrap();
    write_tsv(&test, fs::File::create(dir.join(format!("{pair}.test.tsv"))).unwrap()).unwrap();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("corpora.jsonl"))
        .unwrap();
    writeln!(f, r#"{{"pair":"{pair}","train":"{pair}.train.tsv","test":"{pair}.test.tsv"}}"#).unwrap();
}

pub fn run_manifest(dir: &Path, templates: &[&str], seed: u64, mock: &str) -> RunManifest {
    let m = serde_json::json!({
        "corpora": "corpora.jsonl",
        "templates": templates,
        "seed": seed,
        "mock": mock,
        "out_dir": "run",
    });
    let path = dir.join("run.json");
    fs::write(&path, m.to_string()).unwrap();
    RunManifest::load(&path).unwrap()
}

// Oracles

fn pairwise_sign(a: f64, b: f64) -> i64 {
    match a.partial_cmp(&b).unwrap() {
        std::cmp::Ordering::Less => -1,
        std::cmp::Ordering::Equal => 0,
        std::cmp::Ordering::Greater => 1,
    }
}

/// Kendall tau-b by enumerating every pair.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut s, mut n1, mut n2) = (0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let a = pairwise_sign(x[i], x[j]);
            let b = pairwise_sign(y[i], y[j]);
            s += a * b;
            n1 += a.abs();
            n2 += b.abs();
        }
    }
    s as f64 / ((n1 as f64) * (n2 as f64)).sqrt()
}

/// Mid-ranks, 1-based, by counting smaller and equal values.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    pearson_r(&mid_ranks(x), &mid_ranks(y))
}

/// Γ((ν+1)/2) / Γ(ν/2) for integer ν, from Γ(1) = 1, Γ(1/2) = √π and
/// Γ(x+1) = xΓ(x).
fn gamma_ratio(nu: u32) -> f64 {
    fn gamma_half_integer(twice: u32) -> f64 {
        // Γ(twice / 2)
        let (mut x, mut g) = if twice.is_multiple_of(2) { (1.0, 1.0) } else { (0.5, std::f64::consts::PI.sqrt()) };
        while x < f64::from(twice) / 2.0 {
            g *= x;
            x += 1.0;
        }
        g
    }
    gamma_half_integer(nu + 1) / gamma_half_integer(nu)
}

pub fn t_density(x: f64, nu: u32) -> f64 {
    let v = f64::from(nu);
    gamma_ratio(nu) / (v * std::f64::consts::PI).sqrt() * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0)
}

/// Two-tailed p-value 1 − 2∫₀^|t| f(x) dx by composite Simpson on `intervals`
/// panels.
pub fn t_two_tailed_quadrature(t: f64, nu: u32, intervals: usize) -> f64 {
    assert!(intervals.is_multiple_of(2));
    let b = t.abs();
    let h = b / intervals as f64;
    let mut acc = t_density(0.0, nu) + t_density(b, nu);
    for k in 1..intervals {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * t_density(k as f64 * h, nu);
    }
    1.0 - 2.0 * acc * h / 3.0
}

/// Central interval holding at least `level` of Binomial(n, p), as
/// (lowest k with CDF ≥ (1−level)/2, lowest k with CDF ≥ (1+level)/2).
pub fn binomial_interval(n: u64, p: f64, level: f64) -> (u64, u64) {
    let ln_choose = |k: u64| -> f64 { (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum() };
    let pmf = |k: u64| (ln_choose(k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp();
    let lo_tail = (1.0 - level) / 2.0;
    let hi_tail = (1.0 + level) / 2.0;
    let (mut cdf, mut lo) = (0.0, None);
    for k in 0..=n {
        cdf += pmf(k);
        if lo.is_none() && cdf >= lo_tail {
            lo = Some(k);
        }
        if cdf >= hi_tail {
            return (lo.unwrap(), k);
        }
    }
    (lo.unwrap_or(n), n)
}
