//! Acceptance suite. Prints one PASS/FAIL line per criterion with its
//! runtime against the budget; exits non-zero when any criterion fails.
//!
//! `UPDATE_GOLDEN=1 cargo test -p saeatlas --test acceptance` rewrites the
//! stored golden flow.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use saeatlas_core::api::{Explorer, ExplorerConfig};
use saeatlas_core::atlas::colors::child_hue;
use saeatlas_core::atlas::topics::ctfidf_scores;
use saeatlas_core::atlas::ward::ward_linkage;
use saeatlas_core::atlas::{assign_colors, build_cluster_tree, compute_layout, extract_topics, ClusterTree, ColorConfig, HslColor, LayoutConfig, StopWords};
use saeatlas_core::embed::{embed_text, HashingEmbedder};
use saeatlas_core::fixtures::{build_fixtures, load_corpus, packs_dir, reconstruction_mse, Expectations, DEFAULT_SEED};
use saeatlas_core::interpret::{activation_similarity_matrix, descending_ranks, detect_anomalies, max_activation_token_stats, Region, SegmentRecord};
use saeatlas_core::lab::steer_generate;
use saeatlas_core::model::{GenerationSettings, SteeringHook};
use saeatlas_core::pack::{load_packs, PackRegistry};
use saeatlas_core::retrieval::{rank_saes, LexiconRewriter, DEFAULT_K_SET};
use saeatlas_core::sae::{ActivationFn, SaeWeights};
use saeatlas_core::store::{EmbeddingMatrix, EmbeddingStore, Scope};
use saeatlas_core::tensor::Matrix;
use saeatlas_server::{AppState, ServeConfig};
use serde_json::{json, Value};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Fixture {
    dir: tempfile::TempDir,
    exp: Expectations,
    registry: PackRegistry,
    build_time: Duration,
}

impl Fixture {
    fn packs(&self) -> PathBuf {
        packs_dir(self.dir.path())
    }
}

fn main() {
    let t = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let exp = build_fixtures(dir.path(), DEFAULT_SEED).expect("fixtures build");
    let registry = load_packs(packs_dir(dir.path())).expect("fixture packs load");
    let fx = Fixture { dir, exp, registry, build_time: t.elapsed() };
    println!("fixtures (seed {DEFAULT_SEED}) built in {:.2?}", fx.build_time);

    type Criterion<'a> = (&'a str, u64, Box<dyn Fn() -> Check + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("encode/decode + reconstruction bound", 5, Box::new(|| encode_decode(&fx))),
        ("AvgRank ranking vs brute force", 5, Box::new(ranking)),
        ("Ward merges vs naive oracle + nesting", 30, Box::new(|| ward(&fx))),
        ("c-TF-IDF topics", 5, Box::new(topics)),
        ("steering identities + sweep", 60, Box::new(|| steering(&fx))),
        ("hierarchical colors", 5, Box::new(|| colors(&fx))),
        ("layout properties", 60, Box::new(layout)),
        ("retrieval exactness + histogram", 10, Box::new(retrieval)),
        ("interpretation matrix + token stats", 5, Box::new(|| interpretation(&fx))),
        ("golden flow via CLI and HTTP", 120, Box::new(|| golden_flow(&fx))),
    ];

    let mut failed = 0;
    for (name, budget, run) in &criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run())).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let mut elapsed = t.elapsed();
        if *name == "golden flow via CLI and HTTP" {
            elapsed += fx.build_time;
        }
        let in_budget = elapsed <= Duration::from_secs(*budget);
        let (status, detail) = match (&outcome, in_budget) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("{d}; over time budget")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} {name:<40} {:>8.2?} / {budget}s  {detail}", elapsed);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

// ---------------------------------------------------------------- encode/decode

fn encode_decode(fx: &Fixture) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut max_err = 0f32;
    let cases = 200;
    for case in 0..cases {
        let d = rng.random_range(8..=32);
        let n = d * rng.random_range(2..=4);
        let scale = 1.0 / (d as f32).sqrt();
        let w_enc = uniform(&mut rng, n * d, scale);
        let w_dec = uniform(&mut rng, n * d, scale);
        let b_enc = uniform(&mut rng, n, 0.3);
        let b_dec = uniform(&mut rng, d, 0.3);
        let thresholds: Vec<f32> = (0..n).map(|_| rng.random_range(0.0f32..0.3)).collect();
        let activation = if case % 2 == 0 { ActivationFn::Relu } else { ActivationFn::JumpRelu { thresholds: thresholds.clone() } };
        let sae = SaeWeights {
            layer_index: 0,
            w_enc: Matrix::new(n, d, w_enc.clone()).unwrap(),
            b_enc: b_enc.clone(),
            w_dec: Matrix::new(n, d, w_dec.clone()).unwrap(),
            b_dec: b_dec.clone(),
            activation,
        };
        sae.validate().map_err(|e| e.to_string())?;
        let x = uniform(&mut rng, d, 1.0);

        let z = sae.encode(&x).map_err(|e| e.to_string())?;
        for i in 0..n {
            let mut acc = 0f32;
            for j in 0..d {
                acc += w_enc[i * d + j] * x[j];
            }
            let pre = acc + b_enc[i];
            let want = if case % 2 == 0 {
                if pre > 0.0 { pre } else { 0.0 }
            } else if pre > thresholds[i] && pre > 0.0 {
                pre
            } else {
                0.0
            };
            max_err = max_err.max((z[i] - want).abs());
        }

        // Decode both the encoder output and an arbitrary sparse code.
        let mut code = uniform(&mut rng, n, 2.0);
        code.iter_mut().for_each(|v| if *v < 0.5 { *v = 0.0 });
        for z in [z, code] {
            let x_hat = sae.decode(&z).map_err(|e| e.to_string())?;
            for j in 0..d {
                let mut acc = b_dec[j];
                for i in 0..n {
                    acc += z[i] * w_dec[i * d + j];
                }
                max_err = max_err.max((x_hat[j] - acc).abs());
            }
        }
    }
    ensure!(max_err <= 1e-6, "max encode/decode error {max_err:e} > 1e-6");

    let corpus: Vec<String> = load_corpus(fx.dir.path()).map_err(|e| e.to_string())?.into_iter().map(|s| s.text).collect();
    let mut report = Vec::new();
    for bound in &fx.exp.reconstruction {
        let pack = fx.registry.pack(&bound.sae_id).map_err(|e| e.to_string())?;
        let mse = reconstruction_mse(&fx.registry.model, &pack.sae, &corpus).map_err(|e| e.to_string())?;
        ensure!(mse <= bound.mse_bound, "{} reconstruction mse {mse} > bound {}", bound.sae_id, bound.mse_bound);
        report.push(format!("{} {:.4}<={:.4}", bound.sae_id, mse, bound.mse_bound));
    }
    Ok(format!("{cases} cases, max err {max_err:.1e}; {}", report.join(", ")))
}

// ---------------------------------------------------------------- ranking

/// Cosine similarity written out term by term in `f32`.
fn cosine_f32(row: &[f32], q: &[f32]) -> f32 {
    let mut d = 0f32;
    let mut rn = 0f32;
    let mut qn = 0f32;
    for i in 0..row.len() {
        d += row[i] * q[i];
        rn += row[i] * row[i];
        qn += q[i] * q[i];
    }
    (d / (rn.sqrt() * qn.sqrt())).clamp(-1.0, 1.0)
}

struct Sae {
    id: &'static str,
    layer: usize,
    rows: Vec<Vec<f32>>,
}

fn store_of(saes: &[Sae]) -> EmbeddingStore {
    EmbeddingStore::new(
        saes.iter()
            .map(|s| EmbeddingMatrix::new(s.id, s.layer, Matrix::from_rows(&s.rows).unwrap()).unwrap())
            .collect(),
    )
    .unwrap()
}

/// Every (score, sae, feature) sorted best first: score descending, then
/// SAE id, then feature id.
fn scan(saes: &[Sae], q: &[f32]) -> Vec<(f32, &'static str, usize)> {
    let mut all: Vec<(f32, &'static str, usize)> = saes
        .iter()
        .flat_map(|s| s.rows.iter().enumerate().map(move |(f, r)| (cosine_f32(r, q), s.id, f)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    all
}

type BruteRanking = Vec<(String, usize, Vec<(usize, usize, usize)>, f64)>;

fn brute_force_rank(saes: &[Sae], q: &[f32], ks: &[usize]) -> BruteRanking {
    let all = scan(saes, q);
    let counts: Vec<Vec<usize>> = saes
        .iter()
        .map(|s| ks.iter().map(|&k| all.iter().take(k).filter(|h| h.1 == s.id).count()).collect())
        .collect();
    let mut out: BruteRanking = saes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let per_k: Vec<(usize, usize, usize)> = ks
                .iter()
                .enumerate()
                .map(|(ki, &k)| {
                    let mut rank = 1;
                    for other in &counts {
                        if other[ki] > counts[i][ki] {
                            rank += 1;
                        }
                    }
                    (k, counts[i][ki], rank)
                })
                .collect();
            let avg = per_k.iter().map(|p| p.2).sum::<usize>() as f64 / ks.len() as f64;
            (s.id.to_string(), s.layer, per_k, avg)
        })
        .collect();
    out.sort_by(|a, b| a.3.total_cmp(&b.3).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
    out
}

fn planted_stores(rng: &mut ChaCha8Rng) -> Vec<(Vec<Sae>, Vec<f32>)> {
    let dim = 16;
    let mut q = vec![0f32; dim];
    q[0] = 1.0;
    let near = |rng: &mut ChaCha8Rng, axis: f32, noise: f32| -> Vec<f32> {
        let mut v: Vec<f32> = gaussian(rng, dim).into_iter().map(|x| x * noise).collect();
        v[0] = axis;
        v
    };
    // A owns the very top, B the broad middle, C is spread evenly.
    let a = Sae {
        id: "sae-a",
        layer: 0,
        rows: (0..300).map(|i| if i < 12 { near(rng, 1.0, 0.05) } else { near(rng, -1.0, 1.0) }).collect(),
    };
    let b = Sae { id: "sae-b", layer: 1, rows: (0..700).map(|_| near(rng, 0.8, 0.6)).collect() };
    let c = Sae { id: "sae-c", layer: 2, rows: (0..600).map(|_| gaussian(rng, dim)).collect() };
    let profiles = vec![a, b, c];

    // Identical matrices everywhere: every score is tied three ways.
    let shared: Vec<Vec<f32>> = (0..200).map(|_| gaussian(rng, 8)).collect();
    let ties = vec![
        Sae { id: "m-one", layer: 2, rows: shared.clone() },
        Sae { id: "k-two", layer: 0, rows: shared.clone() },
        Sae { id: "z-three", layer: 1, rows: shared },
    ];
    let q_ties = gaussian(rng, 8);

    // Fewer than 1000 features, one SAE with a single feature.
    let small = vec![
        Sae { id: "small-a", layer: 3, rows: (0..5).map(|_| near(rng, -1.0, 0.2)).collect() },
        Sae { id: "small-b", layer: 1, rows: (0..40).map(|_| near(rng, 1.0, 0.3)).collect() },
        Sae { id: "small-c", layer: 2, rows: (0..300).map(|_| gaussian(rng, dim)).collect() },
        Sae { id: "small-d", layer: 0, rows: vec![near(rng, 0.0, 1.0)] },
    ];
    vec![(profiles, q.clone()), (ties, q_ties), (small, q)]
}

fn ranking() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let stores = planted_stores(&mut rng);
    let mut checked = 0;
    let mut first = Vec::new();
    for (si, (saes, planted_q)) in stores.iter().enumerate() {
        let store = store_of(saes);
        let total: usize = saes.iter().map(|s| s.rows.len()).sum();
        let dim = planted_q.len();
        let mut queries = vec![planted_q.clone()];
        queries.extend((0..5).map(|_| gaussian(&mut rng, dim)));
        for (qi, q) in queries.iter().enumerate() {
            let got = rank_saes(&store, q, &DEFAULT_K_SET).map_err(|e| e.to_string())?;
            let want = brute_force_rank(saes, q, &DEFAULT_K_SET);
            ensure!(got.len() == want.len(), "store {si} query {qi}: {} rankings, want {}", got.len(), want.len());
            for (pos, (g, w)) in got.iter().zip(&want).enumerate() {
                let g_k: Vec<(usize, usize, usize)> = g.per_k.iter().map(|p| (p.k, p.count, p.rank)).collect();
                ensure!(
                    g.sae_id == w.0 && g.layer_index == w.1 && g_k == w.2 && g.avg_rank == w.3 && g.position == pos,
                    "store {si} query {qi} position {pos}: got {} {:?} {}, want {} {:?} {}",
                    g.sae_id, g_k, g.avg_rank, w.0, w.2, w.3
                );
            }
            for (ki, &k) in DEFAULT_K_SET.iter().enumerate() {
                let sum: usize = got.iter().map(|r| r.per_k[ki].count).sum();
                ensure!(sum == k.min(total), "store {si} query {qi}: counts at K={k} sum to {sum}, want {}", k.min(total));
            }
            if qi == 0 {
                first.push(got.iter().map(|r| r.sae_id.clone()).collect::<Vec<_>>().join(">"));
                if si == 0 {
                    let rank_of = |id: &str, ki: usize| got.iter().find(|r| r.sae_id == id).map(|r| r.per_k[ki].rank);
                    let last = DEFAULT_K_SET.len() - 1;
                    ensure!(
                        rank_of("sae-a", 0) == Some(1) && rank_of("sae-b", last) == Some(1),
                        "planted profile lost: sae-a at smallest K {:?}, sae-b at largest K {:?}",
                        rank_of("sae-a", 0),
                        rank_of("sae-b", last)
                    );
                }
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} queries on 3 stores; planted orders {}", first.join(" | ")))
}

// ---------------------------------------------------------------- Ward

/// Agglomerates by scanning every pair of current clusters and evaluating
/// Ward's distance from the member points directly.
fn ward_oracle(points: &[Vec<f64>]) -> Vec<(usize, usize, f64, usize)> {
    let n = points.len();
    let dim = points[0].len();
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let centroid = |members: &[usize]| -> Vec<f64> {
        let mut c = vec![0.0; dim];
        for &m in members {
            for k in 0..dim {
                c[k] += points[m][k];
            }
        }
        c.iter().map(|v| v / members.len() as f64).collect()
    };
    let mut merges = Vec::new();
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in (i + 1)..clusters.len() {
                let (a, b) = (&clusters[i], &clusters[j]);
                let (ca, cb) = (centroid(&a.1), centroid(&b.1));
                let (na, nb) = (a.1.len() as f64, b.1.len() as f64);
                let sq: f64 = ca.iter().zip(&cb).map(|(x, y)| (x - y) * (x - y)).sum();
                let d = (2.0 * na * nb / (na + nb) * sq).sqrt();
                let (lo, hi) = (a.0.min(b.0), a.0.max(b.0));
                let better = match best {
                    None => true,
                    Some((bd, blo, bhi, _, _)) => d < bd || (d == bd && (lo, hi) < (blo, bhi)),
                };
                if better {
                    best = Some((d, lo, hi, i, j));
                }
            }
        }
        let (d, lo, hi, i, j) = best.unwrap();
        let mut members = clusters[i].1.clone();
        members.extend(&clusters[j].1);
        let size = members.len();
        clusters.remove(j);
        clusters[i] = (n + merges.len(), members);
        merges.push((lo, hi, d, size));
    }
    merges
}

fn check_tree_nesting(tree: &ClusterTree, n: usize) -> Result<(), String> {
    for (level, ids) in tree.levels.iter().enumerate() {
        let mut seen = vec![false; n];
        for &id in ids {
            for &m in &tree.nodes[id].members {
                ensure!(!seen[m], "feature {m} twice on level {level}");
                seen[m] = true;
            }
        }
        ensure!(seen.iter().all(|s| *s), "level {level} does not cover every feature");
        if level == 0 {
            continue;
        }
        for &id in ids {
            let node = &tree.nodes[id];
            let parent = node.parent.ok_or(format!("node {id} has no parent"))?;
            let up: BTreeSet<usize> = tree.nodes[parent].members.iter().copied().collect();
            ensure!(node.members.iter().all(|m| up.contains(m)), "node {id} leaves its parent {parent}");
        }
    }
    Ok(())
}

fn ward(fx: &Fixture) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for inst in 0..30 {
        let n = rng.random_range(2..=20);
        let dim = rng.random_range(1..=5);
        let mut points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        if inst % 3 == 0 && n >= 4 {
            // Exact duplicates create zero-distance ties.
            for k in 0..n / 4 {
                points[n - 1 - k] = points[k].clone();
            }
        }
        let got = ward_linkage(&points).map_err(|e| e.to_string())?;
        let want = ward_oracle(&points);
        for (step, (g, w)) in got.merges.iter().zip(&want).enumerate() {
            ensure!(
                (g.a, g.b, g.size) == (w.0, w.1, w.3) && (g.distance - w.2).abs() <= 1e-9 * w.2.max(1.0),
                "instance {inst} step {step}: got ({}, {}, {}, {}), want {:?}",
                g.a, g.b, g.distance, g.size, w
            );
        }
        ensure!(got.merges.len() == want.len(), "instance {inst}: merge count differs");
    }
    for pack in &fx.registry.packs {
        let tree = &pack.derived().map_err(|e| e.to_string())?.clusters;
        ensure!(tree.level_sizes == [10, 30, 90], "{} level sizes {:?}", pack.sae_id(), tree.level_sizes);
        for (l, ids) in tree.levels.iter().enumerate() {
            ensure!(ids.len() == tree.level_sizes[l], "{} level {l} has {} nodes", pack.sae_id(), ids.len());
        }
        check_tree_nesting(tree, pack.n_features()).map_err(|e| format!("{}: {e}", pack.sae_id()))?;
    }
    Ok(format!("30 instances match; nesting holds on {} packs", fx.registry.packs.len()))
}

// ---------------------------------------------------------------- topics

/// Two passes: per-cluster term counts, then cluster frequency per term.
fn ctfidf_oracle(clusters: &[Vec<&str>]) -> Vec<BTreeMap<String, f64>> {
    let mut counts: Vec<HashMap<String, usize>> = Vec::new();
    for docs in clusters {
        let mut c = HashMap::new();
        for doc in docs {
            for word in doc.split_whitespace() {
                if word.len() >= 2 {
                    *c.entry(word.to_string()).or_insert(0) += 1;
                }
            }
        }
        counts.push(c);
    }
    let mut df: HashMap<String, usize> = HashMap::new();
    for c in &counts {
        for t in c.keys() {
            *df.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
        .iter()
        .map(|c| {
            let total: usize = c.values().sum();
            c.iter()
                .map(|(t, &f)| (t.clone(), (f as f64 / total as f64) * (clusters.len() as f64 / df[t] as f64).ln()))
                .collect()
        })
        .collect()
}

fn topics() -> Check {
    let none = StopWords::none();
    let clusters = vec![vec!["apple apple fig", "banana"], vec!["banana cherry fig"], vec!["cherry cherry cherry fig date"]];
    let ln3 = 3f64.ln();
    let ln15 = 1.5f64.ln();
    let hand: Vec<Vec<(&str, f64)>> = vec![
        vec![("apple", 0.5 * ln3), ("banana", 0.25 * ln15), ("fig", 0.0)],
        vec![("banana", ln15 / 3.0), ("cherry", ln15 / 3.0), ("fig", 0.0)],
        vec![("cherry", 0.6 * ln15), ("date", 0.2 * ln3), ("fig", 0.0)],
    ];
    let got = ctfidf_scores(&clusters, &none).map_err(|e| e.to_string())?;
    for (c, want) in hand.iter().enumerate() {
        ensure!(got[c].len() == want.len(), "cluster {c}: {} terms, want {}", got[c].len(), want.len());
        for (t, s) in want {
            let g = got[c].get(*t).copied().ok_or(format!("cluster {c} lacks {t}"))?;
            ensure!((g - s).abs() <= 1e-9, "cluster {c} term {t}: {g} vs {s}");
        }
        ensure!(got[c]["fig"] == 0.0, "all-cluster term scored {}", got[c]["fig"]);
    }

    let vocab = ["alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "theta", "zeta", "rho", "tau", "chi"];
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut zero_terms = 0;
    for case in 0..60 {
        let n_clusters = rng.random_range(2..=6);
        let texts: Vec<Vec<String>> = (0..n_clusters)
            .map(|c| {
                (0..rng.random_range(1..=5))
                    .map(|_| {
                        let mut words: Vec<&str> = (0..rng.random_range(1..=8)).map(|_| vocab[rng.random_range(0..vocab.len())]).collect();
                        if case % 4 == 0 {
                            words.push("chi");
                        }
                        if c == 0 && rng.random_bool(0.3) {
                            words.push("x");
                        }
                        words.join(" ")
                    })
                    .collect()
            })
            .collect();
        let clusters: Vec<Vec<&str>> = texts.iter().map(|c| c.iter().map(String::as_str).collect()).collect();
        let want = ctfidf_oracle(&clusters);
        let got = ctfidf_scores(&clusters, &none).map_err(|e| e.to_string())?;
        let top = extract_topics(&clusters, &none, 5).map_err(|e| e.to_string())?;
        for c in 0..n_clusters {
            ensure!(got[c].len() == want[c].len(), "case {case} cluster {c}: term sets differ");
            for (t, s) in &want[c] {
                let g = got[c].get(t).copied().ok_or(format!("case {case} cluster {c}: missing {t}"))?;
                ensure!((g - s).abs() <= 1e-9, "case {case} cluster {c} {t}: {g} vs {s}");
                if clusters.iter().all(|docs| docs.iter().any(|d| d.split_whitespace().any(|w| w == t))) {
                    ensure!(g == 0.0, "case {case}: all-cluster term {t} scored {g}");
                    zero_terms += 1;
                }
            }
            let mut all: Vec<(&String, f64)> = want[c].iter().map(|(t, s)| (t, *s)).collect();
            all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
            let expect: Vec<&str> = all.iter().take(5).map(|(t, _)| t.as_str()).collect();
            let picked: Vec<&str> = top[c].iter().map(|t| t.term.as_str()).collect();
            ensure!(picked == expect, "case {case} cluster {c}: top terms {picked:?}, want {expect:?}");
        }
    }
    Ok(format!("hand case within 1e-9; 60 random cases; {zero_terms} all-cluster terms scored 0"))
}

// ---------------------------------------------------------------- steering

fn steering(fx: &Fixture) -> Check {
    let s = &fx.exp.steering;
    let model = &fx.registry.model;
    let pack = fx.registry.pack(&s.sae_id).map_err(|e| e.to_string())?;
    let vector = pack.sae.steering_vector(s.feature_id, false).map_err(|e| e.to_string())?;
    let hook = |strength: f32| SteeringHook { layer_index: pack.sae.layer_index, vector: vector.clone(), strength };
    let settings = GenerationSettings { max_new_tokens: s.max_new_tokens, ..Default::default() };
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();

    for prompt in &s.prompts {
        let ids = model.tokenizer.encode(prompt).map_err(|e| e.to_string())?;
        let plain = model.weights.next_token_logits(&ids, &[]).map_err(|e| e.to_string())?;
        let plain_gen = model.weights.generate(&ids, &settings, &[]).map_err(|e| e.to_string())?;
        let zero = model.weights.next_token_logits(&ids, &[hook(0.0)]).map_err(|e| e.to_string())?;
        ensure!(bits(&zero) == bits(&plain), "zero strength changed logits for {prompt:?}");
        let zero_gen = model.weights.generate(&ids, &settings, &[hook(0.0)]).map_err(|e| e.to_string())?;
        ensure!(zero_gen == plain_gen, "zero strength changed generation for {prompt:?}");
        for st in [1.0f32, 3.7, 8.0] {
            let pair = [hook(st), hook(-st)];
            let cancel = model.weights.next_token_logits(&ids, &pair).map_err(|e| e.to_string())?;
            ensure!(bits(&cancel) == bits(&plain), "+/-{st} did not cancel for {prompt:?}");
            let trace = model.weights.forward_hooked(&ids, &pair).map_err(|e| e.to_string())?;
            let base = model.weights.forward_with_trace(&ids).map_err(|e| e.to_string())?;
            ensure!(trace == base, "+/-{st} changed the residual trace for {prompt:?}");
        }
    }

    let mut strict = 0;
    for prompt in &s.prompts {
        let branches = steer_generate(model, &pack.sae, s.feature_id, prompt, &s.strengths, &settings).map_err(|e| e.to_string())?;
        let counts: Vec<usize> = branches.iter().map(|b| b.token_ids.iter().filter(|&&t| t == s.target_token_id).count()).collect();
        ensure!(counts.windows(2).all(|w| w[0] <= w[1]), "{prompt:?}: counts {counts:?} decrease");
        if counts[0] < counts[counts.len() - 1] {
            strict += 1;
        }
    }
    ensure!(strict >= 18, "only {strict}/20 prompts strictly ordered");
    Ok(format!("identities bitwise on {} prompts; target {:?} strictly ordered {strict}/{}", s.prompts.len(), s.target_token, s.prompts.len()))
}

// ---------------------------------------------------------------- colors

fn hsl_distance(a: &HslColor, b: &HslColor) -> f64 {
    let dh = (a.h - b.h).abs();
    let dh = dh.min(1.0 - dh);
    ((dh * dh) + (a.s - b.s).powi(2) + (a.l - b.l).powi(2)).sqrt()
}

fn random_tree(rng: &mut ChaCha8Rng, n: usize, sizes: &[usize]) -> ClusterTree {
    let centers: Vec<Vec<f32>> = (0..12).map(|_| gaussian(rng, 16)).collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|i| centers[i % 12].iter().zip(gaussian(rng, 16)).map(|(c, g)| c + 0.4 * g).collect())
        .collect();
    build_cluster_tree(&Matrix::from_rows(&rows).unwrap(), sizes).unwrap()
}

/// Checks the constraint exhaustively per level. Returns the number of
/// levels that took the fallback.
fn check_palette(tree: &ClusterTree, colors: &[HslColor], fallback: &[bool], tau: f64) -> Result<usize, String> {
    for c in colors {
        ensure!((0.0..1.0).contains(&c.h) && (0.0..=1.0).contains(&c.s) && (0.0..=1.0).contains(&c.l), "color out of range {c:?}");
    }
    let mut fell_back = 0;
    for (level, ids) in tree.levels.iter().enumerate() {
        if fallback[level] {
            fell_back += 1;
            continue;
        }
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                let d = hsl_distance(&colors[a], &colors[b]);
                ensure!(d > tau, "level {level}: nodes {a} and {b} only {d:.4} apart without fallback flag");
            }
        }
    }
    Ok(fell_back)
}

fn colors(fx: &Fixture) -> Check {
    let tau = 0.15;
    let mut palettes = 0;
    let mut fallbacks = 0;
    for pack in &fx.registry.packs {
        let tree = &pack.derived().map_err(|e| e.to_string())?.clusters;
        let colors: Vec<HslColor> = tree.nodes.iter().map(|n| n.color.ok_or("uncolored node")).collect::<Result<_, _>>()?;
        fallbacks += check_palette(tree, &colors, &tree.palette_fallback, tau).map_err(|e| format!("{}: {e}", pack.sae_id()))?;
        palettes += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for (n, sizes) in [(120, vec![10, 30, 90]), (200, vec![10, 30, 90]), (150, vec![4, 12, 36]), (100, vec![20, 60, 100])] {
        let tree = random_tree(&mut rng, n, &sizes);
        for seed in 0..3 {
            let config = ColorConfig { seed, ..Default::default() };
            let p = assign_colors(&tree, &config);
            fallbacks += check_palette(&tree, &p.colors, &p.fallback, tau)?;
            palettes += 1;
        }
        let strict = ColorConfig { tau: 0.6, ..Default::default() };
        let p = assign_colors(&tree, &strict);
        check_palette(&tree, &p.colors, &p.fallback, 0.6)?;
        ensure!(p.fallback.iter().any(|f| *f), "tau 0.6 over {sizes:?} should need the fallback");
        palettes += 1;
    }

    for _ in 0..1000 {
        let h: f64 = rng.random_range(0.0..1.0);
        ensure!(child_hue(h, 0.0) == h, "child_hue({h}, 0) = {}", child_hue(h, 0.0));
    }
    ensure!((child_hue(0.95, 0.10) - 0.05).abs() < 1e-12, "wrap-around hue wrong");
    let tree = random_tree(&mut rng, 150, &[10, 30, 90]);
    let flat = assign_colors(&tree, &ColorConfig { delta_h: 0.0, ..Default::default() });
    for node in tree.nodes.iter().filter(|n| n.level > 0) {
        let parent = node.parent.unwrap();
        ensure!(
            flat.colors[node.id].h == flat.colors[parent].h,
            "node {} hue {} differs from parent {}",
            node.id, flat.colors[node.id].h, flat.colors[parent].h
        );
    }
    Ok(format!("{palettes} palettes checked ({fallbacks} constrained levels fell back); zero offset inherits hue exactly"))
}

// ---------------------------------------------------------------- layout

fn pairwise(coords: &Matrix) -> Vec<f64> {
    let n = coords.rows();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = (coords.get(i, 0) - coords.get(j, 0)) as f64;
            let dy = (coords.get(i, 1) - coords.get(j, 1)) as f64;
            out.push((dx * dx + dy * dy).sqrt());
        }
    }
    out
}

/// Best training accuracy of a perceptron with bias on standardized inputs.
fn perceptron_accuracy(x: &[[f64; 2]], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = [x.iter().map(|p| p[0]).sum::<f64>() / n, x.iter().map(|p| p[1]).sum::<f64>() / n];
    let sd = [0, 1].map(|k| (x.iter().map(|p| (p[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12));
    let xs: Vec<[f64; 2]> = x.iter().map(|p| [(p[0] - mean[0]) / sd[0], (p[1] - mean[1]) / sd[1]]).collect();
    let mut w = [0.0f64; 3];
    let accuracy = |w: &[f64; 3]| xs.iter().zip(y).filter(|(p, t)| (w[0] * p[0] + w[1] * p[1] + w[2]) * **t > 0.0).count() as f64 / n;
    let mut best = 0.0f64;
    for _ in 0..500 {
        let mut errors = 0;
        for (p, t) in xs.iter().zip(y) {
            if (w[0] * p[0] + w[1] * p[1] + w[2]) * t <= 0.0 {
                w[0] += t * p[0];
                w[1] += t * p[1];
                w[2] += t;
                errors += 1;
            }
        }
        best = best.max(accuracy(&w));
        if errors == 0 {
            break;
        }
    }
    best
}

fn layout() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let dim = 32;
    let config = LayoutConfig::default();

    let centers: Vec<Vec<f32>> = (0..10).map(|_| gaussian(&mut rng, dim)).collect();
    let mut rows: Vec<Vec<f32>> = (0..270)
        .map(|i| centers[i % 10].iter().zip(gaussian(&mut rng, dim)).map(|(c, g)| c + 0.5 * g).collect())
        .collect();
    for k in 0..30 {
        rows.push(rows[k * 9].clone());
    }
    let m = Matrix::from_rows(&rows).unwrap();
    let first = compute_layout(&m, &config).map_err(|e| e.to_string())?;
    let mut dists = pairwise(&first.coords);
    dists.sort_by(f64::total_cmp);
    let p1 = dists[dists.len() / 100];
    let c = &first.coords;
    let worst_dup = (0..30)
        .map(|k| {
            let (a, b) = (k * 9, 270 + k);
            (((c.get(a, 0) - c.get(b, 0)) as f64).powi(2) + ((c.get(a, 1) - c.get(b, 1)) as f64).powi(2)).sqrt()
        })
        .fold(0.0, f64::max);
    ensure!(worst_dup <= p1, "duplicate pair {worst_dup:.4} apart, 1st percentile {p1:.4}");

    let again = compute_layout(&m, &config).map_err(|e| e.to_string())?;
    let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure!(bits(&first.coords) == bits(&again.coords), "same seed gave different coordinates");

    let c1 = gaussian(&mut rng, dim);
    let c2 = gaussian(&mut rng, dim);
    let blobs: Vec<Vec<f32>> = (0..300)
        .map(|i| {
            let center = if i < 150 { &c1 } else { &c2 };
            center.iter().zip(gaussian(&mut rng, dim)).map(|(c, g)| c + 0.25 * g).collect()
        })
        .collect();
    let out = compute_layout(&Matrix::from_rows(&blobs).unwrap(), &config).map_err(|e| e.to_string())?;
    let pts: Vec<[f64; 2]> = (0..300).map(|i| [out.coords.get(i, 0) as f64, out.coords.get(i, 1) as f64]).collect();
    let labels: Vec<f64> = (0..300).map(|i| if i < 150 { 1.0 } else { -1.0 }).collect();
    let acc = perceptron_accuracy(&pts, &labels);
    ensure!(acc >= 0.95, "two blobs separated at {:.1}%", acc * 100.0);
    Ok(format!("duplicates within {worst_dup:.3} (p1 {p1:.3}); blobs {:.1}% separable; bitwise deterministic", acc * 100.0))
}

// ---------------------------------------------------------------- retrieval

fn retrieval() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let names = ["r-a", "r-b", "r-c", "r-d"];
    let mut max_dev = 0f64;
    for triple in 0..50 {
        let dim = rng.random_range(8..=48);
        let n_saes = rng.random_range(1..=4);
        let saes: Vec<Sae> = (0..n_saes)
            .map(|i| Sae {
                id: names[i],
                layer: i,
                rows: (0..rng.random_range(1..=300)).map(|_| gaussian(&mut rng, dim)).collect(),
            })
            .collect();
        let total: usize = saes.iter().map(|s| s.rows.len()).sum();
        let k = rng.random_range(1..=total + 3);
        let q = gaussian(&mut rng, dim);
        let store = store_of(&saes);
        let got = store.top_k_features(&q, k, &Scope::All).map_err(|e| e.to_string())?;
        let want = scan(&saes, &q);
        ensure!(got.len() == k.min(total), "triple {triple}: {} hits for K={k}, N={total}", got.len());
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            ensure!(
                g.sae_id == w.1 && g.feature_id == w.2 && g.score == w.0,
                "triple {triple} hit {i}: got {}/{} {}, want {}/{} {}",
                g.sae_id, g.feature_id, g.score, w.1, w.2, w.0
            );
            let s = &saes.iter().find(|s| s.id == w.1).unwrap().rows[w.2];
            let dot: f64 = s.iter().zip(&q).map(|(a, b)| *a as f64 * *b as f64).sum();
            let na: f64 = s.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
            let nq: f64 = q.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
            max_dev = max_dev.max((dot / (na * nq) - g.score as f64).abs());
        }
        let scoped = store.top_k_features(&q, k, &Scope::Sae(names[0].into())).map_err(|e| e.to_string())?;
        let own: Vec<usize> = want.iter().filter(|h| h.1 == names[0]).take(k).map(|h| h.2).collect();
        ensure!(scoped.iter().map(|h| h.feature_id).collect::<Vec<_>>() == own, "triple {triple}: scoped top-K differs");
    }
    ensure!(max_dev <= 1e-5, "scores deviate from exact cosine by {max_dev:e}");

    let mut hist = Vec::new();
    for (sizes, dim) in [(vec![900, 800, 700], 24), (vec![300, 250], 16), (vec![2000], 12), (vec![1500, 1500, 1500], 32)] {
        let saes: Vec<Sae> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| Sae { id: names[i], layer: i, rows: (0..n).map(|_| gaussian(&mut rng, dim)).collect() })
            .collect();
        let total: usize = sizes.iter().sum();
        let q = gaussian(&mut rng, dim);
        let h = store_of(&saes).similarity_histogram(&q, 2000, 20).map_err(|e| e.to_string())?;
        let want = scan(&saes, &q);
        let top = &want[..2000.min(total)];
        ensure!(h.counts.iter().sum::<usize>() == top.len() && h.n_scored == top.len(), "histogram over N={total} holds {}", h.counts.iter().sum::<usize>());
        ensure!(h.max == top[0].0 && h.min == top[top.len() - 1].0, "histogram range differs from top-K range");
        hist.push(format!("{}/{}", h.n_scored, total));
    }
    Ok(format!("50 triples exact (cosine dev {max_dev:.1e}); histogram counts {}", hist.join(", ")))
}

// ---------------------------------------------------------------- interpretation

fn segment(feature: usize, id: u64, text: &str, act: f32, peak: usize) -> SegmentRecord {
    let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let n = tokens.len();
    let mut acts = vec![0.01f32; n];
    acts[peak.min(n - 1)] = act;
    SegmentRecord::new(feature, id, tokens, (0..n as u32).collect(), acts, text.to_string()).unwrap()
}

fn interpretation(fx: &Fixture) -> Check {
    let embedder = HashingEmbedder::default();
    let explanation = embed_text(&embedder, "flowers blooming in a sunny garden").map_err(|e| e.to_string())?;
    let garden = [
        "flowers blooming in the garden",
        "a sunny garden full of flowers",
        "roses blooming near the garden wall",
        "garden flowers in the sun",
        "tulips blooming in spring gardens",
        "the garden is sunny and blooming",
    ];
    let mut segs = vec![segment(0, 900, "steel beams melt inside the loud factory furnace", 9.0, 3)];
    for i in 0..24u64 {
        segs.push(segment(0, i, &format!("{} number {i}", garden[i as usize % garden.len()]), 8.0 - i as f32 * 0.3, 1));
    }
    let m = activation_similarity_matrix(&explanation, &segs, &embedder, None, 0.3).map_err(|e| e.to_string())?;
    let report = detect_anomalies(&m.cells, 0.3);
    ensure!(
        report.flagged.iter().any(|a| a.segment_id == 900 && a.region == Region::HighActLowSim),
        "planted synthetic segment not flagged: {:?}",
        report.flagged
    );

    let a = &fx.exp.anomaly;
    let explorer = Explorer::new(
        load_packs(fx.packs()).map_err(|e| e.to_string())?,
        Box::new(LexiconRewriter::bundled()),
        ExplorerConfig::default(),
    );
    let detail = explorer.feature(&a.sae_id, a.feature_id, None).map_err(|e| e.to_string())?;
    ensure!(
        detail.anomalies.flagged.iter().any(|f| f.segment_id == a.planted_segment && f.region == Region::HighActLowSim),
        "fixture segment {} not flagged high-act/low-sim",
        a.planted_segment
    );

    // Ranks against a sort oracle, on the fixture matrix and on random ties.
    let mut rng = ChaCha8Rng::seed_from_u64(83);
    let mut cases: Vec<(Vec<f32>, Vec<u64>)> = vec![
        (detail.matrix.iter().map(|c| c.similarity).collect(), detail.matrix.iter().map(|c| c.segment_id).collect()),
        (detail.matrix.iter().map(|c| c.max_activation).collect(), detail.matrix.iter().map(|c| c.segment_id).collect()),
    ];
    for _ in 0..200 {
        let n = rng.random_range(1..=60);
        let values: Vec<f32> = (0..n).map(|_| (rng.random_range(0..8) as f32) * 0.5).collect();
        let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
        ids.shuffle(&mut rng);
        cases.push((values, ids));
    }
    for (ci, (values, ids)) in cases.iter().enumerate() {
        let got = descending_ranks(values, ids);
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&x, &y| values[y].total_cmp(&values[x]).then(ids[x].cmp(&ids[y])));
        let mut want = vec![0; values.len()];
        for (r, &i) in order.iter().enumerate() {
            want[i] = r + 1;
        }
        ensure!(got == want, "case {ci}: ranks {got:?}, want {want:?}");
    }
    let sim_ranks: Vec<usize> = detail.matrix.iter().map(|c| c.similarity_rank).collect();
    let act_ranks: Vec<usize> = detail.matrix.iter().map(|c| c.activation_rank).collect();
    ensure!(sim_ranks == descending_ranks(&cases[0].0, &cases[0].1), "matrix similarity ranks disagree");
    ensure!(act_ranks == descending_ranks(&cases[1].0, &cases[1].1), "matrix activation ranks disagree");

    let pack = fx.registry.pack(&a.sae_id).map_err(|e| e.to_string())?;
    let stored: Vec<SegmentRecord> = pack.segments_for(a.feature_id).into_iter().cloned().collect();
    let all_ids: Vec<u64> = stored.iter().map(|s| s.segment_id).collect();
    for trial in 0..50 {
        let selection: Option<Vec<u64>> = (trial > 0).then(|| all_ids.iter().copied().filter(|_| rng.random_bool(0.3)).collect());
        let stats = max_activation_token_stats(&stored, selection.as_deref());
        let chosen: Vec<&SegmentRecord> = stored.iter().filter(|s| selection.as_ref().is_none_or(|sel| sel.contains(&s.segment_id))).collect();
        let total: usize = stats.iter().map(|s| s.count).sum();
        ensure!(total == chosen.len(), "trial {trial}: token counts sum to {total}, {} segments selected", chosen.len());
        let mut oracle: BTreeMap<&str, (usize, f32)> = BTreeMap::new();
        for s in &chosen {
            let e = oracle.entry(s.tokens[s.max_index].as_str()).or_insert((0, f32::NEG_INFINITY));
            e.0 += 1;
            e.1 = e.1.max(s.max_activation);
        }
        for st in &stats {
            ensure!(oracle.get(st.token.as_str()) == Some(&(st.count, st.max_activation)), "trial {trial}: token {:?} stats differ", st.token);
        }
        ensure!(stats.len() == oracle.len(), "trial {trial}: token sets differ");
    }
    Ok(format!(
        "planted segments flagged (fixture {} act rank 1); {} rank cases; token stats conserved over 50 selections",
        a.planted_segment,
        cases.len()
    ))
}

// ---------------------------------------------------------------- golden flow

struct Step {
    name: String,
    method: &'static str,
    target: String,
    body: Option<Value>,
}

fn flow(exp: &Expectations) -> Vec<Step> {
    let step = |name: &str, method, target: String, body: Option<Value>| Step { name: name.into(), method, target, body };
    let plant = &exp.plant;
    let feature = format!("/api/saes/{}/features/{}", plant.sae_id, plant.feature_id);
    let c = &exp.coactivation;
    let s = &exp.steering;
    vec![
        step("health", "GET", "/api/health".into(), None),
        step("query", "POST", "/api/query".into(), Some(json!({"text": "plant"}))),
        step("query-suggestion", "POST", "/api/query".into(), Some(json!({"text": "plant", "use_suggestion": true}))),
        step("rank", "GET", "/api/saes?q=plant".into(), None),
        step("atlas-far", "GET", format!("/api/saes/{}/atlas?zoom=far&q=plant", plant.sae_id), None),
        step("atlas-mid", "GET", format!("/api/saes/{}/atlas?zoom=mid&q=plant", plant.sae_id), None),
        step("atlas-near", "GET", format!("/api/saes/{}/atlas?zoom=near&q=plant", plant.sae_id), None),
        step("feature", "GET", feature.clone(), None),
        step("feature-selection", "GET", format!("{feature}?selection={}", exp.anomaly.planted_segment), None),
        step("probe", "POST", format!("{feature}/probe"), Some(json!({"text": exp.probe.text}))),
        step(
            "coactivate",
            "POST",
            format!("/api/saes/{}/features/{}/coactivate", c.sae_id, c.target),
            Some(json!({"text": c.text, "anchors": c.anchors, "top_n": c.top_n})),
        ),
        step(
            "steer",
            "POST",
            format!("/api/saes/{}/features/{}/steer", s.sae_id, s.feature_id),
            Some(json!({"prompt": s.prompts[0], "strengths": s.strengths, "settings": {"max_new_tokens": s.max_new_tokens}})),
        ),
    ]
}

fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("elapsed_ms");
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden").join("flow.json")
}

fn cli(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_saeatlas")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("saeatlas {args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    let mut v: Value = serde_json::from_slice(&out.stdout).map_err(|e| format!("saeatlas {args:?}: {e}"))?;
    strip_timing(&mut v);
    Ok(v)
}

fn start_server(packs: &Path) -> Result<String, String> {
    let registry = load_packs(packs).map_err(|e| e.to_string())?;
    let state = AppState::new(
        Explorer::new(registry, Box::new(LexiconRewriter::bundled()), ExplorerConfig::default()),
        ServeConfig::default(),
    );
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = saeatlas_server::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            saeatlas_server::serve(listener, state, std::future::pending()).await.unwrap();
        });
    });
    let addr = rx.recv().map_err(|e| e.to_string())?;
    Ok(format!("http://{addr}"))
}

fn http(base: &str, step: &Step) -> Result<Value, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let url = format!("{base}{}", step.target);
    let mut resp = match &step.body {
        None => agent.get(&url).call(),
        Some(b) => agent.post(&url).header("content-type", "application/json").send(b.to_string()),
    }
    .map_err(|e| e.to_string())?;
    let status = resp.status().as_u16();
    let mut v: Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
    if status != 200 {
        return Err(format!("{} {} returned {status}: {v}", step.method, step.target));
    }
    strip_timing(&mut v);
    Ok(v)
}

fn golden_flow(fx: &Fixture) -> Check {
    let packs = fx.packs();
    let packs_arg = packs.to_str().ok_or("non-UTF-8 temp path")?;
    let steps = flow(&fx.exp);
    let base = start_server(&packs)?;

    let mut via_http = Vec::new();
    for step in &steps {
        via_http.push(http(&base, step)?);
    }
    let record: Vec<Value> = steps
        .iter()
        .zip(&via_http)
        .map(|(s, r)| json!({"step": s.name, "method": s.method, "target": s.target, "body": s.body, "response": r}))
        .collect();

    let path = golden_path();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        let text = serde_json::to_string_pretty(&record).map_err(|e| e.to_string())? + "\n";
        std::fs::write(&path, text).map_err(|e| e.to_string())?;
    }
    let golden: Vec<Value> = serde_json::from_str(
        &std::fs::read_to_string(&path).map_err(|e| format!("golden file {}: {e}", path.display()))?,
    )
    .map_err(|e| e.to_string())?;
    ensure!(golden.len() == record.len(), "golden has {} steps, flow has {}", golden.len(), record.len());
    for (g, r) in golden.iter().zip(&record) {
        ensure!(g == r, "HTTP step {} differs from golden", r["step"]);
    }

    for (step, g) in steps.iter().zip(&golden) {
        let body = step.body.as_ref().map(Value::to_string);
        let mut args = vec!["api", "--packs", packs_arg, step.method, step.target.as_str()];
        if let Some(b) = &body {
            args.extend(["--body", b.as_str()]);
        }
        let got = cli(&args)?;
        ensure!(got == g["response"], "CLI step {} differs from golden", step.name);
    }
    let query = cli(&["query", "--packs", packs_arg, "plant"])?;
    ensure!(query == golden[1]["response"], "`saeatlas query` differs from the HTTP /query response");
    let suggested = cli(&["query", "--packs", packs_arg, "--use-suggestion", "plant"])?;
    ensure!(suggested == golden[2]["response"], "`saeatlas query --use-suggestion` differs from HTTP");
    Ok(format!("{} steps match golden via HTTP and CLI (fixture build {:.1?})", steps.len(), fx.build_time))
}
