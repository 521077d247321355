//! Class-based TF-IDF keywords for clusters of feature explanations.
//!
//! Each cluster's explanations form one document `c`:
//! `score(t, c) = f(t,c) / Σ_t' f(t',c) · ln(|C| / |{c : t ∈ c}|)`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUNDLED_STOP_WORDS: &str = include_str!("../../assets/stopwords.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopWords(HashSet<String>);

impl StopWords {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_STOP_WORDS)
    }

    pub fn parse(text: &str) -> Self {
        StopWords(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn none() -> Self {
        StopWords(HashSet::new())
    }

    pub fn contains(&self, w: &str) -> bool {
        self.0.contains(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicTerm {
    pub term: String,
    pub score: f64,
}

/// Lowercased alphabetic words of length >= 2 that are not stop words.
pub fn terms(text: &str, stop: &StopWords) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| w.chars().count() >= 2 && !stop.contains(w))
        .map(str::to_string)
        .collect()
}

/// c-TF-IDF score of every term in every cluster. `clusters[c]` holds the
/// explanation texts of cluster `c`.
pub fn ctfidf_scores(clusters: &[Vec<&str>], stop: &StopWords) -> Result<Vec<BTreeMap<String, f64>>> {
    if let Some(c) = clusters.iter().position(Vec::is_empty) {
        return Err(Error::InvalidInput(format!("cluster {c} has no explanations")));
    }
    let freqs: Vec<BTreeMap<String, usize>> = clusters
        .iter()
        .map(|docs| {
            let mut f = BTreeMap::new();
            for doc in docs {
                for t in terms(doc, stop) {
                    *f.entry(t).or_insert(0) += 1;
                }
            }
            f
        })
        .collect();
    let mut doc_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for f in &freqs {
        for t in f.keys() {
            *doc_freq.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let n_clusters = clusters.len() as f64;
    Ok(freqs
        .iter()
        .map(|f| {
            let total: usize = f.values().sum();
            f.iter()
                .map(|(t, &count)| {
                    let tf = count as f64 / total as f64;
                    let idf = (n_clusters / doc_freq[t.as_str()] as f64).ln();
                    (t.clone(), tf * idf)
                })
                .collect()
        })
        .collect())
}

/// The `top_n` highest-scoring terms per cluster, ties alphabetical.
pub fn extract_topics(clusters: &[Vec<&str>], stop: &StopWords, top_n: usize) -> Result<Vec<Vec<TopicTerm>>> {
    Ok(ctfidf_scores(clusters, stop)?
        .into_iter()
        .map(|scores| {
            let mut v: Vec<TopicTerm> = scores
                .into_iter()
                .map(|(term, score)| TopicTerm { term, score })
                .collect();
            v.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.term.cmp(&b.term)));
            v.truncate(top_n);
            v
        })
        .collect())
}

/// Distinct terms of a text, in order of first appearance.
pub fn distinct_terms(text: &str, stop: &StopWords) -> Vec<String> {
    let mut seen = BTreeSet::new();
    terms(text, stop).into_iter().filter(|t| seen.insert(t.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn term_in_every_cluster_scores_zero() {
        let clusters = vec![vec!["plant growth"], vec!["plant factory"], vec!["plant power"]];
        let s = ctfidf_scores(&clusters, &StopWords::none()).unwrap();
        for c in &s {
            assert_eq!(c["plant"], 0.0);
        }
    }

    #[test]
    fn hand_evaluated_two_cluster_score() {
        // Cluster 0 has 10 terms, "seed" three times and nowhere else.
        let c0 = vec!["seed seed seed aa bb cc dd ee ff gg"];
        let c1 = vec!["aa bb"];
        let s = ctfidf_scores(&[c0, c1], &StopWords::none()).unwrap();
        assert!((s[0]["seed"] - 0.3 * 2f64.ln()).abs() < 1e-12);
        assert!((s[0]["seed"] - 0.2079).abs() < 1e-4);
    }

    #[test]
    fn stop_words_are_filtered_and_ties_alphabetical() {
        let stop = StopWords::bundled();
        let clusters = vec![
            vec!["references to zebra and apple", "words related to mango"],
            vec!["references to rocket"],
        ];
        let topics = extract_topics(&clusters, &stop, 5).unwrap();
        let t0: Vec<&str> = topics[0].iter().map(|t| t.term.as_str()).collect();
        assert_eq!(t0, vec!["apple", "mango", "zebra"]);
        assert_eq!(topics[1][0].term, "rocket");
    }

    #[test]
    fn empty_cluster_is_an_error() {
        assert!(ctfidf_scores(&[vec!["a b"], vec![]], &StopWords::none()).is_err());
    }
}
