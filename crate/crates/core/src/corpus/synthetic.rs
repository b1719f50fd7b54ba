//! Pattern-determined synthetic corpora.
//!
//! Every sentence holds exactly one event (a verb, optionally preceded by an
//! auxiliary so the span covers two tokens). Each sentence after the first
//! opens with a connective marker whose identity fixes the relation between
//! the previous sentence's event and this one. The label of every TLINK is
//! therefore a pure function of the surface tokens.
//!
//! Labels are drawn as an exact multiset matching the requested mixture
//! (largest-remainder rounding) and shuffled, so corpus-level frequencies
//! track the mixture to within one count per label.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Document, Event, Tlink};
use crate::schema::{DatasetProfile, Relation};

/// Token pools used by the generator.
#[derive(Debug, Clone)]
pub struct SyntheticLexicon {
    pub fillers: Vec<&'static str>,
    pub events: Vec<&'static str>,
    pub auxiliaries: Vec<&'static str>,
}

impl Default for SyntheticLexicon {
    fn default() -> Self {
        SyntheticLexicon {
            fillers: vec![
                "the", "a", "report", "city", "officials", "on", "monday", "in", "market", "people",
                "of", "and", "to", "new", "company", "its", "that", "with", "government", "week",
                "year", "by", "for", "police", "team", "students", "at", "local", "board", "river",
            ],
            events: vec![
                "arrived", "announced", "collapsed", "signed", "visited", "launched", "resigned",
                "attacked", "won", "lost", "opened", "closed", "met", "fled", "voted", "built",
                "moved", "raised", "dropped", "hired", "released", "warned", "crashed", "agreed",
            ],
            auxiliaries: vec!["had", "was", "has"],
        }
    }
}

/// Connective tokens that determine the relation (previous event REL this event).
pub fn markers(rel: Relation) -> &'static [&'static str] {
    match rel {
        Relation::None => &[],
        Relation::Before => &["later", "afterwards", "subsequently"],
        Relation::After => &["earlier", "previously", "beforehand"],
        Relation::Simultaneous => &["meanwhile", "simultaneously"],
        Relation::Vague => &["reportedly", "apparently", "perhaps"],
        Relation::Includes => &["throughout", "overall"],
        Relation::IsIncluded => &["during", "amid"],
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_docs: usize,
    pub profile: DatasetProfile,
    /// Relative weight per relation; normalized internally.
    pub mixture: Vec<(Relation, f64)>,
    /// Inclusive range of sentences per document.
    pub sentences_per_doc: (usize, usize),
    /// Inclusive range of filler tokens around each event.
    pub fillers_per_sentence: (usize, usize),
    /// Probability that an event span includes a leading auxiliary.
    pub multi_token_prob: f64,
    /// Probability that a TLINK is stored in the reverse direction.
    pub reverse_prob: f64,
}

impl SyntheticConfig {
    /// Defaults shaped after the given profile's label imbalance.
    pub fn new(seed: u64, n_docs: usize, profile: DatasetProfile) -> Self {
        let mixture = default_mixture(&profile);
        let multi_token_prob = if profile.name() == "matres" { 0.0 } else { 0.3 };
        SyntheticConfig {
            seed,
            n_docs,
            profile,
            mixture,
            sentences_per_doc: (2, 5),
            fillers_per_sentence: (1, 4),
            multi_token_prob,
            reverse_prob: 0.5,
        }
    }

    /// Normalized mixture over the profile's relations.
    pub fn normalized_mixture(&self) -> Vec<(Relation, f64)> {
        let mut weights: Vec<(Relation, f64)> = self
            .profile
            .relations()
            .map(|(_, r)| {
                let w = self
                    .mixture
                    .iter()
                    .filter(|(m, _)| *m == r)
                    .map(|(_, w)| w.max(0.0))
                    .sum::<f64>();
                (r, w)
            })
            .collect();
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            let k = weights.len() as f64;
            weights.iter_mut().for_each(|(_, w)| *w = 1.0 / k);
        } else {
            weights.iter_mut().for_each(|(_, w)| *w /= total);
        }
        weights
    }
}

/// Label counts of the reference corpora; uniform for other profiles.
pub fn default_mixture(profile: &DatasetProfile) -> Vec<(Relation, f64)> {
    let table: &[(Relation, f64)] = match profile.name() {
        "tbdense" => &[
            (Relation::Before, 384.0),
            (Relation::After, 274.0),
            (Relation::Includes, 56.0),
            (Relation::IsIncluded, 53.0),
            (Relation::Simultaneous, 22.0),
            (Relation::Vague, 638.0),
        ],
        "matres" => &[
            (Relation::Before, 417.0),
            (Relation::After, 266.0),
            (Relation::Simultaneous, 31.0),
            (Relation::Vague, 113.0),
        ],
        _ => &[],
    };
    if table.is_empty() {
        profile.relations().map(|(_, r)| (r, 1.0)).collect()
    } else {
        table.to_vec()
    }
}

/// Splits `total` into integer counts proportional to `weights`.
fn apportion(weights: &[(Relation, f64)], total: usize) -> Vec<(Relation, usize)> {
    let mut counts: Vec<(Relation, usize, f64)> = weights
        .iter()
        .map(|&(r, w)| {
            let exact = w * total as f64;
            (r, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // Largest remainder first; index breaks ties.
    order.sort_by(|&a, &b| counts[b].2.total_cmp(&counts[a].2).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i].1 += 1;
    }
    counts.into_iter().map(|(r, c, _)| (r, c)).collect()
}

/// Generates `config.n_docs` documents; a pure function of the config.
pub fn generate_synthetic(config: &SyntheticConfig) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lex = SyntheticLexicon::default();
    let (smin, smax) = config.sentences_per_doc;
    let smin = smin.max(1);
    let smax = smax.max(smin);

    let sentence_counts: Vec<usize> = (0..config.n_docs.max(1))
        .map(|_| rng.gen_range(smin..=smax))
        .collect();
    let total_links: usize = sentence_counts.iter().map(|n| n - 1).sum();

    let mut labels: Vec<Relation> = apportion(&config.normalized_mixture(), total_links)
        .into_iter()
        .flat_map(|(r, c)| std::iter::repeat(r).take(c))
        .collect();
    labels.shuffle(&mut rng);
    let mut labels = labels.into_iter();

    sentence_counts
        .iter()
        .enumerate()
        .map(|(d, &n_sent)| {
            let mut doc = Document {
                doc_id: format!("syn{}-{:04}", config.seed, d),
                sentences: Vec::with_capacity(n_sent),
                events: Vec::with_capacity(n_sent),
                tlinks: Vec::with_capacity(n_sent.saturating_sub(1)),
            };
            for s in 0..n_sent {
                let label = if s > 0 { labels.next() } else { None };
                let (tokens, start, end) = sentence(&mut rng, config, &lex, label);
                doc.sentences.push(tokens);
                doc.events.push(Event {
                    id: format!("e{}", s + 1),
                    sentence: s,
                    start,
                    end,
                });
                if let Some(rel) = label {
                    let (prev, cur) = (format!("e{s}"), format!("e{}", s + 1));
                    let link = if rng.gen_bool(config.reverse_prob.clamp(0.0, 1.0)) {
                        Tlink {
                            src: cur,
                            dst: prev,
                            label: rel.inverse(),
                        }
                    } else {
                        Tlink {
                            src: prev,
                            dst: cur,
                            label: rel,
                        }
                    };
                    doc.tlinks.push(link);
                }
            }
            doc
        })
        .collect()
}

fn sentence(
    rng: &mut ChaCha8Rng,
    config: &SyntheticConfig,
    lex: &SyntheticLexicon,
    label: Option<Relation>,
) -> (Vec<String>, usize, usize) {
    let mut tokens: Vec<String> = Vec::new();
    if let Some(rel) = label {
        let pool = markers(rel);
        tokens.push(pool[rng.gen_range(0..pool.len())].to_string());
    }
    let (fmin, fmax) = config.fillers_per_sentence;
    let fillers = rng.gen_range(fmin..=fmax.max(fmin));
    let before = rng.gen_range(0..=fillers);
    for _ in 0..before {
        tokens.push(lex.fillers[rng.gen_range(0..lex.fillers.len())].to_string());
    }
    let start = tokens.len();
    if rng.gen_bool(config.multi_token_prob.clamp(0.0, 1.0)) {
        tokens.push(lex.auxiliaries[rng.gen_range(0..lex.auxiliaries.len())].to_string());
    }
    tokens.push(lex.events[rng.gen_range(0..lex.events.len())].to_string());
    let end = tokens.len();
    for _ in before..fillers {
        tokens.push(lex.fillers[rng.gen_range(0..lex.fillers.len())].to_string());
    }
    tokens.push(".".to_string());
    (tokens, start, end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate;
    use std::collections::BTreeMap;

    #[test]
    fn deterministic_in_seed() {
        let cfg = SyntheticConfig::new(7, 20, DatasetProfile::tbdense());
        assert_eq!(generate_synthetic(&cfg), generate_synthetic(&cfg));
        let other = SyntheticConfig::new(8, 20, DatasetProfile::tbdense());
        assert_ne!(generate_synthetic(&cfg), generate_synthetic(&other));
    }

    #[test]
    fn labels_closed_over_profile_and_docs_valid() {
        let profile = DatasetProfile::tbdense();
        let docs = generate_synthetic(&SyntheticConfig::new(1, 10, profile.clone()));
        assert_eq!(docs.len(), 10);
        for doc in &docs {
            assert!(validate(doc).is_empty(), "{:?}", validate(doc));
            for link in &doc.tlinks {
                assert!(profile.id_of(link.label).is_ok());
            }
        }
        let matres = DatasetProfile::matres();
        for doc in generate_synthetic(&SyntheticConfig::new(1, 10, matres.clone())) {
            for link in &doc.tlinks {
                assert!(matres.id_of(link.label).is_ok());
            }
            assert!(doc.events.iter().all(|e| e.len() == 1));
        }
    }

    #[test]
    fn histogram_matches_mixture() {
        let cfg = SyntheticConfig::new(3, 500, DatasetProfile::tbdense());
        let docs = generate_synthetic(&cfg);
        let mut counts: BTreeMap<Relation, usize> = BTreeMap::new();
        let mut total = 0usize;
        for doc in &docs {
            for link in &doc.tlinks {
                // Count in text order: previous sentence's event first.
                let src_first = doc.event(&link.src).unwrap().sentence
                    < doc.event(&link.dst).unwrap().sentence;
                let rel = if src_first { link.label } else { link.label.inverse() };
                *counts.entry(rel).or_default() += 1;
                total += 1;
            }
        }
        for (rel, share) in cfg.normalized_mixture() {
            let got = *counts.get(&rel).unwrap_or(&0) as f64 / total as f64;
            assert!((got - share).abs() <= 0.02, "{rel}: {got} vs {share}");
        }
    }

    #[test]
    fn apportion_is_exact() {
        let w = vec![(Relation::Before, 0.5), (Relation::After, 0.3), (Relation::Vague, 0.2)];
        let c = apportion(&w, 11);
        assert_eq!(c.iter().map(|x| x.1).sum::<usize>(), 11);
        assert_eq!(c[0].1, 6);
    }
}
