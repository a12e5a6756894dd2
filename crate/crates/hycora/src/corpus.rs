//! Synthetic multi-role corpus with planted signatures, plus JSONL ingestion.
//!
//! Each role gets a unique catchphrase (a nonsense word that appears in all
//! of its "general" answers and in nobody else's) and an opener-word bias.
//! A shared pool of facts appears verbatim in the "specific" answers of
//! every role. This makes "distinct traits" and "common traits" directly
//! machine-checkable by substring scans.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    General,
    Specific,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::General => "general",
            Split::Specific => "specific",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "general" => Ok(Split::General),
            "specific" => Ok(Split::Specific),
            other => Err(Error::validation(format!("unknown split value: {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleProfile {
    pub role_id: usize,
    pub name: String,
    pub catchphrases: Vec<String>,
    /// Opener word → sampling-weight multiplier (≥ 0).
    pub style_bias: BTreeMap<String, f64>,
    /// (question, answer) pairs unique to this role.
    pub specific_facts: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub role_id: usize,
    pub question: String,
    pub answer: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_roles: usize,
    /// Role names indexed by role_id; first-appearance order for ingested data.
    pub role_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.role_names.len() != self.num_roles {
            return Err(Error::validation("role_names length != num_roles"));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.role_id >= self.num_roles {
                return Err(Error::validation(format!(
                    "sample {i} role_id {} out of range",
                    s.role_id
                )));
            }
            if s.question.is_empty() || s.answer.is_empty() {
                return Err(Error::validation(format!("sample {i} has empty text")));
            }
        }
        Ok(())
    }

    pub fn distinct_roles(&self) -> usize {
        let mut seen = vec![false; self.num_roles];
        for s in &self.samples {
            seen[s.role_id] = true;
        }
        seen.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_roles: usize,
    pub samples_per_role: usize,
    pub shared_fact_count: usize,
    pub seed: u64,
}

const OPENERS: [&str; 6] = ["Verily", "Truly", "Indeed", "Surely", "Frankly", "Honestly"];
const TOPIC_ADJ: [&str; 8] = [
    "old", "quiet", "bright", "distant", "hidden", "salty", "iron", "paper",
];
const TOPIC_NOUN: [&str; 10] = [
    "maps", "lanterns", "harbors", "orchards", "letters", "bridges", "clocks", "gardens",
    "rivers", "stones",
];
const CONTAINERS: [&str; 10] = [
    "the stone jar", "the north door", "the tide bell", "the green chest", "the coal bin",
    "the well rope", "the mill wheel", "the long shelf", "the cold hearth", "the tin box",
];
const ITEMS: [&str; 12] = [
    "copper keys", "dried figs", "river pearls", "old coins", "black salt", "wax seals",
    "glass beads", "iron nails", "silk thread", "oak galls", "tallow candles", "flint shards",
];
const PLACES: [&str; 6] = ["satchel", "cellar", "attic", "boot", "drawer", "chest"];
const NAMES: [&str; 20] = [
    "Aldric", "Briala", "Corvin", "Dessa", "Ewan", "Fiora", "Gorm", "Hilda", "Ivo", "Jessa",
    "Kel", "Lira", "Mox", "Nerin", "Opal", "Pell", "Quin", "Rosk", "Sif", "Tamsin",
];
const SYLLABLES: [&str; 16] = [
    "za", "mo", "kli", "ver", "dun", "pog", "rah", "shi", "tel", "wib", "xon", "yul", "bra",
    "fex", "gli", "hov",
];

fn validate_config(cfg: &CorpusConfig) -> Result<()> {
    if cfg.num_roles < 2 {
        return Err(Error::config(format!(
            "num_roles must be >= 2, got {}",
            cfg.num_roles
        )));
    }
    if cfg.samples_per_role < 1 {
        return Err(Error::config("samples_per_role must be >= 1"));
    }
    let specific_slots = cfg.samples_per_role / 2;
    if cfg.shared_fact_count > specific_slots {
        return Err(Error::config(format!(
            "shared_fact_count {} exceeds the {} specific-sample slots per role",
            cfg.shared_fact_count, specific_slots
        )));
    }
    Ok(())
}

fn make_catchphrase(rng: &mut ChaCha8Rng, taken: &[String]) -> String {
    loop {
        let n = 3 + (rng.gen_range(0..2) as usize);
        let mut phrase = String::new();
        for _ in 0..n {
            phrase.push_str(SYLLABLES[rng.gen_range(0..SYLLABLES.len())]);
        }
        let clash = taken
            .iter()
            .any(|t| t.contains(&phrase) || phrase.contains(t.as_str()));
        if !clash {
            return phrase;
        }
    }
}

fn weighted_pick<'a>(rng: &mut ChaCha8Rng, weights: &'a BTreeMap<String, f64>) -> &'a str {
    let total: f64 = weights.values().sum();
    let mut x = rng.gen_range(0.0..total);
    for (word, w) in weights {
        if x < *w {
            return word;
        }
        x -= w;
    }
    weights.keys().next_back().expect("non-empty weights")
}

/// Deterministic role profiles for a corpus config. The same config always
/// yields the same profiles, so probe sets can be rebuilt without sidecars.
pub fn generate_profiles(cfg: &CorpusConfig) -> Result<Vec<RoleProfile>> {
    validate_config(cfg)?;
    let mut rng = rng_for(cfg.seed, "profiles");
    let mut profiles = Vec::with_capacity(cfg.num_roles);
    let mut taken: Vec<String> = Vec::new();
    for role_id in 0..cfg.num_roles {
        let name = if role_id < NAMES.len() {
            NAMES[role_id].to_string()
        } else {
            format!("Role{role_id}")
        };
        let phrase = make_catchphrase(&mut rng, &taken);
        taken.push(phrase.clone());

        let favorite = OPENERS[rng.gen_range(0..OPENERS.len())];
        let mut style_bias = BTreeMap::new();
        for opener in OPENERS {
            let w = if opener == favorite { 8.0 } else { 0.25 };
            style_bias.insert(opener.to_string(), w);
        }

        let mut specific_facts = Vec::new();
        for place in PLACES {
            let item = ITEMS[rng.gen_range(0..ITEMS.len())];
            specific_facts.push((
                format!("What hides in {name}'s {place}?"),
                format!("{name}'s {place} hides the {item}."),
            ));
        }

        profiles.push(RoleProfile {
            role_id,
            name,
            catchphrases: vec![phrase],
            style_bias,
            specific_facts,
        });
    }
    Ok(profiles)
}

/// The shared-fact pool: `shared_fact_text(k)` must appear verbatim in every
/// role's specific answers.
pub fn shared_fact_text(k: usize) -> String {
    let container = CONTAINERS[k % CONTAINERS.len()];
    let item = ITEMS[(k * 7 + 3) % ITEMS.len()];
    format!("{container} holds {item}")
}

fn shared_fact_question(k: usize) -> String {
    let container = CONTAINERS[k % CONTAINERS.len()];
    format!("What does {container} hold?")
}

/// Generate the synthetic corpus. Pure function of the config; identical
/// configs yield byte-identical datasets.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Dataset> {
    let profiles = generate_profiles(cfg)?;
    let mut rng = rng_for(cfg.seed, "corpus");
    let mut samples = Vec::with_capacity(cfg.num_roles * cfg.samples_per_role);

    // slot-major order so roles interleave in the raw dataset
    for slot in 0..cfg.samples_per_role {
        for profile in &profiles {
            let is_general = slot % 2 == 0;
            let sample = if is_general {
                let adj = TOPIC_ADJ[rng.gen_range(0..TOPIC_ADJ.len())];
                let noun = TOPIC_NOUN[rng.gen_range(0..TOPIC_NOUN.len())];
                let opener = weighted_pick(&mut rng, &profile.style_bias);
                let phrase = &profile.catchphrases[rng.gen_range(0..profile.catchphrases.len())];
                Sample {
                    role_id: profile.role_id,
                    question: format!("What do you make of the {adj} {noun}?"),
                    answer: format!("{opener}, {phrase}."),
                    split: Split::General,
                }
            } else {
                let j = slot / 2; // specific slot index
                if j < cfg.shared_fact_count {
                    Sample {
                        role_id: profile.role_id,
                        question: shared_fact_question(j),
                        answer: format!("Everyone knows {}.", shared_fact_text(j)),
                        split: Split::Specific,
                    }
                } else {
                    let facts = &profile.specific_facts;
                    let (q, a) = &facts[(j - cfg.shared_fact_count) % facts.len()];
                    Sample {
                        role_id: profile.role_id,
                        question: q.clone(),
                        answer: a.clone(),
                        split: Split::Specific,
                    }
                }
            };
            samples.push(sample);
        }
    }

    Ok(Dataset {
        samples,
        num_roles: cfg.num_roles,
        role_names: profiles.iter().map(|p| p.name.clone()).collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    role: String,
    question: String,
    answer: String,
    split: String,
}

/// Load a JSONL dataset; role names map to dense ids in first-appearance order.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut role_names: Vec<String> = Vec::new();
    let mut role_ids: BTreeMap<String, usize> = BTreeMap::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let split = Split::parse(&rec.split)?;
        if rec.question.is_empty() || rec.answer.is_empty() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "empty question or answer".into(),
            });
        }
        let role_id = *role_ids.entry(rec.role.clone()).or_insert_with(|| {
            role_names.push(rec.role.clone());
            role_names.len() - 1
        });
        samples.push(Sample {
            role_id,
            question: rec.question,
            answer: rec.answer,
            split,
        });
    }

    Ok(Dataset {
        samples,
        num_roles: role_names.len(),
        role_names,
    })
}

/// Write a dataset as JSONL, one record per line.
pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::fs::File::create(path.as_ref())?;
    for s in &dataset.samples {
        let rec = JsonRecord {
            role: dataset.role_names[s.role_id].clone(),
            question: s.question.clone(),
            answer: s.answer.clone(),
            split: s.split.as_str().to_string(),
        };
        serde_json::to_writer(&mut file, &rec).map_err(|e| Error::Validation(e.to_string()))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Deterministic shuffle + role-aware interleave into batches of sample
/// indices. The last partial batch is kept. Full batches contain at least
/// two distinct roles whenever the remaining sample pool permits.
pub fn make_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::config(
            "batch_size must be >= 2 (contrastive loss degenerates on singleton batches)",
        ));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    // role-aware fix-up: a full batch that collapsed to one role swaps its
    // last element with the next later sample of a different role
    let n_full = dataset.len() / batch_size;
    for b in 0..n_full {
        let lo = b * batch_size;
        let hi = lo + batch_size;
        let first_role = dataset.samples[order[lo]].role_id;
        if order[lo..hi]
            .iter()
            .all(|&i| dataset.samples[i].role_id == first_role)
        {
            if let Some(swap_pos) = (hi..order.len())
                .find(|&p| dataset.samples[order[p]].role_id != first_role)
            {
                order.swap(hi - 1, swap_pos);
            }
        }
    }

    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Seeded split into (train, test), stratified per (role, split) cell so
/// every cell keeps evaluation coverage.
pub fn split_dataset(dataset: &Dataset, test_ratio: f64, seed: u64) -> (Dataset, Dataset) {
    let mut by_cell: BTreeMap<(usize, Split), Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        by_cell.entry((s.role_id, s.split)).or_default().push(i);
    }
    let mut rng = rng_for(seed, "split");
    let mut test_idx = vec![false; dataset.len()];
    for indices in by_cell.values() {
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        let n_test = ((indices.len() as f64) * test_ratio).floor() as usize;
        let n_test = n_test.min(indices.len().saturating_sub(1));
        for &i in shuffled.iter().take(n_test) {
            test_idx[i] = true;
        }
    }
    let pick = |want: bool| Dataset {
        samples: dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| test_idx[*i] == want)
            .map(|(_, s)| s.clone())
            .collect(),
        num_roles: dataset.num_roles,
        role_names: dataset.role_names.clone(),
    };
    (pick(false), pick(true))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(num_roles: usize, samples_per_role: usize, shared: usize, seed: u64) -> CorpusConfig {
        CorpusConfig {
            num_roles,
            samples_per_role,
            shared_fact_count: shared,
            seed,
        }
    }

    #[test]
    fn two_roles_one_sample_each() {
        let ds = generate_corpus(&cfg(2, 1, 0, 7)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_roles, 2);
        let roles: Vec<usize> = ds.samples.iter().map(|s| s.role_id).collect();
        assert!(roles.contains(&0) && roles.contains(&1));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&cfg(4, 100, 20, 1)).unwrap();
        let b = generate_corpus(&cfg(4, 100, 20, 1)).unwrap();
        assert_eq!(a, b);
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn catchphrases_are_planted_and_disjoint() {
        let c = cfg(4, 100, 20, 1);
        let ds = generate_corpus(&c).unwrap();
        let profiles = generate_profiles(&c).unwrap();
        for s in &ds.samples {
            if s.split == Split::General {
                let own = &profiles[s.role_id].catchphrases;
                assert!(
                    own.iter().any(|p| s.answer.contains(p.as_str())),
                    "general answer missing own catchphrase: {}",
                    s.answer
                );
            }
            for p in &profiles {
                if p.role_id != s.role_id {
                    for phrase in &p.catchphrases {
                        assert!(
                            !s.answer.contains(phrase.as_str()),
                            "foreign catchphrase {phrase} in answer {}",
                            s.answer
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn shared_facts_present_for_every_role() {
        let c = cfg(3, 60, 10, 5);
        let ds = generate_corpus(&c).unwrap();
        for role in 0..3 {
            for k in 0..10 {
                let fact = shared_fact_text(k);
                let found = ds.samples.iter().any(|s| {
                    s.role_id == role && s.split == Split::Specific && s.answer.contains(&fact)
                });
                assert!(found, "shared fact {k} missing for role {role}");
            }
        }
    }

    #[test]
    fn zero_roles_rejected() {
        assert!(matches!(
            generate_corpus(&cfg(0, 1, 0, 1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            generate_corpus(&cfg(1, 1, 0, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn jsonl_first_appearance_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"role\":\"A\",\"question\":\"q1\",\"answer\":\"a1\",\"split\":\"general\"}\n",
                "{\"role\":\"B\",\"question\":\"q2\",\"answer\":\"a2\",\"split\":\"specific\"}\n",
                "{\"role\":\"A\",\"question\":\"q3\",\"answer\":\"a3\",\"split\":\"general\"}\n",
            ),
        )
        .unwrap();
        let ds = load_jsonl(&path).unwrap();
        assert_eq!(ds.num_roles, 2);
        let ids: Vec<usize> = ds.samples.iter().map(|s| s.role_id).collect();
        assert_eq!(ids, vec![0, 1, 0]);
    }

    #[test]
    fn jsonl_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let ds = load_jsonl(&path).unwrap();
        assert_eq!(ds.len(), 0);
        assert_eq!(ds.num_roles, 0);
    }

    #[test]
    fn jsonl_malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"role\":\"A\",\"question\":\"q\",\"answer\":\"a\",\"split\":\"general\"}\nnot json\n",
        )
        .unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_unknown_split_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(
            &path,
            "{\"role\":\"A\",\"question\":\"q\",\"answer\":\"a\",\"split\":\"weird\"}\n",
        )
        .unwrap();
        assert!(matches!(load_jsonl(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = generate_corpus(&cfg(3, 20, 4, 9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.jsonl");
        save_jsonl(&ds, &path).unwrap();
        let back = load_jsonl(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let ds = generate_corpus(&cfg(2, 5, 0, 3)).unwrap();
        let batches = make_batches(&ds, 4, 11).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let again = make_batches(&ds, 4, 11).unwrap();
        assert_eq!(batches, again);
        assert!(matches!(make_batches(&ds, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn full_batches_mix_roles() {
        let ds = generate_corpus(&cfg(2, 50, 0, 3)).unwrap();
        let batches = make_batches(&ds, 8, 3).unwrap();
        for (i, batch) in batches.iter().enumerate() {
            if batch.len() == 8 {
                let mut roles: Vec<usize> =
                    batch.iter().map(|&j| ds.samples[j].role_id).collect();
                roles.sort_unstable();
                roles.dedup();
                assert!(roles.len() >= 2, "batch {i} has a single role");
            }
        }
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let ds = generate_corpus(&cfg(4, 40, 8, 2)).unwrap();
        let (train, test) = split_dataset(&ds, 0.25, 5);
        assert_eq!(train.len() + test.len(), ds.len());
        let (train2, test2) = split_dataset(&ds, 0.25, 5);
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        for role in 0..4 {
            assert!(test
                .samples
                .iter()
                .any(|s| s.role_id == role && s.split == Split::General));
        }
    }
}
