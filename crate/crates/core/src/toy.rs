//! Small synthetic knowledge bases used by the overfit tests, the shipped CLI
//! fixtures and the benchmarks.

use crate::error::Result;
use crate::reconstruct::{
    build_dataset, BuildOptions, CorpusRecord, Dataset, ElRecord, HopRecord, InputRecords, MentionRecord,
    MultiHopRecord, RagSingleRecord,
};

fn doc(id: &str, text: &str) -> CorpusRecord {
    CorpusRecord {
        doc_id: id.into(),
        text: text.into(),
    }
}

pub const PEOPLE: [(&str, &str); 8] = [
    ("Alice", "France"),
    ("Bruno", "France"),
    ("Chen", "Japan"),
    ("Daiki", "Japan"),
    ("Elena", "Brazil"),
    ("Felipe", "Brazil"),
    ("Grace", "Kenya"),
    ("Hamisi", "Kenya"),
];

/// Question pairs as indices into [`PEOPLE`]: eight same-country, eight not.
const PAIRS: [(usize, usize); 16] = [
    (0, 1),
    (1, 0),
    (2, 3),
    (3, 2),
    (4, 5),
    (5, 4),
    (6, 7),
    (7, 6),
    (0, 2),
    (1, 4),
    (3, 6),
    (5, 7),
    (2, 5),
    (4, 0),
    (6, 1),
    (7, 3),
];

fn person_id(name: &str) -> String {
    name.to_lowercase()
}

/// Two-hop "same country" questions over eight person documents. Every
/// person not named in a question is listed as a distractor.
pub fn two_hop_kb() -> (Vec<CorpusRecord>, Vec<MultiHopRecord>) {
    let corpus = PEOPLE
        .iter()
        .map(|(n, c)| doc(&person_id(n), &format!("{n} was born and raised in {c} .")))
        .collect();
    let hop = |i: usize, ordinal: &str| {
        let (n, c) = PEOPLE[i];
        HopRecord {
            sub_question: format!("{ordinal} , where is {n} from ?"),
            doc_id: person_id(n),
            sub_answer: format!("{n} is from {c} ."),
            evidence: Some(format!("{n} was born")),
        }
    };
    let records = PAIRS
        .iter()
        .enumerate()
        .map(|(q, &(a, b))| MultiHopRecord {
            id: Some(format!("q{q:02}")),
            question: format!("are {} and {} from the same country ?", PEOPLE[a].0, PEOPLE[b].0),
            hops: vec![hop(a, "First"), hop(b, "Second")],
            final_answer: if PEOPLE[a].1 == PEOPLE[b].1 { "yes" } else { "no" }.into(),
            distractors: (0..PEOPLE.len())
                .filter(|&i| i != a && i != b)
                .map(|i| person_id(PEOPLE[i].0))
                .collect(),
        })
        .collect();
    (corpus, records)
}

pub fn two_hop_dataset(seed: u64) -> Result<Dataset> {
    let (corpus, records) = two_hop_kb();
    build_dataset(
        &corpus,
        &InputRecords::Multi(records),
        BuildOptions {
            seed,
            ..BuildOptions::default()
        },
    )
}

fn mention(sentence: &str, surface: &str, nth: usize, entity: &str, candidates: &[&str]) -> MentionRecord {
    let start = sentence.match_indices(surface).nth(nth).expect("surface in sentence").0;
    MentionRecord {
        start,
        end: start + surface.len(),
        entity_id: Some(entity.into()),
        candidates: candidates.iter().map(|c| c.to_string()).collect(),
    }
}

/// Six entities, including a film that shares its title with a person.
pub fn el_kb() -> (Vec<CorpusRecord>, Vec<ElRecord>) {
    let corpus = vec![
        doc("steve-jobs-person", "Steven Paul Jobs was an American businessman and co-founder of Apple ."),
        doc("steve-jobs-film", "Steve Jobs is a 2015 biographical drama film ."),
        doc("apple-inc-company", "Apple Inc is an American technology company ."),
        doc("apple-fruit", "An apple is an edible fruit produced by an apple tree ."),
        doc("tim-cook-person", "Tim Cook is the chief executive of Apple ."),
        doc("pixar-company", "Pixar is an American animation studio ."),
    ];
    let person = ["steve-jobs-film"];
    let film = ["steve-jobs-person"];
    let rec = |id: &str, sentence: &str, mentions: Vec<MentionRecord>| ElRecord {
        id: Some(id.into()),
        sentence: sentence.into(),
        mentions,
    };
    let s1 = "Steve Jobs founded Apple Inc .";
    let s2 = "We watched Steve Jobs at the cinema .";
    let s3 = "Tim Cook leads Apple Inc today .";
    let s4 = "Steve Jobs also ran Pixar .";
    let s5 = "She ate an apple for lunch .";
    let s6 = "The weather was nice .";
    let records = vec![
        rec(
            "el-1",
            s1,
            vec![
                mention(s1, "Steve Jobs", 0, "steve-jobs-person", &person),
                mention(s1, "Apple Inc", 0, "apple-inc-company", &["apple-fruit"]),
            ],
        ),
        rec("el-2", s2, vec![mention(s2, "Steve Jobs", 0, "steve-jobs-film", &film)]),
        rec(
            "el-3",
            s3,
            vec![
                mention(s3, "Tim Cook", 0, "tim-cook-person", &[]),
                mention(s3, "Apple Inc", 0, "apple-inc-company", &["apple-fruit"]),
            ],
        ),
        rec(
            "el-4",
            s4,
            vec![
                mention(s4, "Steve Jobs", 0, "steve-jobs-person", &person),
                mention(s4, "Pixar", 0, "pixar-company", &[]),
            ],
        ),
        rec("el-5", s5, vec![mention(s5, "apple", 0, "apple-fruit", &["apple-inc-company"])]),
        rec("el-6", s6, vec![]),
    ];
    (corpus, records)
}

pub fn el_dataset(seed: u64) -> Result<Dataset> {
    let (corpus, records) = el_kb();
    build_dataset(
        &corpus,
        &InputRecords::El(records),
        BuildOptions {
            seed,
            ..BuildOptions::default()
        },
    )
}

const RESIDENTS: [(&str, &str, &str); 8] = [
    ("Ana", "Lisbon", "bread"),
    ("Ben", "Oslo", "fish"),
    ("Cai", "Lima", "rice"),
    ("Dev", "Cairo", "dates"),
    ("Eva", "Quito", "corn"),
    ("Finn", "Dublin", "stew"),
    ("Gia", "Hanoi", "soup"),
    ("Hugo", "Bern", "cheese"),
];

/// Eight single-hop lookups, one per document; every other document is a
/// negative candidate.
pub fn retrieval_kb() -> (Vec<CorpusRecord>, Vec<RagSingleRecord>) {
    let corpus = RESIDENTS
        .iter()
        .map(|(n, city, food)| doc(&n.to_lowercase(), &format!("{n} lives in {city} and likes {food} .")))
        .collect();
    let records = RESIDENTS
        .iter()
        .map(|(n, city, _)| RagSingleRecord {
            id: Some(format!("where-{}", n.to_lowercase())),
            instruction: format!("where does {n} live ?"),
            retrieve: true,
            doc_id: Some(n.to_lowercase()),
            answer: (*city).into(),
            trainable: true,
        })
        .collect();
    (corpus, records)
}

pub fn retrieval_dataset(seed: u64) -> Result<Dataset> {
    let (corpus, records) = retrieval_kb();
    let n = corpus.len();
    build_dataset(
        &corpus,
        &InputRecords::Single(records),
        BuildOptions {
            seed,
            granularity: None,
            negatives_per_anchor: n - 1,
            window: Some((1, n)),
        },
    )
}

/// Copy task: the answer repeats the letters before the arrow.
pub fn copy_dataset() -> Result<Dataset> {
    let prompts = ["a b c", "b c a", "c a b", "a c b", "d a c", "b d", "c d a b", "d c b a"];
    let corpus = vec![doc("unused", "a b c d .")];
    let records = prompts
        .iter()
        .map(|p| RagSingleRecord {
            id: Some(format!("copy-{}", p.replace(' ', ""))),
            instruction: format!("{p} →"),
            retrieve: false,
            doc_id: None,
            answer: (*p).into(),
            trainable: true,
        })
        .collect();
    build_dataset(&corpus, &InputRecords::Single(records), BuildOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_hop_shape() {
        let ds = two_hop_dataset(1).unwrap();
        assert_eq!(ds.corpus.len(), 8);
        assert_eq!(ds.examples.len(), 16);
        for ex in &ds.examples {
            assert_eq!(ex.anchors.len(), 2);
            for a in &ex.anchors {
                assert_eq!(a.positive_doc_refs.len(), 1);
                assert_eq!(a.negative_doc_refs.len(), 7);
            }
        }
        assert!(ds.validate().is_empty());
    }

    #[test]
    fn el_shape() {
        let ds = el_dataset(1).unwrap();
        assert_eq!(ds.corpus.len(), 6);
        let anchors: Vec<usize> = ds.examples.iter().map(|e| e.anchors.len()).collect();
        assert_eq!(anchors, [2, 1, 2, 2, 1, 0]);
        assert!(ds.examples.iter().flat_map(|e| &e.anchors).all(|a| a.trainable));
    }

    #[test]
    fn retrieval_and_copy_shapes() {
        let ds = retrieval_dataset(3).unwrap();
        assert!(ds.examples.iter().all(|e| e.anchors[0].negative_doc_refs.len() == 7));
        let c = copy_dataset().unwrap();
        assert!(c.examples.iter().all(|e| e.anchors.is_empty()));
    }
}
