use super::*;
use crate::tensor::Mat;
use proptest::prelude::*;

const YANGZHONG: &str = "Yangzhong is a beautiful city. Yangzhong is also a county-level city under the administration of Zhenjiang, Jiangsu province, China.  It is the easternmost county-level division of Zhenjiang City.";
const CENXI: &str = "Cenxi is a county-level city under the administration of Wuzhou City, in the east of Guangxi, People's Republic of China.";

fn corpus(pairs: &[(&str, &str)]) -> Vec<CorpusRecord> {
    pairs
        .iter()
        .map(|(id, text)| CorpusRecord {
            doc_id: id.to_string(),
            text: text.to_string(),
        })
        .collect()
}

fn yangzhong_record() -> MultiHopRecord {
    MultiHopRecord {
        id: Some("yz".into()),
        question: "Is Yangzhong or Cenxi located in the east of Guangxi, People's Republic of China?".into(),
        hops: vec![
            HopRecord {
                sub_question: "First, In which province is Yangzhong located?".into(),
                doc_id: "yangzhong".into(),
                sub_answer: "Yangzhong is located in Jiangsu province, China.".into(),
                evidence: Some("Jiangsu province".into()),
            },
            HopRecord {
                sub_question: "Second, Is Cenxi located in the east of Guangxi, People's Republic of China?".into(),
                doc_id: "cenxi".into(),
                sub_answer: "Yes, Cenxi is located in the east of Guangxi, People's Republic of China.".into(),
                evidence: Some("east of Guangxi".into()),
            },
        ],
        final_answer: "Cenxi".into(),
        distractors: vec![],
    }
}

fn multihop_dataset(r: MultiHopRecord) -> Result<Dataset> {
    build_dataset(
        &corpus(&[("yangzhong", YANGZHONG), ("cenxi", CENXI)]),
        &InputRecords::Multi(vec![r]),
        BuildOptions::default(),
    )
}

#[test]
fn multihop_positives_match_fixture() {
    let ds = multihop_dataset(yangzhong_record()).unwrap();
    let ex = &ds.examples[0];
    assert_eq!(ex.anchors.len(), 2);
    let a = &ex.anchors[0];
    assert_eq!(
        a.positive_doc_refs,
        vec![DocRef::new("yangzhong", 1), DocRef::new("yangzhong", 2)]
    );
    assert_eq!(
        a.negative_doc_refs,
        vec![DocRef::new("yangzhong", 0), DocRef::new("cenxi", 0)]
    );
    assert!(a.trainable);
    assert_eq!(ex.anchors[1].positive_doc_refs, vec![DocRef::new("cenxi", 0)]);
}

#[test]
fn multihop_role_runs_follow_transcript_coloring() {
    let ds = multihop_dataset(yangzhong_record()).unwrap();
    let text = render_example(&ds.vocab, &ds.examples[0]).unwrap();
    let roles: Vec<&str> = text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("ANCHOR"))
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(roles, ["CTX", "GEN", "RET", "CTX", "GEN", "RET", "CTX", "GEN"]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[2], "GEN\tFirst, In which province is Yangzhong located?");
    assert!(lines[4].starts_with("CTX\t<paragraph> Yangzhong is a beautiful city."));
    assert!(lines[4].ends_with("</paragraph>"));
    assert!(lines[8].ends_with("<FINAL-ANSWER> Cenxi </FINAL-ANSWER> </s>"));
}

#[test]
fn multihop_rq_is_predicted_by_preceding_token() {
    let ds = multihop_dataset(yangzhong_record()).unwrap();
    let ex = &ds.examples[0];
    let p = ex.anchors[0].position;
    assert_eq!(ex.tokens[p - 1].lm_target, Some(crate::vocab::RQ));
    assert_eq!(ex.tokens[p].lm_target, None);
}

#[test]
fn multihop_empty_sub_answer_rejected() {
    let mut r = yangzhong_record();
    r.hops.truncate(1);
    r.hops[0].sub_answer = " ".into();
    r.hops[0].evidence = None;
    assert!(multihop_dataset(r).is_err());
}

#[test]
fn multihop_unknown_document_rejected() {
    let mut r = yangzhong_record();
    r.hops[1].doc_id = "nowhere".into();
    assert!(matches!(multihop_dataset(r), Err(Error::UnknownDocument(_))));
}

fn steve_corpus() -> Vec<CorpusRecord> {
    corpus(&[
        ("steve-jobs", "Steven Paul Jobs was an American businessman and co-founder of Apple."),
        ("apple-inc", "Apple Inc. is an American technology company."),
        ("steve-jobs-film", "Steve Jobs is a 2015 biographical drama film."),
    ])
}

fn steve_record(annotate_apple: bool) -> ElRecord {
    ElRecord {
        id: Some("sj".into()),
        sentence: "Steve Jobs founded Apple Inc.".into(),
        mentions: vec![
            MentionRecord {
                start: 0,
                end: 10,
                entity_id: Some("steve-jobs".into()),
                candidates: vec!["steve-jobs-film".into()],
            },
            MentionRecord {
                start: 19,
                end: 28,
                entity_id: annotate_apple.then(|| "apple-inc".into()),
                candidates: vec![],
            },
        ],
    }
}

fn el_dataset(records: Vec<ElRecord>) -> Dataset {
    build_dataset(&steve_corpus(), &InputRecords::El(records), BuildOptions::default()).unwrap()
}

fn output_text(ds: &Dataset, ex: &TrainingExample) -> String {
    let out: Vec<usize> = ex
        .tokens
        .iter()
        .filter(|t| t.role != crate::vocab::Role::Ctx && t.token_id != crate::vocab::EOS)
        .map(|t| t.token_id)
        .collect();
    ds.vocab.decode(&out).unwrap()
}

#[test]
fn el_output_string_matches_workflow() {
    let ds = el_dataset(vec![steve_record(true)]);
    let ex = &ds.examples[0];
    assert_eq!(
        output_text(&ds, ex),
        "<LOC>Steve Jobs</LOC> [RQ] <CON> founded <LOC>Apple Inc</LOC> [RQ] <CON> ."
    );
    assert!(ex.anchors.iter().all(|a| a.trainable));
    assert_eq!(ex.anchors[0].negative_doc_refs, vec![DocRef::new("steve-jobs-film", 0)]);
    for a in &ex.anchors {
        assert_eq!(ex.tokens[a.position + 1].token_id, crate::vocab::CON);
        assert_eq!(ex.tokens[a.position + 1].role, crate::vocab::Role::Gen);
    }
}

#[test]
fn el_partial_annotation_freezes_second_anchor_only() {
    let full = el_dataset(vec![steve_record(true)]);
    let partial = el_dataset(vec![steve_record(false)]);
    let (a, b) = (&full.examples[0], &partial.examples[0]);
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.anchors[0], b.anchors[0]);
    assert!(!b.anchors[1].trainable);
    assert_eq!(a.anchors[1].position, b.anchors[1].position);
}

#[test]
fn el_zero_mentions_is_plain_copy() {
    let ds = el_dataset(vec![ElRecord {
        id: None,
        sentence: "Steve Jobs founded Apple Inc.".into(),
        mentions: vec![],
    }]);
    let ex = &ds.examples[0];
    assert!(ex.anchors.is_empty());
    assert_eq!(output_text(&ds, ex), "Steve Jobs founded Apple Inc.");
}

#[test]
fn el_bad_spans_rejected() {
    let mut r = steve_record(true);
    r.mentions[1].start = 5;
    assert!(matches!(
        build_dataset(&steve_corpus(), &InputRecords::El(vec![r]), BuildOptions::default()),
        Err(Error::OverlappingSpans(..))
    ));
    let mut r = steve_record(true);
    r.mentions[1].end = 99;
    assert!(matches!(
        build_dataset(&steve_corpus(), &InputRecords::El(vec![r]), BuildOptions::default()),
        Err(Error::SpanOutOfBounds(..))
    ));
}

fn ceo_corpus() -> Vec<CorpusRecord> {
    let mut c = corpus(&[("tim-cook", "Tim Cook is the CEO of Apple.")]);
    for (i, t) in ["Paris is in France.", "Rust is a language.", "Cats like fish.", "Rain falls in spring.", "Bread needs flour."]
        .iter()
        .enumerate()
    {
        c.push(CorpusRecord {
            doc_id: format!("filler-{i}"),
            text: t.to_string(),
        });
    }
    c
}

#[test]
fn rag_single_retrieve_and_plain_branches() {
    let recs = vec![
        RagSingleRecord {
            id: Some("ceo".into()),
            instruction: "Who is the CEO?".into(),
            retrieve: true,
            doc_id: Some("tim-cook".into()),
            answer: "Tim Cook".into(),
            trainable: true,
        },
        RagSingleRecord {
            id: Some("sum".into()),
            instruction: "2+2?".into(),
            retrieve: false,
            doc_id: None,
            answer: "4".into(),
            trainable: true,
        },
    ];
    let ds = build_dataset(&ceo_corpus(), &InputRecords::Single(recs), BuildOptions::default()).unwrap();
    let ex = &ds.examples[0];
    assert_eq!(ex.anchors.len(), 1);
    let a = &ex.anchors[0];
    assert_eq!(a.positive_doc_refs, vec![DocRef::new("tim-cook", 0)]);
    assert!(!a.negative_doc_refs.is_empty());
    assert!(!a.negative_doc_refs.contains(&DocRef::new("tim-cook", 0)));
    let text = render_example(&ds.vocab, ex).unwrap();
    assert!(text.contains("CTX\t<paragraph> Tim Cook is the CEO of Apple. </paragraph>\n"));
    assert!(text.contains("GEN\tTim Cook </s>\n"));
    assert!(ds.examples[1].anchors.is_empty());
}

#[test]
fn rag_single_negatives_come_from_the_rank_window() {
    let rec = RagSingleRecord {
        id: Some("ceo".into()),
        instruction: "Who is the CEO?".into(),
        retrieve: true,
        doc_id: Some("tim-cook".into()),
        answer: "Tim Cook".into(),
        trainable: true,
    };
    let ds = build_dataset(&ceo_corpus(), &InputRecords::Single(vec![rec]), BuildOptions::default()).unwrap();
    let refs = ds.all_refs();
    let sc = ds.vocab.special_count();
    let mut rows = Vec::new();
    for d in &ds.corpus {
        rows.extend(lexical_embedding(&d.tokens[..d.rd_positions[0]], sc, LEXICAL_DIM));
    }
    let m = Mat::from_vec(refs.len(), LEXICAL_DIM, rows);
    let q = lexical_embedding(&ds.vocab.encode("Who is the CEO?").unwrap(), sc, LEXICAL_DIM);
    let order = rank_by_cosine(&m, &q);
    let (lo, hi) = default_window(refs.len());
    let window: Vec<&DocRef> = order[lo - 1..hi].iter().map(|&i| &refs[i]).collect();
    for n in &ds.examples[0].anchors[0].negative_doc_refs {
        assert!(window.contains(&n));
    }
}

#[test]
fn rag_single_unknown_doc_rejected() {
    let rec = RagSingleRecord {
        id: None,
        instruction: "Who?".into(),
        retrieve: true,
        doc_id: Some("ghost".into()),
        answer: "x".into(),
        trainable: true,
    };
    assert!(matches!(
        build_dataset(&ceo_corpus(), &InputRecords::Single(vec![rec]), BuildOptions::default()),
        Err(Error::UnknownDocument(_))
    ));
}

#[test]
fn dataset_json_round_trip() {
    let ds = el_dataset(vec![steve_record(true), steve_record(false)]);
    let back = Dataset::from_json(&ds.to_json().unwrap()).unwrap();
    assert_eq!(ds, back);
}

#[test]
fn dataset_version_checked() {
    let ds = el_dataset(vec![steve_record(true)]);
    let json = ds.to_json().unwrap().replace("\"version\":1", "\"version\":7");
    assert!(matches!(
        Dataset::from_json(&json),
        Err(Error::VersionMismatch { found: 7, .. })
    ));
}

#[test]
fn jsonl_errors_name_the_line() {
    let text = "{\"doc_id\":\"a\",\"text\":\"x\"}\n\n{\"doc_id\":1}\n";
    match parse_jsonl::<CorpusRecord>(text) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn validator_flags_broken_examples() {
    let ds = el_dataset(vec![steve_record(true)]);
    let mut bad = ds.clone();
    bad.examples[0].anchors.pop();
    assert!(!bad.validate().is_empty());

    let mut bad = ds.clone();
    bad.examples[0].anchors[0].positive_doc_refs[0] = DocRef::new("steve-jobs", 4);
    assert!(bad.validate().iter().any(|v| v.contains("unresolved")));

    let mut bad = ds.clone();
    let p = bad.examples[0].anchors[0].position;
    bad.examples[0].tokens[p + 1].role = crate::vocab::Role::Ctx;
    assert!(!bad.validate().is_empty());

    let mut bad = ds;
    bad.examples[0].anchors[0].negative_doc_refs.clear();
    assert!(bad.validate().iter().any(|v| v.contains("trainable")));
}

#[test]
fn duplicate_documents_rejected() {
    let c = corpus(&[("a", "One."), ("a", "Two.")]);
    let recs = InputRecords::Single(vec![RagSingleRecord {
        id: None,
        instruction: "q".into(),
        retrieve: false,
        doc_id: None,
        answer: "a".into(),
        trainable: true,
    }]);
    assert!(matches!(
        build_dataset(&c, &recs, BuildOptions::default()),
        Err(Error::DuplicateDocument(_))
    ));
}

#[test]
fn reflection_literals_tokenize() {
    let ds = el_dataset(vec![steve_record(true)]);
    let ids = ds.vocab.encode("[Retrieval] [RQ] [Relevant] [Utility:5]").unwrap();
    assert_eq!(ids.len(), 4);
    assert!(ids.iter().all(|&i| ds.vocab.is_special(i)));
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["alpha", "beta", "gamma", "delta", "eps", "zeta"]).prop_map(String::from)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn el_render_parse_round_trip(
        words in prop::collection::vec(word(), 1..8),
        marks in prop::collection::vec(any::<Option<bool>>(), 8),
    ) {
        let sentence = words.join(" ");
        let mut mentions = Vec::new();
        let mut at = 0;
        for (w, m) in words.iter().zip(&marks) {
            if let Some(annotated) = m {
                mentions.push(MentionRecord {
                    start: at,
                    end: at + w.len(),
                    entity_id: annotated.then(|| w.clone()),
                    candidates: vec![],
                });
            }
            at += w.len() + 1;
        }
        let docs: Vec<CorpusRecord> = ["alpha", "beta", "gamma", "delta", "eps", "zeta"]
            .iter()
            .map(|w| CorpusRecord { doc_id: w.to_string(), text: format!("{w} is a word.") })
            .collect();
        let ds = build_dataset(&docs, &InputRecords::El(vec![ElRecord {
            id: Some("p".into()), sentence, mentions,
        }]), BuildOptions::default()).unwrap();
        let ex = &ds.examples[0];
        let text = render_example(&ds.vocab, ex).unwrap();
        prop_assert_eq!(&parse_example(&ds.vocab, &text).unwrap(), ex);
    }
}

#[test]
fn multihop_and_single_render_parse_round_trip() {
    let ds = multihop_dataset(yangzhong_record()).unwrap();
    let ex = &ds.examples[0];
    assert_eq!(&parse_example(&ds.vocab, &render_example(&ds.vocab, ex).unwrap()).unwrap(), ex);
}
