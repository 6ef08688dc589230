use std::fs;
use std::sync::Arc;

use async_trait::async_trait;
use pearl_core::corpus::{
    load_corpus, load_corpus_with, reference_for_summarization, split_completion, write_corpus, CorpusError, Label,
    LoadOptions, Sample, SplitKind, TaskSpec,
};
use pearl_core::modelgw::{Backend, BackendKind, Gateway, GatewayError, Generation};
use pearl_core::simlab::{canonical_summary, plant_corpus, PlantOptions};
use pearl_core::TaskKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic_line(i: usize, rng: &mut ChaCha8Rng) -> String {
    let words: Vec<String> = (0..rng.random_range(1..40)).map(|j| format!("w{}x{j}", rng.random_range(0..500))).collect();
    let label = match i % 4 {
        0 => r#","label":"positive""#,
        1 => r#","label":"negative""#,
        2 => r#","label":"unknown""#,
        _ => "",
    };
    format!(
        r#"{{"id":"doc-{i:04}","source":"src-{}","text":{}{label}}}"#,
        i % 3,
        serde_json::to_string(&words.join(" ")).unwrap()
    )
}

#[test]
fn thousand_line_corpus_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut body: String = (0..1000).map(|i| synthetic_line(i, &mut rng) + "\n").collect();
    // Texts with quotes, unicode and escapes.
    body = body.replacen("w", "\\\"é\\u00e9\\n", 3);
    let input = dir.path().join("in.jsonl");
    fs::write(&input, &body).unwrap();

    let samples = load_corpus(&input).unwrap();
    assert_eq!(samples.len(), 1000);
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.id, format!("doc-{i:04}"));
    }
    assert_eq!(samples[2].label, Some(Label::Unknown));
    assert_eq!(samples[3].label, None);

    let output = dir.path().join("out.jsonl");
    write_corpus(&output, &samples).unwrap();
    let again = load_corpus(&output).unwrap();
    assert_eq!(again, samples);
    write_corpus(dir.path().join("out2.jsonl"), &again).unwrap();
    assert_eq!(fs::read(&output).unwrap(), fs::read(dir.path().join("out2.jsonl")).unwrap());
}

#[test]
fn canonical_input_round_trips_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let body = concat!(
        r#"{"id":"a","source":"x","text":"one two","label":"positive"}"#,
        "\n",
        r#"{"id":"b","source":"y","text":"three \"four\""}"#,
        "\n"
    );
    let p = dir.path().join("c.jsonl");
    fs::write(&p, body).unwrap();
    let q = dir.path().join("d.jsonl");
    write_corpus(&q, &load_corpus(&p).unwrap()).unwrap();
    assert_eq!(fs::read_to_string(q).unwrap(), body);
}

#[test]
fn load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    fs::write(&p, "{\"id\":\"a\",\"source\":\"s\",\"text\":\"t\"}\n{\"id\":\"a\",\"source\":\"s\",\"text\":\"u\"}\n").unwrap();
    assert!(matches!(load_corpus(&p), Err(CorpusError::DuplicateId(id)) if id == "a"));

    fs::write(&p, "{\"id\":\"a\",\"source\":\"s\",\"text\":\"t\"}\n\n{\"id\":\"b\",\"text\":\"u\"}\n").unwrap();
    assert!(matches!(load_corpus(&p), Err(CorpusError::SchemaViolation { line: 3, .. })));

    fs::write(&p, "{\"id\":\"a\",\"source\":\"s\",\"text\":\"t\",\"label\":\"maybe\"}\n").unwrap();
    assert!(matches!(load_corpus(&p), Err(CorpusError::SchemaViolation { line: 1, .. })));

    fs::write(&p, "{\"id\":\"a\",\"source\":\"s\",\"text\":\"short text\"}\n").unwrap();
    assert_eq!(load_corpus(&p).unwrap().len(), 1);
    let strict = LoadOptions { strict: true, min_tokens: 3 };
    assert!(matches!(load_corpus_with(&p, strict), Err(CorpusError::SchemaViolation { .. })));

    assert!(matches!(load_corpus(dir.path().join("missing.jsonl")), Err(CorpusError::Io { .. })));
}

#[test]
fn split_lands_near_the_requested_character_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    for n in 0..100 {
        let tokens = rng.random_range(300..=400);
        let text = (0..tokens)
            .map(|_| (0..rng.random_range(1..=12)).map(|_| rng.random_range(b'a'..=b'z') as char).collect::<String>())
            .collect::<Vec<_>>()
            .join(if n % 2 == 0 { " " } else { "\n" });
        for fraction in [0.3, 0.5, 0.7] {
            let split = split_completion(&Sample::new(format!("t{n}"), "s", text.clone()), fraction).unwrap();
            let ratio = split.input_x.chars().count() as f64 / text.chars().count() as f64;
            assert!((ratio - fraction).abs() <= 0.05, "text {n}: ratio {ratio} for fraction {fraction}");
            assert!(!split.input_x.ends_with(char::is_whitespace));
            assert!(!split.reference_y.starts_with(char::is_whitespace));
            assert_eq!(split.split_kind, SplitKind::PrefixSuffix);
        }
    }
}

#[test]
fn split_examples() {
    let s = split_completion(&Sample::new("a", "s", "A B C D"), 0.5).unwrap();
    assert_eq!((s.input_x.as_str(), s.reference_y.as_str()), ("A B", "C D"));
    assert!(matches!(split_completion(&Sample::new("b", "s", "single"), 0.5), Err(CorpusError::TooShort(_))));
    assert!(matches!(split_completion(&Sample::new("c", "s", "a b"), 1.0), Err(CorpusError::BadFraction(_))));
}

#[tokio::test]
async fn summarization_reference_comes_from_the_model() {
    let opts = PlantOptions {
        task: TaskKind::Summarization,
        ..PlantOptions::default()
    };
    let (samples, model) = plant_corpus(20, 5, 9, &opts).unwrap();
    let gw = Gateway::simulator(model.clone());
    let task = TaskSpec::summarization();
    let memorized = samples.iter().find(|s| s.label == Some(Label::Positive)).unwrap();
    let split = reference_for_summarization(memorized, &gw, &task, 77).await.unwrap();
    assert_eq!(split.split_kind, SplitKind::ModelGenerated);
    assert_eq!(split.input_x, memorized.text);
    assert_eq!(split.reference_y, canonical_summary(&memorized.text));
    assert_eq!(gw.calls(), 1);

    let other = samples.iter().find(|s| s.label == Some(Label::Negative)).unwrap();
    let a = reference_for_summarization(other, &gw, &task, 5).await.unwrap();
    let b = reference_for_summarization(other, &gw, &task, 5).await.unwrap();
    assert_eq!(a, b);
}

struct Silent;

#[async_trait]
impl Backend for Silent {
    fn kind(&self) -> BackendKind {
        BackendKind::Simulator
    }

    async fn complete_batch(&self, _: &str, seeds: &[u64], _: f64, _: usize) -> Result<Vec<Generation>, GatewayError> {
        Ok(seeds.iter().map(|_| Generation { text: "  ".into(), latency_ms: 0 }).collect())
    }
}

#[tokio::test]
async fn empty_model_output_is_rejected_as_reference() {
    let gw = Gateway::new(Arc::new(Silent), 1.0);
    let err = reference_for_summarization(&Sample::new("z", "s", "some text"), &gw, &TaskSpec::summarization(), 0)
        .await
        .unwrap_err();
    assert!(matches!(err, CorpusError::EmptyReference(id) if id == "z"));
}
