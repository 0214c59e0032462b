use std::path::PathBuf;

use mtldr::manifest::{load_manifest, parse_manifest, to_jsonl, Metadata, SampleManifest, Split};
use proptest::prelude::*;

const FIXTURE: &str = r#"{"id":"talk-001","text_path":"text/talk-001.txt","audio_path":"audio/talk-001.wav","video_feat_path":"video/talk-001.tnsr","target":"we prune attention heads","split":"train","metadata":{"title":"Pruning heads","authors":["A. One","B. Two"],"keywords":["pruning"],"venue":"Conf","year":2020}}
{"id":"talk-002","text_path":"text/talk-002.txt","video_feat_path":"video/talk-002.tnsr","target":"a faster parser","split":"valid","metadata":{"title":"","authors":[],"keywords":[],"venue":""}}
{"id":"talk-003","text_path":"text/talk-003.txt","audio_path":"audio/talk-003.wav","target":"speech without labels","split":"test","metadata":{"title":"Self-training","authors":["C. Three"],"keywords":[],"venue":"Workshop","year":2019}}
"#;

#[test]
fn fixture_round_trips_byte_identically() {
    let samples = parse_manifest(FIXTURE).unwrap();
    assert_eq!(samples.len(), 3);
    assert_eq!(samples[1].audio_path, None);
    assert_eq!(samples[2].video_feat_path, None);
    assert_eq!(samples[0].metadata.year, Some(2020));
    assert_eq!(to_jsonl(&samples), FIXTURE);
}

#[test]
fn duplicate_id_is_named() {
    let first = FIXTURE.lines().next().unwrap();
    let text = format!("{first}\n{first}\n");
    let err = parse_manifest(&text).unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("\"talk-001\""), "{err}");
}

#[test]
fn empty_manifest_warns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, "\n").unwrap();
    let m = load_manifest(&path).unwrap();
    assert!(m.samples.is_empty());
    assert_eq!(m.warnings.len(), 1);
}

#[test]
fn relative_paths_resolve_against_manifest_dir() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, FIXTURE).unwrap();
    let m = load_manifest(&path).unwrap();
    assert_eq!(m.resolve(&m.samples[0].text_path), dir.path().join("text/talk-001.txt"));
    assert_eq!(m.split_sizes().values().sum::<usize>(), 3);
}

fn word() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ._\"\\\\é-]{0,12}"
}

fn sample() -> impl Strategy<Value = SampleManifest> {
    (
        "[a-z0-9-]{1,10}",
        proptest::option::of(word()),
        proptest::option::of(word()),
        word(),
        prop_oneof![Just(Split::Train), Just(Split::Valid), Just(Split::Test)],
        (word(), proptest::collection::vec(word(), 0..3), proptest::option::of(1900u16..2100)),
    )
        .prop_map(|(id, audio, video, target, split, (title, authors, year))| SampleManifest {
            text_path: PathBuf::from(format!("text/{id}.txt")),
            id,
            audio_path: audio.map(PathBuf::from),
            video_feat_path: video.map(PathBuf::from),
            target,
            split,
            metadata: Metadata { title, authors, keywords: vec![], venue: String::new(), year },
        })
}

proptest! {
    #[test]
    fn serialization_is_a_fixed_point(samples in proptest::collection::vec(sample(), 0..6)) {
        let mut seen = std::collections::HashSet::new();
        let samples: Vec<_> = samples.into_iter().filter(|s| seen.insert(s.id.clone())).collect();
        let text = to_jsonl(&samples);
        let parsed = parse_manifest(&text).unwrap();
        prop_assert_eq!(&parsed, &samples);
        prop_assert_eq!(to_jsonl(&parsed), text);
    }
}
