use std::fs;
use std::path::Path;

use mtag::audio::{read_wav, write_wav16};
use mtag::cache::{decode_mel, encode_mel, preprocess, read_mel, truncate_mel, CacheError, MelCache};
use mtag::checkpoint::{CheckpointError, ModelCheckpoint, Provenance};
use mtag::fixtures::{published_single_domain, published_transfer};
use mtag::manifest::{load_manifest, write_manifest, ManifestError};
use mtag::registry::{append_record, read_registry};
use mtag::report::{read_aggregate_csv, write_aggregate_csv};
use mtag_core::analysis::{aggregate, collect_matrices};
use mtag_core::datasets::{DatasetManifest, ManifestEntry, Split};
use mtag_core::dsp::{AudioClip, DspConfig, MelSpectrogram};
use mtag_core::gradcheck::tiny_config;
use mtag_core::models::{Arch, Model};
use mtag_core::transfer::{FineTunePolicy, RegistryRecord};

fn checkpoint(arch: Arch) -> ModelCheckpoint {
    let mut model = Model::<f32>::build(&tiny_config(arch, 3), 5).unwrap();
    // Make buffers distinguishable from their initial values.
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        for (j, v) in model.params.get_mut(id).tensor.data_mut().iter_mut().enumerate() {
            *v += (k * 7 + j) as f32 * 1e-3;
        }
    }
    let tags = vec!["a".to_string(), "b".into(), "c".into()];
    ModelCheckpoint::new(
        model,
        tags,
        Provenance {
            source_dataset_id: "toy".into(),
            epochs_trained: 4,
            content_hash: String::new(),
            experiment_id: Some("e1".into()),
            parent: None,
        },
    )
}

fn bits(m: &Model<f32>) -> Vec<(String, Vec<u32>)> {
    m.params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn field_of(e: CheckpointError) -> String {
    match e {
        CheckpointError::Field { field, .. } => field,
        other => panic!("expected a field error, got {other}"),
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for arch in Arch::ALL {
        let ckpt = checkpoint(arch);
        let path = dir.path().join(format!("{arch}.ckpt"));
        ckpt.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(bits(&back.model), bits(&ckpt.model), "{arch}");
        assert_eq!(back.model.config, ckpt.model.config);
        assert_eq!(back.tags, ckpt.tags);
        assert_eq!(back.provenance, ckpt.provenance);
        assert_eq!(fs::read(&path).unwrap(), back.to_bytes());
    }
}

#[test]
fn truncated_checkpoints_are_rejected() {
    let bytes = checkpoint(Arch::Musicnn).to_bytes();
    for cut in [0, 3, 11, 40, bytes.len() / 2, bytes.len() - 1] {
        let err = ModelCheckpoint::from_bytes(&bytes[..cut]).unwrap_err();
        let f = field_of(err);
        assert!(
            ["magic", "header_length", "data"].contains(&f.as_str()),
            "cut {cut}: {f}"
        );
    }
}

#[test]
fn corrupt_checkpoint_fields_are_named() {
    let good = checkpoint(Arch::VggIsh).to_bytes();
    let mut b = good.clone();
    b[0] = b'X';
    assert_eq!(field_of(ModelCheckpoint::from_bytes(&b).unwrap_err()), "magic");
    let mut b = good.clone();
    b[4] = 9;
    assert_eq!(field_of(ModelCheckpoint::from_bytes(&b).unwrap_err()), "version");
    let mut b = good.clone();
    let last = b.len() - 1;
    b[last] ^= 1;
    assert_eq!(
        field_of(ModelCheckpoint::from_bytes(&b).unwrap_err()),
        "provenance.content_hash"
    );

    // Rewrite the header with one wrong shape.
    let hlen = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
    let mut header: serde_json::Value = serde_json::from_slice(&good[12..12 + hlen]).unwrap();
    header["tensors"][1]["shape"] = serde_json::json!([99]);
    let json = serde_json::to_vec(&header).unwrap();
    let mut b = good[..8].to_vec();
    b.extend((json.len() as u32).to_le_bytes());
    b.extend(&json);
    b.extend(&good[12 + hlen..]);
    assert_eq!(
        field_of(ModelCheckpoint::from_bytes(&b).unwrap_err()),
        "tensors[1].shape"
    );

    header["tags"] = serde_json::json!(["only"]);
    let json = serde_json::to_vec(&header).unwrap();
    let mut b = good[..8].to_vec();
    b.extend((json.len() as u32).to_le_bytes());
    b.extend(&json);
    b.extend(&good[12 + hlen..]);
    assert_eq!(field_of(ModelCheckpoint::from_bytes(&b).unwrap_err()), "tags");
}

#[test]
fn mel_file_round_trip_and_errors() {
    let mel = MelSpectrogram {
        n_mels: 3,
        n_frames: 4,
        values: (0..12).map(|i| i as f32 * 0.5 - 2.0).collect(),
        frame_rate: 62.5,
    };
    let bytes = encode_mel(&mel);
    assert_eq!(&bytes[..4], b"CCMS");
    assert_eq!(bytes.len(), 16 + 48);
    let p = Path::new("x.mel");
    assert_eq!(decode_mel(&bytes, 62.5, p).unwrap(), mel);
    let field = |r: Result<MelSpectrogram, CacheError>| match r {
        Err(CacheError::Format { field, .. }) => field,
        other => panic!("{other:?}"),
    };
    assert_eq!(field(decode_mel(&bytes[..20], 62.5, p)), "values");
    let mut b = bytes.clone();
    b[1] = 0;
    assert_eq!(field(decode_mel(&b, 62.5, p)), "magic");
    let mut b = bytes;
    b[4] = 2;
    assert_eq!(field(decode_mel(&b, 62.5, p)), "version");
}

#[test]
fn truncation_keeps_whole_frames() {
    let dsp = DspConfig::default();
    let mut mel = MelSpectrogram {
        n_mels: 2,
        n_frames: 100,
        values: (0..200).map(|i| i as f32).collect(),
        frame_rate: dsp.frame_rate(),
    };
    truncate_mel(&mut mel, 1.0, &dsp);
    assert_eq!(mel.n_frames, dsp.n_frames(16_000));
    assert_eq!(mel.at(1, 0), 100.0);
    assert_eq!(mel.at(1, mel.n_frames - 1), (100 + mel.n_frames - 1) as f32);
}

fn tone(seconds: f64, sr: u32) -> AudioClip {
    let n = (seconds * sr as f64) as usize;
    AudioClip::new((0..n).map(|i| 0.5 * (i as f32 * 0.05).sin()).collect(), sr).unwrap()
}

#[test]
fn wav_formats_decode_to_mono() {
    let dir = tempfile::tempdir().unwrap();
    let clip = tone(0.1, 8000);
    let p16 = dir.path().join("a.wav");
    write_wav16(&p16, &clip).unwrap();
    let back = read_wav(&p16).unwrap();
    assert_eq!(back.sample_rate, 8000);
    for (a, b) in back.samples.iter().zip(&clip.samples) {
        assert!((a - b).abs() <= 1.0 / 32767.0);
    }

    // Stereo 32-bit with opposite-sign channels averages to ±d/2.
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 22_050,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Int,
    };
    let p32 = dir.path().join("b.wav");
    let mut w = hound::WavWriter::create(&p32, spec).unwrap();
    for i in 0..100i32 {
        w.write_sample(i * 1_000_000).unwrap();
        w.write_sample(i * 1_000_000 + 2_000_000).unwrap();
    }
    w.finalize().unwrap();
    let st = read_wav(&p32).unwrap();
    assert_eq!(st.samples.len(), 100);
    for (i, &s) in st.samples.iter().enumerate() {
        let expected = (i as f64 * 1e6 + 1e6) / 2147483648.0;
        assert!((s as f64 - expected).abs() < 1e-6);
    }

    let bad = dir.path().join("c.wav");
    fs::write(&bad, b"RIFF....not a wav").unwrap();
    assert!(read_wav(&bad).is_err());
}

fn entry(id: &str, tags: &[&str], split: Option<Split>) -> ManifestEntry {
    ManifestEntry {
        recording_id: id.into(),
        audio_path: format!("audio/{id}.wav"),
        tags: tags.iter().map(|t| t.to_string()).collect(),
        split,
        duration_sec: 0.5,
    }
}

#[test]
fn preprocess_counts_reuse_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("audio")).unwrap();
    let mut entries = Vec::new();
    for i in 0..5 {
        let id = format!("r{i}");
        write_wav16(&dir.path().join(format!("audio/{id}.wav")), &tone(0.5, 16_000)).unwrap();
        entries.push(entry(&id, &["x"], None));
    }
    let manifest = DatasetManifest::new("toy", entries.clone()).unwrap();
    let cache = MelCache::new(dir.path().join("cache"), DspConfig::default()).unwrap();
    let r = preprocess(&manifest, dir.path(), &cache);
    assert_eq!((r.computed, r.reused, r.failures.len()), (5, 0, 0));
    let files = walk(&dir.path().join("cache"));
    assert_eq!(
        files
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == "mel"))
            .count(),
        5
    );
    let r = preprocess(&manifest, dir.path(), &cache);
    assert_eq!((r.computed, r.reused), (0, 5));

    // A damaged cache file is recomputed; a damaged WAV is reported.
    fs::write(cache.path_for("toy", "r1"), b"CCMS").unwrap();
    fs::write(dir.path().join("audio/r3.wav"), b"garbage").unwrap();
    fs::remove_file(cache.path_for("toy", "r3")).unwrap();
    let r = preprocess(&manifest, dir.path(), &cache);
    assert_eq!((r.computed, r.reused), (1, 3));
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.failures[0].recording_id, "r3");
    let mel = read_mel(&cache.path_for("toy", "r1"), 62.5).unwrap();
    assert_eq!(mel.n_mels, 128);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn manifests_load_from_jsonl_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let m = DatasetManifest::new(
        "lyra",
        vec![entry("a", &["x", "y"], Some(Split::Train)), entry("b", &[], None)],
    )
    .unwrap();
    let p = dir.path().join("lyra.jsonl");
    write_manifest(&p, &m).unwrap();
    assert_eq!(load_manifest(&p, None).unwrap(), m);
    assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 2);

    let csv = dir.path().join("other.csv");
    fs::write(
        &csv,
        "recording_id,audio_path,tags,split,duration_sec\na,audio/a.wav,x;y,train,0.5\nb,audio/b.wav,,,0.5\n",
    )
    .unwrap();
    let mut expected = m.clone();
    expected.dataset_id = "lyra".into();
    assert_eq!(load_manifest(&csv, Some("lyra")).unwrap(), expected);

    fs::write(
        &p,
        "{\"recording_id\":\"a\",\"audio_path\":\"x\",\"duration_sec\":1}\nnot json\n",
    )
    .unwrap();
    match load_manifest(&p, None) {
        Err(ManifestError::Line { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    let dup = "{\"recording_id\":\"a\",\"audio_path\":\"x\",\"duration_sec\":1}\n".repeat(2);
    fs::write(&p, dup).unwrap();
    assert!(matches!(load_manifest(&p, None), Err(ManifestError::Invalid { .. })));
}

#[test]
fn registry_appends_one_line_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("runs/registry.jsonl");
    let rec = |seed| RegistryRecord {
        model: Arch::Musicnn,
        source: "fma".into(),
        target: "lyra".into(),
        policy: FineTunePolicy::OutputOnly,
        seed,
        roc_auc: 0.8125,
        pr_auc: Some(0.25),
    };
    append_record(&p, &rec(1)).unwrap();
    append_record(&p, &rec(2)).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 2);
    assert_eq!(read_registry(&p).unwrap(), vec![rec(1), rec(2)]);
}

#[test]
fn bundled_tables_have_published_shape() {
    let transfer = published_transfer();
    assert_eq!(transfer.len(), 198);
    let off: Vec<_> = transfer.iter().filter(|r| r.source != r.target).collect();
    assert_eq!(off.len(), 3 * 2 * 30);
    assert!(transfer
        .iter()
        .filter(|r| r.source == r.target)
        .all(|r| r.policy == FineTunePolicy::All));
    let single = published_single_domain();
    assert_eq!(single.len(), 18);
    // The transfer table's diagonal repeats the single-domain scores.
    for s in &single {
        let d = transfer
            .iter()
            .find(|r| r.model == s.model && r.source == s.dataset && r.target == s.dataset)
            .unwrap();
        assert!((d.roc_auc - s.roc_auc).abs() < 1e-9, "{:?} {}", s.model, s.dataset);
    }
}

#[test]
fn aggregate_csv_round_trips() {
    let datasets: Vec<String> = mtag::fixtures::PUBLISHED_DATASETS
        .iter()
        .map(|s| s.to_string())
        .collect();
    let matrices = collect_matrices(&published_transfer(), &datasets, &Arch::ALL).unwrap();
    let agg = aggregate(&matrices).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("aggregate_matrix.csv");
    write_aggregate_csv(&p, &agg).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("magnatagatune,,"));
    assert_eq!(read_aggregate_csv(&p).unwrap(), agg);
}
