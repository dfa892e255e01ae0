use std::collections::{BTreeMap, HashSet};
use std::io::{BufReader, BufWriter};
use std::net::TcpListener;
use std::thread;

use concreteness_core::corpus::{read_corpus, shard, write_corpus, ShardManifest, MANIFEST_FILE};
use concreteness_core::curate::{emit_distillation_set, select, select_files, split_corpus};
use concreteness_core::fusion::{fuse_corpus, FusionParams};
use concreteness_core::gateway::{attach_scores, serve, stub_score, GatewayOptions, LineClient, Scorer, StubScorer};
use concreteness_core::standardize::{fit_standardizer, standardize_corpus, StandardizerConfig, StandardizerFit};
use concreteness_core::{CaptionRecord, ReadMode, ScoreRequest, SelectionSpec, Similarity, StandardizationModel};
use tempfile::tempdir;

fn corpus(n: usize) -> Vec<CaptionRecord> {
    (0..n)
        .map(|i| {
            let caption = format!("{} thing {i}", "a small".repeat(1 + i % 4));
            CaptionRecord::new(format!("c{i:04}"), caption)
        })
        .collect()
}

#[test]
fn sharded_standardizer_fit_matches_single_pass() {
    let dir = tempdir().unwrap();
    let records: Vec<_> = corpus(400)
        .into_iter()
        .map(|r| {
            let s = stub_score(&r.caption);
            r.with_score("sba", s)
        })
        .collect();
    let manifest = shard(&records, 64, dir.path()).unwrap();
    assert_eq!(manifest.total, 400);
    assert_eq!(ShardManifest::read(dir.path().join(MANIFEST_FILE)).unwrap(), manifest);

    let config = StandardizerConfig::default();
    let whole = fit_standardizer(
        records.iter().map(|r| {
            let len = config.length_unit.measure(&r.caption);
            (len, Similarity::new(r.score("sba").unwrap()).unwrap())
        }),
        config,
    )
    .unwrap();

    let mut merged = StandardizerFit::new(config).unwrap();
    for path in &manifest.shard_paths {
        let mut part = StandardizerFit::new(config).unwrap();
        for r in read_corpus(path, ReadMode::Strict).unwrap().records {
            part.push(config.length_unit.measure(&r.caption), r.score("sba").unwrap()).unwrap();
        }
        merged.merge(&part);
    }
    let merged = merged.finish().unwrap();
    for (len, a) in &whole.buckets {
        let b = merged.buckets[len];
        assert_eq!(a.count, b.count);
        assert!((a.mean_t - b.mean_t).abs() < 1e-12);
        assert!((a.std_t - b.std_t).abs() < 1e-12);
    }

    let path = dir.path().join("model.json");
    whole.write(&path).unwrap();
    let loaded = StandardizationModel::read(&path).unwrap();
    for r in records.iter().take(50) {
        let len = whole.caption_length(&r.caption);
        let p = r.score("sba").unwrap();
        assert_eq!(whole.standardize(len, p).unwrap(), loaded.standardize(len, p).unwrap());
    }
}

#[test]
fn score_standardize_fuse_select_distill() {
    let dir = tempdir().unwrap();
    let mut scored = Vec::new();
    let summary = attach_scores(
        corpus(300).into_iter().map(Ok),
        &mut StubScorer,
        "vba",
        32,
        |r| {
            scored.push(r);
            Ok(())
        },
        |_| panic!("the stub never fails"),
    )
    .unwrap();
    assert_eq!(summary.scored, 300);
    let scored: Vec<_> = scored
        .into_iter()
        .map(|r| {
            let sba = stub_score(&r.caption.to_uppercase());
            r.with_score("sba", sba)
        })
        .collect();

    let config = StandardizerConfig {
        min_bucket_count: 10,
        ..StandardizerConfig::default()
    };
    let mut current = scored;
    for name in ["vba", "sba"] {
        let model = fit_standardizer(
            current.iter().map(|r| {
                (
                    config.length_unit.measure(&r.caption),
                    Similarity::new(r.score(name).unwrap()).unwrap(),
                )
            }),
            config,
        )
        .unwrap();
        current = standardize_corpus(current, name, &model, ReadMode::Strict)
            .collect::<Result<_, _>>()
            .unwrap();
    }
    let fused: Vec<_> = fuse_corpus(current, FusionParams::PAPER_A8, "vba_std", "sba_std", "icc", ReadMode::Strict)
        .collect::<Result<_, _>>()
        .unwrap();
    assert!(fused.iter().all(|r| r.score("icc").is_some_and(|s| s > 0.0 && s < 1.0)));

    let top = select(fused.clone(), &SelectionSpec::top_k("icc", 40), ReadMode::Strict).unwrap();
    assert_eq!(top.records.len(), 40);
    let cutoff = top
        .records
        .iter()
        .map(|r| r.score("icc").unwrap())
        .fold(f64::INFINITY, f64::min);
    let kept: HashSet<_> = top.records.iter().map(|r| r.id.as_str()).collect();
    for r in &fused {
        if !kept.contains(r.id.as_str()) {
            assert!(r.score("icc").unwrap() <= cutoff);
        }
    }

    let out = dir.path().join("distill.jsonl");
    let meta = emit_distillation_set(top.records, "icc", Default::default(), &out, ReadMode::Strict).unwrap();
    assert_eq!(meta.count, 40);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 40);
}

#[test]
fn file_selection_matches_in_memory_selection() {
    let dir = tempdir().unwrap();
    let records: Vec<_> = corpus(250)
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.with_score("icc", ((i * 31) % 17) as f64 / 16.0))
        .collect();
    let manifest = shard(&records, 40, dir.path()).unwrap();
    let spec = SelectionSpec::top_k("icc", 33).with_prefilter(SelectionSpec::threshold("icc", 0.2));
    let in_memory = select(records, &spec, ReadMode::Strict).unwrap();
    for workers in [1, 3, 16] {
        let from_files = select_files(&manifest.shard_paths, &spec, ReadMode::Strict, workers).unwrap();
        assert_eq!(from_files.records, in_memory.records);
    }
}

#[test]
fn split_parts_partition_the_corpus() {
    let records = corpus(101);
    let parts = split_corpus(records.clone(), &[0.8, 0.1, 0.1], 3).unwrap();
    assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), [81, 10, 10]);
    let mut seen = BTreeMap::new();
    for part in &parts {
        for r in part {
            assert!(seen.insert(r.id.clone(), ()).is_none());
        }
    }
    assert_eq!(seen.len(), 101);
    assert_eq!(split_corpus(records, &[0.8, 0.1, 0.1], 3).unwrap(), parts);
}

#[test]
fn pipelined_tcp_round_trip_is_bijective() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        serve(reader, BufWriter::new(stream), |r| Ok(stub_score(&r.caption))).unwrap()
    });
    let requests: Vec<ScoreRequest> = (0..1000)
        .map(|i| ScoreRequest {
            id: format!("q{i}"),
            caption: format!("caption number {i}"),
        })
        .collect();
    let options = GatewayOptions {
        max_in_flight: 128,
        ..GatewayOptions::default()
    };
    let mut client = LineClient::connect_tcp(&addr, options).unwrap();
    let responses = client.score_batch(&requests).unwrap();
    assert_eq!(responses.len(), 1000);
    for (req, resp) in requests.iter().zip(&responses) {
        assert_eq!(req.id, resp.id);
        assert_eq!(resp.score, Some(stub_score(&req.caption)));
    }
    drop(client);
    let stats = server.join().unwrap();
    assert_eq!((stats.requests, stats.malformed), (1000, 0));
}

#[test]
fn written_corpus_reads_back_identically() {
    let dir = tempdir().unwrap();
    let records: Vec<_> = corpus(20)
        .into_iter()
        .map(|r| r.with_score("x", 0.1 + 0.2))
        .collect();
    let path = dir.path().join("c.jsonl");
    write_corpus(&records, &path).unwrap();
    assert_eq!(read_corpus(&path, ReadMode::Strict).unwrap().records, records);
}
