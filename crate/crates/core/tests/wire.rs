use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use qifmeta::combine::{CohortSummary, Partition, SourceSummary, SUMMARY_FORMAT_VERSION};
use qifmeta::inference::{CohortScores, SourceScore};
use qifmeta::runtime::wire::{decode, encode, from_json, to_json};
use qifmeta::runtime::{Payload, ThetaRequest};
use qifmeta::{BasisFamily, LinkFunction};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a checked-in file; `QIFMETA_BLESS=1` rewrites it.
fn check_golden(name: &str, bytes: &[u8]) {
    let path = golden(name);
    if std::env::var_os("QIFMETA_BLESS").is_some() {
        std::fs::write(&path, bytes).unwrap();
    }
    let want = std::fs::read(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert!(want == bytes, "{name} differs from its golden file");
}

fn sample_summary() -> CohortSummary {
    let src = |block, link, basis, s: usize| SourceSummary {
        block,
        link,
        basis,
        theta_hat: DVector::from_vec(vec![0.25, -1.5]),
        s_hat: DMatrix::from_fn(2 * s, 2, |r, c| (r * 2 + c) as f64 / 8.0 + block as f64),
        q_value: 1.0 / 3.0,
        converged: block == 1,
        iterations: 7,
        dispersion: 2.0,
    };
    let sources = vec![
        src(1, LinkFunction::Logit, BasisFamily::Ar1, 2),
        src(2, LinkFunction::Identity, BasisFamily::Independence, 1),
    ];
    let v = DMatrix::from_fn(6, 6, |r, c| if r == c { 2.0 + r as f64 } else { 0.1 / (1.0 + (r + c) as f64) });
    CohortSummary { format_version: SUMMARY_FORMAT_VERSION, cohort_id: 3, n: 1234, sources, v }
}

fn sample_request() -> ThetaRequest {
    let partition = Partition::from_block_groups(&[vec![1], vec![2]], 2, 3)
        .unwrap()
        .with_labels(vec!["first".into(), "second".into()])
        .unwrap();
    ThetaRequest { partition, theta: DVector::from_vec(vec![0.1, 0.2, -0.3, f64::MIN_POSITIVE]) }
}

fn sample_scores() -> CohortScores {
    CohortScores {
        cohort_id: 2,
        n: 10,
        sources: vec![SourceScore {
            block: 1,
            theta: DVector::from_vec(vec![0.1, 0.2]),
            psi: DVector::from_vec(vec![1e-300, -0.0, 3.5, 7.0]),
        }],
    }
}

#[test]
fn binary_round_trip_is_bit_exact() {
    for payload in
        [Payload::Summary(sample_summary()), Payload::Request(sample_request()), Payload::Scores(sample_scores())]
    {
        let bytes = encode(&payload);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, payload);
        assert_eq!(encode(&back), bytes);
    }
}

#[test]
fn json_round_trip_is_bit_exact() {
    for payload in
        [Payload::Summary(sample_summary()), Payload::Request(sample_request()), Payload::Scores(sample_scores())]
    {
        let text = to_json(&payload);
        let back = from_json(&text).unwrap();
        assert_eq!(encode(&back), encode(&payload));
    }
}

#[test]
fn golden_messages() {
    let summary = Payload::Summary(sample_summary());
    check_golden("summary-v1.qifm", &encode(&summary));
    check_golden("summary-v1.json", to_json(&summary).as_bytes());
    check_golden("request-v1.qifm", &encode(&Payload::Request(sample_request())));
    check_golden("scores-v1.qifm", &encode(&Payload::Scores(sample_scores())));
    // golden files decode to the in-memory values
    let back = decode(&std::fs::read(golden("summary-v1.qifm")).unwrap()).unwrap();
    assert_eq!(back, summary);
}

#[test]
fn corruption_is_detected() {
    let bytes = encode(&Payload::Summary(sample_summary()));
    for pos in [0, 5, 7, 20, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(decode(&bad).is_err(), "flip at {pos} went unnoticed");
    }
    assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    let mut version = bytes.clone();
    version[4] = 9;
    let err = decode(&version).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    let text = to_json(&Payload::Summary(sample_summary()));
    let tampered = text.replacen("0.25", "0.26", 1);
    assert!(from_json(&tampered).is_err());
}

#[test]
fn summary_size_does_not_depend_on_sample_size() {
    let mut small = sample_summary();
    small.n = 100;
    let mut large = sample_summary();
    large.n = 10_000;
    let (a, b) = (encode(&Payload::Summary(small)), encode(&Payload::Summary(large)));
    assert_eq!(a.len(), b.len());
    // only the n field (8 bytes at payload offset 6) and the checksum differ
    let header = 16;
    let differing: Vec<usize> = (0..a.len() - 32).filter(|&i| a[i] != b[i]).collect();
    assert!(differing.iter().all(|&i| (header + 6..header + 14).contains(&i)), "{differing:?}");
}
