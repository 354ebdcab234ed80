//! Retrieval metric against an exhaustive-ranking oracle, report round
//! trips, and the analysis probes on a small model.

mod common;

use std::collections::HashSet;

use common::{rng, tiny_image, tiny_text};
use rand::Rng;
use toklen_core::data::{generate_synthetic_corpus, tokenize, AttrOffset, SynthConfig};
use toklen_core::encoder::DualEncoder;
use toklen_core::eval::{
    attention_spread, emit_report, evaluate_retrieval, recall_at_k, relevance_distribution, AttentionSpread,
    Direction, RecallAtK, Report, ReportFormat, RetrievalReport, SimilarityMatrix, RELEVANCE_WINDOWS,
};
use toklen_core::posenc::{PositionalScheme, SchemeKind};
use toklen_core::{Error, Tensor};

/// Recall by sorting every candidate list: descending score, ties broken
/// toward the lower index, then locating the true match.
fn oracle_recall(m: &[Vec<f64>], k: usize, direction: Direction) -> f64 {
    let b = m.len();
    let mut hits = 0;
    for q in 0..b {
        let score = |j: usize| match direction {
            Direction::Txt2Img => m[q][j],
            Direction::Img2Txt => m[j][q],
        };
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&a, &c| score(c).partial_cmp(&score(a)).unwrap().then(a.cmp(&c)));
        if order.iter().position(|&j| j == q).unwrap() < k {
            hits += 1;
        }
    }
    100.0 * hits as f64 / b as f64
}

#[test]
fn recall_matches_exhaustive_ranking_on_random_matrices() {
    let mut r = rng(2024);
    let ks: Vec<usize> = (1..=10).collect();
    for trial in 0..200 {
        // Every other matrix is drawn from a coarse grid so ties occur.
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                (0..10)
                    .map(|_| {
                        if trial % 2 == 0 {
                            r.gen_range(-1.0..=1.0)
                        } else {
                            r.gen_range(-4i32..=4) as f64 / 4.0
                        }
                    })
                    .collect()
            })
            .collect();
        let sim = SimilarityMatrix::from_values(Tensor::from_rows(&rows).unwrap()).unwrap();
        for direction in Direction::BOTH {
            let report = recall_at_k(&sim, &ks, direction).unwrap();
            for &k in &ks {
                assert_eq!(report.at(k).unwrap(), oracle_recall(&rows, k, direction), "trial {trial} k {k}");
            }
        }
    }
}

#[test]
fn similarity_range_is_enforced() {
    let bad = Tensor::from_rows(&[vec![1.5, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!(SimilarityMatrix::from_values(bad).is_err());
}

#[test]
fn retrieval_csv_round_trips() {
    let report = Report::Retrieval(vec![
        RetrievalReport {
            direction: Direction::Img2Txt,
            recalls: vec![RecallAtK { k: 1, recall: 12.5 }, RecallAtK { k: 5, recall: 50.0 }],
        },
        RetrievalReport {
            direction: Direction::Txt2Img,
            recalls: vec![RecallAtK { k: 1, recall: 1.0 / 3.0 }, RecallAtK { k: 5, recall: 100.0 }],
        },
    ]);
    assert_eq!(Report::from_csv(&report.to_csv()).unwrap(), report);
    assert_eq!(Report::from_csv("direction,k,recall\n").unwrap(), Report::Retrieval(vec![]));
}

#[test]
fn attention_and_relevance_csv_round_trip() {
    let spread = AttentionSpread::from_weights(vec![0.25, 0.5, 0.125, 0.125]);
    let report = Report::Attention(spread.clone());
    assert_eq!(Report::from_csv(&report.to_csv()).unwrap(), report);
    assert!((spread.entropy - (0.25 * 4f64.ln() + 0.5 * 2f64.ln() + 0.25 * 8f64.ln())).abs() < 1e-12);

    let pairs = generate_synthetic_corpus(&SynthConfig {
        seed: 4,
        count: 1,
        long_fraction: 1.0,
        attr_offset: AttrOffset::Late,
    })
    .unwrap();
    let text = tiny_text().with_scheme(PositionalScheme::default_for(SchemeKind::Rope, 8.0), 154);
    let model = DualEncoder::init(text, tiny_image(), 0).unwrap();
    let (sizes, strides): (Vec<usize>, Vec<usize>) = RELEVANCE_WINDOWS.iter().copied().unzip();
    let grids = relevance_distribution(&model, &pairs[0], &sizes, &strides).unwrap();
    let report = Report::Relevance(grids);
    assert_eq!(Report::from_csv(&report.to_csv()).unwrap(), report);
}

#[test]
fn malformed_csv_names_the_line() {
    let err = Report::from_csv("direction,k,recall\nimg2txt,1,10\ntxt2img,x,3\n").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    assert!(matches!(Report::from_csv("nope\n"), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn svg_reports_are_well_formed_xml() {
    let reports = [
        Report::Retrieval(vec![RetrievalReport {
            direction: Direction::Txt2Img,
            recalls: vec![RecallAtK { k: 1, recall: 40.0 }],
        }]),
        Report::Retrieval(vec![]),
        Report::Attention(AttentionSpread::from_weights(vec![0.1; 10])),
        Report::Relevance(vec![]),
    ];
    let dir = tempfile::tempdir().unwrap();
    for (i, report) in reports.iter().enumerate() {
        let path = dir.path().join(format!("r{i}.svg"));
        emit_report(report, &path, ReportFormat::Svg).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }
}

#[test]
fn attention_spread_is_a_distribution() {
    let text = tiny_text().with_scheme(PositionalScheme::default_for(SchemeKind::RopeNtk, 8.0), 154);
    let model = DualEncoder::init(text, tiny_image(), 1).unwrap();
    let pairs = generate_synthetic_corpus(&SynthConfig {
        seed: 2,
        count: 1,
        long_fraction: 1.0,
        attr_offset: AttrOffset::Late,
    })
    .unwrap();
    let tokens = tokenize(&pairs[0].caption);
    let spread = attention_spread(&model, &tokens, None).unwrap();
    assert_eq!(spread.weights.len(), tokens.len());
    assert!((spread.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(spread.entropy >= 0.0 && spread.entropy <= (tokens.len() as f64).ln() + 1e-12);
    assert!(spread.mass_beyond_window > 0.0);
    assert!(matches!(attention_spread(&model, &tokens, Some(5)), Err(Error::Index(_))));
}

/// With every discriminating attribute past token 77, all short views are
/// the same string, so a model limited to them ranks every image the same
/// way for every caption: at most one caption per distinct short view can
/// be a top-1 hit.
#[test]
fn short_views_cannot_beat_chance_on_late_attributes() {
    let pairs = generate_synthetic_corpus(&SynthConfig {
        seed: 9,
        count: 40,
        long_fraction: 1.0,
        attr_offset: AttrOffset::Late,
    })
    .unwrap();
    let prefixes: HashSet<Vec<usize>> = pairs
        .iter()
        .map(|p| {
            assert!(p.metadata.attr_token >= 77);
            tokenize(&p.caption).ids()[..77].to_vec()
        })
        .collect();
    let bound = 100.0 * prefixes.len() as f64 / pairs.len() as f64;
    assert_eq!(prefixes.len(), 1);

    let text = tiny_text().with_scheme(PositionalScheme::default_for(SchemeKind::Rope, 8.0), 154);
    let model = DualEncoder::init(text, tiny_image(), 3).unwrap();
    let reports = evaluate_retrieval(&model, &pairs, &[1], 77).unwrap();
    let t2i = reports.iter().find(|r| r.direction == Direction::Txt2Img).unwrap();
    assert!(t2i.at(1).unwrap() <= bound, "{} > {bound}", t2i.at(1).unwrap());
}
