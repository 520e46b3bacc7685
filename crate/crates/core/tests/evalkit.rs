use proptest::prelude::*;
use tmpa::evalkit::{average_precision, cmc_map, embed_with, metrics_csv, EmbeddingSet, SearchMode};
use tmpa::model::Params;
use tmpa::synthdata::{generate, Modality, Split, SynthSpec};
use tmpa::tensor::Tensor;
use tmpa::trainer::TrainConfig;

fn small_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data = SynthSpec {
        num_ids: 4,
        num_test_ids: 3,
        imgs_per_id_per_modality: 3,
        ..SynthSpec::default()
    };
    cfg.widths = [4, 6, 8];
    cfg
}

fn test_images(cfg: &TrainConfig, m: Modality) -> (Tensor, Vec<usize>) {
    generate(&cfg.data).stacked(Split::Test, m)
}

#[test]
fn embeddings_are_unit_norm_with_width_twice_the_feature_channels() {
    let cfg = small_cfg();
    let params = Params::init(&cfg.model(), 3);
    let (x, _) = test_images(&cfg, Modality::Infrared);
    let e = embed_with(&params, &cfg, &x, Modality::Infrared, 1);
    assert_eq!(e.shape(), &[9, 2 * cfg.widths[2]]);
    for row in e.data().chunks(e.shape()[1]) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9, "norm {n}");
    }
}

#[test]
fn embedding_ignores_batch_composition_and_thread_count() {
    let cfg = small_cfg();
    let params = Params::init(&cfg.model(), 4);
    let (x, _) = test_images(&cfg, Modality::Visible);
    let all = embed_with(&params, &cfg, &x, Modality::Visible, 1);
    let threaded = embed_with(&params, &cfg, &x, Modality::Visible, 3);
    assert_eq!(all, threaded);
    let d = all.shape()[1];
    for i in [0, 4, 8] {
        let alone = embed_with(&params, &cfg, &x.slice_outer(i, 1), Modality::Visible, 1);
        let row = &all.data()[i * d..(i + 1) * d];
        assert!(alone.data().iter().zip(row).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn same_image_twice_gives_identical_rows() {
    let cfg = small_cfg();
    let params = Params::init(&cfg.model(), 5);
    let (x, _) = test_images(&cfg, Modality::Infrared);
    let one = x.slice_outer(2, 1);
    let twice = Tensor::stack_outer(&[&one, &one]);
    let e = embed_with(&params, &cfg, &twice, Modality::Infrared, 1);
    let d = e.shape()[1];
    assert_eq!(e.data()[..d], e.data()[d..]);
}

#[test]
fn contract_violations() {
    let q = EmbeddingSet::new(Tensor::zeros(&[2, 3]), vec![0, 1], vec![Modality::Infrared; 2]).unwrap();
    let same = EmbeddingSet::new(Tensor::zeros(&[2, 3]), vec![0, 1], vec![Modality::Infrared; 2]).unwrap();
    assert!(cmc_map(&q, &same).is_err());
    let missing = EmbeddingSet::new(Tensor::zeros(&[2, 3]), vec![0, 0], vec![Modality::Visible; 2]).unwrap();
    assert!(cmc_map(&q, &missing).is_err());
    assert!(EmbeddingSet::new(Tensor::zeros(&[2, 3]), vec![0], vec![Modality::Visible; 2]).is_err());
}

#[test]
fn metrics_csv_layout() {
    let q = EmbeddingSet::new(Tensor::new(&[1, 1], vec![0.0]), vec![1], vec![Modality::Visible]).unwrap();
    let g = EmbeddingSet::new(Tensor::new(&[2, 1], vec![0.1, 0.5]), vec![0, 1], vec![Modality::Infrared; 2]).unwrap();
    let m = cmc_map(&q, &g).unwrap();
    assert_eq!(m.mode, SearchMode::VisibleToInfrared);
    assert_eq!(m.cmc, vec![0.0, 1.0]);
    assert_eq!(m.map, 0.5);
    assert_eq!(m.rank(20), 1.0);
    assert_eq!(metrics_csv(&[m]), "mode,rank1,rank10,rank20,map\nv2i,0,1,1,0.5\n");
}

/// AP as the mean of precision@k at relevant positions, computed from
/// prefix counts rather than a running tally.
fn ap_oracle(hits: &[bool]) -> f64 {
    let rel: Vec<usize> = (0..hits.len()).filter(|&k| hits[k]).collect();
    if rel.is_empty() {
        return 0.0;
    }
    rel.iter()
        .map(|&k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .sum::<f64>()
        / rel.len() as f64
}

fn embedding_case() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, Vec<f64>, Vec<usize>)> {
    (1usize..4, 1usize..10).prop_flat_map(|(ids, extra)| {
        let ng = ids + extra;
        (
            prop::collection::vec(-3i32..4, 6),
            prop::collection::vec(0..ids, 3),
            prop::collection::vec(-3i32..4, 2 * ng),
            Just((0..ng).map(move |j| j % ids).collect::<Vec<_>>()),
        )
            .prop_map(|(q, ql, g, gl)| {
                (q.into_iter().map(f64::from).collect(), ql, g.into_iter().map(f64::from).collect(), gl)
            })
    })
}

proptest! {
    #[test]
    fn average_precision_matches_prefix_oracle(hits in prop::collection::vec(any::<bool>(), 1..20)) {
        prop_assert!((average_precision(&hits) - ap_oracle(&hits)).abs() < 1e-12);
    }

    #[test]
    fn cmc_is_monotone_and_reaches_one((q, ql, g, gl) in embedding_case()) {
        let qs = EmbeddingSet::new(Tensor::new(&[3, 2], q), ql, vec![Modality::Infrared; 3]).unwrap();
        let ng = gl.len();
        let gs = EmbeddingSet::new(Tensor::new(&[ng, 2], g), gl, vec![Modality::Visible; ng]).unwrap();
        let m = cmc_map(&qs, &gs).unwrap();
        prop_assert_eq!(m.cmc.len(), ng);
        prop_assert!(m.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*m.cmc.last().unwrap(), 1.0);
        prop_assert!(m.map > 0.0 && m.map <= 1.0);
        prop_assert!(m.map >= m.rank(1) / ng as f64);
    }
}
