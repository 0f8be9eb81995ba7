use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::Rng;
use vadapter::eval::*;
use vadapter::kvtext::KvDoc;
use vadapter::rng::{self, Purpose};
use vadapter::tensor::{VideoShape, VideoTensor};
use vadapter::worlds::{gen_toy_videos, ToyVideoSpec};

fn stats(mean: Vec<f64>, cov: Array2<f64>) -> FeatureStats {
    FeatureStats {
        mean: Array1::from(mean),
        cov,
        count: 100,
    }
}

fn random_spd(dim: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, Purpose::Data, 0);
    let a = Array2::from_shape_fn((dim, dim), |_| r.gen_range(-1.0..1.0));
    a.dot(&a.t()) + Array2::<f64>::eye(dim) * 0.1
}

/// `tr((ΣaΣb)^{1/2})` from the (real, positive) eigenvalues of the
/// non-symmetric product, by a general eigen solver.
fn trace_sqrt_product(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let ma = DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    let mb = DMatrix::from_fn(n, n, |i, j| b[[i, j]]);
    (ma * mb)
        .complex_eigenvalues()
        .iter()
        .map(|z| {
            assert!(z.im.abs() < 1e-9 * z.re.abs().max(1.0));
            z.re.max(0.0).sqrt()
        })
        .sum()
}

#[test]
fn frechet_matches_independent_eigen_oracle() {
    for seed in 0..5 {
        let (ca, cb) = (random_spd(4, seed), random_spd(4, seed + 100));
        let (ma, mb) = (vec![0.1, -0.3, 2.0, 0.0], vec![1.0, 0.2, -0.5, 0.3]);
        let d = frechet_distance(&stats(ma.clone(), ca.clone()), &stats(mb.clone(), cb.clone())).unwrap();
        let mean_term: f64 = ma.iter().zip(&mb).map(|(a, b)| (a - b) * (a - b)).sum();
        let oracle = mean_term + ca.diag().sum() + cb.diag().sum() - 2.0 * trace_sqrt_product(&ca, &cb);
        assert!(
            (d - oracle).abs() <= 1e-8 * oracle.max(1.0),
            "seed {seed}: {d} vs {oracle}"
        );
    }
}

#[test]
fn one_dimensional_closed_form() {
    // (μa − μb)² + (σa − σb)²
    let d = frechet_distance(
        &stats(vec![1.0], Array2::from_elem((1, 1), 4.0)),
        &stats(vec![-0.5], Array2::from_elem((1, 1), 0.25)),
    )
    .unwrap();
    assert!((d - (2.25 + 2.25)).abs() < 1e-12);
}

#[test]
fn zero_on_identical_and_squared_shift_for_identity() {
    let c = random_spd(6, 3);
    let s = stats(vec![0.5; 6], c);
    assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-6);
    for shift in [0.0, 0.5, 3.0] {
        let a = stats(vec![0.0; 5], Array2::eye(5));
        let mut m = vec![0.0; 5];
        m[2] = shift;
        let b = stats(m, Array2::eye(5));
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - shift * shift).abs() < 1e-6);
    }
}

#[test]
fn symmetric_in_its_arguments() {
    let (a, b) = (
        stats(vec![0.0, 1.0], random_spd(2, 1)),
        stats(vec![1.0, 1.0], random_spd(2, 2)),
    );
    let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
}

fn toy(styles: Vec<u32>, render: Option<&str>, count: usize, seed: u64) -> Vec<VideoTensor> {
    gen_toy_videos(&ToyVideoSpec {
        styles,
        render: render.map(|r| r.parse().unwrap()),
        count,
        seed,
        ..Default::default()
    })
    .unwrap()
    .clips()
}

#[test]
fn probe_separates_styles_more_than_resampling() {
    // two halves of one corpus are closer than two different styles
    let probe = FeatureProbe::new(7, 1, 32).unwrap();
    let a = toy(vec![1], None, 400, 1);
    let striped = toy(vec![1], Some("disk/bright/striped"), 200, 2);
    let (h1, h2) = a.split_at(200);
    let same = frechet_distance(
        &extract_features(h1, &probe).unwrap(),
        &extract_features(h2, &probe).unwrap(),
    )
    .unwrap();
    let diff = frechet_distance(
        &extract_features(h1, &probe).unwrap(),
        &extract_features(&striped, &probe).unwrap(),
    )
    .unwrap();
    assert!(diff > 5.0 * same, "same {same}, different {diff}");
}

#[test]
fn probe_is_deterministic_and_shape_checked() {
    let p = FeatureProbe::new(3, 1, 8).unwrap();
    assert_eq!(p.output_dim(), 16);
    assert_eq!(p.hash(), FeatureProbe::new(3, 1, 8).unwrap().hash());
    assert_ne!(p.hash(), FeatureProbe::new(4, 1, 8).unwrap().hash());
    let tiny = VideoTensor::zeros(VideoShape::new(2, 2, 2, 1).unwrap());
    assert!(p.features(&tiny).is_err());
    let two = VideoTensor::zeros(VideoShape::new(3, 3, 3, 2).unwrap());
    assert!(p.features(&two).is_err());
}

#[test]
fn plan_text_roundtrip_and_strictness() {
    let plan = BenchmarkPlan::default();
    let text = plan.to_kv_string();
    let back = BenchmarkPlan::read_kv(&KvDoc::parse(&text).unwrap()).unwrap();
    assert_eq!(back, plan);
    assert!(BenchmarkPlan::read_kv(&KvDoc::parse("[benchmark]\nsamples = 12\nbogus = 1\n").unwrap()).is_err());
    let partial = BenchmarkPlan::read_kv(&KvDoc::parse("[benchmark]\nsamples = 12\n").unwrap()).unwrap();
    assert_eq!(partial.samples, 12);
    assert_eq!(partial.seeds, plan.seeds);
}

#[test]
fn finetune_budget_scales_with_parameter_ratio() {
    let plan = BenchmarkPlan::default();
    let steps = plan.adapter.steps;
    assert_eq!(
        plan.finetune_budget(1000, 10_000),
        (steps as f64 / 10.0).round() as usize
    );
    assert_eq!(plan.finetune_budget(1, 1_000_000_000), 1);
}

#[test]
fn tiny_benchmark_produces_every_row() {
    let mut plan = BenchmarkPlan {
        seeds: vec![4],
        samples: 16,
        num_steps: 10,
        ..Default::default()
    };
    plan.broad.count = 60;
    plan.adapt.count = 30;
    for m in [&mut plan.pretrained, &mut plan.adapter] {
        m.width = 8;
        m.blocks = 1;
        m.steps = 5;
        m.batch_size = 4;
    }
    plan.probe_filters = 4;
    let corpora = vadapter::worlds::split_corpora(&plan.broad, &plan.adapt).unwrap();
    let mut lines = Vec::new();
    let report = run_benchmark(&plan, &corpora, |l| lines.push(l.to_string())).unwrap();
    assert_eq!(report.rows.len(), RowKind::ALL.len());
    for kind in RowKind::ALL {
        let row = report.get(kind, 4).unwrap();
        assert!(row.frechet.is_finite() && row.frechet >= 0.0);
    }
    let table = report.table();
    assert!(table.starts_with(&REPORT_COLUMNS.join("\t")));
    assert!(report.render().contains(&report.probe_hash));
    assert!(!lines.is_empty());
    // the same plan reproduces the same numbers
    let again = run_benchmark(&plan, &corpora, |_| {}).unwrap();
    for (a, b) in report.rows.iter().zip(&again.rows) {
        assert_eq!(a.frechet.to_bits(), b.frechet.to_bits());
    }
}
