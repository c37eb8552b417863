use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrd_core::data::{generate_spirals, Split};
use rrd_core::eval::{
    embeddings_csv, export_embeddings, linear_probe_transfer, logit_correlation_difference, ProbeConfig,
};
use rrd_core::train::{train_teacher, Config};
use rrd_core::Tensor;

/// Textbook single-pass Pearson coefficient over columns `a` and `b`.
fn pearson_oracle(x: &[Vec<f64>], a: usize, b: usize) -> f64 {
    let n = x.len() as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for row in x {
        let (u, v) = (row[a], row[b]);
        sa += u;
        sb += v;
        saa += u * u;
        sbb += v * v;
        sab += u * v;
    }
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

#[test]
fn correlation_difference_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let n = rng.random_range(3..30);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
        };
        let (t, s) = (draw(&mut rng), draw(&mut rng));
        let d = logit_correlation_difference(&Tensor::from_rows(&t).unwrap(), &Tensor::from_rows(&s).unwrap())
            .unwrap();
        let mut abs_sum = 0.0;
        let mut abs_max = 0.0f64;
        for a in 0..5 {
            for b in 0..5 {
                let want = pearson_oracle(&t, a, b) - pearson_oracle(&s, a, b);
                assert!((d.get(a, b) - want).abs() < 1e-10, "{} vs {want}", d.get(a, b));
                abs_sum += want.abs();
                abs_max = abs_max.max(want.abs());
            }
        }
        assert!((d.mean_abs - abs_sum / 25.0).abs() < 1e-10);
        assert!((d.max_abs - abs_max).abs() < 1e-10);
    }
}

fn small_teacher() -> (Config, rrd_core::Dataset, rrd_core::Model) {
    let mut c = Config::desk();
    c.model_teacher = rrd_core::ModelSpec::new(&[2, 64, 64], 10, 16);
    c.train.teacher_epochs = 20;
    let d = c.data.build().unwrap();
    let m = train_teacher(&c, &d).unwrap().model;
    (c, d, m)
}

#[test]
fn probe_transfer_direction_and_frozen_contract() {
    let (_, d, encoder) = small_teacher();
    let transfer = generate_spirals(4, 150, 0.05, 11).unwrap();
    let before = encoder.parameter_values();
    let probe = ProbeConfig::new(5);
    let own = linear_probe_transfer(&encoder, &d, &probe).unwrap();
    let other = linear_probe_transfer(&encoder, &transfer, &probe).unwrap();
    assert!(own >= other, "own {own} transfer {other}");
    // Pinned from the baseline run: 414/500 and 41/150.
    assert!((own - 0.828).abs() < 1e-12 && (other - 41.0 / 150.0).abs() < 1e-12, "{own} {other}");
    assert_eq!(encoder.parameter_values(), before);
    assert_eq!(linear_probe_transfer(&encoder, &transfer, &probe).unwrap(), other);
}

#[test]
fn embedding_export_contract() {
    let (_, d, model) = small_teacher();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    export_embeddings(&model, &d, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    export_embeddings(&model, &d, &path).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
    assert_eq!(String::from_utf8(first).unwrap(), embeddings_csv(&model, &d).unwrap());

    let mut reader = csv::Reader::from_path(&path).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "sample_index");
    assert_eq!(&header[1], "label");
    assert_eq!(&header[17], "e_15");
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.unwrap();
        assert_eq!(rec[0].parse::<usize>().unwrap(), i);
        assert_eq!(rec[1].parse::<usize>().unwrap(), d.labels()[i]);
        let norm: f64 = rec.iter().skip(2).map(|v| v.parse::<f64>().unwrap().powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-8);
        rows += 1;
    }
    assert_eq!(rows, d.len());
    assert_eq!(d.indices(Split::All).len(), rows);
}
