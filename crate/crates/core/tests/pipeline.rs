mod common;

use common::{fd_gradient, rng};
use fractalflow::config::{ModelConfig, RunConfig};
use fractalflow::data::{
    dequantize, encode_idx, load_checkpoint, make_moons, parse_idx, postprocess, preprocess, preprocess_logdet_element,
    save_checkpoint, write_metrics_csv, ImageDataset, MetricsRecord, ResizePolicy,
};
use fractalflow::trainer::{FlowModel, TrainConfig, TrainData, Trainer};
use fractalflow::{Error, Tensor};
use proptest::prelude::*;

#[test]
fn every_pixel_value_survives_the_pipeline() {
    let pixels: Vec<u8> = (0..=255).collect();
    for seed in 0..20 {
        for dtype_f32 in [false, true] {
            let out = if dtype_f32 {
                let x = dequantize::<f32, _>(&pixels, [1, 16, 16], &mut rng(seed)).unwrap();
                postprocess(&preprocess(&x).unwrap().0)
            } else {
                let x = dequantize::<f64, _>(&pixels, [1, 16, 16], &mut rng(seed)).unwrap();
                postprocess(&preprocess(&x).unwrap().0)
            };
            assert_eq!(out, pixels);
        }
    }
}

#[test]
fn dequantized_mean_is_half_a_level_up() {
    let n = 100_000;
    let x = dequantize::<f64, _>(&vec![100u8; n], [1, 1, 1], &mut rng(1)).unwrap();
    let mean = x.data().iter().sum::<f64>() / n as f64;
    // Uniform noise has standard deviation 1/√12.
    let se = (1.0 / 12.0f64).sqrt() / (n as f64).sqrt();
    assert!((mean - 100.5).abs() < 4.0 * se);
}

#[test]
fn preprocess_log_det_matches_derivative() {
    for &x in &[0.0, 0.3, 17.2, 127.9, 200.0, 255.999] {
        let f = |v: &[f64]| ((2.0 * v[0] - 256.0) / 258.0).atanh();
        let slope = fd_gradient(f, &[x], 1e-6)[0];
        assert!((preprocess_logdet_element(x) - slope.ln()).abs() < 1e-6);
    }
    let x = Tensor::<f64>::from_f64(&[2, 1, 1, 2], &[3.5, 250.25, 0.5, 128.0]).unwrap();
    let (u, ld) = preprocess(&x).unwrap();
    assert_eq!(u.shape(), &[2, 1, 1, 2]);
    let want = preprocess_logdet_element(3.5) + preprocess_logdet_element(250.25);
    assert!((ld.data()[0] - want).abs() < 1e-12);
}

#[test]
fn postprocess_clamps_out_of_range_values() {
    let u = Tensor::<f64>::from_f64(&[1, 1, 1, 4], &[-50.0, 50.0, f64::NAN, 0.0]).unwrap();
    assert_eq!(postprocess(&u), vec![0, 255, 0, 128]);
}

#[test]
fn idx_round_trip_and_rejections() {
    let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 11) as u8).collect();
    let ds = ImageDataset::new("t", [1, 3, 4], pixels.clone(), Some(vec![7, 2])).unwrap();
    let (img, lab) = encode_idx(&ds);
    // Header: magic 0x00000803, then big-endian N, H, W.
    assert_eq!(&img[..16], &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 4]);
    let back = parse_idx(&img, lab.as_deref(), "t").unwrap();
    assert_eq!(back.pixels(), &pixels[..]);
    assert_eq!(back.labels(), Some(&[7u8, 2][..]));
    assert!(matches!(parse_idx(&img[..20], None, "t"), Err(Error::Format(_))));
    let mut bad = img.clone();
    bad[3] = 9;
    assert!(matches!(parse_idx(&bad, None, "t"), Err(Error::Format(_))));
    let mut short_labels = lab.unwrap();
    short_labels.pop();
    assert!(parse_idx(&img, Some(&short_labels), "t").is_err());
}

#[test]
fn resize_policies() {
    let ds = ImageDataset::new("t", [1, 28, 28], (0..784).map(|i| (i % 256) as u8).collect(), None).unwrap();
    let pad = ds.resized(ResizePolicy::Pad32).unwrap();
    assert_eq!(pad.shape(), [1, 32, 32]);
    assert_eq!(pad.image(0)[0], 0);
    assert_eq!(pad.image(0)[2 * 32 + 2], ds.image(0)[0]);
    let crop = ds.resized(ResizePolicy::Crop(14)).unwrap();
    assert_eq!(crop.shape(), [1, 14, 14]);
    assert_eq!(crop.image(0)[0], ds.image(0)[7 * 28 + 7]);
    assert_eq!(ds.resized(ResizePolicy::Resize32).unwrap().shape(), [1, 32, 32]);
    assert_eq!("crop14".parse::<ResizePolicy>().unwrap(), ResizePolicy::Crop(14));
    assert!("crop".parse::<ResizePolicy>().is_err());
}

#[test]
fn moons_follow_the_two_arc_geometry() {
    let ds = make_moons(200, 0.0, 3).unwrap();
    let labels = ds.labels.as_ref().unwrap();
    let pts = ds.points.to_f64_vec();
    for (i, p) in pts.chunks(2).enumerate() {
        let (x, y) = (p[0], p[1]);
        if labels[i] == 0 {
            assert!((x * x + y * y - 1.0).abs() < 1e-9 && y >= -1e-12);
        } else {
            let (dx, dy) = (1.0 - x, 0.5 - y);
            assert!((dx * dx + dy * dy - 1.0).abs() < 1e-9 && y <= 0.5 + 1e-12);
        }
    }
    assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 100);
    assert!(make_moons(10, -0.1, 0).is_err());
}

#[test]
fn metrics_csv_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let rec = MetricsRecord {
        epoch: 1,
        train_bpd: 2.5,
        val_bpd: None,
        l2_loss: 0.0,
        seconds: 1.0,
    };
    write_metrics_csv(&[rec], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,train_bpd,val_bpd,l2_loss,seconds");
    assert_eq!(text.lines().nth(1).unwrap(), "1,2.5,,0.0,1.0");
}

fn small_image_model(seed: u64) -> (FlowModel<f64>, TrainData) {
    let cfg: ModelConfig = toml::from_str(
        "variant = \"ldafnf\"\nsubnet = \"conv\"\nwidth = 4\nfractal_schedule = [4, 2]\nsteps_per_level = 1\n[prior]\nkind = \"grid-gmm-lda\"\ncomponents = 4",
    )
    .unwrap();
    let model = FlowModel::from_config(&cfg, [1, 4, 4], &mut rng(seed)).unwrap();
    let pixels = (0..40 * 16).map(|i| ((i * 37 + i / 16 * 11) % 256) as u8).collect();
    let data = TrainData::Images(ImageDataset::new("t", [1, 4, 4], pixels, None).unwrap());
    (model, data)
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 1e-2,
        seed: 5,
        eval_every: 1,
        ..TrainConfig::default()
    }
}

fn trajectory(h: &[MetricsRecord]) -> Vec<(usize, u64, Option<u64>, u64)> {
    h.iter()
        .map(|r| {
            (
                r.epoch,
                r.train_bpd.to_bits(),
                r.val_bpd.map(f64::to_bits),
                r.l2_loss.to_bits(),
            )
        })
        .collect()
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (model, data) = small_image_model(1);
    let mut full = Trainer::new(model.clone(), train_cfg(4)).unwrap();
    let full_hist = trajectory(full.fit(&data, Some(&data), |_| Ok(())).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.ffl");
    let mut first = Trainer::new(model.clone(), train_cfg(2)).unwrap();
    first.fit(&data, Some(&data), |_| Ok(())).unwrap();
    save_checkpoint(&first.checkpoint("arch"), &path).unwrap();

    let ckpt = load_checkpoint::<f64>(&path).unwrap();
    let (fresh, _) = small_image_model(99);
    let mut resumed = Trainer::restore(fresh, train_cfg(4), &ckpt, "arch").unwrap();
    let resumed_hist = trajectory(resumed.fit(&data, Some(&data), |_| Ok(())).unwrap());
    assert_eq!(full_hist, resumed_hist);

    for ((n, a), (_, b)) in full
        .model
        .named_params()
        .iter()
        .zip(resumed.model.named_params().iter())
    {
        assert_eq!(a, b, "{n}");
    }
    let (other, _) = small_image_model(1);
    assert!(matches!(
        Trainer::restore(other, train_cfg(4), &ckpt, "different"),
        Err(Error::Config { .. })
    ));
}

#[test]
fn checkpoint_bytes_round_trip() {
    let (model, data) = small_image_model(2);
    let mut t = Trainer::new(model, train_cfg(1)).unwrap();
    t.fit(&data, None, |_| Ok(())).unwrap();
    let ck = t.checkpoint("echo");
    let bytes = ck.to_bytes();
    let back = fractalflow::data::Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(fractalflow::data::Checkpoint::<f64>::from_bytes(&trailing).is_err());
    assert!(fractalflow::data::Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(fractalflow::data::Checkpoint::<f32>::from_bytes(&bytes).is_err());
}

fn config_error(text: &str, dir: &std::path::Path) -> String {
    match RunConfig::from_toml(text, dir) {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let moons = "[model]\nvariant = \"ldanf\"\n[model.prior]\nkind = \"grid-gmm-lda\"\n[data]\ndataset = \"moons\"\n";
    assert!(RunConfig::from_toml(moons, dir.path()).is_ok());
    assert_eq!(
        config_error(
            "[model]\nvariant = \"realnvp\"\n[data]\ndataset = \"mnist\"\ntrain_path = \"nope\"\n",
            dir.path()
        ),
        "data.train_path"
    );
    assert_eq!(
        config_error(&moons.replace("ldanf", "resnet"), dir.path()),
        "model.variant"
    );
    assert_eq!(
        config_error(&format!("{moons}[train]\nlr = -1.0\n"), dir.path()),
        "train.lr"
    );
    assert_eq!(
        config_error(&format!("{moons}[train]\nbogus = 1\n"), dir.path()),
        "train.bogus"
    );
    assert_eq!(
        config_error(&moons.replace("grid-gmm-lda", "dirichlet"), dir.path()),
        "model.prior.kind"
    );
    let cfg = RunConfig::from_toml(
        "[model]\nvariant = \"ldafnf\"\n[data]\ndataset = \"moons\"\n",
        dir.path(),
    )
    .unwrap();
    match cfg.model.validate([2, 1, 1]) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "model.fractal_schedule"),
        other => panic!("{other:?}"),
    }
    assert_eq!(config_error("[model\n", dir.path()), "config");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_round_trip_any_seed(p in any::<u8>(), seed in any::<u64>()) {
        let x = dequantize::<f32, _>(&[p], [1, 1, 1], &mut rng(seed)).unwrap();
        let v = x.data()[0];
        prop_assert!(v >= p as f32 && v < p as f32 + 1.0);
        prop_assert_eq!(postprocess(&preprocess(&x).unwrap().0), vec![p]);
    }

    #[test]
    fn preprocess_log_det_is_additive(vals in prop::collection::vec(0.0f64..255.99, 1..12)) {
        let n = vals.len();
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, n], &vals).unwrap();
        let (_, ld) = preprocess(&x).unwrap();
        let want: f64 = vals.iter().map(|&v| preprocess_logdet_element(v)).sum();
        prop_assert!((ld.data()[0] - want).abs() < 1e-9);
    }
}
