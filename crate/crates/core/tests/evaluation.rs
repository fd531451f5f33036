mod common;

use selfrel::augmentation::{sample_crop, view_rng, CropGeometry, CropKind};
use selfrel::config::TrainConfig;
use selfrel::evaluation::*;
use selfrel::numerics::Array;
use selfrel::relation::overlap_rect;
use selfrel::trainer::Trainer;
use selfrel::Error;

use common::{tiny_config, tiny_data};

fn random_model(cfg: TrainConfig) -> Trainer<f64> {
    Trainer::<f64>::new(cfg, 1).unwrap()
}

#[test]
fn identical_views_have_zero_difference() {
    let tr = random_model(tiny_config());
    let (train, _) = tiny_data(2);
    let aug = tr.cfg.augment.clone();
    for i in 0..4 {
        let (v, g) = sample_crop(&train.images[i], CropKind::Global, &aug, &mut view_rng(3, i as u64, 0)).unwrap();
        let f = tr.model.vit.encode(&tr.state.teacher.params, &v.cast()).unwrap();
        let ov = overlap_rect(&g, &g, (3, 3)).unwrap();
        let (p, c) = view_pair_difference(&f, &f, &ov, 6).unwrap();
        assert!(p.abs() <= 1e-7 && c.abs() <= 1e-7, "{p} {c}");
    }
}

#[test]
fn swapping_views_gives_the_same_difference() {
    let tr = random_model(tiny_config());
    let (train, _) = tiny_data(2);
    let aug = tr.cfg.augment.clone();
    let mut checked = 0;
    for i in 0..8u64 {
        let img = &train.images[i as usize];
        let (va, ga) = sample_crop(img, CropKind::Global, &aug, &mut view_rng(9, i, 0)).unwrap();
        let (vb, gb) = sample_crop(img, CropKind::Global, &aug, &mut view_rng(9, i, 1)).unwrap();
        let (Some(ab), Some(ba)) = (overlap_rect(&ga, &gb, (3, 3)), overlap_rect(&gb, &ga, (3, 3))) else {
            continue;
        };
        let fa = tr.model.vit.encode(&tr.state.teacher.params, &va.cast()).unwrap();
        let fb = tr.model.vit.encode(&tr.state.teacher.params, &vb.cast()).unwrap();
        let x = view_pair_difference(&fa, &fb, &ab, 3).unwrap();
        let y = view_pair_difference(&fb, &fa, &ba, 3).unwrap();
        assert_eq!(x, y);
        checked += 1;
    }
    assert!(checked >= 4);
}

#[test]
fn random_encoder_has_positive_difference() {
    let tr = random_model(tiny_config());
    let (_, val) = tiny_data(2);
    let cfg = &tr.cfg;
    let rep = relation_difference(
        &tr.model,
        &tr.state.teacher.params,
        &val.images,
        6,
        0,
        &cfg.augment,
        cfg.loss.relation_heads,
        cfg.loss.gg_grid,
        &cfg.digest_hex(),
    )
    .unwrap();
    assert!(rep.pixel > 0.0 && rep.channel > 0.0, "{rep:?}");
    assert_eq!(rep.pairs, 6);
    assert!(rep.to_text().contains(&cfg.digest_hex()));

    // same inputs, same report
    let again = relation_difference(
        &tr.model,
        &tr.state.teacher.params,
        &val.images,
        6,
        0,
        &cfg.augment,
        cfg.loss.relation_heads,
        cfg.loss.gg_grid,
        &cfg.digest_hex(),
    )
    .unwrap();
    assert_eq!(rep, again);
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let (train, val) = tiny_data(4);
    let cfg = tiny_config();
    let mut tr = Trainer::<f32>::new(cfg, train.images.len()).unwrap();
    tr.step(&train.images).unwrap();
    let before = tr.to_container().to_bytes();
    evaluate_run(&tr, &train, &val).unwrap();
    export_relation_heatmap(
        &tr.model,
        &tr.state.teacher.params,
        &val.images[0],
        HeatmapQuery::Channel,
        &tempfile::tempdir().unwrap().path().join("h.png"),
    )
    .unwrap();
    assert_eq!(tr.to_container().to_bytes(), before);
}

#[test]
fn single_class_probe_is_perfect() {
    let x = Array::new(&[6, 2], (0..12).map(|i| i as f64).collect()).unwrap();
    let rep = fit_linear_probe(&x, &[0; 6], &x, &[0; 6], &ProbeConfig::default()).unwrap();
    assert_eq!(rep.accuracy, 1.0);
    assert_eq!(rep.classes, 1);
}

#[test]
fn separable_probe_and_determinism() {
    // two well separated clusters
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let y = i % 2;
        data.extend([y as f64 * 4.0 + (i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()]);
        labels.push(y);
    }
    let x = Array::new(&[40, 2], data).unwrap();
    let a = fit_linear_probe(&x, &labels, &x, &labels, &ProbeConfig::default()).unwrap();
    let b = fit_linear_probe(&x, &labels, &x, &labels, &ProbeConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.accuracy, 1.0);
}

#[test]
fn probe_rejects_mismatched_inputs() {
    let x = Array::<f64>::zeros(&[4, 3]);
    let v = Array::<f64>::zeros(&[2, 3]);
    assert!(fit_linear_probe(&x, &[0, 1, 0], &v, &[0, 1], &ProbeConfig::default()).is_err());
    assert!(fit_linear_probe(&x, &[0, 1, 0, 1], &Array::zeros(&[2, 4]), &[0, 1], &ProbeConfig::default()).is_err());
}

#[test]
fn trained_probe_is_deterministic() {
    let (train, val) = tiny_data(4);
    let tr = random_model(tiny_config());
    let cfg = ProbeConfig::from_train(&tr.cfg);
    let a = linear_probe(&tr.model, &tr.state.teacher.params, &train, &val, &cfg).unwrap();
    let b = linear_probe(&tr.model, &tr.state.teacher.params, &train, &val, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.classes, 4);
}

fn no_position_model() -> Trainer<f64> {
    let mut cfg = tiny_config();
    cfg.set("vit.positional_embedding", "false").unwrap();
    random_model(cfg)
}

#[test]
fn constant_image_gives_a_uniform_heatmap() {
    let tr = no_position_model();
    let img = Array::full(&[3, 16, 16], 0.3);
    let (values, rows, cols) = heatmap_values(&tr.model, &tr.state.teacher.params, &img, HeatmapQuery::Pixel(5)).unwrap();
    assert_eq!((rows, cols), (4, 4));
    for v in &values {
        assert!((v - 1.0 / 16.0).abs() < 1e-12);
    }
    let rgb = render_heatmap(&values, rows, cols, HEATMAP_CELL);
    assert!(rgb.chunks(3).all(|px| px == rgb[..3].to_vec().as_slice()));
}

/// Row `i` of the single-head pixel relation, computed directly from the
/// encoder's tokens.
fn relation_row(f: &Array<f64>, i: usize) -> Vec<f64> {
    let (c, n) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
    let col = |j: usize| -> Vec<f64> { (0..c).map(|k| f.data()[k * n + j]).collect() };
    let q = col(i);
    let logits: Vec<f64> = (0..n)
        .map(|j| q.iter().zip(col(j)).map(|(a, b)| a * b).sum::<f64>() / (c as f64).sqrt())
        .collect();
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn pixel_heatmap_matches_relation_row() {
    let tr = random_model(tiny_config());
    let (train, _) = tiny_data(1);
    let img = &train.images[0];
    let g = CropGeometry::identity(16, CropKind::Global);
    let img = selfrel::augmentation::render_crop(img, &g);
    let f = tr.model.vit.encode(&tr.state.teacher.params, &img.cast()).unwrap();
    for i in [0, 7, 15] {
        let (values, _, _) = heatmap_values(&tr.model, &tr.state.teacher.params, &img, HeatmapQuery::Pixel(i)).unwrap();
        let want = relation_row(&f.patch_features, i);
        for (a, b) in values.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        // the queried cell shows the self-relation A[i, i]
        assert!((values[i] - want[i]).abs() < 1e-12);
    }
}

#[test]
fn heatmap_png_sizes_and_golden() {
    let tr = random_model(tiny_config());
    let (train, _) = tiny_data(1);
    let img = selfrel::augmentation::render_crop(&train.images[0], &CropGeometry::identity(16, CropKind::Global));
    let dir = tempfile::tempdir().unwrap();
    let pixel = dir.path().join("pixel.png");
    let channel = dir.path().join("channel.png");
    export_relation_heatmap(&tr.model, &tr.state.teacher.params, &img, HeatmapQuery::Pixel(3), &pixel).unwrap();
    export_relation_heatmap(&tr.model, &tr.state.teacher.params, &img, HeatmapQuery::Channel, &channel).unwrap();
    let p = image::open(&pixel).unwrap();
    assert_eq!((p.width(), p.height()), (4 * HEATMAP_CELL as u32, 4 * HEATMAP_CELL as u32));
    let c = image::open(&channel).unwrap();
    assert_eq!((c.width(), c.height()), (12 * 4, 12 * 4));

    let golden = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/pixel_heatmap.png");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::copy(&pixel, &golden).unwrap();
    }
    let want = image::open(&golden).unwrap().to_rgb8();
    assert_eq!(p.to_rgb8(), want);
}

#[test]
fn heatmap_errors() {
    let tr = random_model(tiny_config());
    let img = Array::full(&[3, 16, 16], 0.5);
    assert!(matches!(
        heatmap_values(&tr.model, &tr.state.teacher.params, &img, HeatmapQuery::Pixel(16)),
        Err(Error::InvalidInput(_))
    ));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("missing_dir/out.png");
    assert!(export_relation_heatmap(&tr.model, &tr.state.teacher.params, &img, HeatmapQuery::Channel, &bad).is_err());
}

#[test]
fn hot_colour_ramp() {
    assert_eq!(hot_colour(0.0), [0, 0, 0]);
    assert_eq!(hot_colour(1.0), [255, 255, 255]);
    assert_eq!(hot_colour(0.5), [255, 128, 0]);
}

fn axes(specs: &[&str]) -> Vec<Axis> {
    specs.iter().map(|s| Axis::parse(s).unwrap()).collect()
}

#[test]
fn ablation_cell_counts() {
    let base = TrainConfig::default();
    assert_eq!(ablation_cells(&base, &[]).unwrap().len(), 1);
    let m = ablation_cells(&base, &axes(&["M=1,3,6,12,16"])).unwrap();
    assert_eq!(m.len(), 5);
    let temps = ablation_cells(&base, &axes(&["temps=0.5:0.5,0.5:0.1,0.5:0.01,1.0:0.1,0.1:0.1"])).unwrap();
    assert_eq!(temps.len(), 5);
    assert!(temps.iter().any(|(_, c)| c.digest() == base.digest()));
    // the default cell is shared by both axes and appears once
    let both = ablation_cells(&base, &axes(&["M=1,3,6,12,16", "temps=0.5:0.5,0.5:0.1,0.5:0.01,1.0:0.1,0.1:0.1"])).unwrap();
    assert_eq!(both.len(), 9);
    let losses = ablation_cells(&base, &axes(&["losses=I,I+p,I+c,I+p+c"])).unwrap();
    assert_eq!(losses.len(), 4);
    assert!(!losses[0].1.loss.enable_pixel && losses[0].1.loss.enable_image);
}

#[test]
fn invalid_axes_are_config_errors() {
    assert!(matches!(Axis::parse("depth=1,2"), Err(Error::Config(_))));
    assert!(matches!(Axis::parse("M"), Err(Error::Config(_))));
    let base = TrainConfig::default();
    assert!(matches!(ablation_cells(&base, &axes(&["M=5"])), Err(Error::Config(_))));
    assert!(matches!(ablation_cells(&base, &axes(&["temps=0.5"])), Err(Error::Config(_))));
    assert!(matches!(ablation_cells(&base, &axes(&["losses=I+x"])), Err(Error::Config(_))));
}

#[test]
fn ablation_table_has_one_row_per_cell() {
    let rows = vec![
        CellResult {
            label: "a".into(),
            digest: "d1".into(),
            pixel: vec![1.0, 3.0],
            channel: vec![2.0, 2.0],
            probe: vec![0.5, 0.7],
        },
        CellResult {
            label: "b".into(),
            digest: "d2".into(),
            pixel: vec![1.0],
            channel: vec![1.0],
            probe: vec![1.0],
        },
    ];
    let t = ablation_table(&rows);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines.len(), 3);
    let a: Vec<&str> = lines[1].split('\t').collect();
    assert_eq!(a[..2], ["a", "d1"]);
    assert_eq!(a[2].parse::<f64>().unwrap(), 2.0);
    assert!((a[3].parse::<f64>().unwrap() - 2f64.sqrt()).abs() < 1e-12);
    assert!((a[6].parse::<f64>().unwrap() - 0.6).abs() < 1e-12);
}

#[test]
fn suite_default_cell_matches_a_plain_run() {
    let (train, val) = tiny_data(2);
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    let mut saved = Vec::new();
    let rows = ablation_suite::<f32>(&cfg, &[], &[4], &train.images, &train, &val, |_, _, tr| {
        saved.push(tr.to_container().to_bytes());
        Ok(())
    })
    .unwrap();
    assert_eq!(rows.len(), 1);
    let mut single = cfg.clone();
    single.seed = 4;
    let plain = train_run::<f32>(&single, &train.images, |_, _| Ok(())).unwrap();
    assert_eq!(saved, vec![plain.to_container().to_bytes()]);
    // rows carry the cell digest; the seed is a separate column of runs
    assert_eq!(rows[0].digest, cfg.digest_hex());
}
