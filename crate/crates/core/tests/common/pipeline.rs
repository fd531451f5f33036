//! Finite-difference check of a relation loss through the whole student
//! path: encoder, projection and prediction heads, overlap sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfrel::augmentation::{make_views, AugmentConfig, ViewBatch};
use selfrel::heads::{HeadsConfig, Pass};
use selfrel::losses::{total_loss, Center, LossConfig};
use selfrel::model::{Model, ModelConfig};
use selfrel::numerics::{gradcheck, Array, Bound, ParamSet, Tape};
use selfrel::vit::VitConfig;

fn tiny() -> (Model, ParamSet<f64>, ParamSet<f64>) {
    let cfg = ModelConfig {
        vit: VitConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 6,
            depth: 1,
            attention_heads: 2,
            mlp_ratio: 2,
            use_positional_embedding: true,
        },
        heads: HeadsConfig {
            prototypes: 5,
            hidden: 6,
            bottleneck: 3,
            asymmetric: true,
        },
    };
    let (m, mut s) = Model::new::<f64>(&cfg, 3).unwrap();
    // init-scale weights and identity norm affines leave many gradients near
    // the finite-difference noise floor
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for a in s.params.arrays_mut() {
        let noise: Vec<f64> = (0..a.len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let scale = if a.rank() == 2 { 10.0 } else { 1.0 };
        *a = Array::new(a.shape(), a.data().iter().zip(&noise).map(|(v, n)| v * scale + if a.rank() == 1 { *n } else { 0.0 }).collect()).unwrap();
    }
    (m, s.params, s.buffers)
}

fn stack(views: &[&Array<f32>]) -> Array<f64> {
    let mut shape = vec![views.len()];
    shape.extend_from_slice(views[0].shape());
    Array::new(&shape, views.iter().flat_map(|v| v.data().iter().map(|&x| x as f64)).collect()).unwrap()
}

fn batch(seed: u64) -> Vec<ViewBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = AugmentConfig {
        global_size: 16,
        local_size: 8,
        n_local: 2,
        min_side: 4,
        // large crops so the pixel loss sees real overlaps
        global_scale: (0.6, 1.0),
        local_scale: (0.2, 0.4),
        ..AugmentConfig::default()
    }
    .without_photometrics();
    (0..2)
        .map(|i| {
            let img = Array::new(&[3, 20, 20], (0..1200).map(|_| rng.gen::<f32>()).collect()).unwrap();
            make_views(&img, &aug, seed, i).unwrap()
        })
        .collect()
}

pub struct SeedResult {
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst_param: String,
    /// Whether any pixel-loss pair overlapped (recorded only for `"pixel"`).
    pub overlaps: bool,
}

/// Relative gradient error of the `"pixel"` or `"channel"` loss for 5 seeds.
pub fn check(which: &str) -> Vec<SeedResult> {
    let (model, params, buffers) = tiny();
    let mut out = Vec::new();
    for seed in 0..5u64 {
        let views = batch(100 + seed);
        let globals = stack(&views.iter().flat_map(|v| v.globals().iter().map(|g| &g.pixels)).collect::<Vec<_>>());
        let locals = stack(&views.iter().flat_map(|v| v.locals().iter().map(|g| &g.pixels)).collect::<Vec<_>>());
        let geoms: Vec<Vec<_>> = views.iter().map(|v| v.views.iter().map(|x| x.geometry).collect()).collect();
        let cfg = LossConfig {
            relation_heads: 3,
            gg_grid: 3,
            lg_grid: 2,
            enable_image: false,
            enable_pixel: which == "pixel",
            enable_channel: which == "channel",
            ..LossConfig::default()
        };

        // teacher targets from perturbed parameters, computed once and detached
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tparams = params.clone();
        for a in tparams.arrays_mut() {
            let noise: Vec<f64> = (0..a.len()).map(|_| rng.gen_range(-0.05..0.05)).collect();
            *a = Array::new(a.shape(), a.data().iter().zip(&noise).map(|(v, n)| v + n).collect()).unwrap();
        }
        let tape = Tape::new();
        let tb = Bound::new(&tape, &tparams, false);
        let teacher = model
            .teacher_forward(&Pass::new(&tape, &tb, &buffers, false), &globals, cfg.branches())
            .unwrap();
        let center = Center::zeros(5);

        let mask = std::cell::RefCell::new(Vec::new());
        let r = gradcheck::check(params.arrays(), 1e-5, |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let pass = Pass::new(tape, &bound, &buffers, true);
            let (g, l) = model.student_forward(&pass, &globals, Some(&locals), cfg.branches())?;
            let (loss, report) = total_loss(tape, &g, l.as_ref(), &teacher, &geoms, &center, &cfg)?;
            *mask.borrow_mut() = report.pixel_mask;
            Ok(loss)
        })
        .unwrap();
        let overlaps = mask.borrow().iter().any(|&m| m);
        out.push(SeedResult {
            seed,
            max_rel_error: r.max_rel_error,
            worst_param: params.iter().nth(r.worst_input).unwrap().0.to_string(),
            overlaps,
        });
    }
    out
}

