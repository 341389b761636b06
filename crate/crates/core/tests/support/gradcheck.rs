//! Finite-difference checks of every differentiable op, shared by the
//! gradient tests and the acceptance harness.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use inrinv_core::autodiff::{
    evaluate, evaluate_with_gradient, Graph, LayerShape, ParamLayout, ParamVars, ParamVector, Tensor, Var,
};
use inrinv_core::encoder::{cosine_distance_on_graph, load_encoder_files, EncoderHandle};
use inrinv_core::imaging::{AugmentParams, AugmentationConfig};
use inrinv_core::inr::{init_finer, render_on_graph, CoordinateGrid, INRSpec};
use inrinv_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-5;
pub const INSTANCES: usize = 20;
const STEP: f64 = 1e-6;
/// Coordinates probed per instance.
const SAMPLED: usize = 24;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.worst < TOLERANCE
    }
}

type Loss<'a> = Box<dyn Fn(&mut Graph, &ParamVars) -> Result<Var> + 'a>;

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()
}

fn single_block(rows: usize, cols: usize, values: Vec<f64>) -> ParamVector {
    let layout = Arc::new(ParamLayout::new(vec![LayerShape::new(rows, cols, false)]));
    ParamVector::from_values(layout, values).unwrap()
}

/// `Σ R ⊙ out` for a fixed random `R`, turning a tensor output into a scalar.
fn contract(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = g.constant(Tensor::new(r, c, uniform(&mut rng, r * c, 1.0))?);
    let prod = g.mul(out, weights)?;
    Ok(g.sum(prod))
}

/// Relative error between the reverse-mode gradient and central differences
/// on a random subset of coordinates.
fn check_instance(params: &ParamVector, loss: &Loss<'_>, rng: &mut ChaCha8Rng) -> f64 {
    let exact = evaluate_with_gradient(params, loss).unwrap().gradient;
    let scale = exact.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale + 1e-12;
    let n = params.len();
    let picks: Vec<usize> = if n <= SAMPLED {
        (0..n).collect()
    } else {
        (0..SAMPLED).map(|_| rng.random_range(0..n)).collect()
    };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in picks {
        let base = params.values()[i];
        probe.values_mut()[i] = base + STEP;
        let plus = evaluate(&probe, loss).unwrap();
        probe.values_mut()[i] = base - STEP;
        let minus = evaluate(&probe, loss).unwrap();
        probe.values_mut()[i] = base;
        let fd = (plus - minus) / (2.0 * STEP);
        let a = exact.values()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
    }
    worst
}

fn run(op: &'static str, seed: u64, mut instance: impl FnMut(&mut ChaCha8Rng, u64) -> (ParamVector, Loss<'static>)) -> OpCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in 0..INSTANCES {
        let (params, loss) = instance(&mut rng, seed ^ (k as u64) << 8);
        worst = worst.max(check_instance(&params, &loss, &mut rng));
    }
    OpCheck {
        op,
        instances: INSTANCES,
        worst,
    }
}

pub fn toy() -> &'static EncoderHandle {
    static H: OnceLock<EncoderHandle> = OnceLock::new();
    H.get_or_init(EncoderHandle::toy)
}

pub fn tiny_vit() -> &'static EncoderHandle {
    static H: OnceLock<EncoderHandle> = OnceLock::new();
    H.get_or_init(|| {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/tiny_vit/encoder.manifest");
        load_encoder_files(path).unwrap()
    })
}

/// `sin(ω(|u|+1)u)`, `u = zWᵀ + b`, differentiated in `z`, `W` and `b`.
pub fn finer_layer() -> OpCheck {
    run("finer layer", 1, |rng, seed| {
        let (n, fan_in, out) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..7));
        let omega = rng.random_range(1.0..30.0);
        let layout = Arc::new(ParamLayout::new(vec![
            LayerShape::new(out, fan_in, true),
            LayerShape::new(n, fan_in, false),
        ]));
        let values = uniform(rng, layout.total_len(), 1.0 / fan_in as f64);
        let params = ParamVector::from_values(layout, values).unwrap();
        let loss: Loss = Box::new(move |g, v| {
            let u = g.linear(v.weights[1], v.weights[0], v.biases[0])?;
            let y = g.finer(u, omega);
            contract(g, y, seed)
        });
        (params, loss)
    })
}

/// The full network rendered on a coordinate grid.
pub fn render() -> OpCheck {
    run("render", 2, |rng, seed| {
        let mut spec = INRSpec::with_size(rng.random_range(1..4), rng.random_range(2..7));
        spec.first_omega = rng.random_range(5.0..30.0);
        spec.hidden_omega = rng.random_range(5.0..30.0);
        let weights = init_finer(&spec, seed).unwrap();
        let grid = CoordinateGrid::new(rng.random_range(2..7), rng.random_range(2..7)).unwrap();
        let loss: Loss = Box::new(move |g, v| {
            let out = render_on_graph(g, &spec, v, &grid)?;
            contract(g, out, seed)
        });
        (weights.into_params(), loss)
    })
}

/// Color shift plus scale/shear resampling of an image.
pub fn augment() -> OpCheck {
    run("augmentation", 3, |rng, seed| {
        let (h, w) = (rng.random_range(4..10), rng.random_range(4..10));
        let params = single_block(h * w, 3, (0..h * w * 3).map(|_| rng.random::<f64>()).collect());
        let cfg = AugmentationConfig::default().with_seed(seed);
        let aug = AugmentParams::sample(&cfg, rng.random_range(0..cfg.count));
        let loss: Loss = Box::new(move |g, v| {
            let out = aug.on_graph(g, v.weights[0], h, w)?;
            contract(g, out, seed)
        });
        (params, loss)
    })
}

fn encoder_check(op: &'static str, seed: u64, handle: fn() -> &'static EncoderHandle) -> OpCheck {
    run(op, seed, move |rng, seed| {
        let n = rng.random_range(8..17);
        let params = single_block(n * n, 3, (0..n * n * 3).map(|_| rng.random::<f64>()).collect());
        let loss: Loss = Box::new(move |g, v| {
            let e = handle().image_on_graph(g, v.weights[0], n, n)?;
            contract(g, e, seed)
        });
        (params, loss)
    })
}

/// Built-in encoder, including the resize to its resolution.
pub fn toy_encoder() -> OpCheck {
    encoder_check("toy encoder", 4, toy)
}

/// Transformer image tower.
pub fn vit_encoder() -> OpCheck {
    encoder_check("vit encoder", 5, tiny_vit)
}

/// `1 − â·b̂` of two unnormalized vectors.
pub fn cosine_loss() -> OpCheck {
    run("cosine loss", 6, |rng, _| {
        let d = rng.random_range(2..33);
        let layout = Arc::new(ParamLayout::new(vec![LayerShape::new(1, d, false), LayerShape::new(1, d, false)]));
        let params = ParamVector::from_values(layout, uniform(rng, 2 * d, 1.0)).unwrap();
        let loss: Loss = Box::new(move |g, v| {
            let a = g.normalize_rows(v.weights[0]);
            let b = g.normalize_rows(v.weights[1]);
            cosine_distance_on_graph(g, a, b)
        });
        (params, loss)
    })
}

/// `(1 − ê·t) + β(1 − ê·i)` against fixed unit targets.
pub fn total_loss() -> OpCheck {
    run("total loss", 7, |rng, _| {
        let d = rng.random_range(2..33);
        let beta = rng.random_range(0.0..2.0);
        let unit = |rng: &mut ChaCha8Rng| {
            let v = uniform(rng, d, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let (t, i) = (unit(rng), unit(rng));
        let params = single_block(1, d, uniform(rng, d, 1.0));
        let loss: Loss = Box::new(move |g, v| {
            let e = g.normalize_rows(v.weights[0]);
            let t = g.constant(Tensor::row_vector(t.clone()));
            let i = g.constant(Tensor::row_vector(i.clone()));
            let align = cosine_distance_on_graph(g, e, t)?;
            let blend = cosine_distance_on_graph(g, e, i)?;
            let blend = g.scale(blend, beta);
            g.add(align, blend)
        });
        (params, loss)
    })
}

pub fn suite() -> Vec<OpCheck> {
    vec![
        finer_layer(),
        render(),
        augment(),
        toy_encoder(),
        vit_encoder(),
        cosine_loss(),
        total_loss(),
    ]
}
