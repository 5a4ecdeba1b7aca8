//! Named finite-difference checks for every differentiable operation and the
//! whole network, run in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bcn::{bcn_forward, bcn_level, BcnConfig, DboPlacement, LEVELS};
use crate::bilateral::{dbo, dbo_full, DboParams};
use crate::error::Result;
use crate::mfrm::{mfrm_forward, refine, MfrmConfig};
use crate::model::ModelConfig;
use crate::params::{ModelParams, ParamVars};
use crate::supervision::{loss_patch, loss_patch_material, mse, supervise, BatchTargets, HeadsConfig, PatchMode, SupervisionTargets};
use crate::tensor::gradcheck::{gradcheck_multi, Coords, GradcheckReport};
use crate::tensor::{ConvSpec, Tape, Tensor, Var};

/// Maximum relative error accepted by [`run`].
pub const TOLERANCE: f64 = 1e-3;

const EPS: f64 = 1e-6;

pub struct Check {
    pub name: &'static str,
    run: fn() -> Result<GradcheckReport>,
}

impl Check {
    pub fn run(&self) -> Result<GradcheckReport> {
        (self.run)()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values in `±[0.1, 1]`, away from the ReLU kink.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t: Tensor<f64> = Tensor::uniform(shape.to_vec(), 0.1, 1.0, &mut rng(seed));
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        if i % 2 == 1 {
            *v = -*v;
        }
    }
    t
}

/// Scalar loss `Σ out · W` with a fixed random projection `W`.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(tape.shape(out).to_vec(), -1.0, 1.0, &mut rng(seed));
    let w = tape.constant(w);
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

fn single(
    input: Tensor<f64>,
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Result<GradcheckReport> {
    gradcheck_multi(
        |tape, v| {
            let out = f(tape, v[0])?;
            project(tape, out, 99)
        },
        &[input],
        EPS,
        Coords::All,
    )
}

fn check_conv2d() -> Result<GradcheckReport> {
    let spec = ConvSpec::new(2, 3, 3)?;
    let mut r = rng(1);
    let x = Tensor::uniform([2, 2, 5, 4], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(spec.weight_shape(), -1.0, 1.0, &mut r);
    let b = Tensor::uniform([3], -1.0, 1.0, &mut r);
    gradcheck_multi(
        |tape, v| {
            let out = tape.conv2d(v[0], &spec, v[1], v[2])?;
            project(tape, out, 2)
        },
        &[x, w, b],
        EPS,
        Coords::All,
    )
}

fn check_relu() -> Result<GradcheckReport> {
    single(away_from_zero(&[1, 2, 3, 3], 3), |t, x| t.relu(x))
}

fn check_sigmoid() -> Result<GradcheckReport> {
    single(Tensor::uniform([1, 2, 3, 3], -4.0, 4.0, &mut rng(4)), |t, x| t.sigmoid(x))
}

fn check_softmax() -> Result<GradcheckReport> {
    single(Tensor::uniform([2, 4, 3, 2], -2.0, 2.0, &mut rng(5)), |t, x| t.softmax_channel(x))
}

fn check_maxpool2() -> Result<GradcheckReport> {
    // a shuffled ramp has no ties
    let mut vals: Vec<f64> = (0..2 * 2 * 4 * 6).map(|i| i as f64 * 0.1).collect();
    rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut rng(6));
    single(Tensor::new([2, 2, 4, 6], vals)?, |t, x| t.maxpool2(x))
}

fn check_avgpool() -> Result<GradcheckReport> {
    single(Tensor::uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng(7)), |t, x| t.avgpool(x, 2))
}

fn check_arith() -> Result<GradcheckReport> {
    let mut r = rng(8);
    let a = Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, &mut r);
    let c = Tensor::uniform([1, 1, 3, 3], -1.0, 1.0, &mut r);
    gradcheck_multi(
        |tape, v| {
            let s = tape.add(v[0], v[1])?;
            let d = tape.sub(s, v[1])?;
            let m = tape.mul(d, v[0])?;
            let m = tape.affine(m, 0.5, 0.25)?;
            let out = tape.concat_channels(&[m, v[2], v[0]])?;
            let p = project(tape, out, 9)?;
            let extra = tape.mean(v[1])?;
            tape.add(p, extra)
        },
        &[a, b, c],
        EPS,
        Coords::All,
    )
}

fn check_dbo() -> Result<GradcheckReport> {
    let p = DboParams::range_only(1.0);
    single(Tensor::uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng(10)), move |t, x| dbo(t, x, &p))
}

fn check_dbo_full() -> Result<GradcheckReport> {
    let p = DboParams {
        window: 5,
        ..DboParams::full(0.7, 1.3)
    };
    single(Tensor::uniform([1, 2, 5, 5], -1.0, 1.0, &mut rng(11)), move |t, x| dbo_full(t, x, &p))
}

fn check_refine() -> Result<GradcheckReport> {
    let mut r = rng(12);
    let f = Tensor::uniform([1, 2, 5, 5], -1.0, 1.0, &mut r);
    let logits = Tensor::uniform([1, 9, 5, 5], -2.0, 2.0, &mut r);
    gradcheck_multi(
        |tape, v| {
            let k = tape.softmax_channel(v[1])?;
            let out = refine(tape, v[0], k)?;
            project(tape, out, 13)
        },
        &[f, logits],
        EPS,
        Coords::All,
    )
}

fn check_losses() -> Result<GradcheckReport> {
    let mut r = rng(14);
    let p = Tensor::uniform([1, 1, 4, 4], 0.05, 0.95, &mut r);
    let refl = Tensor::uniform([1, 3, 4, 4], 0.05, 0.95, &mut r);
    let logits = Tensor::uniform([1, 5, 4, 4], -2.0, 2.0, &mut r);
    let t_depth = Tensor::uniform([1, 1, 4, 4], 0.0, 1.0, &mut r);
    let t_refl = Tensor::uniform([1, 3, 4, 4], 0.0, 1.0, &mut r);
    let t_patch = Tensor::from_fn([1, 1, 4, 4], |i| (i % 2) as f64);
    let t_class = Tensor::from_fn([1, 1, 4, 4], |i| (i % 5) as f64);
    gradcheck_multi(
        |tape, v| {
            let (td, tr, tp, tc) = (
                tape.constant(t_depth.clone()),
                tape.constant(t_refl.clone()),
                tape.constant(t_patch.clone()),
                tape.constant(t_class.clone()),
            );
            let a = mse(tape, v[0], td)?;
            let b = mse(tape, v[1], tr)?;
            let c = loss_patch(tape, v[0], tp)?;
            let probs = tape.softmax_channel(v[2])?;
            let d = loss_patch_material(tape, probs, tc)?;
            let s = tape.add(a, b)?;
            let s = tape.add(s, c)?;
            tape.add(s, d)
        },
        &[p, refl, logits],
        EPS,
        Coords::All,
    )
}

fn small_bcn() -> BcnConfig {
    BcnConfig {
        input_size: 8,
        stem_channels: 2,
        level_channels: [[2, 3, 2], [2, 2, 3], [3, 2, 2]],
        dbo: DboParams::range_only(1.0),
        dbo_placement: DboPlacement::Input,
    }
}

/// Checks every parameter and the input of a small BCN plus MFRM stack.
fn check_bcn_mfrm() -> Result<GradcheckReport> {
    let bcn = small_bcn();
    let mfrm = MfrmConfig {
        compressed_channels: 2,
        kernel_size: 3,
        encoder_kernel: 3,
    };
    let mut specs = bcn.param_specs();
    specs.extend(mfrm.param_specs(&bcn));
    let params = ModelParams::<f64>::init_uniform(&specs, 15);
    let names: Vec<String> = params.names().cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = vec![Tensor::uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng(16))];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    gradcheck_multi(
        |tape, v| {
            let vars = ParamVars::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let levels = bcn_forward(tape, v[0], &vars, &bcn)?;
            let fused = mfrm_forward(tape, &levels, &vars, &bcn, &mfrm)?;
            project(tape, fused, 17)
        },
        &inputs,
        EPS,
        Coords::All,
    )
}

fn check_level() -> Result<GradcheckReport> {
    let bcn = small_bcn();
    let params = ModelParams::<f64>::init_uniform(&bcn.param_specs(), 18);
    let names: Vec<String> = params.names().cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = vec![Tensor::uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng(19))];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    gradcheck_multi(
        |tape, v| {
            let vars = ParamVars::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let layers = bcn.bind_level(&vars, 0)?;
            let out = bcn_level(tape, v[0], &layers, &bcn)?;
            project(tape, out, 20)
        },
        &inputs,
        EPS,
        Coords::All,
    )
}

/// The tiny network end to end through the training loss, on a sampled
/// subset of parameter coordinates.
fn check_model() -> Result<GradcheckReport> {
    let model = ModelConfig {
        bcn: BcnConfig {
            input_size: 32,
            stem_channels: 8,
            level_channels: [[8, 8, 8]; LEVELS],
            ..small_bcn()
        },
        mfrm: MfrmConfig {
            compressed_channels: 4,
            kernel_size: 3,
            encoder_kernel: 3,
        },
        heads: HeadsConfig {
            hidden: vec![8, 4],
            patch_mode: PatchMode::Binary,
        },
    };
    let params: ModelParams<f64> = model.init(21)?;
    let names: Vec<String> = params.names().cloned().collect();
    let image = Tensor::uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng(22));
    let mut r = rng(23);
    let targets = SupervisionTargets {
        depth: Tensor::uniform([1, 1, 4, 4], 0.0, 1.0, &mut r),
        reflection: Tensor::zeros([1, 3, 4, 4]),
        patch: Tensor::full([1, 1, 4, 4], 1.0),
    };
    let batch: BatchTargets<f64> = BatchTargets::stack(&[&targets])?;
    let mut inputs = vec![image];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    gradcheck_multi(
        |tape, v| {
            let vars = ParamVars::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
            let heads = model.forward(tape, v[0], &vars)?;
            Ok(supervise(tape, &heads, &batch, PatchMode::Binary)?.0)
        },
        &inputs,
        EPS,
        Coords::Sample { count: 400, seed: 24 },
    )
}

pub fn all() -> Vec<Check> {
    macro_rules! check {
        ($name:literal, $f:ident) => {
            Check { name: $name, run: $f }
        };
    }
    vec![
        check!("conv2d", check_conv2d),
        check!("relu", check_relu),
        check!("sigmoid", check_sigmoid),
        check!("softmax", check_softmax),
        check!("maxpool2", check_maxpool2),
        check!("avgpool", check_avgpool),
        check!("arith", check_arith),
        check!("dbo", check_dbo),
        check!("dbo_full", check_dbo_full),
        check!("refine", check_refine),
        check!("losses", check_losses),
        check!("bcn_level", check_level),
        check!("bcn_mfrm", check_bcn_mfrm),
        check!("model", check_model),
    ]
}

pub fn names() -> Vec<&'static str> {
    all().iter().map(|c| c.name).collect()
}

pub fn find(name: &str) -> Option<Check> {
    all().into_iter().find(|c| c.name == name)
}
