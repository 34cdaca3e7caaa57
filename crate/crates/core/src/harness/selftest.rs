//! Invariant checks runnable from the command line.
//!
//! Each [`Property`] is a named closure returning `Err(reason)` on failure.
//! The gradient checks are built from [`gradient_property`], which takes the
//! analytic gradient as an argument so a broken formula can be plugged in and
//! seen to fail.

use rand::Rng;

use crate::data::{dirichlet_partition, generate_base, GeneratorSpec, SyntheticParams};
use crate::fl::{
    aggregate, client_train_stream, local_train, run_training, ClientReturn, ModelConfig,
    ServerState, TrainConfig,
};
use crate::nn::{
    balanced_cross_entropy, cross_entropy, shannon_entropy, softmax, Extractor, Head,
    Parameterized, TwoHeadModel,
};
use crate::rng::RngStream;
use crate::tta::{
    em_loss, fa_loss, optimize_e, the_loss, update_history, AdaptConfig, EnsembleState,
    HistoryState, LossMode, TheInputs,
};

pub type Check = Box<dyn Fn() -> Result<(), String> + Send + Sync>;

pub struct Property {
    pub name: String,
    pub check: Check,
}

impl Property {
    pub fn new(
        name: impl Into<String>,
        check: impl Fn() -> Result<(), String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            check: Box::new(check),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub outcome: Result<(), String>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }

    pub fn line(&self) -> String {
        match &self.outcome {
            Ok(()) => format!("PASS  {}", self.name),
            Err(why) => format!("FAIL  {}: {why}", self.name),
        }
    }
}

pub fn run_properties(props: &[Property]) -> Vec<Verdict> {
    props
        .iter()
        .map(|p| Verdict {
            name: p.name.clone(),
            outcome: (p.check)(),
        })
        .collect()
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;
pub const CONFIGS: usize = 100;

/// Compares `analytic` against central differences of `f` at `x`.
pub fn compare_gradient(
    f: &dyn Fn(&[f64]) -> f64,
    analytic: &[f64],
    x: &[f64],
) -> Result<(), String> {
    if analytic.len() != x.len() {
        return Err(format!(
            "gradient has {} entries, expected {}",
            analytic.len(),
            x.len()
        ));
    }
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + FD_STEP;
        let up = f(&p);
        p[i] = x[i] - FD_STEP;
        let down = f(&p);
        p[i] = x[i];
        let fd = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(f64::MIN_POSITIVE);
        if rel > GRAD_TOL && (a - fd).abs() > ABS_FLOOR {
            return Err(format!("coordinate {i}: analytic {a:e} vs numeric {fd:e}"));
        }
    }
    Ok(())
}

/// A function of a flat point together with a claimed gradient.
pub type ScalarFn = fn(&[f64], &[f64]) -> f64;
pub type GradFn = fn(&[f64], &[f64]) -> Vec<f64>;

/// Gradient check over [`CONFIGS`] random cases. `sample` draws
/// `(point, context)`; `f(point, context)` is the loss and `grad` the claimed
/// gradient in `point`.
pub fn gradient_property(
    name: &str,
    seed: u64,
    sample: fn(&mut RngStream) -> (Vec<f64>, Vec<f64>),
    f: ScalarFn,
    grad: GradFn,
) -> Property {
    Property::new(name, move || {
        let mut rng = RngStream::new(seed);
        for case in 0..CONFIGS {
            let (x, ctx) = sample(&mut rng);
            compare_gradient(&|p| f(p, &ctx), &grad(&x, &ctx), &x)
                .map_err(|e| format!("case {case}: {e}"))?;
        }
        Ok(())
    })
}

fn uniform(rng: &mut RngStream, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-s..s)).collect()
}

// Context layout for the classification losses: [label, counts...].
fn sample_logits(rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
    let c = rng.random_range(2..12);
    let z = uniform(rng, c, 5.0);
    let mut ctx = vec![rng.random_range(0..c) as f64];
    ctx.extend((0..c).map(|_| rng.random_range(1..50) as f64));
    (z, ctx)
}

fn counts(ctx: &[f64]) -> Vec<u64> {
    ctx[1..].iter().map(|&v| v as u64).collect()
}

pub fn ce_loss(z: &[f64], ctx: &[f64]) -> f64 {
    cross_entropy(z, ctx[0] as usize).expect("valid label").loss
}

pub fn ce_grad(z: &[f64], ctx: &[f64]) -> Vec<f64> {
    cross_entropy(z, ctx[0] as usize).expect("valid label").grad
}

fn bce_loss(z: &[f64], ctx: &[f64]) -> f64 {
    balanced_cross_entropy(z, ctx[0] as usize, &counts(ctx))
        .expect("valid")
        .loss
}

fn bce_grad(z: &[f64], ctx: &[f64]) -> Vec<f64> {
    balanced_cross_entropy(z, ctx[0] as usize, &counts(ctx))
        .expect("valid")
        .grad
}

fn ent_loss(z: &[f64], _: &[f64]) -> f64 {
    shannon_entropy(z).loss
}

fn ent_grad(z: &[f64], _: &[f64]) -> Vec<f64> {
    shannon_entropy(z).grad
}

// Two-head context: [dims (in, hidden, feat, classes), e, label, input...].
fn sample_two_head(rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
    let dims = [
        rng.random_range(1..5),
        rng.random_range(1..6),
        rng.random_range(1..5),
        rng.random_range(2..5),
    ];
    let model = two_head_from(&dims, None, rng);
    let mut ctx: Vec<f64> = dims.iter().map(|&d| d as f64).collect();
    ctx.push(rng.random_range(0.0..1.0));
    ctx.push(rng.random_range(0..dims[3]) as f64);
    ctx.extend(uniform(rng, dims[0], 2.0));
    (model.flatten(), ctx)
}

fn two_head_from(dims: &[usize; 4], flat: Option<&[f64]>, rng: &mut RngStream) -> TwoHeadModel {
    let mut m = TwoHeadModel::new(
        Extractor::init(&[dims[0], dims[1], dims[2]], rng).expect("valid dims"),
        Head::init(dims[2], dims[3], rng),
        Head::init(dims[2], dims[3], rng),
    )
    .expect("consistent");
    if let Some(p) = flat {
        m.assign_flat(p).expect("matching length");
    }
    m
}

fn two_head_parts(ctx: &[f64]) -> ([usize; 4], f64, usize, &[f64]) {
    let dims = [
        ctx[0] as usize,
        ctx[1] as usize,
        ctx[2] as usize,
        ctx[3] as usize,
    ];
    (dims, ctx[4], ctx[5] as usize, &ctx[6..])
}

fn two_head_loss(p: &[f64], ctx: &[f64]) -> f64 {
    let (dims, e, label, x) = two_head_parts(ctx);
    let m = two_head_from(&dims, Some(p), &mut RngStream::new(0));
    cross_entropy(&m.ensemble_logits(x, e).expect("dims"), label)
        .expect("label")
        .loss
}

fn two_head_grad(p: &[f64], ctx: &[f64]) -> Vec<f64> {
    let (dims, e, label, x) = two_head_parts(ctx);
    let m = two_head_from(&dims, Some(p), &mut RngStream::new(0));
    let mut g = m.zeros_like();
    m.accumulate_ensemble_grad(x, e, |z| cross_entropy(z, label), &mut g)
        .expect("dims");
    g.flatten()
}

// Ensemble-loss context: [mode, c, d, yg(c), yl(c), h(d), hg(d), hl(d)].
fn sample_ensemble(rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
    let c = rng.random_range(2..10);
    let d = rng.random_range(1..8);
    let mut ctx = vec![rng.random_range(0..4) as f64, c as f64, d as f64];
    ctx.extend(uniform(rng, 2 * c, 4.0));
    ctx.extend(uniform(rng, 3 * d, 3.0));
    (uniform(rng, 2, 2.0), ctx)
}

fn ensemble_parts(ctx: &[f64]) -> (LossMode, [&[f64]; 5]) {
    let mode = [
        LossMode::Slw,
        LossMode::EmOnly,
        LossMode::FaOnly,
        LossMode::FixedHalf,
    ][ctx[0] as usize];
    let c = ctx[1] as usize;
    let d = ctx[2] as usize;
    let v = &ctx[3..];
    (
        mode,
        [
            &v[..c],
            &v[c..2 * c],
            &v[2 * c..2 * c + d],
            &v[2 * c + d..2 * c + 2 * d],
            &v[2 * c + 2 * d..2 * c + 3 * d],
        ],
    )
}

fn ens(a: &[f64]) -> EnsembleState {
    EnsembleState {
        a_g: a[0],
        a_l: a[1],
    }
}

fn the_inputs<'a>(p: &[&'a [f64]; 5]) -> TheInputs<'a> {
    TheInputs {
        global_logits: p[0],
        personal_logits: p[1],
        smoothed_feature: p[2],
        global_descriptor: p[3],
        local_descriptor: p[4],
    }
}

fn em_value(a: &[f64], ctx: &[f64]) -> f64 {
    let (_, p) = ensemble_parts(ctx);
    em_loss(p[0], p[1], &ens(a)).expect("dims").loss
}

fn em_grad(a: &[f64], ctx: &[f64]) -> Vec<f64> {
    let (_, p) = ensemble_parts(ctx);
    em_loss(p[0], p[1], &ens(a)).expect("dims").grad.to_vec()
}

fn fa_value(a: &[f64], ctx: &[f64]) -> f64 {
    let (_, p) = ensemble_parts(ctx);
    fa_loss(p[2], p[3], p[4], &ens(a)).expect("dims").loss
}

fn fa_grad(a: &[f64], ctx: &[f64]) -> Vec<f64> {
    let (_, p) = ensemble_parts(ctx);
    fa_loss(p[2], p[3], p[4], &ens(a))
        .expect("dims")
        .grad
        .to_vec()
}

fn the_value(a: &[f64], ctx: &[f64]) -> f64 {
    let (mode, p) = ensemble_parts(ctx);
    the_loss(&the_inputs(&p), &ens(a), mode).expect("dims").loss
}

fn the_grad(a: &[f64], ctx: &[f64]) -> Vec<f64> {
    let (mode, p) = ensemble_parts(ctx);
    the_loss(&the_inputs(&p), &ens(a), mode)
        .expect("dims")
        .grad
        .to_vec()
}

pub fn gradient_properties() -> Vec<Property> {
    vec![
        gradient_property(
            "gradient: cross_entropy",
            1,
            sample_logits,
            ce_loss,
            ce_grad,
        ),
        gradient_property(
            "gradient: balanced_cross_entropy",
            2,
            sample_logits,
            bce_loss,
            bce_grad,
        ),
        gradient_property(
            "gradient: shannon_entropy",
            3,
            sample_logits,
            ent_loss,
            ent_grad,
        ),
        gradient_property(
            "gradient: two-head backward",
            4,
            sample_two_head,
            two_head_loss,
            two_head_grad,
        ),
        gradient_property("gradient: em_loss", 5, sample_ensemble, em_value, em_grad),
        gradient_property("gradient: fa_loss", 6, sample_ensemble, fa_value, fa_grad),
        gradient_property(
            "gradient: the_loss (all modes)",
            7,
            sample_ensemble,
            the_value,
            the_grad,
        ),
    ]
}

fn check(cond: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(why())
    }
}

fn softmax_normalization() -> Result<(), String> {
    let mut rng = RngStream::new(11);
    for _ in 0..CONFIGS {
        let c = rng.random_range(1..20);
        let z = uniform(&mut rng, c, 50.0);
        let sum: f64 = softmax(&z).iter().sum();
        check((sum - 1.0).abs() <= 1e-12, || {
            format!("softmax sums to {sum}")
        })?;
        let h = shannon_entropy(&z).loss;
        check(h >= -1e-12 && h <= (c as f64).ln() + 1e-12, || {
            format!("entropy {h} outside [0, ln {c}]")
        })?;
    }
    Ok(())
}

/// Independent weighted mean over flattened parameters.
fn aggregation_oracle() -> Result<(), String> {
    let mut rng = RngStream::new(12);
    let model = ModelConfig {
        hidden_dims: vec![4],
        feature_dim: 3,
    };
    let server = ServerState::init(5, 3, &model, 0).map_err(|e| e.to_string())?;
    for _ in 0..20 {
        let returns: Vec<ClientReturn> = (0..5)
            .map(|k| {
                let mut ex = server.extractor.clone();
                let mut gh = server.global_head.clone();
                let ex_flat = uniform(&mut rng, ex.num_params(), 3.0);
                let gh_flat = uniform(&mut rng, gh.num_params(), 3.0);
                ex.assign_flat(&ex_flat).expect("len");
                gh.assign_flat(&gh_flat).expect("len");
                ClientReturn {
                    client_id: 4 - k,
                    extractor: ex,
                    global_head: gh,
                    local_descriptor: uniform(&mut rng, 3, 2.0),
                    num_samples: rng.random_range(1..100),
                }
            })
            .collect();
        let next = aggregate(&server, &returns).map_err(|e| e.to_string())?;
        let total: f64 = returns.iter().map(|r| r.num_samples as f64).sum();
        let expect = |get: &dyn Fn(&ClientReturn) -> Vec<f64>| -> Vec<f64> {
            let n = get(&returns[0]).len();
            (0..n)
                .map(|i| {
                    returns
                        .iter()
                        .map(|r| r.num_samples as f64 * get(r)[i])
                        .sum::<f64>()
                        / total
                })
                .collect()
        };
        let pairs = [
            (next.extractor.flatten(), expect(&|r| r.extractor.flatten())),
            (
                next.global_head.flatten(),
                expect(&|r| r.global_head.flatten()),
            ),
            (
                next.global_descriptor.clone().unwrap_or_default(),
                expect(&|r| r.local_descriptor.clone()),
            ),
        ];
        for (got, want) in pairs {
            check(got.len() == want.len(), || "length mismatch".into())?;
            for (g, w) in got.iter().zip(&want) {
                check((g - w).abs() <= 1e-12, || {
                    format!("aggregate {g} vs oracle {w}")
                })?;
            }
        }
    }
    Ok(())
}

fn partition_completeness() -> Result<(), String> {
    let params = SyntheticParams {
        num_classes: 5,
        input_dim: 3,
        ..SyntheticParams::default()
    };
    let spec = GeneratorSpec::synthetic(&params, 3).map_err(|e| e.to_string())?;
    let data = generate_base(&spec, 40).map_err(|e| e.to_string())?;
    for (seed, alpha) in [(0, 0.1), (1, 0.5), (2, 1.0), (3, 100.0)] {
        let p = dirichlet_partition(&data, 4, alpha, seed).map_err(|e| e.to_string())?;
        let mut seen = vec![0u32; data.len()];
        for idx in &p.client_indices {
            check(idx.len() >= params.num_classes + 2, || {
                format!("client with {} samples", idx.len())
            })?;
            for &i in idx {
                seen[i] += 1;
            }
        }
        check(seen.iter().all(|&c| c == 1), || {
            format!("alpha {alpha}: an index is missing or duplicated")
        })?;
        let hist_total: u64 = p.report.histograms.iter().flatten().sum();
        check(hist_total as usize == data.len(), || {
            "histograms do not sum to the pool size".into()
        })?;
    }
    Ok(())
}

fn symmetry_fixed_point() -> Result<(), String> {
    let mut rng = RngStream::new(13);
    for _ in 0..CONFIGS {
        let c = rng.random_range(2..10);
        let y = uniform(&mut rng, c, 4.0);
        let h = uniform(&mut rng, 3, 2.0);
        // descriptors mirrored around h
        let off = uniform(&mut rng, 3, 2.0);
        let hg: Vec<f64> = h.iter().zip(&off).map(|(a, b)| a + b).collect();
        let hl: Vec<f64> = h.iter().zip(&off).map(|(a, b)| a - b).collect();
        let inputs = TheInputs {
            global_logits: &y,
            personal_logits: &y,
            smoothed_feature: &h,
            global_descriptor: &hg,
            local_descriptor: &hl,
        };
        let e = optimize_e(&[inputs], &AdaptConfig::default()).map_err(|e| e.to_string())?;
        check((e - 0.5).abs() <= 1e-9, || format!("e* = {e}"))?;
    }
    Ok(())
}

fn ema_closed_form() -> Result<(), String> {
    let mut rng = RngStream::new(14);
    for _ in 0..20 {
        let alpha = rng.random_range(0.01..1.0);
        let start = uniform(&mut rng, 4, 3.0);
        let target = uniform(&mut rng, 4, 3.0);
        let mut hist = HistoryState::default();
        update_history(&mut hist, &start, alpha).map_err(|e| e.to_string())?;
        let n = rng.random_range(1..60);
        for _ in 0..n {
            update_history(&mut hist, &target, alpha).map_err(|e| e.to_string())?;
        }
        let decay = (1.0 - alpha).powi(n);
        for ((h, s), t) in hist
            .get()
            .unwrap_or_default()
            .iter()
            .zip(&start)
            .zip(&target)
        {
            let want = t + (s - t) * decay;
            check((h - want).abs() <= 1e-12, || {
                format!("history {h} vs closed form {want}")
            })?;
        }
    }
    Ok(())
}

fn single_client_is_centralized() -> Result<(), String> {
    let params = SyntheticParams {
        num_classes: 3,
        input_dim: 4,
        ..SyntheticParams::default()
    };
    let spec = GeneratorSpec::synthetic(&params, 5).map_err(|e| e.to_string())?;
    let data = generate_base(&spec, 20).map_err(|e| e.to_string())?;
    let model = ModelConfig {
        hidden_dims: vec![6],
        feature_dim: 4,
    };
    let cfg = TrainConfig {
        rounds: 3,
        local_epochs: 2,
        batch_size: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let fed = run_training(&[&data], &model, &cfg).map_err(|e| e.to_string())?;
    let init = ServerState::init(data.dim(), data.num_classes(), &model, cfg.seed)
        .map_err(|e| e.to_string())?;
    let central_cfg = TrainConfig {
        local_epochs: cfg.rounds * cfg.local_epochs,
        ..cfg.clone()
    };
    let central = local_train(
        &data,
        init.global_model(),
        &central_cfg,
        &mut client_train_stream(cfg.seed, 0),
    )
    .map_err(|e| e.to_string())?;
    let diff = fed
        .server
        .global_model()
        .flatten()
        .iter()
        .zip(central.flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(diff < 1e-9, || format!("max parameter difference {diff:e}"))
}

pub fn default_properties() -> Vec<Property> {
    let mut props = gradient_properties();
    props.push(Property::new(
        "softmax normalization and entropy bounds",
        softmax_normalization,
    ));
    props.push(Property::new(
        "aggregation equals weighted-mean oracle",
        aggregation_oracle,
    ));
    props.push(Property::new(
        "partition assigns every index once",
        partition_completeness,
    ));
    props.push(Property::new(
        "symmetric inputs keep e at 0.5",
        symmetry_fixed_point,
    ));
    props.push(Property::new(
        "history EMA matches closed form",
        ema_closed_form,
    ));
    props.push(Property::new(
        "single-client federation equals centralized SGD",
        single_client_is_centralized,
    ));
    props
}

/// Runs the default suite; returns the verdicts in order.
pub fn selftest() -> Vec<Verdict> {
    run_properties(&default_properties())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        for v in selftest() {
            assert!(v.passed(), "{}", v.line());
        }
    }

    fn wrong_ce_grad(z: &[f64], ctx: &[f64]) -> Vec<f64> {
        // sign of the label term flipped
        let mut g = softmax(z);
        g[ctx[0] as usize] += 1.0;
        g
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let bad = gradient_property("broken", 1, sample_logits, ce_loss, wrong_ce_grad);
        let v = run_properties(&[bad]);
        assert!(!v[0].passed());
        assert!(v[0].line().starts_with("FAIL"));
    }
}
