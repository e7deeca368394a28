//! Release checks: finite-difference gradient checks for every op and model
//! family, no-future-leak tests, mechanism identities and metric oracles.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{causal_mask, masked_attention, masked_attention_backward, masked_attention_scaled, MultiHeadAttention, ScaleMode};
use crate::backtest::{annualized_return, downside_std, max_drawdown, return_std, sign_signal};
use crate::data::zscore_columns;
use crate::encoding::{add_pe, linear_embed, linear_embed_backward, sinusoidal_pe};
use crate::error::Result;
use crate::evaluation::{dm_statistic, oos_r2};
use crate::model::layers::{BlockDims, DecoderBlock, EncoderBlock};
use crate::model::{build_model, lag_returns, FfnAutoencoder, ModelConfig, ModelFamily};
use crate::tensor::{
    grad_check, layer_norm, layer_norm_backward, masked_mse, masked_softmax, matmul, matmul_backward, mse_loss,
    mse_loss_backward, relative_error, relu, relu_backward, softmax_backward, ParamStore, Tensor,
};
use crate::training::early_stopping;

/// Maximum relative error tolerated by the gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRAD_EPSILON: f64 = 1e-5;
/// Largest output change allowed at rows `<= t` when rows `> t` are perturbed.
pub const LEAK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub group: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(group: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            group,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(group: &'static str, name: impl Into<String>, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Check::new(group, name, passed, detail),
            Err(e) => Check::new(group, name, false, format!("error: {e}")),
        }
    }
}

type Forward = Box<dyn Fn(&[Tensor]) -> Result<Tensor> + Send + Sync>;
type Backward = Box<dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>> + Send + Sync>;

/// A differentiable function of its inputs with a hand-written backward pass.
pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub forward: Forward,
    /// Maps the output gradient to one gradient per input.
    pub backward: Backward,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries with magnitude in `[0.2, 1]`, away from ReLU's kink.
fn away_from_zero(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = r.random_range(0.2..1.0);
            if r.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

/// Checks `backward` against central differences of `Σ forward(x) ⊙ W` for a
/// fixed random `W`.
pub fn check_op(case: &OpCase) -> Check {
    let run = || -> Result<(bool, String)> {
        let out = (case.forward)(&case.inputs)?;
        let w = Tensor::uniform(out.rows(), out.cols(), 1.0, &mut rng(99));
        let loss = |xs: &[Tensor]| -> Result<f64> { Ok((case.forward)(xs)?.hadamard(&w)?.sum()) };
        let analytic = (case.backward)(&case.inputs, &w)?;
        let mut inputs = case.inputs.clone();
        let mut worst = 0.0_f64;
        let mut at = String::new();
        for (i, grad) in analytic.iter().enumerate() {
            for k in 0..inputs[i].len() {
                let orig = inputs[i].data()[k];
                inputs[i].data_mut()[k] = orig + GRAD_EPSILON;
                let plus = loss(&inputs)?;
                inputs[i].data_mut()[k] = orig - GRAD_EPSILON;
                let minus = loss(&inputs)?;
                inputs[i].data_mut()[k] = orig;
                let err = relative_error(grad.data()[k], (plus - minus) / (2.0 * GRAD_EPSILON));
                if err > worst {
                    worst = err;
                    at = format!(" at input {i}[{k}]");
                }
            }
        }
        Ok((worst <= GRAD_TOLERANCE, format!("max rel err {worst:.2e}{at}")))
    };
    Check::from_result("gradient", case.name.clone(), run())
}

/// Every primitive op with its backward pass.
pub fn op_cases() -> Vec<OpCase> {
    let mut r = rng(11);
    let causal4 = causal_mask(4);
    let mask_t = causal4.entries().clone();
    let observed = vec![true, false, true, true, true, false];
    let target = Tensor::uniform(3, 2, 1.0, &mut r);
    vec![
        OpCase {
            name: "matmul".into(),
            inputs: vec![Tensor::uniform(3, 4, 1.0, &mut r), Tensor::uniform(4, 2, 1.0, &mut r)],
            forward: Box::new(|x| matmul(&x[0], &x[1])),
            backward: Box::new(|x, dy| {
                let (da, db) = matmul_backward(&x[0], &x[1], dy)?;
                Ok(vec![da, db])
            }),
        },
        OpCase {
            name: "relu".into(),
            inputs: vec![away_from_zero(3, 4, &mut r)],
            forward: Box::new(|x| Ok(relu(&x[0]))),
            backward: Box::new(|x, dy| Ok(vec![relu_backward(&x[0], dy)?])),
        },
        OpCase {
            name: "masked_softmax".into(),
            inputs: vec![Tensor::uniform(4, 4, 2.0, &mut r)],
            forward: Box::new(move |x| masked_softmax(&x[0], &mask_t)),
            backward: Box::new({
                let mask = causal_mask(4).entries().clone();
                move |x, dy| Ok(vec![softmax_backward(&masked_softmax(&x[0], &mask)?, dy)?])
            }),
        },
        OpCase {
            name: "layer_norm".into(),
            inputs: vec![
                Tensor::uniform(3, 5, 1.0, &mut r),
                Tensor::uniform(1, 5, 1.0, &mut r),
                Tensor::uniform(1, 5, 1.0, &mut r),
            ],
            forward: Box::new(|x| Ok(layer_norm(&x[0], &x[1], &x[2], 1e-5)?.0)),
            backward: Box::new(|x, dy| {
                let (_, cache) = layer_norm(&x[0], &x[1], &x[2], 1e-5)?;
                let (dx, dg, db) = layer_norm_backward(&cache, dy)?;
                Ok(vec![dx, dg, db])
            }),
        },
        OpCase {
            name: "linear_embed".into(),
            inputs: vec![Tensor::uniform(4, 3, 1.0, &mut r), Tensor::uniform(3, 6, 1.0, &mut r)],
            forward: Box::new(|x| linear_embed(&x[0], &x[1])),
            backward: Box::new(|x, dy| {
                let (dx, dw) = linear_embed_backward(&x[0], &x[1], dy)?;
                Ok(vec![dx, dw])
            }),
        },
        OpCase {
            name: "add_positional_encoding".into(),
            inputs: vec![Tensor::uniform(4, 6, 1.0, &mut r)],
            forward: Box::new(|x| add_pe(&x[0], &sinusoidal_pe(4, 6)?)),
            backward: Box::new(|_, dy| Ok(vec![dy.clone()])),
        },
        OpCase {
            name: "masked_attention".into(),
            inputs: vec![
                Tensor::uniform(4, 3, 1.0, &mut r),
                Tensor::uniform(4, 3, 1.0, &mut r),
                Tensor::uniform(4, 3, 1.0, &mut r),
            ],
            forward: Box::new(|x| masked_attention(&x[0], &x[1], &x[2], &causal_mask(4))),
            backward: Box::new(|x, dy| {
                let (_, cache) = masked_attention_scaled(&x[0], &x[1], &x[2], &causal_mask(4), 3f64.sqrt())?;
                let (dq, dk, dv) = masked_attention_backward(&cache, dy)?;
                Ok(vec![dq, dk, dv])
            }),
        },
        OpCase {
            name: "mse_loss".into(),
            inputs: vec![Tensor::uniform(3, 2, 1.0, &mut r), Tensor::uniform(3, 2, 1.0, &mut r)],
            forward: Box::new(|x| Tensor::from_vec(1, 1, vec![mse_loss(&x[0], &x[1])?])),
            backward: Box::new(|x, dy| {
                let g = mse_loss_backward(&x[0], &x[1])?.scale(dy.get(0, 0));
                Ok(vec![g.clone(), g.scale(-1.0)])
            }),
        },
        OpCase {
            name: "masked_mse".into(),
            inputs: vec![Tensor::uniform(3, 2, 1.0, &mut r)],
            forward: Box::new({
                let (target, observed) = (target.clone(), observed.clone());
                move |x| Tensor::from_vec(1, 1, vec![masked_mse(&x[0], &target, &observed)?.0])
            }),
            backward: Box::new(move |x, dy| Ok(vec![masked_mse(&x[0], &target, &observed)?.1.scale(dy.get(0, 0))])),
        },
    ]
}

/// `matmul` with a deliberately wrong backward; the gradient check must fail
/// and name it.
pub fn corrupted_op_case() -> OpCase {
    let mut r = rng(12);
    OpCase {
        name: "matmul (corrupted backward fixture)".into(),
        inputs: vec![Tensor::uniform(3, 4, 1.0, &mut r), Tensor::uniform(4, 2, 1.0, &mut r)],
        forward: Box::new(|x| matmul(&x[0], &x[1])),
        backward: Box::new(|x, dy| {
            let (da, db) = matmul_backward(&x[0], &x[1], dy)?;
            Ok(vec![da.scale(1.5), db])
        }),
    }
}

/// Projection weights for a module output of the given shape.
fn projection(rows: usize, cols: usize) -> Tensor {
    Tensor::uniform(rows, cols, 1.0, &mut rng(98))
}

fn store_check(
    name: impl Into<String>,
    store: &mut ParamStore,
    f: impl FnMut(&mut ParamStore) -> Result<f64>,
) -> Check {
    let r = grad_check(store, GRAD_EPSILON, GRAD_TOLERANCE, f).map(|report| {
        let at = report
            .worst
            .as_ref()
            .map(|(p, k)| format!(" at {p}[{k}]"))
            .unwrap_or_default();
        (report.passed(), format!("max rel err {:.2e}{at}", report.max_rel_error))
    });
    Check::from_result("gradient", name, r)
}

fn dims(d_model: usize, heads: usize, lnf: bool) -> BlockDims {
    BlockDims {
        d_model,
        heads,
        latent_fraction: 0.7,
        scale: ScaleMode::HeadWidth,
        lnf,
        ln_epsilon: 1e-5,
    }
}

/// Attention, FFN and block modules, with their inputs treated as parameters.
pub fn module_checks() -> Vec<Check> {
    let mut checks = Vec::new();
    let (t, d) = (5, 8);
    let w = projection(t, d);

    let mut r = rng(21);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", d, 2, ScaleMode::HeadWidth, &mut r).expect("valid dims");
    let x = store.add("input.x", Tensor::uniform(t, d, 1.0, &mut r));
    let mask = causal_mask(t);
    checks.push(store_check("multi_head_self_attention", &mut store, |s| {
        s.zero_grads();
        let input = s.get(x).clone();
        let (out, cache) = mha.forward(s, &input, &input, &mask)?;
        let (dq, dkv) = mha.backward(s, &cache, &w)?;
        s.accumulate(x, &dq.add(&dkv)?)?;
        Ok(out.hadamard(&w)?.sum())
    }));

    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "cross", d, 2, ScaleMode::HeadWidth, &mut r).expect("valid dims");
    let xq = store.add("input.decoder", Tensor::uniform(t, d, 1.0, &mut r));
    let xkv = store.add("input.encoder", Tensor::uniform(t, d, 1.0, &mut r));
    checks.push(store_check("multi_head_cross_attention", &mut store, |s| {
        s.zero_grads();
        let (q_in, kv_in) = (s.get(xq).clone(), s.get(xkv).clone());
        let (out, cache) = mha.forward(s, &q_in, &kv_in, &mask)?;
        let (dq, dkv) = mha.backward(s, &cache, &w)?;
        s.accumulate(xq, &dq)?;
        s.accumulate(xkv, &dkv)?;
        Ok(out.hadamard(&w)?.sum())
    }));

    let mut store = ParamStore::new();
    let ffn = FfnAutoencoder::new(&mut store, "ffn", d, 0.7, &mut r).expect("valid dims");
    let x = store.add("input.x", Tensor::uniform(t, d, 1.0, &mut r));
    checks.push(store_check("ffn_autoencoder", &mut store, |s| {
        s.zero_grads();
        let input = s.get(x).clone();
        let (out, cache) = ffn.forward(s, &input)?;
        let dx = ffn.backward(s, &cache, &w)?;
        s.accumulate(x, &dx)?;
        Ok(out.hadamard(&w)?.sum())
    }));

    for lnf in [false, true] {
        let tag = if lnf { "lnf" } else { "post_norm" };
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "enc", &dims(d, 2, lnf), &mut r).expect("valid dims");
        let x = store.add("input.x", Tensor::uniform(t, d, 1.0, &mut r));
        checks.push(store_check(format!("encoder_block_{tag}"), &mut store, |s| {
            s.zero_grads();
            let input = s.get(x).clone();
            let (out, cache) = block.forward(s, &input, &mask)?;
            let dx = block.backward(s, &cache, &w)?;
            s.accumulate(x, &dx)?;
            Ok(out.hadamard(&w)?.sum())
        }));

        let mut store = ParamStore::new();
        let block = DecoderBlock::new(&mut store, "dec", &dims(d, 2, lnf), &mut r).expect("valid dims");
        let x = store.add("input.x", Tensor::uniform(t, d, 1.0, &mut r));
        let enc = store.add("input.encoded", Tensor::uniform(t, d, 1.0, &mut r));
        checks.push(store_check(format!("decoder_block_{tag}"), &mut store, |s| {
            s.zero_grads();
            let (input, encoded) = (s.get(x).clone(), s.get(enc).clone());
            let (out, cache) = block.forward(s, &input, &encoded, &mask, &mask)?;
            let (dx, denc) = block.backward(s, &cache, &w)?;
            s.accumulate(x, &dx)?;
            s.accumulate(enc, &denc)?;
            Ok(out.hadamard(&w)?.sum())
        }));
    }
    checks
}

/// Tiny config used by the model-level checks: T=6, F=4, N=3, d_model=8.
pub fn tiny_config(family: ModelFamily, lnf: bool) -> ModelConfig {
    ModelConfig::new(family, 2, lnf, 8, 4, 3).with_seed(3)
}

fn tiny_inputs(seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(seed);
    let x = Tensor::uniform(6, 4, 1.0, &mut r);
    let returns = Tensor::uniform(6, 3, 1.0, &mut r);
    (x, lag_returns(&returns), returns)
}

/// Full forward/backward of every family in both normalization modes,
/// including the pretrain autoencoder.
pub fn model_checks() -> Vec<Check> {
    let mut checks = Vec::new();
    for family in ModelFamily::ALL {
        for lnf in [false, true] {
            let name = format!("model_{family}{}", if lnf { "_lnf" } else { "" });
            let mut cfg = tiny_config(family, lnf);
            cfg.finetune_pretrain = family.has_pretrain();
            let mut model = match build_model(&cfg) {
                Ok(m) => m,
                Err(e) => {
                    checks.push(Check::new("gradient", name, false, format!("error: {e}")));
                    continue;
                }
            };
            let (x, lagged, target) = tiny_inputs(4);
            let lagged = family.has_decoder().then_some(lagged);
            let mut store = model.store.clone();
            checks.push(store_check(name, &mut store, |s| {
                std::mem::swap(&mut model.store, s);
                let loss = model.loss_and_grad(&x, lagged.as_ref(), &target);
                std::mem::swap(&mut model.store, s);
                loss
            }));
        }
    }
    checks
}

/// Every op, module and model gradient check.
pub fn gradient_suite() -> Vec<Check> {
    let mut checks: Vec<Check> = op_cases().iter().map(check_op).collect();
    checks.extend(module_checks());
    checks.extend(model_checks());
    checks
}

/// The corrupted fixture must fail, and the failure must carry the op name.
pub fn fault_injection_check() -> Check {
    let case = corrupted_op_case();
    let c = check_op(&case);
    let caught = !c.passed && c.name == case.name;
    Check::new(
        "gradient",
        "fault_injection_detected",
        caught,
        format!("`{}` reported {}: {}", c.name, if c.passed { "pass" } else { "fail" }, c.detail),
    )
}

fn leak_for(family: ModelFamily, lnf: bool, channel: &str) -> Result<(bool, String)> {
    let model = build_model(&tiny_config(family, lnf))?;
    let (x, lagged, _) = tiny_inputs(7);
    let lagged = family.has_decoder().then_some(lagged);
    let base = model.forward(&x, lagged.as_ref())?;
    let mut worst = 0.0_f64;
    let mut r = rng(8);
    for t in 0..x.rows() - 1 {
        let (mut x2, mut l2) = (x.clone(), lagged.clone());
        let target = if channel == "factors" { Some(&mut x2) } else { l2.as_mut() };
        let Some(target) = target else {
            return Ok((true, "no lagged-return input".into()));
        };
        for s in t + 1..target.rows() {
            for v in target.row_mut(s) {
                *v += r.random_range(-5.0..5.0);
            }
        }
        let out = model.forward(&x2, l2.as_ref())?;
        worst = worst.max(out.slice_rows(0, t + 1).max_abs_diff(&base.slice_rows(0, t + 1)));
    }
    Ok((worst <= LEAK_TOLERANCE, format!("max change at rows <= t: {worst:.1e}")))
}

/// Perturbing rows after `t` must leave outputs at rows up to `t` unchanged,
/// through the factor channel and the lagged-return channel.
pub fn leak_checks() -> Vec<Check> {
    let mut checks = Vec::new();
    for family in ModelFamily::ALL {
        for lnf in [false, true] {
            for channel in ["factors", "lagged_returns"] {
                if channel == "lagged_returns" && !family.has_decoder() {
                    continue;
                }
                let name = format!("{family}{}/{channel}", if lnf { "_lnf" } else { "" });
                checks.push(Check::from_result("leak", name, leak_for(family, lnf, channel)));
            }
        }
    }
    let standardization = || -> Result<(bool, String)> {
        let mut r = rng(9);
        let x = Tensor::uniform(12, 3, 1.0, &mut r);
        let obs = vec![true; x.len()];
        let (full, _) = zscore_columns(&x, &obs, 0..8);
        let (cut, _) = zscore_columns(&x.slice_rows(0, 8), &obs[..24], 0..8);
        let diff = full.slice_rows(0, 8).max_abs_diff(&cut);
        Ok((diff == 0.0, format!("window statistics differ by {diff:.1e} when later rows are dropped")))
    };
    checks.push(Check::from_result("leak", "standardization_window", standardization()));
    checks
}

/// Structural identities of the attention, normalization and encoding layers.
pub fn mechanism_checks() -> Vec<Check> {
    let mut checks = Vec::new();
    let single_head = || -> Result<(bool, String)> {
        let mut r = rng(31);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 6, 1, ScaleMode::HeadWidth, &mut r)?;
        *store.get_mut(mha.w_o) = Tensor::identity(6);
        let x = Tensor::uniform(5, 6, 1.0, &mut r);
        let mask = causal_mask(5);
        let multi = mha.self_attention(&store, &x, &mask)?;
        let q = matmul(&x, store.get(mha.w_q[0]))?;
        let k = matmul(&x, store.get(mha.w_k[0]))?;
        let v = matmul(&x, store.get(mha.w_v[0]))?;
        let single = masked_attention(&q, &k, &v, &mask)?;
        let same = multi.data().iter().zip(single.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        Ok((same, format!("bitwise equal: {same}")))
    };
    checks.push(Check::from_result("mechanism", "multi_head_h1_identity_is_single_head", single_head()));
    let counts = || -> Result<(bool, String)> {
        let mut detail = Vec::new();
        let mut ok = true;
        for family in ModelFamily::ALL {
            let a = build_model(&tiny_config(family, false))?.num_params();
            let b = build_model(&tiny_config(family, true))?.num_params();
            ok &= a == b;
            detail.push(format!("{family} {a}/{b}"));
        }
        Ok((ok, detail.join(", ")))
    };
    checks.push(Check::from_result("mechanism", "lnf_and_post_norm_parameter_counts", counts()));
    let pe = || -> Result<(bool, String)> {
        let table = sinusoidal_pe(64, 16)?;
        let t = table.table();
        let mut worst = 0.0_f64;
        for pos in 0..64 {
            for i in 0..8 {
                let (s, c) = (t.get(pos, 2 * i), t.get(pos, 2 * i + 1));
                worst = worst.max((s * s + c * c - 1.0).abs());
            }
        }
        Ok((worst <= 1e-12, format!("max |sin²+cos²-1| = {worst:.1e}")))
    };
    checks.push(Check::from_result("mechanism", "pe_unit_circle", pe()));
    let pe0 = || -> Result<(bool, String)> {
        let table = sinusoidal_pe(3, 10)?;
        let exact = table
            .table()
            .row(0)
            .iter()
            .enumerate()
            .all(|(j, &v)| v == if j % 2 == 0 { 0.0 } else { 1.0 });
        Ok((exact, format!("{:?}", table.table().row(0))))
    };
    checks.push(Check::from_result("mechanism", "pe_row_zero_pattern", pe0()));
    checks
}

/// Exactly computed value of twelve compounded 1% months, `1.01^12 - 1`.
pub const TWELVE_ONE_PERCENT_MONTHS: f64 = 0.126_825_030_131_969_72;

/// Closed-form checks of the metric and strategy code.
pub fn metric_checks() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut r = rng(41);
    let actual = Tensor::uniform(24, 5, 0.1, &mut r);
    let train_mean = 0.013;
    let r2 = oos_r2(&actual, &Tensor::filled(24, 5, train_mean), train_mean);
    checks.push(Check::from_result(
        "metric",
        "oos_r2_of_train_mean_is_zero",
        r2.map(|v| (v == 0.0, format!("R² = {v:e}"))),
    ));
    let dm = || -> Result<(bool, String)> {
        let a = Tensor::uniform(30, 6, 0.1, &mut rng(42));
        let b = Tensor::uniform(30, 6, 0.1, &mut rng(43));
        let s = dm_statistic(&a, &b)? + dm_statistic(&b, &a)?;
        Ok((s.abs() <= 1e-12, format!("DM(a,b) + DM(b,a) = {s:e}")))
    };
    checks.push(Check::from_result("metric", "dm_antisymmetry", dm()));
    let mdd = max_drawdown(&[1.0, 2.0, 1.0]);
    checks.push(Check::new("metric", "mdd_of_1_2_1", mdd == 0.5, format!("MDD = {mdd}")));
    let ann = annualized_return(&[0.01; 12]);
    let err = (ann - TWELVE_ONE_PERCENT_MONTHS).abs();
    checks.push(Check::new(
        "metric",
        "annualized_twelve_one_percent_months",
        err <= 1e-9,
        format!("{ann:.12} (|err| {err:.1e})"),
    ));
    let normal = Normal::new(0.01, 0.05).expect("valid normal");
    let mut r = rng(44);
    let mut violations = 0;
    for _ in 0..1000 {
        let series: Vec<f64> = (0..120).map(|_| normal.sample(&mut r)).collect();
        if downside_std(&series) > return_std(&series) {
            violations += 1;
        }
    }
    checks.push(Check::new(
        "metric",
        "downside_std_at_most_std",
        violations == 0,
        format!("{violations} of 1000 random series violate σ_d ≤ σ_p"),
    ));
    let trace = || -> Result<(bool, String)> {
        let pred = Tensor::from_vec(4, 1, vec![0.1, 0.2, -0.1, -0.2])?;
        let act = Tensor::from_vec(4, 1, vec![0.3, -0.1, -0.2, 0.4])?;
        let months = sign_signal(&pred, &act)?.position_months(0);
        Ok((months == [1, 2], format!("position months {months:?}")))
    };
    checks.push(Check::from_result("strategy", "sign_signal_trace", trace()));
    let stop = || -> Result<(bool, String)> {
        let vals = [1.0, 0.5, 0.6, 0.7, 0.8];
        let mut params = 0usize;
        let out = early_stopping(&mut params, 3, 100, |p, e| {
            *p = e;
            Ok((0.0, vals[e - 1]))
        }, |p| *p, |p, s| *p = s)?;
        let ok = out.epochs_run == 5 && out.best_epoch == 2 && params == 2;
        Ok((ok, format!("ran {} epochs, restored epoch {params}", out.epochs_run)))
    };
    checks.push(Check::from_result("strategy", "early_stopping_trace", stop()));
    checks
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One aligned line per check plus a summary line.
    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.group.len() + c.name.len() + 1).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            let label = format!("{}/{}", c.group, c.name);
            out.push_str(&format!(
                "{} {label:<width$}  {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.detail
            ));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        out.push_str(&format!(
            "{} checks, {failed} failed, {:.1}s\n",
            self.checks.len(),
            self.seconds
        ));
        out
    }
}

pub fn run_selftest() -> SelftestReport {
    let start = Instant::now();
    let mut checks = gradient_suite();
    checks.push(fault_injection_check());
    checks.extend(leak_checks());
    checks.extend(mechanism_checks());
    checks.extend(metric_checks());
    SelftestReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_its_gradient_check() {
        for case in op_cases() {
            let c = check_op(&case);
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn corrupted_backward_is_caught_and_named() {
        let c = check_op(&corrupted_op_case());
        assert!(!c.passed);
        assert!(c.name.contains("matmul"), "{}", c.name);
        assert!(c.detail.contains("input 0"), "{}", c.detail);
        assert!(fault_injection_check().passed);
    }

    #[test]
    fn full_selftest_passes() {
        let report = run_selftest();
        assert!(report.passed(), "{}", report.table());
        assert!(report.table().ends_with("s\n"));
        println!("{}", report.table());
    }
}
