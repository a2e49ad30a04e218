//! Finite-difference verification of the autodiff rules.
//!
//! Everything here runs in `f64`: both the tape gradients and the central
//! differences `(f(x+h) − f(x−h)) / 2h`. Each scalar is compared with
//! `|a − b| / max(|a|, |b|, floor)`; the floor keeps gradients that are zero
//! up to rounding from producing meaningless ratios.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{OpKind, Tape, Tensor, TensorError, Var};
use crate::dataset::{EpisodeKey, LikertValue, QuestionId, Responses};
use crate::model::{init_params, loss_and_grads, Labels, ModelConfig, ModelError, ModelParams};
use crate::sequence::EpisodeSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Corrupt the backward rule of the named op (test hook).
    pub fault_injection: Option<String>,
}

impl GradcheckConfig {
    pub fn from_toml(text: &str) -> Result<Self, GradcheckError> {
        toml::from_str(text).map_err(|e| GradcheckError::Config(e.to_string()))
    }
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: tiny_model_config(),
            batch_size: 2,
            seed: 0,
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1e-4,
            fault_injection: None,
        }
    }
}

/// d_in = d_model = 8, one layer, two attention heads, T = 4, five classes.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_in: 8,
        d_model: 8,
        n_layers: 1,
        n_attention_heads: 2,
        ffn_dim: 16,
        head_hidden: 8,
        max_len: 4,
        n_classes: 5,
        ..ModelConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub n_checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub ops: Vec<CheckResult>,
    pub params: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().chain(&self.params).all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        let mut bad: Vec<&CheckResult> = self
            .ops
            .iter()
            .chain(&self.params)
            .filter(|c| !c.passed)
            .collect();
        bad.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        bad
    }

    pub fn max_rel_error(&self) -> f64 {
        self.ops
            .iter()
            .chain(&self.params)
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "per-op checks (tolerance {:e}):", self.tolerance)?;
        for c in &self.ops {
            writeln!(
                f,
                "  {:<14} max_rel_error={:.3e} n={:<4} {}",
                c.name,
                c.max_rel_error,
                c.n_checked,
                if c.passed { "ok" } else { "FAIL" }
            )?;
        }
        let n: usize = self.params.iter().map(|c| c.n_checked).sum();
        let worst = self
            .params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
        writeln!(f, "full model: {} tensors, {n} scalars", self.params.len())?;
        if let Some(w) = worst {
            writeln!(
                f,
                "  worst tensor {} max_rel_error={:.3e}",
                w.name, w.max_rel_error
            )?;
        }
        let failures = self.failures();
        if failures.is_empty() {
            write!(f, "PASS")
        } else {
            writeln!(f, "worst offenders:")?;
            for c in failures.iter().take(10) {
                writeln!(f, "  {} max_rel_error={:.3e}", c.name, c.max_rel_error)?;
            }
            write!(f, "FAIL")
        }
    }
}

fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Away from zero so that relu's kink is never straddled by a difference step.
fn random_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let x: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            x
        } else {
            -x
        }
    })
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

struct OpCase {
    kind: OpKind,
    inputs: Vec<Tensor<f64>>,
    build: Builder,
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut r = |s: &[usize]| random_tensor(rng, s);
    let case = |kind, inputs: Vec<Tensor<f64>>, build: Builder| OpCase {
        kind,
        inputs,
        build,
    };
    let mut cases = vec![
        case(
            OpKind::MatMul,
            vec![r(&[3, 4]), r(&[4, 2])],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        case(
            OpKind::Add,
            vec![r(&[3, 4]), r(&[4])],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        case(
            OpKind::Mul,
            vec![r(&[3, 4]), r(&[3, 4])],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        case(
            OpKind::Scale,
            vec![r(&[3, 4])],
            Box::new(|t, v| t.scale(v[0], 0.7)),
        ),
        case(
            OpKind::Transpose,
            vec![r(&[3, 4])],
            Box::new(|t, v| t.transpose(v[0])),
        ),
        case(
            OpKind::Gelu,
            vec![r(&[3, 4])],
            Box::new(|t, v| t.gelu(v[0])),
        ),
        case(
            OpKind::Softmax,
            vec![r(&[3, 5])],
            Box::new(|t, v| t.softmax(v[0])),
        ),
        case(
            OpKind::MaskKeys,
            vec![r(&[3, 5])],
            Box::new(|t, v| {
                let m = t.mask_keys(v[0], 3)?;
                t.softmax(m)
            }),
        ),
        case(
            OpKind::LayerNorm,
            vec![r(&[3, 6]), r(&[6]), r(&[6])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        ),
        case(
            OpKind::RowSelect,
            vec![r(&[5, 3])],
            Box::new(|t, v| t.row_select(v[0], &[4, 0, 4, 2])),
        ),
        case(
            OpKind::Concat,
            vec![r(&[2, 3]), r(&[2, 2]), r(&[1, 5])],
            Box::new(|t, v| {
                let wide = t.concat(&[v[0], v[1]], 1)?;
                t.concat(&[wide, v[2]], 0)
            }),
        ),
        case(
            OpKind::SliceCols,
            vec![r(&[3, 5])],
            Box::new(|t, v| t.slice_cols(v[0], 1, 3)),
        ),
        case(
            OpKind::MaskedMean,
            vec![r(&[4, 3])],
            Box::new(|t, v| t.masked_mean(v[0], &[true, false, true, true])),
        ),
        case(
            OpKind::CrossEntropy,
            vec![r(&[4, 5])],
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 4, 2, 2])),
        ),
        case(OpKind::Sum, vec![r(&[3, 4])], Box::new(|t, v| t.sum(v[0]))),
    ];
    cases.push(case(
        OpKind::Relu,
        vec![random_tensor_off_zero(rng, &[3, 4])],
        Box::new(|t, v| t.relu(v[0])),
    ));
    cases
}

/// Scalarize an op output with fixed random weights so every output element
/// contributes a distinct coefficient.
fn scalarize(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var, TensorError> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn eval_case(
    case: &OpCase,
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    fault: Option<OpKind>,
) -> Result<(f64, Vec<Tensor<f64>>), TensorError> {
    let mut tape = Tape::<f64>::new().with_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let loss = scalarize(&mut tape, out, weights)?;
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .map(|&v| grads.take(v).expect("param grad"))
        .collect();
    Ok((tape.value(loss).item(), g))
}

pub fn check_ops(
    cfg: &GradcheckConfig,
    fault: Option<OpKind>,
) -> Result<Vec<CheckResult>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut results = Vec::new();
    for case in op_cases(&mut rng) {
        // Output shape, for the scalarizing weights.
        let mut probe = Tape::<f64>::new();
        let vars: Vec<Var> = case
            .inputs
            .iter()
            .map(|t| probe.constant(t.clone()))
            .collect();
        let out = (case.build)(&mut probe, &vars)?;
        let weights = random_tensor(&mut rng, probe.shape(out));

        let (_, analytic) = eval_case(&case, &case.inputs, &weights, fault)?;
        let mut worst = 0.0f64;
        let mut n = 0;
        let mut inputs = case.inputs.clone();
        for (ti, g) in analytic.iter().enumerate() {
            for j in 0..inputs[ti].len() {
                let orig = inputs[ti].data()[j];
                inputs[ti].data_mut()[j] = orig + cfg.step;
                let (up, _) = eval_case(&case, &inputs, &weights, None)?;
                inputs[ti].data_mut()[j] = orig - cfg.step;
                let (down, _) = eval_case(&case, &inputs, &weights, None)?;
                inputs[ti].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * cfg.step);
                worst = worst.max(rel_error(g.data()[j], numeric, cfg.floor));
                n += 1;
            }
        }
        results.push(CheckResult {
            name: case.kind.name().to_owned(),
            max_rel_error: worst,
            n_checked: n,
            passed: worst < cfg.tolerance,
        });
    }
    Ok(results)
}

fn random_batch(
    cfg: &ModelConfig,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<EpisodeSequence>, Vec<Labels>) {
    let mut seqs = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        // Alternate full and partially padded episodes so masking is exercised.
        let true_len = if b % 2 == 0 {
            cfg.max_len
        } else {
            (cfg.max_len / 2).max(1)
        };
        let rows: Vec<Vec<f32>> = (0..true_len)
            .map(|_| (0..cfg.d_in).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut l = [0usize; QuestionId::COUNT];
        l.iter_mut()
            .for_each(|x| *x = rng.random_range(0..cfg.n_classes));
        seqs.push(EpisodeSequence::from_rows(
            EpisodeKey {
                participant_id: "gradcheck".into(),
                episode_id: format!("{b}"),
            },
            Responses::new([LikertValue::new(1).expect("valid"); QuestionId::COUNT]),
            cfg.max_len,
            cfg.d_in,
            rows.iter().map(Vec::as_slice),
        ));
        labels.push(l);
    }
    (seqs, labels)
}

fn model_loss(
    params: &ModelParams<f64>,
    batch: &[&EpisodeSequence],
    labels: &[Labels],
    fault: Option<OpKind>,
) -> Result<(f64, Vec<Tensor<f64>>), ModelError> {
    loss_and_grads(params, batch, labels, None, Tape::new().with_fault(fault))
}

pub fn check_model(
    cfg: &GradcheckConfig,
    fault: Option<OpKind>,
) -> Result<Vec<CheckResult>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut params: ModelParams<f64> = init_params(&cfg.model, cfg.seed)?.cast();
    // Non-trivial layer-norm affine parameters, so their gradients are exercised.
    for (name, t) in params.names().into_iter().zip(params.tensors_mut()) {
        if name.contains("norm") {
            t.data_mut()
                .iter_mut()
                .for_each(|x| *x += rng.random_range(-0.3..0.3));
        }
    }
    let (seqs, labels) = random_batch(&cfg.model, cfg.batch_size, &mut rng);
    let batch: Vec<&EpisodeSequence> = seqs.iter().collect();

    let (_, analytic) = model_loss(&params, &batch, &labels, fault)?;
    let names = params.names();
    let mut results = BTreeMap::new();
    for (ti, name) in names.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..params.tensors()[ti].len() {
            let orig = params.tensors()[ti].data()[j];
            params.tensors_mut()[ti].data_mut()[j] = orig + cfg.step;
            let (up, _) = model_loss(&params, &batch, &labels, None)?;
            params.tensors_mut()[ti].data_mut()[j] = orig - cfg.step;
            let (down, _) = model_loss(&params, &batch, &labels, None)?;
            params.tensors_mut()[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            worst = worst.max(rel_error(analytic[ti].data()[j], numeric, cfg.floor));
        }
        results.insert(
            ti,
            CheckResult {
                name: name.clone(),
                max_rel_error: worst,
                n_checked: params.tensors()[ti].len(),
                passed: worst < cfg.tolerance,
            },
        );
    }
    Ok(results.into_values().collect())
}

#[derive(Debug, thiserror::Error)]
pub enum GradcheckError {
    #[error("unknown op `{0}` in fault_injection")]
    UnknownOp(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport, GradcheckError> {
    for (name, x) in [
        ("step", cfg.step),
        ("tolerance", cfg.tolerance),
        ("floor", cfg.floor),
    ] {
        if !(x > 0.0 && x.is_finite()) {
            return Err(GradcheckError::Config(format!(
                "{name} must be positive, got {x}"
            )));
        }
    }
    if cfg.batch_size == 0 {
        return Err(GradcheckError::Config("batch_size must be positive".into()));
    }
    cfg.model.validate()?;
    let fault = match &cfg.fault_injection {
        None => None,
        Some(name) => {
            Some(OpKind::parse(name).ok_or_else(|| GradcheckError::UnknownOp(name.clone()))?)
        }
    };
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        ops: check_ops(cfg, fault)?,
        params: check_model(cfg, fault)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_passes_for_several_seeds() {
        for seed in 0..6 {
            let cfg = GradcheckConfig {
                seed,
                ..Default::default()
            };
            let report = run_gradcheck(&cfg).unwrap();
            assert!(report.passed(), "seed {seed}:\n{report}");
        }
    }

    #[test]
    fn every_op_is_checked() {
        let ops = check_ops(&GradcheckConfig::default(), None).unwrap();
        let names: Vec<&str> = ops.iter().map(|c| c.name.as_str()).collect();
        for k in OpKind::DIFFERENTIABLE {
            assert!(names.contains(&k.name()), "{k} not covered");
        }
        for c in &ops {
            assert!(c.passed, "{} max_rel_error {}", c.name, c.max_rel_error);
        }
    }

    #[test]
    fn fault_is_detected_and_named() {
        let cfg = GradcheckConfig {
            fault_injection: Some("gelu".into()),
            ..GradcheckConfig::default()
        };
        let report = run_gradcheck(&cfg).unwrap();
        assert!(!report.passed());
        let gelu = report.ops.iter().find(|c| c.name == "gelu").unwrap();
        assert!(!gelu.passed);
        let softmax = report.ops.iter().find(|c| c.name == "softmax").unwrap();
        assert!(softmax.passed);
        assert!(report.to_string().contains("FAIL"));
    }

    #[test]
    fn unknown_fault_op() {
        let cfg = GradcheckConfig {
            fault_injection: Some("conv2d".into()),
            ..GradcheckConfig::default()
        };
        assert!(matches!(
            run_gradcheck(&cfg),
            Err(GradcheckError::UnknownOp(_))
        ));
    }
}
