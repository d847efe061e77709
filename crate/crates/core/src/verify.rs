//! Invariant suite for one grouping scheme at small dimensions.
//!
//! Each check compares the tape implementation of a layer against an
//! independent route: a scalar-loop reference, finite differences, a
//! reduced scheme, or a permuted copy of the same layer.

use serde::Serialize;

use crate::attention::{attention_on_tape, attention_param_count, grouped_attention_forward, AttentionWeights};
use crate::error::Result;
use crate::gradcheck::{finite_diff_grad, max_rel_error};
use crate::init::{normal, seeded_rng};
use crate::scheme::{GroupingScheme, ScaleMode, SchemeSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

/// Attention computed with explicit scalar loops over batch, head, token
/// and feature, reading the weights directly without any tensor ops.
pub fn reference_attention(x: &Tensor<f64>, w: &AttentionWeights<f64>, s: &GroupingScheme) -> Vec<f64> {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let hd = s.head_dim();
    let scale = s.scale_mode().factor(d, hd);
    let xd = x.data();
    let project = |wt: &Tensor<f64>, bias: &Tensor<f64>, bi: usize, t: usize, col: usize| {
        let width = wt.shape()[1];
        let mut acc = bias.data()[col];
        for f in 0..d {
            acc += xd[(bi * n + t) * d + f] * wt.data()[f * width + col];
        }
        acc
    };
    let mut out = vec![0.0; b * n * d];
    for bi in 0..b {
        let mut merged = vec![0.0; n * d];
        for (head, &(qi, kj)) in s.pairing().iter().enumerate() {
            for t in 0..n {
                let q: Vec<f64> = (0..hd).map(|c| project(&w.w_q, &w.b_q, bi, t, qi * hd + c)).collect();
                let mut scores = Vec::with_capacity(n);
                for u in 0..n {
                    let mut dot = 0.0;
                    for (c, qc) in q.iter().enumerate() {
                        dot += qc * project(&w.w_k, &w.b_k, bi, u, kj * hd + c);
                    }
                    scores.push(dot * scale);
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..hd {
                    let mut acc = 0.0;
                    for (u, e) in exps.iter().enumerate() {
                        acc += e / z * project(&w.w_v, &w.b_v, bi, u, kj * hd + c);
                    }
                    merged[t * d + head * hd + c] = acc;
                }
            }
        }
        for t in 0..n {
            for o in 0..d {
                let mut acc = w.b_o.data()[o];
                for f in 0..d {
                    acc += merged[t * d + f] * w.w_o.data()[f * d + o];
                }
                out[(bi * n + t) * d + o] = acc;
            }
        }
    }
    out
}

/// The canonical scheme whose pairing coincides with `spec`'s at `h` heads.
pub fn reduction_partner(spec: SchemeSpec, h: usize) -> Option<SchemeSpec> {
    match spec {
        SchemeSpec::Gqkva { q, kv: 1 } if q == h => Some(SchemeSpec::Mqa),
        SchemeSpec::Gqkva { q: 1, kv } if kv == h => Some(SchemeSpec::Mkva),
        SchemeSpec::Gqa(g) if g == h => Some(SchemeSpec::Mha),
        SchemeSpec::Gkva(g) if g == h => Some(SchemeSpec::Mha),
        SchemeSpec::Gqa(1) => Some(SchemeSpec::Mqa),
        SchemeSpec::Gkva(1) => Some(SchemeSpec::Mkva),
        SchemeSpec::Mqa => Some(SchemeSpec::Gqkva { q: h, kv: 1 }),
        SchemeSpec::Mkva => Some(SchemeSpec::Gqkva { q: 1, kv: h }),
        SchemeSpec::Mha => Some(SchemeSpec::Gqa(h)),
        _ => None,
    }
}

/// Moves row block `perm[t]` of `w_o` to position `t`, matching
/// [`GroupingScheme::permuted`].
pub fn permute_output_rows(w_o: &Tensor<f64>, perm: &[usize], head_dim: usize) -> Tensor<f64> {
    let d = w_o.shape()[1];
    let mut data = Vec::with_capacity(w_o.len());
    for &src in perm {
        data.extend_from_slice(&w_o.data()[src * head_dim * d..(src + 1) * head_dim * d]);
    }
    Tensor::new(w_o.shape().to_vec(), data).expect("same length")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub scheme: String,
    pub d: usize,
    pub heads: usize,
    pub scale_mode: String,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name: name.into(), passed, detail }
}

fn measured(name: &str, value: f64, tol: f64) -> CheckResult {
    check(name, value <= tol, format!("{value:.3e} (tol {tol:.0e})"))
}

/// Random f64 weights with non-zero biases.
pub fn random_weights(s: &GroupingScheme, seed: u64) -> AttentionWeights<f64> {
    let mut rng = seeded_rng(seed);
    let mut w = AttentionWeights::<f64>::zeros(s);
    for t in w.tensors_mut() {
        *t = normal(t.shape().to_vec(), 0.5, &mut rng);
    }
    w
}

/// Sum of `layer(x) ⊙ probe`, a scalar objective for gradient checks.
fn probe_objective(x: &Tensor<f64>, w: &AttentionWeights<f64>, s: &GroupingScheme, probe: &Tensor<f64>) -> f64 {
    let y = grouped_attention_forward(x, w, s).expect("shapes fixed by caller");
    y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

/// Max relative error of tape gradients (input and all eight weight
/// tensors) against central differences.
pub fn attention_grad_error(s: &GroupingScheme, batch: usize, tokens: usize, seed: u64) -> Result<f64> {
    let w = random_weights(s, seed);
    let mut rng = seeded_rng(seed.wrapping_add(1));
    let x: Tensor<f64> = normal(vec![batch, tokens, s.d()], 1.0, &mut rng);
    let probe: Tensor<f64> = normal(vec![batch, tokens, s.d()], 1.0, &mut rng);

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = w.register(&mut tape);
    let y = attention_on_tape(&mut tape, xv, &vars, s)?;
    let grads = tape.backward_with(y, probe.clone())?;

    let fd_x = finite_diff_grad(|t| probe_objective(t, &w, s, &probe), &x, FD_STEP);
    let mut worst = max_rel_error(&grads.wrt(xv), &fd_x);
    for (k, var) in vars.all().into_iter().enumerate() {
        let base = w.tensors()[k].clone();
        let fd = finite_diff_grad(
            |t| {
                let mut wk = w.clone();
                *wk.tensors_mut()[k] = t.clone();
                probe_objective(&x, &wk, s, &probe)
            },
            &base,
            FD_STEP,
        );
        worst = worst.max(max_rel_error(&grads.wrt(var), &fd));
    }
    Ok(worst)
}

/// Runs every check for `spec` at `d = 2·h`, B=2, N=3.
pub fn verify_scheme(spec: SchemeSpec, heads: usize, scale: ScaleMode, seed: u64) -> Result<VerifyReport> {
    let d = 2 * heads;
    let s = spec.build(d, heads)?.with_scale(scale);
    let mut checks = Vec::new();

    let violations = s.validate();
    checks.push(check(
        "scheme invariants",
        violations.is_empty(),
        if violations.is_empty() {
            "ok".into()
        } else {
            violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
        },
    ));

    let w = random_weights(&s, seed);
    checks.push(check(
        "param count matches weights",
        attention_param_count(&s, true) == w.element_count(),
        format!("{} vs {}", attention_param_count(&s, true), w.element_count()),
    ));

    let mut rng = seeded_rng(seed ^ 0xa11);
    let x: Tensor<f64> = normal(vec![2, 3, d], 1.0, &mut rng);
    let y = grouped_attention_forward(&x, &w, &s)?;

    let reference = Tensor::new(y.shape().to_vec(), reference_attention(&x, &w, &s))?;
    checks.push(measured("scalar-loop reference", y.max_abs_diff(&reference)?, EQUIVALENCE_TOL));

    if let Some(partner) = reduction_partner(spec, heads) {
        let other = partner.build(d, heads)?.with_scale(scale);
        let name = format!("reduces to {}", partner.label());
        match w.check_against(&other) {
            Ok(()) => {
                let y2 = grouped_attention_forward(&x, &w, &other)?;
                checks.push(measured(&name, y.max_abs_diff(&y2)?, EQUIVALENCE_TOL));
            }
            Err(e) => checks.push(check(&name, false, e.to_string())),
        }
    }

    let perm: Vec<usize> = (0..heads).rev().collect();
    let mut wp = w.clone();
    wp.w_o = permute_output_rows(&w.w_o, &perm, s.head_dim());
    let yp = grouped_attention_forward(&x, &wp, &s.permuted(&perm))?;
    checks.push(measured("head permutation invariance", y.max_abs_diff(&yp)?, EQUIVALENCE_TOL));

    let token_perm = [2usize, 0, 1];
    let mut xt = Vec::with_capacity(x.len());
    let mut yt_expected = Vec::with_capacity(y.len());
    for b in 0..2 {
        for &t in &token_perm {
            xt.extend_from_slice(&x.data()[(b * 3 + t) * d..(b * 3 + t + 1) * d]);
            yt_expected.extend_from_slice(&y.data()[(b * 3 + t) * d..(b * 3 + t + 1) * d]);
        }
    }
    let yt = grouped_attention_forward(&Tensor::new(x.shape().to_vec(), xt)?, &w, &s)?;
    let yt_expected = Tensor::new(y.shape().to_vec(), yt_expected)?;
    checks.push(measured("token permutation equivariance", yt.max_abs_diff(&yt_expected)?, EQUIVALENCE_TOL));

    checks.push(measured("gradients vs finite differences", attention_grad_error(&s, 2, 3, seed)?, GRAD_TOL));

    Ok(VerifyReport { scheme: s.label().to_string(), d, heads, scale_mode: scale.to_string(), checks })
}
