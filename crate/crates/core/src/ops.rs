//! Forward kernels and their vector-Jacobian products.
//!
//! Every forward function is pure and checks its output for non-finite
//! values. Each `*_backward` takes the upstream gradient of the op output
//! and returns the gradient for each input. Reductions always run in a
//! fixed ascending index order so results are byte-stable.

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

fn check_upstream<T: Scalar>(op: &str, expected: &[usize], g: &Tensor<T>) -> Result<(), TensorError> {
    if g.shape() != expected {
        return Err(TensorError::dim(format!(
            "{op} backward: upstream grad shape {:?} does not match output shape {expected:?}",
            g.shape()
        )));
    }
    Ok(())
}

// ── matmul ───────────────────────────────────────────────────────────

/// How leading (batch) extents of a matmul line up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Batching {
    /// Both sides carry the same leading extents.
    Paired,
    /// Only the left side is batched; the right matrix is shared.
    LeftOnly,
    /// Only the right side is batched; the left matrix is shared.
    RightOnly,
}

struct MatmulPlan {
    batching: Batching,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatmulPlan, TensorError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(TensorError::shapes("matmul (rank < 2)", a, b));
    }
    let (a_lead, a_mat) = a.split_at(a.len() - 2);
    let (b_lead, b_mat) = b.split_at(b.len() - 2);
    let (m, k) = (a_mat[0], a_mat[1]);
    let (k2, n) = (b_mat[0], b_mat[1]);
    if k != k2 {
        return Err(TensorError::shapes("matmul", a, b));
    }
    let (batching, lead) = if a_lead == b_lead {
        (Batching::Paired, a_lead)
    } else if b_lead.is_empty() {
        (Batching::LeftOnly, a_lead)
    } else if a_lead.is_empty() {
        (Batching::RightOnly, b_lead)
    } else {
        return Err(TensorError::shapes("matmul", a, b));
    };
    let mut out_shape = lead.to_vec();
    out_shape.extend_from_slice(&[m, n]);
    Ok(MatmulPlan { batching, batch: lead.iter().product(), m, k, n, out_shape })
}

/// `c += a · b` for row-major `a [m,k]`, `b [k,n]`, `c [m,n]`.
///
/// Each output element accumulates its products in ascending `k` order.
fn mm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c += g · bᵀ` for `g [m,n]`, `b [k,n]`, `c [m,k]`.
fn mm_acc_nt<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::ZERO;
            for (&x, &y) in g_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c += aᵀ · g` for `a [m,k]`, `g [m,n]`, `c [k,n]`.
fn mm_acc_tn<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, &g_ij) in c_row.iter_mut().zip(g_row) {
                *c_pj += a_ip * g_ij;
            }
        }
    }
}

/// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]`.
///
/// Leading extents must match, or one side must be a plain matrix that is
/// shared across the other side's batch.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let plan = plan_matmul(a.shape(), b.shape())?;
    let MatmulPlan { batching, batch, m, k, n, .. } = plan;
    let mut out = vec![T::ZERO; batch * m * n];
    for s in 0..batch {
        let a_off = if batching == Batching::RightOnly { 0 } else { s * m * k };
        let b_off = if batching == Batching::LeftOnly { 0 } else { s * k * n };
        mm_acc(
            &a.data()[a_off..a_off + m * k],
            &b.data()[b_off..b_off + k * n],
            &mut out[s * m * n..(s + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::from_raw(plan.out_shape, out).checked("matmul")
}

pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let plan = plan_matmul(a.shape(), b.shape())?;
    check_upstream("matmul", &plan.out_shape, g)?;
    let MatmulPlan { batching, batch, m, k, n, .. } = plan;
    let mut ga = vec![T::ZERO; a.len()];
    let mut gb = vec![T::ZERO; b.len()];
    for s in 0..batch {
        let a_off = if batching == Batching::RightOnly { 0 } else { s * m * k };
        let b_off = if batching == Batching::LeftOnly { 0 } else { s * k * n };
        let g_slice = &g.data()[s * m * n..(s + 1) * m * n];
        mm_acc_nt(g_slice, &b.data()[b_off..b_off + k * n], &mut ga[a_off..a_off + m * k], m, k, n);
        mm_acc_tn(&a.data()[a_off..a_off + m * k], g_slice, &mut gb[b_off..b_off + k * n], m, k, n);
    }
    Ok((
        Tensor::from_raw(a.shape().to_vec(), ga).checked("matmul_backward")?,
        Tensor::from_raw(b.shape().to_vec(), gb).checked("matmul_backward")?,
    ))
}

// ── transpose / reshape ──────────────────────────────────────────────

/// Swaps the last two axes.
pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(TensorError::dim(format!("transpose needs rank >= 2, got {shape:?}")));
    }
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let batch = x.len() / (rows * cols);
    let mut out = vec![T::ZERO; x.len()];
    let src = x.data();
    for s in 0..batch {
        let base = s * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = src[base + i * cols + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(r - 2, r - 1);
    Ok(Tensor::from_raw(out_shape, out))
}

pub fn transpose_backward<T: Scalar>(out_shape: &[usize], g: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    check_upstream("transpose", out_shape, g)?;
    transpose(g)
}

pub fn reshape_backward<T: Scalar>(
    in_shape: &[usize],
    out_shape: &[usize],
    g: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    check_upstream("reshape", out_shape, g)?;
    g.reshape(in_shape.to_vec())
}

// ── elementwise ──────────────────────────────────────────────────────

/// `a + b` where `b`'s shape equals `a`'s shape or a suffix of it; `b` is
/// repeated over the leading extents of `a`.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(TensorError::shapes("add", sa, sb));
    }
    let inner = b.len();
    let mut out = a.data().to_vec();
    for chunk in out.chunks_mut(inner) {
        for (o, &v) in chunk.iter_mut().zip(b.data()) {
            *o += v;
        }
    }
    Tensor::from_raw(sa.to_vec(), out).checked("add")
}

pub fn add_backward<T: Scalar>(
    a_shape: &[usize],
    b_shape: &[usize],
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    check_upstream("add", a_shape, g)?;
    let inner: usize = b_shape.iter().product();
    let mut gb = vec![T::ZERO; inner];
    for chunk in g.data().chunks(inner) {
        for (o, &v) in gb.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Ok((g.clone(), Tensor::from_raw(b_shape.to_vec(), gb)))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, alpha: T) -> Result<Tensor<T>, TensorError> {
    x.map(|v| v * alpha).checked("scale")
}

pub fn scale_backward<T: Scalar>(out_shape: &[usize], alpha: T, g: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    check_upstream("scale", out_shape, g)?;
    scale(g, alpha)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `x · Φ(x)` with `Φ` the standard normal CDF via `erf`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let half = T::from_f64(0.5);
    let k = T::from_f64(FRAC_1_SQRT_2);
    x.map(|v| half * v * (T::ONE + (v * k).erf())).checked("gelu")
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    check_upstream("gelu", x.shape(), g)?;
    let half = T::from_f64(0.5);
    let k = T::from_f64(FRAC_1_SQRT_2);
    let c = T::from_f64(INV_SQRT_2PI);
    x.zip_map(g, |v, up| {
        let cdf = half * (T::ONE + (v * k).erf());
        let pdf = c * (-(half * v * v)).exp();
        up * (cdf + v * pdf)
    })?
    .checked("gelu_backward")
}

// ── softmax ──────────────────────────────────────────────────────────

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if x.rank() == 0 {
        return Err(TensorError::dim("softmax_lastdim needs at least one axis"));
    }
    let n = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(row[0], T::max);
        let mut total = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::from_raw(x.shape().to_vec(), out).checked("softmax_lastdim")
}

/// Gradient of softmax given its output `y`: `y ⊙ (g − Σ g⊙y)` per row.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    check_upstream("softmax_lastdim", y.shape(), g)?;
    let n = y.last_dim();
    let mut out = vec![T::ZERO; y.len()];
    for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
        let mut dot = T::ZERO;
        for (&yv, &gv) in yr.iter().zip(gr) {
            dot += yv * gv;
        }
        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *ov = yv * (gv - dot);
        }
    }
    Tensor::from_raw(y.shape().to_vec(), out).checked("softmax_backward")
}

// ── layernorm ────────────────────────────────────────────────────────

fn check_affine<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize, TensorError> {
    let n = x.last_dim();
    if x.rank() == 0 || gamma.shape() != [n] || beta.shape() != [n] {
        return Err(TensorError::dim(format!(
            "layernorm: affine shapes {:?}/{:?} do not match last extent of {:?}",
            gamma.shape(),
            beta.shape(),
            x.shape()
        )));
    }
    Ok(n)
}

/// Per-row `(mean, 1/sqrt(var + eps))` using a two-pass biased variance.
fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::ZERO;
    for &v in row {
        mean += v;
    }
    mean = mean / n;
    let mut var = T::ZERO;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    (mean, T::ONE / (var + eps).sqrt())
}

pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let n = check_affine(x, gamma, beta)?;
    if !(eps > T::ZERO) {
        return Err(TensorError::Input(format!("layernorm eps must be positive, got {eps}")));
    }
    let mut out = vec![T::ZERO; x.len()];
    for (o, row) in out.chunks_mut(n).zip(x.data().chunks(n)) {
        let (mean, inv_std) = row_stats(row, eps);
        for (i, (ov, &v)) in o.iter_mut().zip(row).enumerate() {
            *ov = gamma.data()[i] * ((v - mean) * inv_std) + beta.data()[i];
        }
    }
    Tensor::from_raw(x.shape().to_vec(), out).checked("layernorm")
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    check_upstream("layernorm", x.shape(), g)?;
    let n = x.last_dim();
    if gamma.shape() != [n] {
        return Err(TensorError::shapes("layernorm_backward", x.shape(), gamma.shape()));
    }
    let nf = T::from_f64(n as f64);
    let mut gx = vec![T::ZERO; x.len()];
    let mut ggamma = vec![T::ZERO; n];
    let mut gbeta = vec![T::ZERO; n];
    let mut xhat = vec![T::ZERO; n];
    let mut gxhat = vec![T::ZERO; n];
    for ((o, row), gr) in gx.chunks_mut(n).zip(x.data().chunks(n)).zip(g.data().chunks(n)) {
        let (mean, inv_std) = row_stats(row, eps);
        let mut sum_gxhat = T::ZERO;
        let mut sum_gxhat_xhat = T::ZERO;
        for i in 0..n {
            xhat[i] = (row[i] - mean) * inv_std;
            gxhat[i] = gr[i] * gamma.data()[i];
            ggamma[i] += gr[i] * xhat[i];
            gbeta[i] += gr[i];
            sum_gxhat += gxhat[i];
            sum_gxhat_xhat += gxhat[i] * xhat[i];
        }
        let mean_g = sum_gxhat / nf;
        let mean_gx = sum_gxhat_xhat / nf;
        for i in 0..n {
            o[i] = inv_std * (gxhat[i] - mean_g - xhat[i] * mean_gx);
        }
    }
    Ok((
        Tensor::from_raw(x.shape().to_vec(), gx).checked("layernorm_backward")?,
        Tensor::from_raw(vec![n], ggamma).checked("layernorm_backward")?,
        Tensor::from_raw(vec![n], gbeta).checked("layernorm_backward")?,
    ))
}

// ── concat / narrow / broadcast ──────────────────────────────────────

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, TensorError> {
    let first = parts.first().ok_or_else(|| TensorError::dim("concat of zero tensors"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::dim(format!("concat axis {axis} out of range for {:?}", first.shape())));
    }
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == rank && p.shape().iter().enumerate().all(|(i, &e)| i == axis || e == first.shape()[i]);
        if !ok {
            return Err(TensorError::shapes("concat", first.shape(), p.shape()));
        }
        total += p.shape()[axis];
    }
    let (outer, inner) = outer_inner(first.shape(), axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_raw(shape, out))
}

/// Splits the upstream gradient back into the concatenated parts.
pub fn concat_backward<T: Scalar>(
    part_shapes: &[Vec<usize>],
    axis: usize,
    g: &Tensor<T>,
) -> Result<Vec<Tensor<T>>, TensorError> {
    let first = part_shapes.first().ok_or_else(|| TensorError::dim("concat of zero tensors"))?;
    let mut expected = first.clone();
    expected[axis] = part_shapes.iter().map(|s| s[axis]).sum();
    check_upstream("concat", &expected, g)?;
    let (outer, inner) = outer_inner(&expected, axis);
    let row = expected[axis] * inner;
    let mut grads = Vec::with_capacity(part_shapes.len());
    let mut offset = 0;
    for s in part_shapes {
        let chunk = s[axis] * inner;
        let mut data = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            let start = o * row + offset;
            data.extend_from_slice(&g.data()[start..start + chunk]);
        }
        grads.push(Tensor::from_raw(s.clone(), data));
        offset += chunk;
    }
    Ok(grads)
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>, TensorError> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(TensorError::dim(format!(
            "narrow axis {axis} [{start}, {}) out of range for {:?}",
            start + len,
            x.shape()
        )));
    }
    let (outer, inner) = outer_inner(x.shape(), axis);
    let row = x.shape()[axis] * inner;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let from = o * row + start * inner;
        out.extend_from_slice(&x.data()[from..from + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_raw(shape, out))
}

pub fn narrow_backward<T: Scalar>(
    in_shape: &[usize],
    axis: usize,
    start: usize,
    g: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let len = g.shape().get(axis).copied().unwrap_or(0);
    let mut expected = in_shape.to_vec();
    if axis >= expected.len() {
        return Err(TensorError::dim(format!("narrow axis {axis} out of range for {in_shape:?}")));
    }
    expected[axis] = len;
    check_upstream("narrow", &expected, g)?;
    let (outer, inner) = outer_inner(in_shape, axis);
    let row = in_shape[axis] * inner;
    let mut out = vec![T::ZERO; in_shape.iter().product()];
    for o in 0..outer {
        let to = o * row + start * inner;
        out[to..to + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Ok(Tensor::from_raw(in_shape.to_vec(), out))
}

/// Repeats `x` over new leading extents: `shape → lead ++ shape`.
pub fn broadcast_leading<T: Scalar>(x: &Tensor<T>, lead: &[usize]) -> Result<Tensor<T>, TensorError> {
    if lead.contains(&0) {
        return Err(TensorError::dim(format!("broadcast to zero extent {lead:?}")));
    }
    let reps: usize = lead.iter().product();
    let mut out = Vec::with_capacity(reps * x.len());
    for _ in 0..reps {
        out.extend_from_slice(x.data());
    }
    let mut shape = lead.to_vec();
    shape.extend_from_slice(x.shape());
    Ok(Tensor::from_raw(shape, out))
}

pub fn broadcast_leading_backward<T: Scalar>(
    in_shape: &[usize],
    lead: &[usize],
    g: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let mut expected = lead.to_vec();
    expected.extend_from_slice(in_shape);
    check_upstream("broadcast_leading", &expected, g)?;
    let inner: usize = in_shape.iter().product();
    let mut out = vec![T::ZERO; inner];
    for chunk in g.data().chunks(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Ok(Tensor::from_raw(in_shape.to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let row = t(&[1, 2], &[1.0, 2.0]);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("dimension"), "{msg}");
        let c = Tensor::<f32>::zeros(vec![2, 3, 4]);
        let d = Tensor::<f32>::zeros(vec![3, 4, 5]);
        assert!(matmul(&c, &d).is_err());
    }

    #[test]
    fn matmul_backward_identity_upstream_gives_transposes() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let g = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let (ga, gb) = matmul_backward(&a, &b, &g).unwrap();
        assert_eq!(ga, transpose(&b).unwrap());
        assert_eq!(gb, transpose(&a).unwrap());
        assert!(matmul_backward(&a, &b, &Tensor::zeros(vec![3, 2])).is_err());
    }

    #[test]
    fn broadcast_matmul_sums_shared_gradient() {
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1, 1]);
        assert_eq!(y.data(), &[3.0, 7.0]);
        let (_, gb) = matmul_backward(&a, &b, &Tensor::ones(vec![2, 1, 1])).unwrap();
        assert_eq!(gb.data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_uniform_and_extreme() {
        let y = softmax_lastdim(&t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax_lastdim(&Tensor::<f32>::from_f64(vec![2], &[1000.0, 0.0]).unwrap()).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && y.data()[1].abs() < 1e-6);
    }

    #[test]
    fn layernorm_degenerate_cases() {
        let x = t(&[2, 3], &[5.0, 5.0, 5.0, -1.0, -1.0, -1.0]);
        let y = layernorm(&x, &Tensor::ones(vec![3]), &Tensor::zeros(vec![3]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 9.0, -3.0]);
        let y = layernorm(&x, &Tensor::zeros(vec![3]), &Tensor::full(vec![3], 2.5), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        assert!(layernorm(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![3]), 1e-5).is_err());
        assert!(layernorm(&x, &Tensor::ones(vec![3]), &Tensor::zeros(vec![3]), 0.0).is_err());
    }

    #[test]
    fn gelu_fixed_points() {
        let y = gelu(&t(&[3], &[0.0, 10.0, -10.0])).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        assert!(y.data()[2].abs() < 1e-6);
    }

    #[test]
    fn reshape_backward_restores_shape() {
        let g = t(&[6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = reshape_backward(&[2, 3], &[6], &g).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.data(), g.data());
        assert!(reshape_backward(&[2, 3], &[6], &t(&[3], &[0.0; 3])).is_err());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(narrow(&c, 1, 0, 2).unwrap(), a);
        assert_eq!(narrow(&c, 1, 2, 1).unwrap(), b);
        let parts = concat_backward(&[vec![2, 2], vec![2, 1]], 1, &c).unwrap();
        assert_eq!(parts, vec![a.clone(), b]);
        let padded = narrow_backward(&[2, 3], 1, 0, &a).unwrap();
        assert_eq!(padded.data(), &[1.0, 2.0, 0.0, 3.0, 4.0, 0.0]);
        assert!(narrow(&c, 1, 2, 2).is_err());
    }

    #[test]
    fn add_broadcasts_suffix() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 20.0]);
        assert_eq!(add(&a, &b).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        let (_, gb) = add_backward(&[2, 2], &[2], &a).unwrap();
        assert_eq!(gb.data(), &[4.0, 6.0]);
        assert!(add(&b, &a).is_err());
    }

    #[test]
    fn broadcast_leading_sums_back() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let y = broadcast_leading(&x, &[3]).unwrap();
        assert_eq!(y.shape(), &[3, 1, 2]);
        let g = broadcast_leading_backward(&[1, 2], &[3], &y).unwrap();
        assert_eq!(g.data(), &[3.0, 6.0]);
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let big = Tensor::<f32>::full(vec![1, 1], 3.0e38);
        assert!(matches!(scale(&big, 10.0), Err(TensorError::NonFinite { .. })));
    }
}
