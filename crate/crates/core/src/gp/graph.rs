//! Tape-graph builders for the GP quantities used in training.

use super::{InducingGrid, STD_FLOOR};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Tape variables of one sparse variational GP head dimension.
#[derive(Debug, Clone, Copy)]
pub struct SvgpHeadVars {
    /// `[1]` ln sigma_f^2
    pub log_signal_var: Var,
    /// `[d]` ln lengthscales
    pub log_lengthscales: Var,
    /// `[1]` ln sigma_eps^2
    pub log_noise_var: Var,
    /// `[1]` constant mean c
    pub mean_const: Var,
    /// `[P]` variational mean m_v
    pub q_mean: Var,
    /// `[P, P]` unconstrained factor; lower triangle with exponentiated
    /// diagonal yields L_v
    pub q_chol_raw: Var,
}

/// ARD-SE kernel between two differentiable points, `[1]`-shaped output.
pub fn ard_se_kernel_graph(
    tape: &Tape,
    x: Var,
    y: Var,
    log_signal_var: Var,
    log_lengthscales: Var,
) -> Result<Var> {
    let diff = tape.sub(x, y)?;
    let sq = tape.mul(diff, diff)?;
    let ls = tape.exp(log_lengthscales);
    let ls2 = tape.mul(ls, ls)?;
    let scaled = tape.div(sq, ls2)?;
    let s = tape.sum_all(scaled);
    let expo = tape.exp(tape.mul_scalar(s, -0.5));
    let sv = tape.exp(log_signal_var);
    tape.mul_scalar_var(expo, sv)
}

/// Gram matrix `[N, P]` between differentiable rows `a` and fixed `points`.
pub fn ard_se_gram(
    tape: &Tape,
    a: Var,
    points: &Tensor,
    log_signal_var: Var,
    log_lengthscales: Var,
) -> Result<Var> {
    // weights 1/l_j^2 = exp(-2 ln l_j)
    let w = tape.exp(tape.mul_scalar(log_lengthscales, -2.0));
    let d = tape.weighted_sqdist(a, points, w)?;
    let e = tape.exp(tape.mul_scalar(d, -0.5));
    let sv = tape.exp(log_signal_var);
    tape.mul_scalar_var(e, sv)
}

/// Exact GP log marginal likelihood as a differentiable scalar; `x`, `y`
/// enter as data, the hyperparameters as tape variables.
pub fn gp_log_marginal_graph(
    tape: &Tape,
    x: &Tensor,
    y: &Tensor,
    log_signal_var: Var,
    log_lengthscales: Var,
    log_noise_var: Var,
    mean_const: Var,
) -> Result<Var> {
    let m = x.shape()[0];
    let xv = tape.constant(x.clone());
    let k = ard_se_gram(tape, xv, x, log_signal_var, log_lengthscales)?;
    let eye = tape.constant(Tensor::eye(m));
    let noise = tape.exp(log_noise_var);
    let k_noise = tape.add(k, tape.mul_scalar_var(eye, noise)?)?;
    let l = tape.cholesky(k_noise)?;

    let ones = tape.constant(Tensor::full(&[m], 1.0));
    let c_vec = tape.mul_scalar_var(ones, mean_const)?;
    let yv = tape.constant(y.clone());
    let yc = tape.sub(yv, c_vec)?;
    let alpha = tape.solve_lower(l, yc)?;
    let quad = tape.sum_all(tape.mul(alpha, alpha)?);

    let diag = tape.diag(l)?;
    let half_logdet = tape.sum_all(tape.ln(diag));

    let q_term = tape.mul_scalar(quad, -0.5);
    let d_term = tape.neg(half_logdet);
    let partial = tape.add(q_term, d_term)?;
    Ok(tape.add_scalar(
        partial,
        -0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln(),
    ))
}

/// Sparse variational predictive distribution at `feats` (`[B, d]`):
/// per-element mean and std `[B]`.
///
/// With q(v) = N(m_v, S):
///   mean = c + K_fv K_vv^-1 (m_v - c 1)
///   var  = k_ff_diag - diag(K_fv K_vv^-1 K_vf)
///          + diag(K_fv K_vv^-1 S K_vv^-1 K_vf) [+ sigma_eps^2]
/// The variance is floored so std >= STD_FLOOR.
pub fn svgp_predict_graph(
    tape: &Tape,
    feats: Var,
    grid: &InducingGrid,
    head: &SvgpHeadVars,
    include_noise: bool,
) -> Result<(Var, Var)> {
    let b = tape.shape(feats)[0];
    let p = grid.count();

    let grid_var = tape.constant(grid.points.clone());
    let kvv = ard_se_gram(tape, grid_var, &grid.points, head.log_signal_var, head.log_lengthscales)?;
    let l = tape.cholesky(kvv)?;

    let kfv = ard_se_gram(tape, feats, &grid.points, head.log_signal_var, head.log_lengthscales)?;
    let kvf = tape.transpose(kfv)?;
    let a = tape.solve_lower(l, kvf)?; // [P, B] = L^-1 K_vf

    let ones_p = tape.constant(Tensor::full(&[p], 1.0));
    let c_p = tape.mul_scalar_var(ones_p, head.mean_const)?;
    let m_centered = tape.sub(head.q_mean, c_p)?;
    let bvec = tape.solve_lower(l, m_centered)?; // [P]

    let at = tape.transpose(a)?; // [B, P]
    let b_col = tape.reshape(bvec, vec![p, 1])?;
    let mean_shift = tape.reshape(tape.matmul(at, b_col)?, vec![b])?;
    let ones_b = tape.constant(Tensor::full(&[b], 1.0));
    let c_b = tape.mul_scalar_var(ones_b, head.mean_const)?;
    let mean = tape.add(c_b, mean_shift)?;

    let l_v = tape.lower_tri_exp_diag(head.q_chol_raw)?;
    let c_mat = tape.solve_lower_t(l, a)?; // [P, B] = K_vv^-1 K_vf
    let d_mat = tape.matmul(tape.transpose(l_v)?, c_mat)?; // [P, B]

    let a2 = tape.sum_axis0(tape.mul(a, a)?)?; // [B]
    let d2 = tape.sum_axis0(tape.mul(d_mat, d_mat)?)?; // [B]
    let sv = tape.exp(head.log_signal_var);
    let k_diag = tape.mul_scalar_var(ones_b, sv)?;

    let mut var = tape.add(tape.sub(k_diag, a2)?, d2)?;
    if include_noise {
        let noise = tape.exp(head.log_noise_var);
        let noise_b = tape.mul_scalar_var(ones_b, noise)?;
        var = tape.add(var, noise_b)?;
    }
    let var = tape.clamp_min(var, STD_FLOOR * STD_FLOOR);
    let std = tape.sqrt(var);
    Ok((mean, std))
}

/// KL[q(v) || p(v)] between the variational posterior and the GP prior on
/// the inducing grid, as a differentiable scalar.
pub fn svgp_kl_graph(tape: &Tape, grid: &InducingGrid, head: &SvgpHeadVars) -> Result<Var> {
    let p = grid.count();
    let grid_var = tape.constant(grid.points.clone());
    let kvv = ard_se_gram(tape, grid_var, &grid.points, head.log_signal_var, head.log_lengthscales)?;
    let l = tape.cholesky(kvv)?;
    let l_v = tape.lower_tri_exp_diag(head.q_chol_raw)?;

    // tr(K^-1 S) = ||L^-1 L_v||_F^2
    let m1 = tape.solve_lower(l, l_v)?;
    let trace = tape.sum_all(tape.mul(m1, m1)?);

    let ones_p = tape.constant(Tensor::full(&[p], 1.0));
    let c_p = tape.mul_scalar_var(ones_p, head.mean_const)?;
    let m_centered = tape.sub(head.q_mean, c_p)?;
    let w = tape.solve_lower(l, m_centered)?;
    let quad = tape.sum_all(tape.mul(w, w)?);

    let logdet_k = tape.mul_scalar(tape.sum_all(tape.ln(tape.diag(l)?)), 2.0);
    let logdet_s = tape.mul_scalar(tape.sum_all(tape.ln(tape.diag(l_v)?)), 2.0);

    let t = tape.add(trace, quad)?;
    let t = tape.add(t, logdet_k)?;
    let t = tape.sub(t, logdet_s)?;
    let t = tape.add_scalar(t, -(p as f64));
    Ok(tape.mul_scalar(t, 0.5))
}

/// Differentiable KL[p || q] between diagonal Gaussians given as mean/std
/// variables of equal shape; summed over all elements.
pub fn gaussian_kl_graph(
    tape: &Tape,
    p_mean: Var,
    p_std: Var,
    q_mean: Var,
    q_std: Var,
) -> Result<Var> {
    let t1 = tape.sub(tape.ln(q_std), tape.ln(p_std))?;
    let dm = tape.sub(p_mean, q_mean)?;
    let num = tape.add(tape.mul(p_std, p_std)?, tape.mul(dm, dm)?)?;
    let den = tape.mul_scalar(tape.mul(q_std, q_std)?, 2.0);
    let t2 = tape.div(num, den)?;
    let elems = tape.add_scalar(tape.add(t1, t2)?, -0.5);
    Ok(tape.sum_all(elems))
}
