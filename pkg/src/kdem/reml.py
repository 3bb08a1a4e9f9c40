"""REML estimation of the rescaled household mixed model.

The model for the stacked design (see design.py) is

    y = C theta + Z u + eps,   u ~ N(0, G),   eps ~ N(0, R),

with G block-diagonal (one smoothing variance per penalty block) and
R = diag(sigma_g^2) constant within each household-size group. Variance
parameters maximize the restricted likelihood

    l_R = -1/2 [ (N-p) ln 2pi + ln|V| + ln|C' V^-1 C| + r' V^-1 r ],

with V = R + Z G Z', r the generalized-least-squares residual. The maximum
likelihood variant (used for tests that change the fixed-effect structure)
drops the ln|C' V^-1 C| term and uses N instead of N - p.

All likelihood evaluations run on per-group Gram blocks (C_g'C_g, C_g'Z_g,
Z_g'Z_g, ...) computed once per design, so each optimizer step costs
O(p^3 + q^3) independent of the number of rows; V^-1 is applied through the
Woodbury identity in the stable G^(1/2) form, which stays valid when a
smoothing variance is exactly 0 (boundary pinning).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .design import DesignSet
from .errors import ConvergenceError, DecompositionError, ValidationError
from .types import IntakeMatrix, ModelSpec, PanelData

GRAD_TOL = 1e-8
STEP_TOL = 1e-10
MAX_ITER = 500

# Relative floor of the optimizer's variance search region (its own contract,
# not a model quantity): variances are positive, the boundary test needs the
# smoothing variance to be reachable at ~0.
_VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class GramBlocks:
    """Per-variance-group sufficient statistics of the design."""

    A: np.ndarray  # (G, p, p) C_g' C_g
    B: np.ndarray  # (G, p, q) C_g' Z_g
    D: np.ndarray  # (G, q, q) Z_g' Z_g
    a: np.ndarray  # (G, p)    C_g' y_g
    b: np.ndarray  # (G, q)    Z_g' y_g
    s: np.ndarray  # (G,)      y_g' y_g
    counts: np.ndarray  # (G,) rows per group

    @property
    def n_rows(self) -> int:
        return int(self.counts.sum())

    @property
    def n_fixed(self) -> int:
        return self.A.shape[1]

    @property
    def n_random(self) -> int:
        return self.D.shape[1]


@dataclass(frozen=True)
class ParamsEval:
    """Likelihood, gradient and GLS quantities at fixed variance parameters."""

    loglik: float
    grad_sigma_n2: np.ndarray
    grad_sigma_u2: np.ndarray
    theta: np.ndarray
    u_blup: np.ndarray
    cov_fixed: np.ndarray
    quad: float  # r' V^-1 r


@dataclass(frozen=True)
class FitResult:
    """REML (or ML) estimates of the household model."""

    design: DesignSet
    method: str
    theta: np.ndarray
    cov_fixed: np.ndarray
    u_blup: np.ndarray
    sigma_u2: tuple
    sigma_n2: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    grad_norm: float
    pinned: tuple = ()

    @property
    def beta(self) -> np.ndarray:
        """Gender intercept/slope estimates, in design column order."""
        idx = sorted(self.design.gender_block().values())
        return self.theta[idx]

    @property
    def gamma(self) -> dict:
        """Socio-modality effects keyed by (variable, modality code)."""
        return {key: self.theta[j] for key, j in sorted(self.design.socio_columns.items())}

    @property
    def alpha(self) -> dict:
        """Week effects keyed by week index."""
        return {week: self.theta[j] for week, j in sorted(self.design.week_columns.items())}

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_fixed))

    def fitted(self) -> np.ndarray:
        """Fitted rescaled household responses C theta + Z u."""
        return self.design.C @ self.theta + self.design.Z @ self.u_blup

    def residuals(self) -> np.ndarray:
        return self.design.y - self.fitted()


@dataclass(frozen=True)
class VarianceDecomposition:
    """Individual-level error variance and within-household correlation.

    Obtained by regressing the group residual variances on household size:
    Var(eps_row) = sigma_eps^2 (1 + (n-1) rho) means intercept
    b0 = sigma_eps^2 (1 - rho) and slope b1 = sigma_eps^2 rho.
    """

    sigma_eps2: float
    rho: float
    se_sigma_eps2: float
    se_rho: float
    intercept: float
    slope: float
    positive_definite: bool = True


def gram_blocks(design: DesignSet) -> GramBlocks:
    """One O(N (p+q)^2) pass turning the design into per-group Gram blocks."""
    n_groups = len(design.groups)
    p, q = design.n_fixed, design.n_random
    A = np.zeros((n_groups, p, p))
    B = np.zeros((n_groups, p, q))
    D = np.zeros((n_groups, q, q))
    a = np.zeros((n_groups, p))
    b = np.zeros((n_groups, q))
    s = np.zeros(n_groups)
    counts = np.zeros(n_groups)
    for g in range(n_groups):
        mask = design.group_index == g
        Cg, Zg, yg = design.C[mask], design.Z[mask], design.y[mask]
        A[g] = Cg.T @ Cg
        B[g] = Cg.T @ Zg
        D[g] = Zg.T @ Zg
        a[g] = Cg.T @ yg
        b[g] = Zg.T @ yg
        s[g] = yg @ yg
        counts[g] = mask.sum()
    return GramBlocks(A=A, B=B, D=D, a=a, b=b, s=s, counts=counts)


def response_blocks(design: DesignSet, blocks: GramBlocks, y) -> GramBlocks:
    """Gram blocks for the same design matrix with a new response vector.

    Only the response cross-products are recomputed (an O(N (p+q)) pass), so
    repeated fits on one design — Monte Carlo replicates, parametric
    bootstrap — skip the O(N (p+q)^2) design pass entirely.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (blocks.n_rows,):
        raise ValidationError(f"response must have shape ({blocks.n_rows},), got {y.shape}")
    n_groups = len(blocks.counts)
    a = np.zeros_like(blocks.a)
    b = np.zeros_like(blocks.b)
    s = np.zeros_like(blocks.s)
    for g in range(n_groups):
        mask = design.group_index == g
        yg = y[mask]
        a[g] = design.C[mask].T @ yg
        b[g] = design.Z[mask].T @ yg
        s[g] = yg @ yg
    return GramBlocks(A=blocks.A, B=blocks.B, D=blocks.D, a=a, b=b, s=s, counts=blocks.counts)


def _block_sqrt(sigma_u2, penalty_blocks, q: int) -> np.ndarray:
    """Diagonal of G^(1/2) over the q random columns."""
    g_half = np.zeros(q)
    for (label, start, stop), var in zip(penalty_blocks, sigma_u2):
        if var < 0:
            raise ValidationError(f"smoothing variance {label} must be >= 0")
        g_half[start:stop] = np.sqrt(var)
    return g_half


def _chol_logdet_solve(mat: np.ndarray):
    """Cholesky factor, log-determinant and inverse of an SPD matrix."""
    if mat.shape[0] == 0:
        return np.zeros((0, 0)), 0.0, np.zeros((0, 0))
    L = cholesky(mat, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    inv = cho_solve((L, True), np.eye(mat.shape[0]))
    return L, logdet, inv


def evaluate_params(
    design_or_blocks,
    sigma_n2,
    sigma_u2,
    method: str = "REML",
    penalty_blocks=None,
    need_grad: bool = True,
) -> ParamsEval:
    """Log-likelihood (REML or ML), analytic gradient and GLS solution at
    fixed variance parameters.

    Accepts a DesignSet or precomputed GramBlocks (then penalty_blocks must
    be given).
    """
    if isinstance(design_or_blocks, DesignSet):
        blocks = gram_blocks(design_or_blocks)
        penalty_blocks = design_or_blocks.penalty_blocks
    else:
        blocks = design_or_blocks
        if penalty_blocks is None and blocks.n_random:
            raise ValidationError("penalty_blocks required with GramBlocks input")
        penalty_blocks = penalty_blocks or ()
    if method not in ("REML", "ML"):
        raise ValidationError(f"method must be 'REML' or 'ML', got {method!r}")

    sigma_n2 = np.asarray(sigma_n2, dtype=float)
    sigma_u2 = np.asarray(sigma_u2, dtype=float)
    if sigma_n2.shape[0] != blocks.counts.shape[0]:
        raise ValidationError("one residual variance per group required")
    if sigma_u2.shape[0] != len(penalty_blocks):
        raise ValidationError("one smoothing variance per penalty block required")
    if np.any(sigma_n2 <= 0):
        raise ValidationError("residual variances must be positive")

    N, p, q = blocks.n_rows, blocks.n_fixed, blocks.n_random
    inv_s = 1.0 / sigma_n2

    # R^-1-weighted cross-moments.
    S_cc = np.tensordot(inv_s, blocks.A, axes=1)  # C' R^-1 C
    S_zc = np.tensordot(inv_s, blocks.B, axes=1).T  # Z' R^-1 C, (q, p)
    S = np.tensordot(inv_s, blocks.D, axes=1)  # Z' R^-1 Z
    s_cy = blocks.a.T @ inv_s
    s_zy = blocks.b.T @ inv_s
    s_yy = blocks.s @ inv_s

    g_half = _block_sqrt(sigma_u2, penalty_blocks, q)
    W = np.eye(q) + g_half[:, None] * S * g_half[None, :]
    _, logdet_W, W_inv = _chol_logdet_solve(W)
    K = g_half[:, None] * W_inv * g_half[None, :]  # G Z' V^-1 Z G-ish core

    M = S_cc - S_zc.T @ K @ S_zc  # C' V^-1 C
    m_y = s_cy - S_zc.T @ (K @ s_zy)  # C' V^-1 y
    L_M, logdet_M, M_inv = _chol_logdet_solve(M)
    theta = cho_solve((L_M, True), m_y)
    quad = s_yy - s_zy @ (K @ s_zy) - m_y @ theta  # r' V^-1 r
    logdet_V = float(blocks.counts @ np.log(sigma_n2)) + logdet_W

    if method == "REML":
        loglik = -0.5 * ((N - p) * np.log(2 * np.pi) + logdet_V + logdet_M + quad)
    else:
        loglik = -0.5 * (N * np.log(2 * np.pi) + logdet_V + quad)

    t = s_zy - S_zc @ theta  # Z' R^-1 r
    u_blup = K @ t
    cov_fixed = M_inv

    if not need_grad:
        return ParamsEval(
            loglik=float(loglik),
            grad_sigma_n2=np.zeros_like(sigma_n2),
            grad_sigma_u2=np.zeros_like(sigma_u2),
            theta=theta,
            u_blup=u_blup,
            cov_fixed=cov_fixed,
            quad=float(quad),
        )

    KS = K @ S_zc  # (q, p)
    grad_n = np.zeros_like(sigma_n2)
    for g in range(sigma_n2.shape[0]):
        A_g, B_g, D_g = blocks.A[g], blocks.B[g], blocks.D[g]
        c_g = blocks.b[g] - B_g.T @ theta  # Z_g' r_g
        r2_g = blocks.s[g] - 2.0 * blocks.a[g] @ theta + theta @ A_g @ theta
        py2 = (r2_g - 2.0 * u_blup @ c_g + u_blup @ D_g @ u_blup) / sigma_n2[g] ** 2
        tr_v = blocks.counts[g] / sigma_n2[g] - np.sum(K * D_g) / sigma_n2[g] ** 2
        if method == "REML":
            BKS = B_g @ KS
            F_g = A_g - BKS - BKS.T + KS.T @ D_g @ KS
            tr_proj = np.sum(M_inv * F_g) / sigma_n2[g] ** 2
            grad_n[g] = -0.5 * (tr_v - tr_proj - py2)
        else:
            grad_n[g] = -0.5 * (tr_v - py2)

    grad_u = np.zeros_like(sigma_u2)
    if q:
        gq = t - S @ u_blup  # Z' P y
        S_v_diag = np.diag(S - S @ K @ S)  # diag of Z' V^-1 Z
        T_cz = S_zc - S @ KS  # (q, p), rows are (C' V^-1 Z)' columns
        proj = np.einsum("jp,pk,jk->j", T_cz, M_inv, T_cz)
        for i, (label, start, stop) in enumerate(penalty_blocks):
            sl = slice(start, stop)
            tr_v = float(np.sum(S_v_diag[sl]))
            py2 = float(np.sum(gq[sl] ** 2))
            if method == "REML":
                grad_u[i] = -0.5 * (tr_v - float(np.sum(proj[sl])) - py2)
            else:
                grad_u[i] = -0.5 * (tr_v - py2)

    return ParamsEval(
        loglik=float(loglik),
        grad_sigma_n2=grad_n,
        grad_sigma_u2=grad_u,
        theta=theta,
        u_blup=u_blup,
        cov_fixed=cov_fixed,
        quad=float(quad),
    )


def fit_reml(
    design: DesignSet,
    spec: ModelSpec | None = None,
    method: str = "REML",
    blocks: GramBlocks | None = None,
) -> FitResult:
    """Maximize the restricted (or full) likelihood over the variance
    parameters and return estimates, BLUP and fixed-effect covariance.

    Optimization runs on log-variances (quasi-Newton with analytic gradients,
    then Newton polish) until the gradient max-norm falls below 1e-8 and the
    relative step below 1e-10, within 500 iterations. A smoothing variance
    whose optimum sits at 0 is pinned there and flagged, not an error.

    `blocks` takes precomputed Gram blocks for this exact design (see
    response_blocks), skipping the design pass.
    """
    del spec  # the design already encodes grouping, penalty blocks, references
    if design.n_rows <= design.n_fixed:
        raise ValidationError(
            f"need more rows ({design.n_rows}) than fixed-effect columns ({design.n_fixed})"
        )

    # Standardize the response scale so optimizer tolerances are unit-free.
    # The scale is the OLS residual variance, not the response variance: the
    # optimum's standardized variances then sit near 1 whatever the
    # signal-to-noise ratio, which keeps the normal-equations cancellations
    # in the likelihood gradient well inside double precision.
    var_y = float(np.var(design.y))
    if not np.isfinite(var_y) or var_y <= 0:
        var_y = max(float(np.mean(design.y**2)), 1.0)
    if blocks is None:
        blocks = gram_blocks(design)
    theta_pre = _ols_theta(blocks)
    rss = float(
        sum(
            blocks.s[g] - 2.0 * blocks.a[g] @ theta_pre + theta_pre @ blocks.A[g] @ theta_pre
            for g in range(len(design.groups))
        )
    )
    scale2 = rss / blocks.n_rows
    # Residual scales the double precision of the Gram blocks cannot resolve
    # (including exact zero) fall back to the response scale.
    if not np.isfinite(scale2) or scale2 <= var_y * 1e-12:
        scale2 = var_y
    blocks = _scaled_blocks(blocks, 1.0 / scale2)
    penalty_blocks = design.penalty_blocks
    n_groups, n_pen = len(design.groups), len(penalty_blocks)
    q = design.n_random

    # Start from the joint least-squares decomposition over the fixed and
    # random columns together: its per-group residual variances and the mean
    # square of the unshrunk random coefficients sit near the optimum even
    # when the smooth term carries most of the signal, so the optimizer's
    # first steps stay short. (A fixed-columns-only residual would fold that
    # signal into the noise estimate and start orders of magnitude off.)
    theta0 = _ols_theta(blocks)
    sig0 = np.empty(n_groups)
    for g in range(n_groups):
        r2 = blocks.s[g] - 2.0 * blocks.a[g] @ theta0 + theta0 @ blocks.A[g] @ theta0
        sig0[g] = max(r2 / max(blocks.counts[g], 1.0), _VAR_FLOOR * 10)
    su0 = np.empty(n_pen)
    if n_pen:
        p = blocks.n_fixed
        joint = np.block(
            [
                [blocks.A.sum(axis=0), blocks.B.sum(axis=0)],
                [blocks.B.sum(axis=0).T, blocks.D.sum(axis=0)],
            ]
        )
        rhs = np.concatenate([blocks.a.sum(axis=0), blocks.b.sum(axis=0)])
        beta = np.linalg.lstsq(joint, rhs, rcond=None)[0]
        th_j, u_j = beta[:p], beta[p:]
        if np.all(np.isfinite(beta)):
            for g in range(n_groups):
                r2 = (
                    blocks.s[g]
                    - 2.0 * (blocks.a[g] @ th_j + blocks.b[g] @ u_j)
                    + th_j @ blocks.A[g] @ th_j
                    + 2.0 * th_j @ blocks.B[g] @ u_j
                    + u_j @ blocks.D[g] @ u_j
                )
                sig0[g] = max(r2 / max(blocks.counts[g], 1.0), _VAR_FLOOR * 10)
            for i, (label, start, stop) in enumerate(penalty_blocks):
                msq = float(np.mean(u_j[start:stop] ** 2)) if stop > start else 0.0
                su0[i] = max(msq, _VAR_FLOOR * 10)
        else:
            for i, (label, start, stop) in enumerate(penalty_blocks):
                d_tr = sum(
                    blocks.D[g][j, j] for g in range(n_groups) for j in range(start, stop)
                )
                su0[i] = np.mean(sig0) * (stop - start) / max(d_tr, 1e-8)

    phi0 = np.log(np.concatenate([sig0, su0]) if n_pen else sig0)
    lower = np.full(phi0.shape, np.log(_VAR_FLOOR))

    def objective(phi):
        ev = _eval_phi(phi, blocks, penalty_blocks, method, n_groups)
        if not np.isfinite(ev.loglik):
            return 1e30, np.zeros_like(phi)
        grad = np.concatenate([ev.grad_sigma_n2 * np.exp(phi[:n_groups]),
                               ev.grad_sigma_u2 * np.exp(phi[n_groups:])])
        return -ev.loglik, -grad

    result = optimize.minimize(
        objective,
        phi0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(lo, None) for lo in lower],
        options={"maxiter": MAX_ITER - 100, "ftol": 1e-14, "gtol": 1e-10},
    )
    phi, n_iter = result.x, int(result.nit)
    phi, n_iter, grad_norm, converged = _newton_polish(
        phi, blocks, penalty_blocks, method, n_groups, lower, n_iter
    )

    # Try exact zero for any smoothing variance near its floor: if the
    # boundary value matches or beats the interior iterate, pin it.
    pinned = []
    sigma_u2 = np.exp(phi[n_groups:]) if n_pen else np.zeros(0)
    near_zero = [i for i in range(n_pen) if phi[n_groups + i] < np.log(_VAR_FLOOR) + 2.0]
    if near_zero:
        trial = sigma_u2.copy()
        trial[near_zero] = 0.0
        phi_b, _, grad_b, conv_b = _newton_polish(
            phi[:n_groups].copy(),
            blocks,
            penalty_blocks,
            method,
            n_groups,
            lower[:n_groups],
            0,
            fixed_sigma_u2=trial,
        )
        ev_b = evaluate_params(blocks, np.exp(phi_b[:n_groups]), trial, method, penalty_blocks, need_grad=False)
        ev_i = evaluate_params(blocks, np.exp(phi[:n_groups]), sigma_u2, method, penalty_blocks, need_grad=False)
        if ev_b.loglik >= ev_i.loglik - 1e-8 * max(1.0, abs(ev_i.loglik)):
            phi = np.concatenate([phi_b[:n_groups], phi[n_groups:]])
            sigma_u2 = trial
            grad_norm, converged = grad_b, conv_b
            pinned = [penalty_blocks[i][0] for i in near_zero]

    sigma_n2 = np.exp(phi[:n_groups])
    ev = evaluate_params(blocks, sigma_n2, sigma_u2, method, penalty_blocks, need_grad=True)
    if not converged:
        raise ConvergenceError(
            f"variance optimization did not reach tolerance in {MAX_ITER} iterations",
            best_params={
                "sigma_n2": (sigma_n2 * scale2).tolist(),
                "sigma_u2": (sigma_u2 * scale2).tolist(),
            },
            grad_norm=grad_norm,
        )

    root = np.sqrt(scale2)
    return FitResult(
        design=design,
        method=method,
        theta=ev.theta * root,
        cov_fixed=ev.cov_fixed * scale2,
        u_blup=ev.u_blup * root,
        sigma_u2=tuple(float(v * scale2) for v in sigma_u2),
        sigma_n2=sigma_n2 * scale2,
        loglik=float(ev.loglik - 0.5 * (blocks.n_rows - (blocks.n_fixed if method == "REML" else 0)) * np.log(scale2)),
        converged=converged,
        n_iter=n_iter,
        grad_norm=float(grad_norm),
        pinned=tuple(pinned),
    )


def _eval_phi(phi, blocks, penalty_blocks, method, n_groups, fixed_sigma_u2=None):
    with np.errstate(over="ignore"):
        sigma_n2 = np.exp(phi[:n_groups])
        if fixed_sigma_u2 is None:
            sigma_u2 = np.exp(phi[n_groups:]) if len(penalty_blocks) else np.zeros(0)
        else:
            sigma_u2 = fixed_sigma_u2
    infeasible = ParamsEval(
        loglik=-np.inf,
        grad_sigma_n2=np.zeros(n_groups),
        grad_sigma_u2=np.zeros(len(penalty_blocks)),
        theta=np.zeros(blocks.n_fixed),
        u_blup=np.zeros(blocks.n_random),
        cov_fixed=np.eye(blocks.n_fixed),
        quad=np.inf,
    )
    if not (np.all(np.isfinite(sigma_n2)) and np.all(np.isfinite(sigma_u2))):
        return infeasible
    try:
        return evaluate_params(blocks, sigma_n2, sigma_u2, method, penalty_blocks)
    except (np.linalg.LinAlgError, ValueError):
        # Trial points can overflow the covariance algebra even when the
        # variances themselves are finite; treat them as infeasible so the
        # line search backs off.
        return infeasible


def _newton_polish(phi, blocks, penalty_blocks, method, n_groups, lower, n_iter, fixed_sigma_u2=None):
    """Newton iterations (finite-difference Hessian of the analytic gradient)
    to drive the projected gradient below GRAD_TOL."""
    n_par = phi.shape[0]

    def grad_at(p):
        ev = _eval_phi(p, blocks, penalty_blocks, method, n_groups, fixed_sigma_u2)
        g_n = ev.grad_sigma_n2 * np.exp(p[:n_groups])
        if fixed_sigma_u2 is None and len(penalty_blocks):
            g = np.concatenate([g_n, ev.grad_sigma_u2 * np.exp(p[n_groups:])])
        else:
            g = g_n if n_par == n_groups else np.concatenate([g_n, np.zeros(n_par - n_groups)])
        return ev.loglik, g

    value, grad = grad_at(phi)
    grad_norm = _projected_norm(phi, grad, lower)
    while n_iter < MAX_ITER:
        # Tolerances scale with |loglik|: the evaluation of the objective
        # cancels intermediates roughly 1e8 times larger than the value, so
        # both the value and its gradient carry noise proportional to the
        # value's magnitude. An absolute 1e-8 would sit below that floor on
        # large data sets and be unreachable.
        tol = GRAD_TOL * max(1.0, abs(value)) if np.isfinite(value) else GRAD_TOL
        if grad_norm < tol:
            return phi, n_iter, grad_norm, True
        hess = np.zeros((n_par, n_par))
        h = 1e-5
        for j in range(n_par):
            dp = np.zeros(n_par)
            dp[j] = h
            _, g_plus = grad_at(phi + dp)
            _, g_minus = grad_at(phi - dp)
            hess[:, j] = (g_plus - g_minus) / (2 * h)
        hess = 0.5 * (hess + hess.T)
        # Regularized Newton ascent: floor the Hessian eigenvalues away from
        # zero on the negative side, so flat or indefinite directions give a
        # bounded ascent step instead of a blow-up or a descent direction.
        eigval, eigvec = np.linalg.eigh(hess)
        floor = -1e-8 * max(1.0, float(np.max(np.abs(eigval))))
        eigval = np.minimum(eigval, floor)
        step = eigvec @ ((eigvec.T @ grad) / -eigval)
        # Scale-invariant stop: the Newton decrement bounds the attainable
        # log-likelihood improvement. Once it falls below the value's own
        # double-precision resolution at an interior point, the surface is
        # flat to machine accuracy and further iteration only churns the
        # evaluation noise of the gradient.
        decrement = 0.5 * float(grad @ step)
        interior = not np.any((phi <= lower + 1e-9) & (grad < 0))
        if np.isfinite(value) and interior and decrement < 1e-13 * max(1.0, abs(value)):
            return phi, n_iter, grad_norm, True
        big = np.max(np.abs(step))
        if big > 2.0:  # cap the log-scale move; backtracking handles the rest
            step *= 2.0 / big
        improved = False
        for _ in range(40):
            cand = np.maximum(phi + step, lower)
            cand_value, cand_grad = grad_at(cand)
            cand_norm = _projected_norm(cand, cand_grad, lower)
            # Accept on a real log-likelihood increase; once the predicted
            # improvement is within the evaluation noise of the objective,
            # accept instead on a strict contraction of the gradient norm
            # (a full Newton step near a regular optimum contracts it even
            # when the value change cannot be resolved in double precision).
            # The gradient evaluates far more accurately than the value at
            # stationarity, so when the decrement says there is essentially
            # nothing left to gain, its contraction alone decides. The noise
            # scale is ~8 digits below |value|: the value is assembled by
            # cancelling quadratic-form terms orders of magnitude larger
            # than itself.
            noise = 1e-8 * max(1.0, abs(value))
            ok_value = cand_value > value + noise
            ok_grad = cand_value > value - 10.0 * noise and cand_norm < 0.9 * grad_norm
            ok_grad_only = (
                np.isfinite(value)
                and decrement < 10.0 * noise
                and cand_norm < 0.6 * grad_norm
            )
            if np.isfinite(cand_value) and (ok_value or ok_grad or ok_grad_only):
                rel_step = np.max(np.abs(cand - phi) / np.maximum(np.abs(phi), 1.0))
                phi, value, grad = cand, cand_value, cand_grad
                grad_norm = cand_norm
                improved = True
                n_iter += 1
                if rel_step < STEP_TOL and grad_norm < tol:
                    return phi, n_iter, grad_norm, True
                break
            step = step / 2.0
        if not improved:
            break
    tol = GRAD_TOL * max(1.0, abs(value)) if np.isfinite(value) else GRAD_TOL
    return phi, n_iter, grad_norm, grad_norm < tol


def _projected_norm(phi, grad, lower):
    """Max-norm of the gradient, ignoring coordinates pressed on their lower
    bound from outside (KKT-satisfied boundary coordinates)."""
    active = (phi <= lower + 1e-9) & (grad < 0)
    g = np.where(active, 0.0, grad)
    return float(np.max(np.abs(g))) if g.size else 0.0


def _ols_theta(blocks: GramBlocks) -> np.ndarray:
    A = blocks.A.sum(axis=0)
    a = blocks.a.sum(axis=0)
    try:
        return np.linalg.solve(A, a)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, a, rcond=None)[0]


def _scaled_blocks(blocks: GramBlocks, inv_scale2: float) -> GramBlocks:
    """Gram blocks for the response y * sqrt(inv_scale2)."""
    root = np.sqrt(inv_scale2)
    return GramBlocks(
        A=blocks.A,
        B=blocks.B,
        D=blocks.D,
        a=blocks.a * root,
        b=blocks.b * root,
        s=blocks.s * inv_scale2,
        counts=blocks.counts,
    )


def decompose_variance(sigma_n2, counts, sizes=None, strict: bool = False) -> VarianceDecomposition:
    """Split the group residual variances into individual-level variance and
    within-household correlation.

    Regresses sigma_n2 on household size n (weighted ordinary least squares,
    weights = group row counts): intercept b0 = sigma_eps^2 (1 - rho), slope
    b1 = sigma_eps^2 rho. Standard errors come from the delta method on the
    weighted-OLS coefficient covariance. If the implied row variance
    1 + (n-1) rho is not positive for every observed n, the result is flagged
    (and rejected when strict=True).
    """
    sigma_n2 = np.asarray(sigma_n2, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if sizes is None:
        sizes = np.arange(1, sigma_n2.shape[0] + 1, dtype=float)
    sizes = np.asarray(sizes, dtype=float)
    n_groups = sigma_n2.shape[0]
    if n_groups < 2:
        raise DecompositionError("need at least 2 size groups to separate variance and correlation")
    if counts.shape[0] != n_groups or sizes.shape[0] != n_groups:
        raise DecompositionError("sigma_n2, counts and sizes must have equal length")
    if np.any(counts <= 0):
        raise DecompositionError("group counts must be positive")
    if np.ptp(sizes) == 0:
        raise DecompositionError("group sizes are all equal; slope is unidentified")

    X = np.column_stack([np.ones(n_groups), sizes])
    XtWX = X.T @ (counts[:, None] * X)
    XtWy = X.T @ (counts * sigma_n2)
    coef = np.linalg.solve(XtWX, XtWy)
    b0, b1 = float(coef[0]), float(coef[1])

    resid = sigma_n2 - X @ coef
    dof = max(n_groups - 2, 1)
    s2 = float(counts @ resid**2) / dof
    cov = s2 * np.linalg.inv(XtWX)

    total = b0 + b1
    if total <= 0:
        raise DecompositionError(
            f"intercept + slope = {total:.6g} <= 0; no valid variance decomposition"
        )
    sigma_eps2 = total
    rho = b1 / total

    grad_s = np.array([1.0, 1.0])
    grad_r = np.array([-b1, b0]) / total**2
    se_sigma = float(np.sqrt(grad_s @ cov @ grad_s))
    se_rho = float(np.sqrt(grad_r @ cov @ grad_r))

    implied = 1.0 + (sizes - 1.0) * rho
    pd_ok = bool(np.all(implied > 0))
    if not pd_ok:
        bad = sizes[implied <= 0]
        msg = (
            f"implied row variance factor 1 + (n-1) rho <= 0 at n = "
            f"{', '.join(f'{v:g}' for v in bad)} (rho = {rho:.4g})"
        )
        if strict:
            raise DecompositionError(msg)
        warnings.warn(msg, stacklevel=2)

    return VarianceDecomposition(
        sigma_eps2=sigma_eps2,
        rho=rho,
        se_sigma_eps2=se_sigma,
        se_rho=se_rho,
        intercept=b0,
        slope=b1,
        positive_definite=pd_ok,
    )


def predict_individual(fit: FitResult, panel: PanelData, bases: dict | None = None) -> IntakeMatrix:
    """Predicted weekly intake of every member: gender/age curve + spline +
    socio and week effects of the member's household.

    Inactive member-weeks are left at 0 and masked out in `active`.
    """
    from .design import individual_row  # local import to avoid cycle at load

    design = fit.design
    if bases is None:
        bases = design.bases
    members = tuple(m for hh in panel.households for m in hh.members)
    n_weeks = panel.n_weeks
    yhat = np.zeros((len(members), n_weeks))
    active = np.zeros((len(members), n_weeks), dtype=bool)
    gender_cols = design.gender_block()

    row = 0
    for hh in panel.households:
        for member in hh.members:
            for week in range(1, n_weeks + 1):
                if not member.is_active(week):
                    continue
                active[row, week - 1] = True
                ind = individual_row(member, week, bases)
                value = float(ind.z @ fit.u_blup) if fit.u_blup.size else 0.0
                for name, x_val in zip(_gender_names(ind.x.shape[0]), ind.x):
                    if name in gender_cols and x_val:
                        value += fit.theta[gender_cols[name]] * x_val
                codes = hh.socio[week - 1]
                for q, var in enumerate(panel.socio_meta.variables):
                    key = (var, int(codes[q]))
                    if key in design.socio_columns:
                        value += fit.theta[design.socio_columns[key]]
                if week in design.week_columns:
                    value += fit.theta[design.week_columns[week]]
                yhat[row, week - 1] = value
            row += 1
    return IntakeMatrix(members=members, yhat=yhat, active=active)


def _gender_names(length: int):
    from .design import GENDER_COLUMNS, POOLED_COLUMNS

    return GENDER_COLUMNS if length == 4 else POOLED_COLUMNS
