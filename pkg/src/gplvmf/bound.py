"""Collapsed variational lower bound on the log marginal likelihood.

Per user (dropping the user subscript), with K = K_MM over the inducing
inputs, A = K + beta * Psi2, and residual r = y - phi1:

    F =   (N/2) log beta - (N/2) log 2*pi + (1/2) log|K| - (1/2) log|A|
        - (1/2) (W1 - W2) - (beta/2) psi0 + (beta/2) Tr(K^-1 Psi2)

    W1 = beta * (y^T y - 2 y^T phi1 + phi0)
    W2 = beta^2 * r^T Psi1 A^-1 Psi1^T r

The total objective adds the per-user terms and subtracts one KL divergence
from the variational posterior to the standard-normal prior over every free
latent coordinate.

Everything is evaluated in whitened form: with K = L L^T and
B = I + beta * L^-1 Psi2 L^-T, the determinant terms collapse to
-(1/2) log|B| and every quadratic goes through triangular solves, so the
evaluation stays accurate even when inducing points nearly coincide.  The
backward pass chains analytic derivatives through the psi/phi statistics,
the factorizations, and the log-determinants; no finite differences are
used anywhere in training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .data import UserBlock
from .kernels import ArdKernel, LatentPoints, _PsiCache, gram_backward, psi_backward
from .meanfn import phi_backward, phi_statistics
from .state import VariationalState

DEFAULT_JITTER = 1e-6
_ESCALATION = (1.0, 10.0, 100.0)


class FactorizationError(ArithmeticError):
    """Cholesky failed even after jitter escalation."""


def _chol_with_escalation(mat: np.ndarray, scale: float, jitter: float, what: str, base: bool = True):
    """Lower-Cholesky of ``mat + j*scale*I``, escalating j twice before giving up.

    With ``base=False`` the first attempt adds no jitter (for systems that
    already inherit it).  Returns the factor and the jitter actually added.
    """
    mults = _ESCALATION if base else (0.0,) + _ESCALATION[1:]
    for mult in mults:
        j = jitter * mult
        try:
            return np.linalg.cholesky(mat + j * scale * np.eye(mat.shape[0])), j
        except np.linalg.LinAlgError:
            continue
    eigs = np.linalg.eigvalsh(mat)
    raise FactorizationError(
        f"{what}: Cholesky failed at jitter {jitter * _ESCALATION[-1]:.1e} * scale; "
        f"eigenvalue range [{eigs.min():.3e}, {eigs.max():.3e}], scale {scale:.3e}"
    )


@dataclass
class SharedFactors:
    """Quantities common to every user at a fixed (Z, alpha): the unit-signal
    inducing gram C = exp-part + jitter*I and its factorization."""

    gram0: np.ndarray        # exp part only, unit diagonal
    c: np.ndarray            # gram0 + jitter*I
    chol_c: np.ndarray       # lower triangular
    cinv: np.ndarray
    logdet: float
    jitter: float


def shared_factors(state: VariationalState, jitter: float = DEFAULT_JITTER) -> SharedFactors:
    alpha = np.exp(state.log_alpha)
    gram0 = np.exp(
        -0.5 * np.einsum("q,abq->ab", alpha, (state.z[:, None, :] - state.z[None, :, :]) ** 2)
    )
    chol_c, j = _chol_with_escalation(gram0, 1.0, jitter, "inducing gram")
    eye = np.eye(gram0.shape[0])
    c = gram0 + j * eye
    cinv = cho_solve((chol_c, True), eye)
    cinv = 0.5 * (cinv + cinv.T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol_c)))
    return SharedFactors(gram0=gram0, c=c, chol_c=chol_c, cinv=cinv, logdet=logdet, jitter=j)


@dataclass
class UserTerms:
    """Value and row-level gradients of one user's bound term.

    Row-level kernel gradients (``gmu_rows``/``gvar_rows``) are with respect
    to the per-row latent means and raw variances; the caller scatters them
    into the shared entity tables.  ``dphi1``/``dphi0`` feed the bias-latent
    backward pass.
    """

    value: float
    gmu_rows: np.ndarray | None = None
    gvar_rows: np.ndarray | None = None
    gz: np.ndarray | None = None
    galpha: np.ndarray | None = None
    gsigma2: float = 0.0
    gbeta: float = 0.0
    dphi1: np.ndarray | None = None
    dphi0: float = 0.0
    phi1: np.ndarray | None = None


def _user_terms(
    block: UserBlock,
    state: VariationalState,
    shared: SharedFactors,
    want_gradients: bool,
) -> UserTerms:
    n = block.count
    m = state.inducing_count
    alpha = np.exp(state.log_alpha)
    sigma2 = float(np.exp(state.log_sigma2[block.user]))
    beta = float(np.exp(state.log_beta[block.user]))
    y = block.ratings

    mu_rows, var_rows = state.assemble_rows(block)
    kern = ArdKernel(sigma2, alpha)
    cache = _PsiCache(kern, LatentPoints(mu_rows, var_rows, state.layout.fixed_mask), state.z)
    psi1 = cache.psi1
    psi2 = cache.psi2_rows.sum(axis=0)
    psi0 = n * sigma2

    if state.bias is not None:
        phi = phi_statistics(state.bias, block)
        phi1, phi0 = phi.phi1, phi.phi0
    else:
        phi1, phi0 = np.zeros(n), 0.0

    # whitened system: K = L L^T, B = I + beta * L^-1 Psi2 L^-T
    l_k = np.sqrt(sigma2) * shared.chol_c
    half = solve_triangular(l_k, psi2, lower=True)
    t_mat = solve_triangular(l_k, half.T, lower=True)
    t_mat = 0.5 * (t_mat + t_mat.T)
    b = np.eye(m) + beta * t_mat
    # escalation adds extra*I to B, i.e. extra*K to A; gradient stays exact
    chol_b, extra = _chol_with_escalation(b, 1.0, shared.jitter, f"user {block.user} system", base=False)

    resid = y - phi1
    c_vec = psi1.T @ resid
    c_hat = solve_triangular(l_k, c_vec, lower=True)
    b_inv_c_hat = cho_solve((chol_b, True), c_hat)

    logdet_b = 2.0 * np.sum(np.log(np.diag(chol_b)))
    tr_kinv_psi2 = float(np.trace(t_mat))
    quad = float(y @ y - 2.0 * (y @ phi1) + phi0)
    w1 = beta * quad
    w2 = beta**2 * float(c_hat @ b_inv_c_hat)

    value = (
        0.5 * n * np.log(beta)
        - 0.5 * n * np.log(2.0 * np.pi)
        - 0.5 * logdet_b
        - 0.5 * (w1 - w2)
        - 0.5 * beta * psi0
        + 0.5 * beta * tr_kinv_psi2
    )

    if not want_gradients:
        return UserTerms(value=float(value))

    eye = np.eye(m)
    w = solve_triangular(l_k.T, b_inv_c_hat, lower=False)       # A^-1 c
    l_inv = solve_triangular(l_k, eye, lower=True)
    b_inv = cho_solve((chol_b, True), eye)
    a_inv = l_inv.T @ b_inv @ l_inv
    a_inv = 0.5 * (a_inv + a_inv.T)
    k_inv = shared.cinv / sigma2
    kinv_psi2_kinv = k_inv @ psi2 @ k_inv
    ww = np.outer(w, w)

    # cotangent of A = (1 + extra) * K + beta * Psi2
    d_a = -0.5 * a_inv - 0.5 * beta**2 * ww
    d_k = 0.5 * k_inv + (1.0 + extra) * d_a - 0.5 * beta * kinv_psi2_kinv
    d_psi2 = beta * d_a + 0.5 * beta * k_inv
    d_psi1 = beta**2 * np.outer(resid, w)
    d_psi0 = -0.5 * beta

    psi_grads = psi_backward(cache, d_psi0, d_psi1, d_psi2)

    # K_MM = sigma2 * (gram0 + jitter*I): route the gram channel into Z/alpha
    # and fold the whole sigma2 dependence into one scaling identity.
    gz_k, galpha_k = gram_backward(ArdKernel(1.0, alpha), state.z, shared.gram0, sigma2 * d_k)
    gsigma2 = psi_grads.dsigma2 + float(np.sum(d_k * shared.c))

    # d(W2/2)/dbeta = beta c^T w - (beta^2/2) w^T Psi2 w, with dA/dbeta = Psi2
    gbeta = (
        0.5 * n / beta
        - 0.5 * float(np.sum(a_inv * psi2))
        - 0.5 * quad
        + beta * float(c_vec @ w)
        - 0.5 * beta**2 * float(w @ psi2 @ w)
        - 0.5 * psi0
        + 0.5 * tr_kinv_psi2
    )

    d_phi1 = beta * y - beta**2 * (psi1 @ w)
    d_phi0 = -0.5 * beta

    return UserTerms(
        value=float(value),
        gmu_rows=psi_grads.dmu,
        gvar_rows=psi_grads.dvar,
        gz=psi_grads.dz + gz_k,
        galpha=psi_grads.dalpha + galpha_k,
        gsigma2=gsigma2,
        gbeta=gbeta,
        dphi1=d_phi1,
        dphi0=d_phi0,
        phi1=phi1,
    )


def user_bound(block: UserBlock, state: VariationalState, jitter: float = DEFAULT_JITTER) -> float:
    """The collapsed bound term of a single user."""
    shared = shared_factors(state, jitter)
    return _user_terms(block, state, shared, want_gradients=False).value


def kl_to_prior(state: VariationalState) -> float:
    """KL(q || standard normal) summed over all free latent coordinates."""
    total = 0.0
    pairs = [(state.item_mean, state.item_log_var)] + list(zip(state.ctx_mean, state.ctx_log_var))
    if state.bias is not None:
        pairs.append((state.bias.item_mean, state.bias.item_log_var))
        pairs += list(zip(state.bias.context_mean, state.bias.context_log_var))
    for mean, log_var in pairs:
        var = np.exp(log_var)
        if np.any(var <= 0.0) or not np.all(np.isfinite(var)):
            raise ValueError("free coordinates need positive finite variance")
        total += 0.5 * float(np.sum(mean**2 + var - log_var - 1.0))
    return total


def kl_gradients(state: VariationalState) -> dict:
    """Named gradients of :func:`kl_to_prior` (log-variance parameterization)."""
    grads = {}
    grads["item_mean"] = state.item_mean.copy()
    grads["item_log_var"] = 0.5 * (np.exp(state.item_log_var) - 1.0)
    for j in range(len(state.ctx_mean)):
        grads[f"ctx_mean_{j}"] = state.ctx_mean[j].copy()
        grads[f"ctx_log_var_{j}"] = 0.5 * (np.exp(state.ctx_log_var[j]) - 1.0)
    if state.bias is not None:
        grads["bias_item_mean"] = state.bias.item_mean.copy()
        grads["bias_item_log_var"] = 0.5 * (np.exp(state.bias.item_log_var) - 1.0)
        for j in range(len(state.bias.context_mean)):
            grads[f"bias_ctx_mean_{j}"] = state.bias.context_mean[j].copy()
            grads[f"bias_ctx_log_var_{j}"] = 0.5 * (np.exp(state.bias.context_log_var[j]) - 1.0)
    return grads


@dataclass
class BoundReport:
    """Objective value, its decomposition, and the flat gradient."""

    total: float
    per_user: np.ndarray
    kl: float
    gradients: np.ndarray | None
    grad_dict: dict | None = None


def _scatter_user(state: VariationalState, block: UserBlock, terms: UserTerms, grads: dict) -> None:
    layout = state.layout
    gmu, gvar = terms.gmu_rows, terms.gvar_rows
    for b in layout.blocks:
        if b.kind == "item":
            np.add.at(grads["item_mean"], block.items, gmu[:, b.sl])
            np.add.at(grads["item_log_var"], block.items, gvar[:, b.sl])
        elif b.kind == "categorical":
            codes = block.cat_values[:, b.table]
            np.add.at(grads[f"ctx_mean_{b.table}"], codes, gmu[:, b.sl])
            np.add.at(grads[f"ctx_log_var_{b.table}"], codes, gvar[:, b.sl])
        # real columns are data, not parameters: gradient intentionally dropped
    grads["z"] += terms.gz
    grads["log_alpha"] += terms.galpha
    grads["log_sigma2"][block.user] += terms.gsigma2 * np.exp(state.log_sigma2[block.user])
    grads["log_beta"][block.user] += terms.gbeta * np.exp(state.log_beta[block.user])
    if state.bias is not None:
        pg = phi_backward(state.bias, block, terms.dphi1, terms.dphi0, terms.phi1)
        grads["bias_item_mean"] += pg.item_mean
        grads["bias_item_log_var"] += pg.item_log_var
        for j in range(len(state.bias.context_mean)):
            grads[f"bias_ctx_mean_{j}"] += pg.context_mean[j]
            grads[f"bias_ctx_log_var_{j}"] += pg.context_log_var[j]
        if state.bias.real_weights.size:
            grads["real_weights"] += pg.real_weights
        grads["user_bias"][block.user] += pg.user_bias


def total_bound(
    blocks: list,
    state: VariationalState,
    jitter: float = DEFAULT_JITTER,
    want_gradients: bool = True,
) -> BoundReport:
    """Sum of user terms minus the KL to the prior, with the full gradient.

    User terms are independent given a read-only state snapshot (map-reduce
    contract); variance gradients are accumulated against the raw variances
    per user and converted to the log parameterization once at the end.
    """
    shared = shared_factors(state, jitter)
    per_user = np.empty(len(blocks))

    grads = state.zero_grads() if want_gradients else None
    for i, block in enumerate(blocks):
        terms = _user_terms(block, state, shared, want_gradients)
        per_user[i] = terms.value
        if want_gradients:
            _scatter_user(state, block, terms, grads)

    kl = kl_to_prior(state)
    total = float(per_user.sum() - kl)

    if not want_gradients:
        return BoundReport(total=total, per_user=per_user, kl=kl, gradients=None)

    # variance and alpha grads were accumulated raw; convert to log-space
    grads["item_log_var"] *= np.exp(state.item_log_var)
    for j in range(len(state.ctx_mean)):
        grads[f"ctx_log_var_{j}"] *= np.exp(state.ctx_log_var[j])
    grads["log_alpha"] *= np.exp(state.log_alpha)

    for key, g in kl_gradients(state).items():
        grads[key] -= g

    vec = state.pack_like(grads)
    return BoundReport(total=total, per_user=per_user, kl=kl, gradients=vec, grad_dict=grads)


@dataclass
class UserPosterior:
    """Cached per-user whitened solve factors for q(u) and prediction."""

    user: int
    sigma2: float
    beta: float
    chol_k: np.ndarray       # lower factor of K = sigma2 * C
    chol_b: np.ndarray       # lower factor of B = I + beta * L^-1 Psi2 L^-T
    v: np.ndarray            # A^-1 Psi1^T (y - phi1)
    k_mm: np.ndarray
    shared: SharedFactors

    def solve_a(self, x: np.ndarray) -> np.ndarray:
        """(K + beta * Psi2)^-1 x through the whitened factors."""
        t = solve_triangular(self.chol_k, x, lower=True)
        t = cho_solve((self.chol_b, True), t)
        return solve_triangular(self.chol_k.T, t, lower=False)


def user_posterior(
    block: UserBlock,
    state: VariationalState,
    shared: SharedFactors | None = None,
    jitter: float = DEFAULT_JITTER,
) -> UserPosterior:
    if shared is None:
        shared = shared_factors(state, jitter)
    sigma2 = float(np.exp(state.log_sigma2[block.user]))
    beta = float(np.exp(state.log_beta[block.user]))
    alpha = np.exp(state.log_alpha)
    mu_rows, var_rows = state.assemble_rows(block)
    cache = _PsiCache(ArdKernel(sigma2, alpha), LatentPoints(mu_rows, var_rows), state.z)
    psi2 = cache.psi2_rows.sum(axis=0)
    if state.bias is not None:
        phi1 = phi_statistics(state.bias, block).phi1
    else:
        phi1 = np.zeros(block.count)
    l_k = np.sqrt(sigma2) * shared.chol_c
    half = solve_triangular(l_k, psi2, lower=True)
    t_mat = solve_triangular(l_k, half.T, lower=True)
    b = np.eye(state.inducing_count) + beta * 0.5 * (t_mat + t_mat.T)
    chol_b, _ = _chol_with_escalation(b, 1.0, shared.jitter, f"user {block.user} system", base=False)
    post = UserPosterior(
        user=block.user,
        sigma2=sigma2,
        beta=beta,
        chol_k=l_k,
        chol_b=chol_b,
        v=np.zeros(state.inducing_count),
        k_mm=sigma2 * shared.c,
        shared=shared,
    )
    post.v = post.solve_a(cache.psi1.T @ (block.ratings - phi1))
    return post


def optimal_qu(block: UserBlock, state: VariationalState, jitter: float = DEFAULT_JITTER):
    """Mean and covariance of the collapsed-out inducing posterior q(u).

    mu_u  = K (beta^-1 K + Psi2)^-1 Psi1^T (y - phi1) = beta K A^-1 c
    Sig_u = beta^-1 K (beta^-1 K + Psi2)^-1 K = K A^-1 K = L B^-1 L^T

    The two spellings (beta^-1 K + Psi2 versus K + beta Psi2) are the same
    system up to a beta rescaling; everything here solves against
    A = K + beta * Psi2 in whitened form.
    """
    post = user_posterior(block, state, jitter=jitter)
    mu_u = post.beta * (post.k_mm @ post.v)
    shalf = solve_triangular(post.chol_b, post.chol_k.T, lower=True)
    sigma_u = shalf.T @ shalf
    return mu_u, 0.5 * (sigma_u + sigma_u.T)
