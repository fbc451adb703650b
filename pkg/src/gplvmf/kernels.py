"""ARD squared-exponential kernel and its Gaussian-expectation statistics.

The kernel between two latent vectors is

    k(x, x') = sigma2 * exp(-0.5 * sum_q alpha_q * (x_q - x'_q)^2)

with one inverse length-scale ``alpha_q`` per latent coordinate.  Training
needs three expectations of kernel matrices under a diagonal-Gaussian
posterior over the inputs (rows are independent, coordinates independent):

    psi0 = Tr <K_NN>        Psi1 = <K_NM>        Psi2 = <K_MN K_NM>

For this kernel family all three are closed-form products of 1-D Gaussian
integrals; the Monte-Carlo estimator in :func:`mc_psi_oracle` exists purely
to validate the closed forms and is never used in training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ArdKernel:
    """Signal variance and per-coordinate inverse length-scales (all > 0)."""

    signal_variance: float
    inv_length_scales: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "inv_length_scales", np.asarray(self.inv_length_scales, dtype=float))
        if self.signal_variance < 0:
            raise ValueError("signal variance must be non-negative")
        if np.any(self.inv_length_scales < 0):
            raise ValueError("inverse length-scales must be non-negative")

    @property
    def dim(self) -> int:
        return self.inv_length_scales.shape[0]


@dataclass(frozen=True)
class LatentPoints:
    """Rows of diagonal-Gaussian latent points.

    ``fixed_mask`` marks coordinates pinned to observed values (point-mass
    posterior); those columns must carry exactly zero variance.
    """

    mean: np.ndarray
    var: np.ndarray
    fixed_mask: np.ndarray | None = None

    def __post_init__(self):
        mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
        var = np.atleast_2d(np.asarray(self.var, dtype=float))
        if mean.shape != var.shape:
            raise ValueError("mean and var must have matching shapes")
        if np.any(var < 0):
            raise ValueError("latent variances must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)
        if self.fixed_mask is not None:
            mask = np.asarray(self.fixed_mask, dtype=bool)
            if mask.shape != (mean.shape[1],):
                raise ValueError("fixed_mask must have one entry per coordinate")
            if np.any(var[:, mask] != 0.0):
                raise ValueError("fixed coordinates must have exactly zero variance")
            object.__setattr__(self, "fixed_mask", mask)

    @property
    def count(self) -> int:
        return self.mean.shape[0]

    @property
    def dim(self) -> int:
        return self.mean.shape[1]


@dataclass(frozen=True)
class PsiStats:
    """The three kernel expectations for one user block."""

    psi0: float
    psi1: np.ndarray
    psi2: np.ndarray


def kernel_matrix(kernel: ArdKernel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain kernel matrix between row sets ``a`` (n x Q) and ``b`` (m x Q)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != kernel.dim or b.shape[1] != kernel.dim:
        raise ValueError(
            f"input dimension mismatch: kernel expects Q={kernel.dim}, "
            f"got {a.shape[1]} and {b.shape[1]}"
        )
    diff = a[:, None, :] - b[None, :, :]
    expo = -0.5 * np.einsum("q,nmq->nm", kernel.inv_length_scales, diff**2)
    return kernel.signal_variance * np.exp(expo)


class _PsiCache:
    """Forward intermediates reused by the backward pass."""

    __slots__ = ("mu", "s", "z", "alpha", "sigma2", "d1", "diff1", "psi1", "d2", "dz", "dmu", "psi2_rows")

    def __init__(self, kernel: ArdKernel, points: LatentPoints, z: np.ndarray):
        mu, s = points.mean, points.var
        alpha = kernel.inv_length_scales
        sigma2 = kernel.signal_variance
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[1] != kernel.dim or mu.shape[1] != kernel.dim:
            raise ValueError("latent points, inducing inputs and kernel must share dimension Q")

        self.mu, self.s, self.z, self.alpha, self.sigma2 = mu, s, z, alpha, sigma2

        self.d1 = 1.0 + alpha * s                                   # (N, Q)
        self.diff1 = mu[:, None, :] - z[None, :, :]                 # (N, M, Q)
        expo1 = -0.5 * np.einsum("q,nmq->nm", alpha, self.diff1**2 / self.d1[:, None, :])
        expo1 -= 0.5 * np.sum(np.log(self.d1), axis=1)[:, None]
        self.psi1 = sigma2 * np.exp(expo1)                          # (N, M)

        self.d2 = 1.0 + 2.0 * alpha * s                             # (N, Q)
        self.dz = z[:, None, :] - z[None, :, :]                     # (M, M, Q)
        zbar = 0.5 * (z[:, None, :] + z[None, :, :])
        self.dmu = mu[:, None, None, :] - zbar[None, :, :, :]       # (N, M, M, Q)
        expo2 = -0.25 * np.einsum("q,abq->ab", alpha, self.dz**2)[None, :, :]
        expo2 = expo2 - np.einsum("q,nabq->nab", alpha, self.dmu**2 / self.d2[:, None, None, :])
        expo2 = expo2 - 0.5 * np.sum(np.log(self.d2), axis=1)[:, None, None]
        self.psi2_rows = sigma2**2 * np.exp(expo2)                  # (N, M, M)

    def stats(self) -> PsiStats:
        n = self.mu.shape[0]
        return PsiStats(psi0=n * self.sigma2, psi1=self.psi1, psi2=self.psi2_rows.sum(axis=0))


def psi_statistics(kernel: ArdKernel, points: LatentPoints, z: np.ndarray) -> PsiStats:
    """Closed-form psi0, Psi1, Psi2 under the diagonal-Gaussian posterior.

    With all variances zero this collapses to the plain kernel matrices:
    Psi1 = K_NM and Psi2 = K_MN K_NM.  psi0 is exactly N * sigma2 because
    the kernel diagonal is constant.
    """
    if points.count < 1:
        raise ValueError("need at least one latent point")
    return _PsiCache(kernel, points, z).stats()


@dataclass(frozen=True)
class PsiGradients:
    """Gradients of a scalar objective through the psi statistics.

    ``dmu``/``dvar`` are per-row (N x Q); ``dz`` is (M x Q); ``dalpha`` and
    ``dsigma2`` are in the raw (not log) parameterization.
    """

    dmu: np.ndarray
    dvar: np.ndarray
    dz: np.ndarray
    dalpha: np.ndarray
    dsigma2: float


def psi_backward(
    cache: _PsiCache,
    dpsi0: float,
    dpsi1: np.ndarray,
    dpsi2: np.ndarray,
) -> PsiGradients:
    """Chain ``d objective / d (psi0, Psi1, Psi2)`` back to inputs.

    ``dpsi2`` must be the gradient with respect to the summed (M x M) Psi2;
    it is symmetrized here so callers may pass either triangle convention.
    """
    alpha, s = cache.alpha, cache.s
    n = cache.mu.shape[0]
    dpsi2 = 0.5 * (dpsi2 + dpsi2.T)

    # Psi1 channel
    t1 = dpsi1 * cache.psi1                                         # (N, M)
    r1 = alpha[None, None, :] * cache.diff1 / cache.d1[:, None, :]  # (N, M, Q)
    gmu = -np.einsum("nm,nmq->nq", t1, r1)
    gs = np.einsum(
        "nm,nmq->nq",
        t1,
        0.5 * alpha[None, None, :] ** 2 * cache.diff1**2 / cache.d1[:, None, :] ** 2
        - 0.5 * (alpha / cache.d1)[:, None, :],
    )
    gz = np.einsum("nm,nmq->mq", t1, r1)
    galpha = -0.5 * np.einsum(
        "nm,nmq->q",
        t1,
        cache.diff1**2 / cache.d1[:, None, :] ** 2 + (s / cache.d1)[:, None, :],
    )

    # Psi2 channel
    t2 = dpsi2[None, :, :] * cache.psi2_rows                        # (N, M, M)
    d2e = cache.d2[:, None, None, :]
    u2 = alpha[None, None, None, :] * cache.dmu / d2e               # (N, M, M, Q)
    gmu -= 2.0 * np.einsum("nab,nabq->nq", t2, u2)
    gs += np.einsum(
        "nab,nabq->nq",
        t2,
        2.0 * alpha[None, None, None, :] ** 2 * cache.dmu**2 / d2e**2
        - (alpha / cache.d2)[:, None, None, :],
    )
    galpha += np.einsum(
        "nab,nabq->q",
        t2,
        -0.25 * cache.dz[None, :, :, :] ** 2
        - cache.dmu**2 / d2e**2
        - (s / cache.d2)[:, None, None, :],
    )
    gz += 2.0 * (
        -0.5 * np.einsum("nab,abq->aq", t2, alpha[None, None, :] * cache.dz)
        + np.einsum("nab,nabq->aq", t2, u2)
    )

    # All three statistics are monomials in sigma2 (degrees 1, 1, 2).
    psi2 = cache.psi2_rows.sum(axis=0)
    gsigma2 = (
        np.sum(dpsi1 * cache.psi1) + 2.0 * np.sum(dpsi2 * psi2) + dpsi0 * n * cache.sigma2
    ) / cache.sigma2

    return PsiGradients(dmu=gmu, dvar=gs, dz=gz, dalpha=galpha, dsigma2=float(gsigma2))


def gram_backward(kernel: ArdKernel, z: np.ndarray, gram: np.ndarray, dgram: np.ndarray):
    """Backward of ``kernel_matrix(kernel, z, z)`` for a symmetric ``dgram``.

    Returns (dz, dalpha); the sigma2 channel is left to the caller, which
    usually folds it into a single scaling identity across all statistics.
    """
    dgram = 0.5 * (dgram + dgram.T)
    w = dgram * gram
    dz_pair = z[:, None, :] - z[None, :, :]
    gz = -2.0 * kernel.inv_length_scales[None, :] * np.einsum("ab,abq->aq", w, dz_pair)
    galpha = -0.5 * np.einsum("ab,abq->q", w, dz_pair**2)
    return gz, galpha


@dataclass(frozen=True)
class McPsiEstimate:
    """Monte-Carlo psi statistics with per-entry standard errors."""

    stats: PsiStats
    psi0_se: float
    psi1_se: np.ndarray
    psi2_se: np.ndarray
    samples: int


def mc_psi_oracle(
    kernel: ArdKernel,
    points: LatentPoints,
    z: np.ndarray,
    samples: int,
    seed: int,
    chunk: int = 100_000,
) -> McPsiEstimate:
    """Unbiased sampling estimate of the psi statistics, for validation.

    Draws each latent row from its diagonal Gaussian, evaluates the exact
    kernel on the draws, and averages.  Standard errors are the sample
    standard deviation of the per-draw statistics divided by sqrt(samples).
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    mu, s = points.mean, points.var
    n, m = points.count, z.shape[0]
    q = mu.shape[1]
    sd = np.sqrt(s)

    sum1 = np.zeros((n, m))
    sumsq1 = np.zeros((n, m))
    sum2 = np.zeros((m, m))
    sumsq2 = np.zeros((m, m))
    sum0 = 0.0
    sumsq0 = 0.0

    # scaled coordinates turn the exponent into a matmul-friendly form
    root_alpha = np.sqrt(kernel.inv_length_scales)
    zs = z * root_alpha[None, :]
    z_sq = np.sum(zs**2, axis=1)

    done = 0
    while done < samples:
        size = min(chunk, samples - done)
        x = mu[None, :, :] + rng.standard_normal((size, n, q)) * sd[None, :, :]
        xs = (x * root_alpha[None, None, :]).reshape(size * n, q)
        x_sq = np.sum(xs**2, axis=1)
        expo = xs @ zs.T
        expo *= 2.0
        expo -= x_sq[:, None]
        expo -= z_sq[None, :]
        k = kernel.signal_variance * np.exp(0.5 * expo).reshape(size, n, m)
        sum1 += k.sum(axis=0)
        sumsq1 += (k**2).sum(axis=0)
        p2 = np.matmul(k.transpose(0, 2, 1), k)
        sum2 += p2.sum(axis=0)
        sumsq2 += (p2**2).sum(axis=0)
        diag = np.full(size, n * kernel.signal_variance)
        sum0 += diag.sum()
        sumsq0 += (diag**2).sum()
        done += size

    def _finish(total, totalsq, count):
        mean = total / count
        var = np.maximum(totalsq / count - mean**2, 0.0)
        return mean, np.sqrt(var / count)

    mean1, se1 = _finish(sum1, sumsq1, samples)
    mean2, se2 = _finish(sum2, sumsq2, samples)
    mean0, se0 = _finish(np.asarray(sum0), np.asarray(sumsq0), samples)
    return McPsiEstimate(
        stats=PsiStats(psi0=float(mean0), psi1=mean1, psi2=mean2),
        psi0_se=float(se0),
        psi1_se=se1,
        psi2_se=se2,
        samples=samples,
    )
