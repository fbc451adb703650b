"""Predictive distributions and the context-relevance report.

The predictive mean for a query row of user n is

    mean = Psi1* (beta^-1 K + Psi2)^-1 Psi1^T (y - phi1) + phi1*
         = beta * Psi1* A^-1 c + phi1*,        A = K + beta * Psi2,

with Psi1* and phi1* evaluated under the trained variational distribution of
the query's item/context latents (real-valued contexts contribute their
standardized observed value directly).  The reported variance is the sparse
posterior variance of the latent function value,

    var = sigma2 - Psi1* (K^-1 - A^-1) Psi1*^T,

clipped at zero after symmetric stabilization; observation noise 1/beta can
be added on request.  At Z = X with point-mass latents this reduces exactly
to the full GP posterior variance, which is how the expression is validated.

Unknown users are a hard error by default: the model is user-centric and has
no latent representation to fall back on.  A global-mean fallback exists for
evaluation harness convenience.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .bound import DEFAULT_JITTER, SharedFactors, UserPosterior, shared_factors, user_posterior
from .data import ContextSchema
from .kernels import ArdKernel, LatentPoints, psi_statistics
from .state import VariationalState


class UnknownUserError(KeyError):
    """Raised for users with no training block (no cold-start model)."""


@dataclass(frozen=True)
class Prediction:
    mean: float
    variance: float
    clamped_mean: float


@dataclass(frozen=True)
class ContextRelevance:
    """Per-block sums of the inverse length-scales, with normalized shares.

    Entries are (name, score, share); the item block appears as its own entry
    for reference.  Shares sum to one whenever any score is positive.
    """

    entries: tuple

    def score(self, name: str) -> float:
        return dict((n, s) for n, s, _ in self.entries)[name]

    def share(self, name: str) -> float:
        return dict((n, sh) for n, _, sh in self.entries)[name]


class Predictor:
    """Read-only prediction context over a trained state and its training blocks.

    Per-user solve factors are cached on first use and shared across queries;
    everything here is safe for concurrent readers.
    """

    def __init__(
        self,
        state: VariationalState,
        blocks: list,
        standardization=None,
        rating_scale: tuple[float, float] | None = None,
        jitter: float = DEFAULT_JITTER,
        global_mean: float | None = None,
    ):
        self.state = state
        self.blocks_by_user = {b.user: b for b in blocks}
        self.standardization = standardization
        self.rating_scale = rating_scale
        self.jitter = jitter
        self.shared: SharedFactors = shared_factors(state, jitter)
        self._posteriors: dict[int, UserPosterior] = {}
        if global_mean is None and blocks:
            global_mean = float(np.mean(np.concatenate([b.ratings for b in blocks])))
        self.global_mean = global_mean

    def _posterior(self, user: int) -> UserPosterior:
        post = self._posteriors.get(user)
        if post is None:
            post = user_posterior(
                self.blocks_by_user[user], self.state, shared=self.shared, jitter=self.jitter
            )
            self._posteriors[user] = post
        return post

    def _split_context(self, context_values):
        """Raw query context values (schema order) -> (cat codes, std reals)."""
        schema = self.state.schema
        if len(context_values) != schema.context_count:
            raise ValueError(
                f"expected {schema.context_count} context values, got {len(context_values)}"
            )
        cats, reals = [], []
        for d, ctx in enumerate(schema.contexts):
            if ctx.is_categorical:
                cats.append(int(context_values[d]))
            else:
                reals.append(float(context_values[d]))
        reals = np.asarray(reals, dtype=float)
        if self.standardization is not None and reals.size:
            reals = self.standardization.apply(reals)
        return np.asarray(cats, dtype=np.int64), reals

    def _query_latent(self, item: int, cats: np.ndarray, reals: np.ndarray):
        """Latent mean/variance row for one query; unseen codes hit the
        trailing prior row of the relevant entity table."""
        state = self.state
        q = state.kernel_dim
        mu = np.zeros((1, q))
        var = np.zeros((1, q))
        for b in state.layout.blocks:
            if b.kind == "item":
                idx = item if 0 <= item < state.schema.item_count else state.schema.item_count
                mu[0, b.sl] = state.item_mean[idx]
                var[0, b.sl] = np.exp(state.item_log_var[idx])
            elif b.kind == "categorical":
                card = state.ctx_mean[b.table].shape[0] - 1
                code = int(cats[b.table])
                idx = code if 0 <= code < card else card
                mu[0, b.sl] = state.ctx_mean[b.table][idx]
                var[0, b.sl] = np.exp(state.ctx_log_var[b.table][idx])
            else:
                mu[0, b.sl] = reals[b.table]
        return mu, var

    def _query_bias(self, user: int, item: int, cats: np.ndarray, reals: np.ndarray) -> float:
        bias = self.state.bias
        if bias is None:
            return 0.0
        schema = self.state.schema
        out = float(bias.user_bias[user])
        idx = item if 0 <= item < schema.item_count else schema.item_count
        out += float(bias.item_mean[idx].sum())
        for j, arr in enumerate(bias.context_mean):
            card = arr.shape[0] - 1
            code = int(cats[j])
            out += float(arr[code if 0 <= code < card else card].sum())
        if reals.size:
            out += float(reals @ bias.real_weights)
        return out

    def predict(
        self,
        user: int,
        item: int,
        context_values,
        include_noise: bool = False,
        unknown_user: str = "error",
    ) -> Prediction:
        state = self.state
        if user not in self.blocks_by_user:
            if unknown_user == "global_mean" and self.global_mean is not None:
                mean = self.global_mean
                return Prediction(mean, float("nan"), self._clamp(mean))
            raise UnknownUserError(
                f"user {user} has no training ratings; no cold-start model is defined"
            )
        post = self._posterior(user)
        cats, reals = self._split_context(context_values)
        mu, var = self._query_latent(item, cats, reals)

        kern = ArdKernel(post.sigma2, np.exp(state.log_alpha))
        psi1_star = psi_statistics(kern, LatentPoints(mu, var), state.z).psi1  # (1, M)
        phi1_star = self._query_bias(user, item, cats, reals)

        mean = post.beta * float(psi1_star[0] @ post.v) + phi1_star

        # var = sigma2 - psi* (K^-1 - A^-1) psi*^T, via whitened triangular solves
        half_k = solve_triangular(post.chol_k, psi1_star.T, lower=True)
        q1 = float(np.sum(half_k**2))
        half_b = solve_triangular(post.chol_b, half_k, lower=True)
        q2 = float(np.sum(half_b**2))
        variance = max(post.sigma2 - q1 + q2, 0.0)
        if include_noise:
            variance += 1.0 / post.beta

        return Prediction(mean=mean, variance=variance, clamped_mean=self._clamp(mean))

    def _clamp(self, mean: float) -> float:
        if self.rating_scale is None:
            return mean
        lo, hi = self.rating_scale
        return float(min(max(mean, lo), hi))

    def predict_rows(
        self,
        users,
        items,
        context_rows,
        include_noise: bool = False,
        unknown_user: str = "error",
    ):
        """Vectorized over query rows; ``context_rows[i]`` is raw schema order."""
        means = np.empty(len(users))
        variances = np.empty(len(users))
        clamped = np.empty(len(users))
        for i, (u, it) in enumerate(zip(users, items)):
            p = self.predict(
                int(u), int(it), context_rows[i], include_noise=include_noise, unknown_user=unknown_user
            )
            means[i] = p.mean
            variances[i] = p.variance
            clamped[i] = p.clamped_mean
        return means, variances, clamped


def context_relevance(state: VariationalState, schema: ContextSchema | None = None) -> ContextRelevance:
    """Aggregate trained inverse length-scales per latent block.

    The per-context score sums alpha over that context's coordinates; the
    item block is reported alongside for reference.  Shares normalize the
    scores to sum to one.
    """
    alpha = np.exp(state.log_alpha)
    scores = [(b.name, float(alpha[b.sl].sum())) for b in state.layout.blocks]
    total = sum(s for _, s in scores)
    entries = tuple(
        (name, score, score / total if total > 0 else 0.0) for name, score in scores
    )
    return ContextRelevance(entries=entries)
