"""Training: state initialization, per-user SGD, and scaled conjugate gradients.

Both optimizers work on the unconstrained parameterization (positive
quantities as logs).  SGD visits users in a seeded shuffled order and each
step ascends the gradient of ``F_n - KL/N`` over the parameters touched by
that user plus the shared slice (inducing inputs and inverse length-scales);
the KL gradient is shared out at weight 1/N per step.  SCG is full-batch on
the negated total bound, following Moller's algorithm with the scalar
lambda regulator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .bound import DEFAULT_JITTER, kl_to_prior, shared_factors, total_bound, _user_terms
from .data import ContextSchema
from .meanfn import BiasLatents, phi_backward
from .state import ModelDims, VariationalState


class OptimizationError(RuntimeError):
    """Non-finite gradients or an unrecoverable optimizer breakdown."""


@dataclass
class TrainConfig:
    """Everything that shapes a training run; all randomness flows from ``seed``."""

    method: str = "sgd"                  # "sgd" or "scg"
    epochs: int = 150
    learning_rate: float = 0.02
    lr_decay: float = 0.998
    seed: int = 0
    inducing_count: int = 10
    item_dim: int = 2
    context_dim: int = 2
    item_bias_dim: int = 1
    context_bias_dim: int = 1
    use_mean: bool = True
    init_mean_scale: float = 0.1
    init_variance: float = 0.5
    tolerance: float = 1e-6
    patience: int = 20
    clip_norm: float = 100.0
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if self.method not in ("sgd", "scg"):
            raise ValueError(f"unknown optimization method {self.method!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must not be negative")
        if self.inducing_count < 1:
            raise ValueError("need at least one inducing point")

    def dims(self) -> ModelDims:
        return ModelDims(
            inducing_count=self.inducing_count,
            item_dim=self.item_dim,
            context_dim=self.context_dim,
            item_bias_dim=self.item_bias_dim,
            context_bias_dim=self.context_bias_dim,
            use_mean=self.use_mean,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceRow:
    step: int
    bound: float
    val_mae: float
    val_rmse: float
    seconds: float


@dataclass
class TrainTrace:
    """Per-epoch (SGD) or per-iteration (SCG) progress, writable as CSV."""

    rows: list = field(default_factory=list)

    def append(self, step, bound, val_mae=float("nan"), val_rmse=float("nan"), seconds=0.0):
        self.rows.append(TraceRow(step, float(bound), float(val_mae), float(val_rmse), float(seconds)))

    def bounds(self) -> np.ndarray:
        return np.array([r.bound for r in self.rows])

    def write_csv(self, path) -> None:
        lines = ["step,bound,val_mae,val_rmse,seconds"]
        for r in self.rows:
            lines.append(f"{r.step},{r.bound!r},{r.val_mae!r},{r.val_rmse!r},{r.seconds!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def init_state(
    schema: ContextSchema,
    blocks: list,
    config: TrainConfig,
    seed: int | None = None,
) -> VariationalState:
    """Deterministic starting point.

    Free latent means start near zero (N(0, init_mean_scale^2)), variances at
    ``init_variance``; the trailing "unknown" row of every entity table sits
    exactly at the prior.  Inducing inputs are sampled from the assembled row
    means with small jitter.  Per-user: sigma2 = beta = 1 and the bias starts
    at the user's mean rating.  alpha starts uniform at 1/Q.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dims = config.dims()
    n_users = schema.user_count
    log_v0 = np.log(config.init_variance)

    def latent_table(entities: int, dim: int):
        mean = np.zeros((entities + 1, dim))
        mean[:entities] = rng.normal(0.0, config.init_mean_scale, size=(entities, dim))
        log_var = np.full((entities + 1, dim), log_v0)
        log_var[entities] = 0.0  # unknown row: exact prior
        return mean, log_var

    item_mean, item_log_var = latent_table(schema.item_count, dims.item_dim)
    ctx_mean, ctx_log_var = [], []
    for ctx in schema.contexts:
        if ctx.is_categorical:
            mean, log_var = latent_table(ctx.cardinality, dims.context_dim)
            ctx_mean.append(mean)
            ctx_log_var.append(log_var)

    bias = None
    if dims.use_mean:
        b_item_mean, b_item_log_var = latent_table(schema.item_count, dims.item_bias_dim)
        b_ctx_mean, b_ctx_log_var = [], []
        for ctx in schema.contexts:
            if ctx.is_categorical:
                mean, log_var = latent_table(ctx.cardinality, dims.context_bias_dim)
                b_ctx_mean.append(mean)
                b_ctx_log_var.append(log_var)
        user_bias = np.zeros(n_users)
        all_mean = np.mean(np.concatenate([b.ratings for b in blocks])) if blocks else 0.0
        user_bias[:] = all_mean
        for b in blocks:
            user_bias[b.user] = float(b.ratings.mean())
        n_real = len(schema.real_indices)
        bias = BiasLatents(
            user_bias=user_bias,
            item_mean=b_item_mean,
            item_log_var=b_item_log_var,
            context_mean=b_ctx_mean,
            context_log_var=b_ctx_log_var,
            real_weights=np.zeros(n_real),
        )

    state = VariationalState(
        schema=schema,
        dims=dims,
        item_mean=item_mean,
        item_log_var=item_log_var,
        ctx_mean=ctx_mean,
        ctx_log_var=ctx_log_var,
        bias=bias,
        z=np.zeros((dims.inducing_count, 0)),  # placeholder, replaced below
        log_alpha=np.zeros(0),
        log_sigma2=np.zeros(n_users),
        log_beta=np.zeros(n_users),
    )
    q = state.layout.dim
    state.log_alpha = np.full(q, -np.log(q))

    # inducing inputs: mean rows of randomly chosen rating rows, plus jitter
    row_index = [(bi, t) for bi, blk in enumerate(blocks) for t in range(blk.count)]
    z = np.empty((dims.inducing_count, q))
    if row_index:
        picks = rng.choice(len(row_index), size=dims.inducing_count, replace=len(row_index) < dims.inducing_count)
        for i, pick in enumerate(picks):
            bi, t = row_index[pick]
            mu_rows, _ = state.assemble_rows(blocks[bi])
            z[i] = mu_rows[t]
    z += rng.normal(0.0, 0.05, size=z.shape)
    state.z = z
    return state


def _check_finite(pieces: dict, user: int) -> None:
    for key, val in pieces.items():
        if not np.all(np.isfinite(val)):
            raise OptimizationError(
                f"non-finite gradient in parameter block {key!r} while processing user {user}"
            )


def _check_params_finite(state: VariationalState, user: int) -> None:
    with np.errstate(over="ignore"):
        checks = {
            "log_beta": np.exp(state.log_beta[user]),
            "log_sigma2": np.exp(state.log_sigma2[user]),
            "log_alpha": np.exp(state.log_alpha),
            "z": state.z,
        }
    for key, val in checks.items():
        if not np.all(np.isfinite(val)):
            raise OptimizationError(
                f"non-finite value in parameter block {key!r} while processing user {user}"
            )


def sgd_epoch(
    blocks: list,
    state: VariationalState,
    config: TrainConfig,
    epoch_index: int,
) -> tuple[VariationalState, float]:
    """One seeded shuffled pass over all users; mutates and returns ``state``.

    Returns the running bound estimate: the per-user terms as they were
    computed during the pass, minus the KL at the end of the epoch.
    """
    n_users = len(blocks)
    rng = np.random.default_rng([config.seed, 7919, epoch_index])
    order = rng.permutation(n_users)
    lr = config.learning_rate * config.lr_decay**epoch_index
    bias = state.bias
    layout = state.layout
    value_sum = 0.0

    for bi in order:
        block = blocks[bi]
        _check_params_finite(state, block.user)
        shared = shared_factors(state, config.jitter)
        terms = _user_terms(block, state, shared, want_gradients=True)
        value_sum += terms.value

        # compact per-entity accumulation for the touched coordinates,
        # including the 1/N share of the KL gradient
        item_idx, item_inv = np.unique(block.items, return_inverse=True)
        g_item_mean = np.zeros((item_idx.size, state.dims.item_dim))
        g_item_logv = np.zeros_like(g_item_mean)
        np.add.at(g_item_mean, item_inv, terms.gmu_rows[:, layout.item_slice])
        np.add.at(g_item_logv, item_inv, terms.gvar_rows[:, layout.item_slice])
        g_item_logv *= np.exp(state.item_log_var[item_idx])
        g_item_mean -= state.item_mean[item_idx] / n_users
        g_item_logv -= 0.5 * (np.exp(state.item_log_var[item_idx]) - 1.0) / n_users

        ctx_updates = []
        for b in layout.blocks:
            if b.kind != "categorical":
                continue
            codes = block.cat_values[:, b.table]
            cat_idx, cat_inv = np.unique(codes, return_inverse=True)
            gm = np.zeros((cat_idx.size, state.dims.context_dim))
            gv = np.zeros_like(gm)
            np.add.at(gm, cat_inv, terms.gmu_rows[:, b.sl])
            np.add.at(gv, cat_inv, terms.gvar_rows[:, b.sl])
            gv *= np.exp(state.ctx_log_var[b.table][cat_idx])
            gm -= state.ctx_mean[b.table][cat_idx] / n_users
            gv -= 0.5 * (np.exp(state.ctx_log_var[b.table][cat_idx]) - 1.0) / n_users
            ctx_updates.append((b.table, cat_idx, gm, gv))

        g_sigma = terms.gsigma2 * np.exp(state.log_sigma2[block.user])
        g_beta = terms.gbeta * np.exp(state.log_beta[block.user])
        g_alpha = terms.galpha * np.exp(state.log_alpha)

        pieces = {
            "item_mean": g_item_mean,
            "item_log_var": g_item_logv,
            "z": terms.gz,
            "log_alpha": g_alpha,
            "log_sigma2": g_sigma,
            "log_beta": g_beta,
        }
        for tbl, _, gm, gv in ctx_updates:
            pieces[f"ctx_mean_{tbl}"] = gm
            pieces[f"ctx_log_var_{tbl}"] = gv

        pg = None
        if bias is not None:
            pg = phi_backward(bias, block, terms.dphi1, terms.dphi0, terms.phi1)
            item_bias_idx = item_idx
            gbm = pg.item_mean[item_bias_idx] - bias.item_mean[item_bias_idx] / n_users
            gbv = pg.item_log_var[item_bias_idx] - 0.5 * (
                np.exp(bias.item_log_var[item_bias_idx]) - 1.0
            ) / n_users
            pieces["bias_item_mean"] = gbm
            pieces["bias_item_log_var"] = gbv
            bias_ctx_updates = []
            for tbl, cat_idx, _, _ in ctx_updates:
                bm = pg.context_mean[tbl][cat_idx] - bias.context_mean[tbl][cat_idx] / n_users
                bv = pg.context_log_var[tbl][cat_idx] - 0.5 * (
                    np.exp(bias.context_log_var[tbl][cat_idx]) - 1.0
                ) / n_users
                bias_ctx_updates.append((tbl, cat_idx, bm, bv))
                pieces[f"bias_ctx_mean_{tbl}"] = bm
                pieces[f"bias_ctx_log_var_{tbl}"] = bv
            pieces["user_bias"] = pg.user_bias
            if bias.real_weights.size:
                pieces["real_weights"] = pg.real_weights

        _check_finite(pieces, block.user)

        sq = sum(float(np.sum(np.asarray(v) ** 2)) for v in pieces.values())
        scale = lr
        norm = np.sqrt(sq)
        if config.clip_norm and norm > config.clip_norm:
            scale = lr * config.clip_norm / norm

        state.item_mean[item_idx] += scale * g_item_mean
        state.item_log_var[item_idx] += scale * g_item_logv
        for tbl, cat_idx, gm, gv in ctx_updates:
            state.ctx_mean[tbl][cat_idx] += scale * gm
            state.ctx_log_var[tbl][cat_idx] += scale * gv
        state.z += scale * terms.gz
        state.log_alpha += scale * g_alpha
        state.log_sigma2[block.user] += scale * g_sigma
        state.log_beta[block.user] += scale * g_beta
        if bias is not None:
            bias.item_mean[item_idx] += scale * pieces["bias_item_mean"]
            bias.item_log_var[item_idx] += scale * pieces["bias_item_log_var"]
            for tbl, cat_idx, bm, bv in bias_ctx_updates:
                bias.context_mean[tbl][cat_idx] += scale * bm
                bias.context_log_var[tbl][cat_idx] += scale * bv
            bias.user_bias[block.user] += scale * pieces["user_bias"]
            if bias.real_weights.size:
                bias.real_weights += scale * pieces["real_weights"]

    return state, value_sum - kl_to_prior(state)


@dataclass
class ScgResult:
    x: np.ndarray
    f: float
    iterations: int
    converged: bool
    reason: str


def scg_minimize(
    fun,
    x0: np.ndarray,
    max_iters: int = 500,
    grad_tol: float = 1e-6,
    f_tol: float = 0.0,
    sigma0: float = 1e-7,
    lambda0: float = 1e-8,
    callback=None,
    should_stop=None,
) -> ScgResult:
    """Scaled conjugate gradients (Moller, 1993) on ``fun(x) -> (f, grad)``.

    The curvature along the search direction is probed with one extra
    gradient evaluation per successful step; the lambda regulator keeps the
    effective quadratic model positive definite.  On a line-scale collapse
    (non-finite trial or lambda overflow) the direction is restarted from
    steepest descent once, then the run aborts.
    """
    x = np.array(x0, dtype=float)
    n = x.size
    f, g = fun(x)
    if not np.isfinite(f):
        raise OptimizationError("objective not finite at the starting point")
    r = -g
    p = r.copy()
    lam, lam_bar = lambda0, 0.0
    success = True
    delta = 0.0
    s = np.zeros(n)
    restarted = False
    reason = "max iterations"
    converged = False
    k = 0
    f_prev_accepted = f

    while k < max_iters:
        k += 1
        pp = float(p @ p)
        if pp == 0.0 or not np.isfinite(pp):
            converged, reason = True, "search direction vanished"
            k -= 1
            break
        if success:
            sigma = sigma0 / np.sqrt(pp)
            _, g_trial = fun(x + sigma * p)
            s = (g_trial - g) / sigma
            delta = float(p @ s)
        delta_k = delta + (lam - lam_bar) * pp
        if delta_k <= 0:
            lam_bar = 2.0 * (lam - delta_k / pp)
            delta_k = -delta_k + lam * pp
            lam = lam_bar
        mu = float(p @ r)
        alpha = mu / delta_k
        x_trial = x + alpha * p
        f_trial, g_trial = fun(x_trial)
        comparison = 2.0 * delta_k * (f - f_trial) / mu**2 if mu != 0 else -1.0

        collapse = not np.isfinite(f_trial) or not np.isfinite(comparison)
        if not collapse and comparison >= 0:
            x, f, g = x_trial, f_trial, g_trial
            r_new = -g
            lam_bar = 0.0
            success = True
            if k % n == 0:
                p = r_new.copy()
            else:
                beta_cg = float(r_new @ r_new - r_new @ r) / mu
                p = r_new + beta_cg * p
            r = r_new
            if comparison >= 0.75:
                lam = max(0.25 * lam, 1e-300)
            accepted = True
        else:
            lam_bar = lam
            success = False
            accepted = False
        if not collapse and comparison < 0.25:
            lam = lam + delta_k * (1.0 - comparison) / pp

        if callback is not None:
            callback(k, x, f, accepted)
        if should_stop is not None and should_stop():
            reason = "early stop"
            break

        if collapse or lam > 1e100:
            if restarted:
                reason = "line-scale collapse"
                break
            restarted = True
            lam, lam_bar = lambda0, 0.0
            p = r.copy()
            success = True
            continue
        gnorm = float(np.max(np.abs(g)))
        if gnorm < grad_tol:
            converged, reason = True, "gradient tolerance reached"
            break
        if accepted and f_tol > 0.0 and abs(f_prev_accepted - f) < f_tol:
            converged, reason = True, "objective change below tolerance"
            break
        if accepted:
            f_prev_accepted = f

    return ScgResult(x=x, f=f, iterations=k, converged=converged, reason=reason)


def scg_run(
    blocks: list,
    state: VariationalState,
    config: TrainConfig,
    validation=None,
    max_iters: int | None = None,
) -> tuple[VariationalState, TrainTrace]:
    """Full-batch SCG on the negated bound over the flat unconstrained vector.

    ``validation``, when given, is a callable ``state -> (mae, rmse)``; the
    best-MAE state is kept and the run stops after ``config.patience``
    iterations without improvement.
    """
    trace = TrainTrace()
    template = state.copy()
    t0 = time.perf_counter()
    best = {"mae": np.inf, "x": None, "since": 0}

    def objective(vec):
        st = template.from_vector(vec)
        report = total_bound(blocks, st, jitter=config.jitter, want_gradients=True)
        return -report.total, -report.gradients

    stop = {"flag": False}

    def on_iter(k, vec, f, accepted):
        val_mae = val_rmse = float("nan")
        if validation is not None and accepted:
            st = template.from_vector(vec)
            val_mae, val_rmse = validation(st)
            if val_mae < best["mae"] - 1e-12:
                best.update(mae=val_mae, x=vec.copy(), since=0)
            else:
                best["since"] += 1
                if best["since"] >= config.patience:
                    stop["flag"] = True
        trace.append(k, -f, val_mae, val_rmse, time.perf_counter() - t0)

    x0 = state.to_vector()
    iters = config.epochs if max_iters is None else max_iters
    result = scg_minimize(
        objective,
        x0,
        max_iters=iters,
        grad_tol=config.tolerance,
        callback=on_iter,
        should_stop=lambda: stop["flag"],
    )
    x = result.x
    if validation is not None and best["x"] is not None:
        x = best["x"]
    return template.from_vector(x), trace
