"""End-to-end evaluation: synthetic data generation, training, k-fold CV.

Synthetic tables are drawn from the model's own generative story: latents
and bias latents from the standard-normal prior, then each user's ratings
from the Gaussian likelihood with the bias mean and the ARD kernel.  The
ground truth (latents, inverse length-scales, noise precision, and the
per-user mean/covariance of the rating vector) is kept so tests can check
recovery and noise floors.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import (
    ContextSchema,
    RatingTable,
    fit_standardization,
    group_by_user,
    make_folds,
)
from .kernels import ArdKernel, kernel_matrix
from .model import TrainedModel
from .optim import TrainConfig, TrainTrace, init_state, sgd_epoch, scg_run
from .predict import Predictor


def metrics(y_true, y_pred) -> tuple[float, float]:
    """Mean absolute error and root-mean-square error."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if y_true.size == 0:
        raise ValueError("need at least one prediction")
    err = y_pred - y_true
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err**2)))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and ground-truth parameters for a generated dataset.

    ``item_alpha`` / ``context_alphas`` give the true inverse length-scales,
    one scalar per block (broadcast over that block's coordinates); an
    irrelevant context is encoded as 0.  Real-valued contexts always occupy
    one coordinate.
    """

    user_count: int
    item_count: int
    contexts: tuple
    ratings_per_user: int
    item_dim: int = 2
    context_dim: int = 2
    item_alpha: float = 1.0
    context_alphas: tuple = ()
    signal_variance: float = 1.0
    noise_precision: float = 4.0
    include_bias: bool = True
    user_bias_mean: float = 0.0
    user_bias_std: float = 1.0
    bias_scale: float = 1.0
    real_weights: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if min(self.user_count, self.item_count, self.ratings_per_user) < 1:
            raise ValueError("all counts must be positive")
        if self.contexts and len(self.context_alphas) != len(self.contexts):
            raise ValueError("need one context_alpha per context")


@dataclass
class SyntheticTruth:
    """Everything needed to re-draw ratings for a fixed design."""

    spec: SyntheticSpec
    alphas: np.ndarray
    block_slices: dict
    item_latents: np.ndarray
    ctx_latents: list
    user_bias: np.ndarray
    item_bias: np.ndarray
    ctx_bias: list
    design_users: np.ndarray
    design_items: np.ndarray
    design_cat: np.ndarray
    design_real: np.ndarray
    means: list = field(default_factory=list)       # per user block
    covariances: list = field(default_factory=list)
    user_rows: list = field(default_factory=list)   # row indices per user


def _truth_layout(spec: SyntheticSpec):
    slices = {"item": slice(0, spec.item_dim)}
    off = spec.item_dim
    for ctx in spec.contexts:
        width = spec.context_dim if ctx.is_categorical else 1
        slices[ctx.name] = slice(off, off + width)
        off += width
    return slices, off


def synthesize(spec: SyntheticSpec) -> tuple[RatingTable, SyntheticTruth]:
    """Draw a dataset from the generative model; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    slices, q = _truth_layout(spec)

    alphas = np.zeros(q)
    alphas[slices["item"]] = spec.item_alpha
    for ctx, a in zip(spec.contexts, spec.context_alphas):
        alphas[slices[ctx.name]] = a

    item_latents = rng.standard_normal((spec.item_count, spec.item_dim))
    ctx_latents = []
    for ctx in spec.contexts:
        if ctx.is_categorical:
            ctx_latents.append(rng.standard_normal((ctx.cardinality, spec.context_dim)))
        else:
            ctx_latents.append(None)

    if spec.include_bias:
        user_bias = rng.normal(spec.user_bias_mean, spec.user_bias_std, size=spec.user_count)
        item_bias = spec.bias_scale * rng.standard_normal(spec.item_count)
        ctx_bias = [
            spec.bias_scale * rng.standard_normal(c.cardinality) if c.is_categorical else None
            for c in spec.contexts
        ]
    else:
        user_bias = np.zeros(spec.user_count)
        item_bias = np.zeros(spec.item_count)
        ctx_bias = [np.zeros(c.cardinality) if c.is_categorical else None for c in spec.contexts]

    real_w = np.asarray(spec.real_weights, dtype=float)
    n_real = sum(1 for c in spec.contexts if not c.is_categorical)
    if real_w.size == 0:
        real_w = np.zeros(n_real)

    total = spec.user_count * spec.ratings_per_user
    users = np.repeat(np.arange(spec.user_count), spec.ratings_per_user)
    items = rng.integers(0, spec.item_count, size=total)
    cat_cols = [d for d, c in enumerate(spec.contexts) if c.is_categorical]
    cat = np.column_stack(
        [rng.integers(0, spec.contexts[d].cardinality, size=total) for d in cat_cols]
    ) if cat_cols else np.zeros((total, 0), dtype=np.int64)
    real = rng.standard_normal((total, n_real)) if n_real else np.zeros((total, 0))

    truth = SyntheticTruth(
        spec=spec,
        alphas=alphas,
        block_slices=slices,
        item_latents=item_latents,
        ctx_latents=ctx_latents,
        user_bias=user_bias,
        item_bias=item_bias,
        ctx_bias=ctx_bias,
        design_users=users,
        design_items=items,
        design_cat=cat,
        design_real=real,
    )

    kern = ArdKernel(spec.signal_variance, alphas)
    for u in range(spec.user_count):
        rows = np.flatnonzero(users == u)
        x = np.zeros((rows.size, q))
        x[:, slices["item"]] = item_latents[items[rows]]
        ci = ri = 0
        mean = np.full(rows.size, user_bias[u]) + item_bias[items[rows]]
        for d, ctx in enumerate(spec.contexts):
            if ctx.is_categorical:
                codes = cat[rows, ci]
                x[:, slices[ctx.name]] = ctx_latents[d][codes]
                mean += ctx_bias[d][codes]
                ci += 1
            else:
                vals = real[rows, ri]
                x[:, slices[ctx.name]] = vals[:, None]
                mean += real_w[ri] * vals
                ri += 1
        if spec.signal_variance > 0:
            cov = kernel_matrix(kern, x, x)
        else:
            cov = np.zeros((rows.size, rows.size))
        cov = cov + np.eye(rows.size) / spec.noise_precision
        truth.user_rows.append(rows)
        truth.means.append(mean)
        truth.covariances.append(cov)

    ratings = sample_ratings(truth, rng)

    schema = ContextSchema(
        user_count=spec.user_count, item_count=spec.item_count, contexts=tuple(spec.contexts)
    )
    table = RatingTable(
        schema=schema,
        users=users,
        items=items,
        cat_values=cat,
        real_raw=real,
        ratings=ratings,
        standardization=fit_standardization(real),
    )
    return table, truth


def sample_ratings(truth: SyntheticTruth, rng) -> np.ndarray:
    """Fresh rating draw for the fixed design stored in ``truth``."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    out = np.empty(truth.design_users.shape[0])
    for rows, mean, cov in zip(truth.user_rows, truth.means, truth.covariances):
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(rows.size))
        out[rows] = mean + chol @ rng.standard_normal(rows.size)
    return out


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


def raw_context_rows(table: RatingTable) -> list:
    """Per-record context tuples with raw (un-standardized) real values,
    in schema order, as accepted by the prediction API."""
    rows = []
    cat_pos = {d: j for j, d in enumerate(table.schema.categorical_indices)}
    real_pos = {d: j for j, d in enumerate(table.schema.real_indices)}
    for i in range(len(table)):
        row = []
        for d, ctx in enumerate(table.schema.contexts):
            if ctx.is_categorical:
                row.append(int(table.cat_values[i, cat_pos[d]]))
            else:
                row.append(float(table.real_raw[i, real_pos[d]]))
        rows.append(tuple(row))
    return rows


def train_model(
    table: RatingTable,
    config: TrainConfig,
    rating_scale: tuple[float, float] | None = None,
    validation_table: RatingTable | None = None,
) -> TrainedModel:
    """Fit on a table with the configured optimizer and wrap the result.

    ``validation_table`` (standardized consistently with ``table``) enables
    MAE early stopping with the configured patience.
    """
    blocks = group_by_user(table)
    state = init_state(table.schema, blocks, config)
    scale = rating_scale if rating_scale is not None else table.rating_range

    validation = None
    if validation_table is not None:
        val_rows = raw_context_rows(validation_table)

        def validation(st):
            pred = Predictor(
                st,
                blocks,
                standardization=table.standardization,
                rating_scale=scale,
                jitter=config.jitter,
            )
            _, _, clamped = pred.predict_rows(
                validation_table.users, validation_table.items, val_rows, unknown_user="global_mean"
            )
            return metrics(validation_table.ratings, clamped)

    if config.method == "scg":
        state, trace = scg_run(blocks, state, config, validation=validation)
    else:
        trace = TrainTrace()
        t0 = time.perf_counter()
        best = {"mae": np.inf, "state": None, "since": 0}
        for epoch in range(config.epochs):
            state, estimate = sgd_epoch(blocks, state, config, epoch)
            val_mae = val_rmse = float("nan")
            if validation is not None:
                val_mae, val_rmse = validation(state)
                if val_mae < best["mae"] - 1e-12:
                    best.update(mae=val_mae, state=state.copy(), since=0)
                else:
                    best["since"] += 1
            trace.append(epoch, estimate, val_mae, val_rmse, time.perf_counter() - t0)
            if validation is not None and best["since"] >= config.patience:
                break
        if validation is not None and best["state"] is not None:
            state = best["state"]

    return TrainedModel(
        state=state, table=table, config=config, rating_scale=scale, trace=trace
    )


@dataclass
class EvalResult:
    """Per-fold and aggregate MAE/RMSE of a cross-validation run."""

    fold_mae: np.ndarray
    fold_rmse: np.ndarray
    failed_folds: list

    @property
    def mae(self) -> float:
        return float(np.mean(self.fold_mae))

    @property
    def rmse(self) -> float:
        return float(np.mean(self.fold_rmse))

    @property
    def mae_std(self) -> float:
        return float(np.std(self.fold_mae))

    @property
    def rmse_std(self) -> float:
        return float(np.std(self.fold_rmse))


def evaluate_cv(
    table: RatingTable,
    config: TrainConfig,
    k: int = 5,
    seed: int = 0,
    rating_scale: tuple[float, float] | None = None,
) -> EvalResult:
    """k-fold cross-validation on clamped predictions.

    Folds are record-level uniform.  Real-context standardization is refit on
    each training split and reused for its test rows.  Test users with no
    training ratings fall back to the training global mean.  A fold whose
    training run fails is dropped from the aggregate with a warning.
    """
    plan = make_folds(table, k, seed)
    fold_mae, fold_rmse, failed = [], [], []
    for fold in range(k):
        train = table.subset(plan.train_indices(fold), standardization="refit")
        test = table.subset(plan.test_indices(fold), standardization=train.standardization)
        try:
            model = train_model(train, config, rating_scale=rating_scale)
            predictor = model.predictor()
            rows = raw_context_rows(test)
            _, _, clamped = predictor.predict_rows(
                test.users, test.items, rows, unknown_user="global_mean"
            )
            mae, rmse = metrics(test.ratings, clamped)
            fold_mae.append(mae)
            fold_rmse.append(rmse)
        except (ArithmeticError, RuntimeError) as exc:  # pragma: no cover - defensive
            warnings.warn(f"fold {fold} failed: {exc}; aggregate excludes it", stacklevel=2)
            failed.append(fold)
    if not fold_mae:
        raise RuntimeError("every fold failed")
    return EvalResult(
        fold_mae=np.asarray(fold_mae), fold_rmse=np.asarray(fold_rmse), failed_folds=failed
    )


def const_baseline_cv(table: RatingTable, k: int = 5, seed: int = 0) -> EvalResult:
    """The constant predictor: each user's training-mean rating.

    Users absent from a training split get the global training mean.  This is
    the sanity floor any trained model should beat.
    """
    plan = make_folds(table, k, seed)
    fold_mae, fold_rmse = [], []
    for fold in range(k):
        tr, te = plan.train_indices(fold), plan.test_indices(fold)
        global_mean = float(table.ratings[tr].mean())
        user_means = np.full(table.schema.user_count, global_mean)
        for u in np.unique(table.users[tr]):
            user_means[u] = float(table.ratings[tr][table.users[tr] == u].mean())
        pred = user_means[table.users[te]]
        mae, rmse = metrics(table.ratings[te], pred)
        fold_mae.append(mae)
        fold_rmse.append(rmse)
    return EvalResult(fold_mae=np.asarray(fold_mae), fold_rmse=np.asarray(fold_rmse), failed_folds=[])
