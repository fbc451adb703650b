"""Trainable state: shared latent tables, inducing inputs, per-user parameters.

Layout of the kernel-space latent vector for one rating row (dimension Q):

    [ item latents | context 1 latents | ... | context D latents ]

Categorical contexts contribute ``context_dim`` free coordinates per
category; real-valued contexts contribute one coordinate pinned to the
standardized observed value (zero variance, excluded from optimization).
Entity tables carry one extra trailing "unknown" row held at the prior so
unseen codes can be queried after training.

All positive parameters (variances, inverse length-scales, signal variance,
noise precision) are stored as logs, making the flat optimization vector
unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ContextSchema, UserBlock
from .meanfn import BiasLatents


@dataclass(frozen=True)
class ModelDims:
    """Dimension/size choices that shape the state."""

    inducing_count: int
    item_dim: int
    context_dim: int
    item_bias_dim: int = 1
    context_bias_dim: int = 1
    use_mean: bool = True

    def __post_init__(self):
        if self.inducing_count < 1:
            raise ValueError("need at least one inducing point")
        if self.item_dim < 1 or self.context_dim < 1:
            raise ValueError("latent dimensions must be positive")


@dataclass(frozen=True)
class KernelBlock:
    """One contiguous slice of the kernel latent vector."""

    name: str
    sl: slice
    kind: str            # "item", "categorical", or "real"
    table: int | None    # index into ctx tables for categorical, real column for real


class KernelLayout:
    """Mapping between schema entities and kernel latent coordinates."""

    def __init__(self, schema: ContextSchema, dims: ModelDims):
        self.blocks: list[KernelBlock] = []
        off = 0
        self.blocks.append(KernelBlock("item", slice(0, dims.item_dim), "item", None))
        off = dims.item_dim
        cat_j = real_j = 0
        for ctx in schema.contexts:
            if ctx.is_categorical:
                self.blocks.append(
                    KernelBlock(ctx.name, slice(off, off + dims.context_dim), "categorical", cat_j)
                )
                off += dims.context_dim
                cat_j += 1
            else:
                self.blocks.append(KernelBlock(ctx.name, slice(off, off + 1), "real", real_j))
                off += 1
                real_j += 1
        self.dim = off
        mask = np.zeros(off, dtype=bool)
        for b in self.blocks:
            if b.kind == "real":
                mask[b.sl] = True
        self.fixed_mask = mask

    @property
    def item_slice(self) -> slice:
        return self.blocks[0].sl


class VariationalState:
    """All free parameters of the model; arrays are mutated in place by training."""

    def __init__(
        self,
        schema: ContextSchema,
        dims: ModelDims,
        item_mean: np.ndarray,
        item_log_var: np.ndarray,
        ctx_mean: list,
        ctx_log_var: list,
        bias: BiasLatents | None,
        z: np.ndarray,
        log_alpha: np.ndarray,
        log_sigma2: np.ndarray,
        log_beta: np.ndarray,
    ):
        self.schema = schema
        self.dims = dims
        self.layout = KernelLayout(schema, dims)
        self.item_mean = item_mean
        self.item_log_var = item_log_var
        self.ctx_mean = ctx_mean
        self.ctx_log_var = ctx_log_var
        self.bias = bias
        self.z = z
        self.log_alpha = log_alpha
        self.log_sigma2 = log_sigma2
        self.log_beta = log_beta

    # -- structure ---------------------------------------------------------

    @property
    def kernel_dim(self) -> int:
        return self.layout.dim

    @property
    def inducing_count(self) -> int:
        return self.z.shape[0]

    @property
    def use_mean(self) -> bool:
        return self.bias is not None

    def copy(self) -> "VariationalState":
        return VariationalState(
            schema=self.schema,
            dims=self.dims,
            item_mean=self.item_mean.copy(),
            item_log_var=self.item_log_var.copy(),
            ctx_mean=[a.copy() for a in self.ctx_mean],
            ctx_log_var=[a.copy() for a in self.ctx_log_var],
            bias=self.bias.copy() if self.bias is not None else None,
            z=self.z.copy(),
            log_alpha=self.log_alpha.copy(),
            log_sigma2=self.log_sigma2.copy(),
            log_beta=self.log_beta.copy(),
        )

    def assemble_rows(self, block: UserBlock):
        """Per-row latent means and variances (N x Q) for one user block.

        Real-context columns carry the observed standardized values with
        exactly zero variance.
        """
        n = block.count
        mu = np.empty((n, self.kernel_dim))
        var = np.zeros((n, self.kernel_dim))
        for b in self.layout.blocks:
            if b.kind == "item":
                mu[:, b.sl] = self.item_mean[block.items]
                var[:, b.sl] = np.exp(self.item_log_var[block.items])
            elif b.kind == "categorical":
                codes = block.cat_values[:, b.table]
                mu[:, b.sl] = self.ctx_mean[b.table][codes]
                var[:, b.sl] = np.exp(self.ctx_log_var[b.table][codes])
            else:
                mu[:, b.sl] = block.real_values[:, b.table : b.table + 1]
        return mu, var

    # -- flat packing --------------------------------------------------------

    def param_entries(self):
        """(key, array) pairs in the canonical flat-vector order."""
        yield "item_mean", self.item_mean
        yield "item_log_var", self.item_log_var
        for j in range(len(self.ctx_mean)):
            yield f"ctx_mean_{j}", self.ctx_mean[j]
            yield f"ctx_log_var_{j}", self.ctx_log_var[j]
        if self.bias is not None:
            yield "bias_item_mean", self.bias.item_mean
            yield "bias_item_log_var", self.bias.item_log_var
            for j in range(len(self.bias.context_mean)):
                yield f"bias_ctx_mean_{j}", self.bias.context_mean[j]
                yield f"bias_ctx_log_var_{j}", self.bias.context_log_var[j]
            if self.bias.real_weights.size:
                yield "real_weights", self.bias.real_weights
            yield "user_bias", self.bias.user_bias
        yield "z", self.z
        yield "log_alpha", self.log_alpha
        yield "log_sigma2", self.log_sigma2
        yield "log_beta", self.log_beta

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.param_entries()])

    def from_vector(self, vec: np.ndarray) -> "VariationalState":
        """A fresh state with parameters taken from ``vec`` (self unchanged)."""
        out = self.copy()
        off = 0
        for _, arr in out.param_entries():
            arr[...] = vec[off : off + arr.size].reshape(arr.shape)
            off += arr.size
        if off != vec.size:
            raise ValueError(f"vector length {vec.size} does not match state size {off}")
        return out

    def vector_size(self) -> int:
        return sum(a.size for _, a in self.param_entries())

    def pack_like(self, grads: dict) -> np.ndarray:
        """Flatten a dict of named gradient arrays into vector order."""
        parts = []
        for key, arr in self.param_entries():
            g = grads.get(key)
            parts.append(np.zeros(arr.size) if g is None else np.asarray(g).ravel())
        return np.concatenate(parts)

    def zero_grads(self) -> dict:
        return {key: np.zeros_like(arr) for key, arr in self.param_entries()}
