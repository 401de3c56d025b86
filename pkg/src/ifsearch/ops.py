"""Vector-wise interaction operations: forward maps, adjoints, output sizes.

Every operation combines two length-k embedding vectors into one output
vector. All functions broadcast over leading batch dimensions, so inputs of
shape (B, k) produce outputs of shape (B, output_dim). Adjoints are exact
vector-Jacobian products, verified against finite differences in the tests.
"""

from dataclasses import dataclass

import numpy as np

# Kinds that keep the output length at k; only these may appear inside
# three-way composites.
PRESERVING_KINDS = ("multiply", "plus", "minus", "min", "max")

ALL_KINDS = ("multiply", "plus", "minus", "min", "max",
             "concat", "inner", "conv", "outer")

# conv and outer cost noticeably more per prediction and minus is kept as a
# baseline variant only, so none of the three is searched unless asked for.
DEFAULT_SEARCH_KINDS = ("multiply", "plus", "min", "max", "concat", "inner")

TENSOR_BASE_KINDS = ("multiply", "plus", "min", "max")


def output_dim(kind, k):
    """Output length of one operation on two length-k vectors."""
    if kind in PRESERVING_KINDS or kind == "conv":
        return k
    if kind == "concat":
        return 2 * k
    if kind == "inner":
        return 1
    if kind == "outer":
        return k * k
    raise ValueError(f"unknown operation kind {kind!r}")


def _conv_index(k):
    # IDX[t, s] = (t - s) mod k, shared by forward and both adjoints
    t = np.arange(k)
    return (t[:, None] - t[None, :]) % k


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def apply(kind, a, b):
    """Combine two (..., k) arrays into one (..., output_dim) array.

    conv is circular convolution, (a*b)_t = sum_s a_s b_{(t-s) mod k};
    outer is the flattened row-major outer product.
    """
    kind = getattr(kind, "kind", kind)
    a, b = _check_pair(a, b)
    if kind == "multiply":
        return a * b
    if kind == "plus":
        return a + b
    if kind == "minus":
        return a - b
    if kind == "min":
        return np.minimum(a, b)
    if kind == "max":
        return np.maximum(a, b)
    if kind == "concat":
        return np.concatenate([a, b], axis=-1)
    if kind == "inner":
        return np.sum(a * b, axis=-1, keepdims=True)
    if kind == "conv":
        idx = _conv_index(a.shape[-1])
        return np.einsum("...s,...ts->...t", a, b[..., idx])
    if kind == "outer":
        k = a.shape[-1]
        return (a[..., :, None] * b[..., None, :]).reshape(*a.shape[:-1], k * k)
    raise ValueError(f"unknown operation kind {kind!r}")


def apply_adjoint(kind, a, b, upstream):
    """Vector-Jacobian products of apply: (grad_a, grad_b).

    upstream has shape (..., output_dim). For min and max, ties (a_l == b_l)
    route the gradient to the first argument.
    """
    kind = getattr(kind, "kind", kind)
    a, b = _check_pair(a, b)
    up = np.asarray(upstream, dtype=float)
    k = a.shape[-1]
    if up.shape != a.shape[:-1] + (output_dim(kind, k),):
        raise ValueError(f"upstream shape {up.shape} does not match "
                         f"output_dim({kind}, {k})")
    if kind == "multiply":
        return up * b, up * a
    if kind == "plus":
        return up.copy(), up.copy()
    if kind == "minus":
        return up.copy(), -up
    if kind in ("min", "max"):
        win_a = (a <= b) if kind == "min" else (a >= b)
        return up * win_a, up * ~win_a
    if kind == "concat":
        return up[..., :k].copy(), up[..., k:].copy()
    if kind == "inner":
        return up * b, up * a
    if kind == "conv":
        idx = _conv_index(k)
        ga = np.einsum("...t,...ts->...s", up, b[..., idx])
        gb = np.einsum("...t,...tr->...r", up, a[..., idx])
        return ga, gb
    if kind == "outer":
        um = up.reshape(*a.shape[:-1], k, k)
        ga = np.einsum("...pq,...q->...p", um, b)
        gb = np.einsum("...pq,...p->...q", um, a)
        return ga, gb
    raise ValueError(f"unknown operation kind {kind!r}")


@dataclass(frozen=True)
class InteractionOp:
    """One vector-wise operation bound to an embedding dimension."""

    kind: str
    k: int

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown operation kind {self.kind!r}")

    @property
    def name(self):
        return self.kind

    arity = 2

    @property
    def output_dim(self):
        return output_dim(self.kind, self.k)

    def apply(self, a, b):
        return apply(self.kind, a, b)

    def adjoint(self, a, b, upstream):
        return apply_adjoint(self.kind, a, b, upstream)


@dataclass(frozen=True)
class TensorCompositeOp:
    """Left-associated composite outer(inner(u, v), s) of preserving ops."""

    inner_kind: str
    outer_kind: str
    k: int

    def __post_init__(self):
        for kind in (self.inner_kind, self.outer_kind):
            if kind not in PRESERVING_KINDS:
                raise ValueError(
                    f"{kind!r} changes the output length and cannot be "
                    "composed for three-way data")

    @property
    def name(self):
        return f"{self.inner_kind}_{self.outer_kind}"

    arity = 3

    @property
    def output_dim(self):
        return self.k

    def apply(self, u, v, s):
        return apply(self.outer_kind, apply(self.inner_kind, u, v), s)

    def adjoint(self, u, v, s, upstream):
        t = apply(self.inner_kind, u, v)
        gt, gs = apply_adjoint(self.outer_kind, t, s, upstream)
        gu, gv = apply_adjoint(self.inner_kind, u, v, gt)
        return gu, gv, gs


def enumerate_tensor_ops(base_kinds, k):
    """All K^2 ordered (inner, outer) composites over the given base kinds."""
    base_kinds = tuple(base_kinds)
    for kind in base_kinds:
        if kind not in PRESERVING_KINDS:
            raise ValueError(
                f"{kind!r} is not dimension-preserving; composites only "
                f"allow {PRESERVING_KINDS}")
    return [TensorCompositeOp(inner, outer, k)
            for inner in base_kinds for outer in base_kinds]


def apply_tensor(composite, u, v, s):
    """Forward map of a three-way composite on (..., k) arrays."""
    return composite.apply(u, v, s)


def apply_tensor_adjoint(composite, u, v, s, upstream):
    """Vector-Jacobian products of apply_tensor: (grad_u, grad_v, grad_s)."""
    return composite.adjoint(u, v, s, upstream)
