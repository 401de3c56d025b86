"""Element-wise nonlinear transform applied to each embedding coordinate.

The transform is a tiny one-input one-output network, g(x) = b2 +
sum_h w2_h * act(w1_h * x + b1_h), shared across all coordinates of one
side's embeddings. Its full weight vector is kept inside the l2 unit ball.
"""

from dataclasses import dataclass

import numpy as np

from .prox import project_unit_ball

ACTIVATIONS = ("sigmoid", "relu", "tanh")
DEFAULT_HIDDEN = 5


def _act(z, kind):
    if kind == "sigmoid":
        # split around 0 to avoid overflow warnings for large |z|
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {kind!r}")


def _act_grad(z, act_val, kind):
    if kind == "sigmoid":
        return act_val * (1.0 - act_val)
    if kind == "relu":
        # tie at exactly 0 takes derivative 0
        return (z > 0).astype(float)
    if kind == "tanh":
        return 1.0 - act_val * act_val
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class TransformWeights:
    """Weights of one element-wise transform; norm() covers all entries."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    activation: str = "sigmoid"

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.w2 = np.asarray(self.w2, dtype=float)
        self.b2 = float(self.b2)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (self.w1.shape == self.b1.shape == self.w2.shape):
            raise ValueError("w1, b1, w2 must share one hidden size")

    @property
    def n_hidden(self):
        return self.w1.size

    def flat(self):
        return np.concatenate([self.w1, self.b1, self.w2, [self.b2]])

    @classmethod
    def from_flat(cls, vec, n_hidden, activation="sigmoid"):
        vec = np.asarray(vec, dtype=float)
        if vec.size != 3 * n_hidden + 1:
            raise ValueError(f"expected {3 * n_hidden + 1} entries, "
                             f"got {vec.size}")
        h = n_hidden
        return cls(vec[:h], vec[h:2 * h], vec[2 * h:3 * h], vec[3 * h],
                   activation)

    def norm(self):
        return float(np.linalg.norm(self.flat()))

    def projected(self):
        """Copy with the full weight vector inside the l2 unit ball."""
        return TransformWeights.from_flat(project_unit_ball(self.flat()),
                                          self.n_hidden, self.activation)

    def copy(self):
        return TransformWeights(self.w1.copy(), self.b1.copy(),
                                self.w2.copy(), self.b2, self.activation)

    def to_dict(self):
        return {"w1": self.w1.tolist(), "b1": self.b1.tolist(),
                "w2": self.w2.tolist(), "b2": self.b2,
                "activation": self.activation}

    @classmethod
    def from_dict(cls, d):
        return cls(d["w1"], d["b1"], d["w2"], d["b2"],
                   d.get("activation", "sigmoid"))


def init_transform(rng, n_hidden=DEFAULT_HIDDEN, activation="sigmoid"):
    """Uniform [-0.5, 0.5] weights projected onto the unit ball."""
    vec = rng.uniform(-0.5, 0.5, size=3 * n_hidden + 1)
    return TransformWeights.from_flat(project_unit_ball(vec), n_hidden,
                                      activation)


def transform(x, w):
    """Apply g element-wise; x may be a scalar or any ndarray."""
    x = np.asarray(x, dtype=float)
    pre = x[..., None] * w.w1 + w.b1
    h = _act(pre, w.activation)
    out = h @ w.w2 + w.b2
    return out if out.ndim else float(out)


def transform_vector(v, w):
    """Apply g to each element of a vector independently."""
    return transform(v, w)


def transform_grad(x, w):
    """Exact derivatives of g at a scalar x.

    Returns (dg/dx, dg/dw) with dg/dw packed as a TransformWeights. Note
    dg/db2 = 1 always. Batched backward passes go through transform_vjp.
    """
    x = float(x)
    pre = x * w.w1 + w.b1
    h = _act(pre, w.activation)
    hg = _act_grad(pre, h, w.activation)
    dgdx = float((hg * w.w1) @ w.w2)
    grad = TransformWeights(w1=w.w2 * hg * x, b1=w.w2 * hg, w2=h, b2=1.0,
                            activation=w.activation)
    return dgdx, grad


def transform_vjp(x, w, upstream):
    """Backward pass through g for a batch of inputs.

    Returns (grad_x, grad_w) where grad_x has x's shape and grad_w is a
    TransformWeights accumulated over every element of x.
    """
    x = np.asarray(x, dtype=float)
    up = np.asarray(upstream, dtype=float)
    pre = x[..., None] * w.w1 + w.b1
    h = _act(pre, w.activation)
    hg = _act_grad(pre, h, w.activation)
    gx = up * ((hg * w.w1) @ w.w2)
    uphg = up[..., None] * hg
    axes = tuple(range(x.ndim))
    gw = TransformWeights(
        w1=np.sum(uphg * x[..., None], axis=axes) * w.w2,
        b1=np.sum(uphg, axis=axes) * w.w2,
        w2=np.sum(up[..., None] * h, axis=axes),
        b2=float(np.sum(up)),
        activation=w.activation,
    )
    return gx, gw
