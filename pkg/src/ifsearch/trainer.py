"""Training: the regularized objective, hand-derived gradients, Adagrad.

The model predicts a rating for (user, item[, depth]) as a mixture over
candidate operations,

    pred = sum_m alpha_m * head_m(op_m(g(u_i; p), g(v_j; q)[, g(s_l; r)])),

where g is the element-wise transform (identity when the transform is None)
and head_m is either a linear map z -> w_m^T z with the per-operation vector
w_m kept inside the l2 unit ball, or a small relu network. All gradients are
derived by hand through the operation adjoints and checked against central
finite differences in the tests.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops as ops_mod
from .data import BatchSampler
from .metrics import EvalReport, ranking_metrics, rmse
from .prox import project_unit_ball
from .transform import TransformWeights, transform, transform_vjp

DEFAULT_LAMBDA_GRID = (0.0, 1e-6, 5e-6, 1e-5, 5e-5, 1e-4)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the epoch and step it happened at."""


@dataclass
class LinearHead:
    """Linear predictor head, ||w||_2 <= 1."""

    w: np.ndarray

    def forward(self, z):
        return z @ self.w

    def backward(self, z, upstream, need_params=True):
        gz = upstream[:, None] * self.w
        if not need_params:
            return gz, {}
        return gz, {"w": upstream @ z}

    def arrays(self):
        return {"w": self.w}

    def project(self):
        self.w[:] = project_unit_ball(self.w)

    def copy(self):
        return LinearHead(self.w.copy())

    def to_dict(self):
        return {"type": "linear", "w": self.w.tolist()}


@dataclass
class MLPHead:
    """One-hidden-layer relu predictor head; weights unconstrained."""

    w1: np.ndarray  # (hidden, dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: np.ndarray  # (1,)

    def forward(self, z):
        h = np.maximum(z @ self.w1.T + self.b1, 0.0)
        return h @ self.w2 + self.b2[0]

    def backward(self, z, upstream, need_params=True):
        pre = z @ self.w1.T + self.b1
        mask = pre > 0
        h = pre * mask
        gh = (upstream[:, None] * self.w2) * mask
        gz = gh @ self.w1
        if not need_params:
            return gz, {}
        grads = {"w1": gh.T @ z, "b1": gh.sum(axis=0),
                 "w2": h.T @ upstream, "b2": np.array([upstream.sum()])}
        return gz, grads

    def arrays(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def project(self):
        pass  # ball constraint applies to linear heads only

    def copy(self):
        return MLPHead(self.w1.copy(), self.b1.copy(), self.w2.copy(),
                       self.b2.copy())

    def to_dict(self):
        return {"type": "mlp", "w1": self.w1.tolist(), "b1": self.b1.tolist(),
                "w2": self.w2.tolist(), "b2": float(self.b2[0])}


def head_from_dict(d):
    if d["type"] == "linear":
        return LinearHead(np.asarray(d["w"], dtype=float))
    if d["type"] == "mlp":
        return MLPHead(np.asarray(d["w1"], dtype=float),
                       np.asarray(d["b1"], dtype=float),
                       np.asarray(d["w2"], dtype=float),
                       np.array([d["b2"]], dtype=float))
    raise ValueError(f"unknown head type {d['type']!r}")


@dataclass
class ArchParams:
    """Architecture state: mixture weights, transforms, and the op set."""

    alpha: np.ndarray
    ops: tuple
    p: TransformWeights | None = None
    q: TransformWeights | None = None
    r: TransformWeights | None = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.ops = tuple(self.ops)
        if self.alpha.size != len(self.ops):
            raise ValueError("one alpha entry per candidate operation")

    @property
    def n_ops(self):
        return len(self.ops)

    @property
    def is_tensor(self):
        return self.ops[0].arity == 3

    def copy(self):
        return ArchParams(self.alpha.copy(), self.ops,
                          None if self.p is None else self.p.copy(),
                          None if self.q is None else self.q.copy(),
                          None if self.r is None else self.r.copy())


@dataclass
class ModelParams:
    """Everything fitted on training data: embeddings and predictor heads."""

    U: np.ndarray
    V: np.ndarray
    heads: list
    S: np.ndarray | None = None

    def arrays(self):
        out = {"U": self.U, "V": self.V}
        if self.S is not None:
            out["S"] = self.S
        for m, head in enumerate(self.heads):
            for name, arr in head.arrays().items():
                out[f"head{m}.{name}"] = arr
        return out

    def copy(self):
        return ModelParams(self.U.copy(), self.V.copy(),
                           [h.copy() for h in self.heads],
                           None if self.S is None else self.S.copy())


@dataclass
class AdagradState:
    """Per-coordinate accumulated squared gradients."""

    lr: float
    eps: float = 1e-8
    accum: dict = field(default_factory=dict)


def adagrad_step(params, grads, state):
    """x <- x - lr * g / sqrt(G + eps) with G the running sum of g^2.

    Afterwards every linear head is projected back onto the unit ball.
    Updates params in place and returns it.
    """
    for name, arr in params.arrays().items():
        g = grads.get(name)
        if g is None:
            continue
        acc = state.accum.get(name)
        if acc is None:
            acc = state.accum[name] = np.zeros_like(arr)
        acc += g * g
        arr -= state.lr * g / np.sqrt(acc + state.eps)
    for head in params.heads:
        head.project()
    return params


@dataclass
class TrainConfig:
    """Knobs of one training run."""

    k: int = 8
    lr: float = 0.05
    batch_size: int = 256
    epochs: int = 200
    patience: int = 10
    lam: float = 0.0
    seed: int = 0
    init_std: float = 0.1
    predictor: str = "linear"
    mlp_hidden: int = 10


def init_params(dims, arch, config, rng):
    """Fresh embeddings (normal, mean 0) and predictor heads."""
    k = config.k
    std = config.init_std
    U = rng.normal(0.0, std, size=(dims[0], k))
    V = rng.normal(0.0, std, size=(dims[1], k))
    S = rng.normal(0.0, std, size=(dims[2], k)) if len(dims) == 3 else None
    heads = []
    for op in arch.ops:
        dim = op.output_dim
        if config.predictor == "linear":
            w = rng.normal(0.0, std, size=dim)
            heads.append(LinearHead(project_unit_ball(w)))
        elif config.predictor == "mlp":
            h = config.mlp_hidden
            heads.append(MLPHead(rng.normal(0.0, std, size=(h, dim)),
                                 np.zeros(h), rng.normal(0.0, std, size=h),
                                 np.zeros(1)))
        else:
            raise ValueError(f"unknown predictor {config.predictor!r}")
    return ModelParams(U, V, heads, S)


def _transformed(params, arch, rows, cols, depths):
    u = params.U[rows]
    v = params.V[cols]
    tu = transform(u, arch.p) if arch.p is not None else u
    tv = transform(v, arch.q) if arch.q is not None else v
    s = ts = None
    if arch.is_tensor:
        if depths is None:
            raise ValueError("tensor model needs depth indices")
        s = params.S[depths]
        ts = transform(s, arch.r) if arch.r is not None else s
    return u, v, s, tu, tv, ts


def _branch_outputs(params, arch, tu, tv, ts, active=None):
    """Per-operation feature vectors z_m and head outputs e_m.

    active masks which branches are evaluated; skipped branches keep
    z_m = None and e_m = 0.
    """
    B = tu.shape[0]
    zs = [None] * arch.n_ops
    es = np.zeros((B, arch.n_ops))
    for m, op in enumerate(arch.ops):
        if active is not None and not active[m]:
            continue
        z = op.apply(tu, tv) if op.arity == 2 else op.apply(tu, tv, ts)
        zs[m] = z
        es[:, m] = params.heads[m].forward(z)
    return zs, es


def predict_batch(params, arch, rows, cols, depths=None, alpha=None):
    """Mixture predictions for aligned index arrays."""
    alpha = arch.alpha if alpha is None else np.asarray(alpha, dtype=float)
    _, _, _, tu, tv, ts = _transformed(params, arch, rows, cols, depths)
    _, es = _branch_outputs(params, arch, tu, tv, ts, active=alpha != 0)
    return es @ alpha


def predict(params, arch, i, j, l=None):
    """Single prediction; validates the indices."""
    if not 0 <= i < params.U.shape[0]:
        raise IndexError(f"row index {i} out of range")
    if not 0 <= j < params.V.shape[0]:
        raise IndexError(f"col index {j} out of range")
    depths = None
    if arch.is_tensor:
        if l is None:
            raise ValueError("tensor model needs a depth index")
        if not 0 <= l < params.S.shape[0]:
            raise IndexError(f"depth index {l} out of range")
        depths = np.array([l])
    return float(predict_batch(params, arch, np.array([i]), np.array([j]),
                               depths))


def _backprop_branches(params, arch, zs, tu, tv, ts, weights, need_heads):
    """Push per-record upstreams through heads and operation adjoints.

    weights[m] is the scalar mixing factor of branch m (alpha_m times the
    loss derivative is applied by the caller via the upstream vectors it
    passes in weights). Returns gradients w.r.t. tu/tv/ts plus head grads.
    """
    gtu = np.zeros_like(tu)
    gtv = np.zeros_like(tv)
    gts = np.zeros_like(ts) if ts is not None else None
    head_grads = {}
    for m, op in enumerate(arch.ops):
        up = weights[m]
        if up is None:
            continue
        gz, hg = params.heads[m].backward(zs[m], up, need_params=need_heads)
        if need_heads:
            for name, g in hg.items():
                head_grads[f"head{m}.{name}"] = g
        if op.arity == 2:
            ga, gb = op.adjoint(tu, tv, gz)
        else:
            ga, gb, gc = op.adjoint(tu, tv, ts, gz)
            gts += gc
        gtu += ga
        gtv += gb
    return gtu, gtv, gts, head_grads


def loss_and_grads(params, arch, batch, lam=0.0, alpha=None):
    """Mini-batch objective and exact gradients of the training parameters.

    loss = mean squared error over the batch plus lam/2 times the squared
    norms of the embedding rows the batch touches (each touched row counted
    once, so its regularizer gradient is exactly lam * row). Returns
    (loss, grads) with grads keyed like ModelParams.arrays().
    """
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    alpha = arch.alpha if alpha is None else np.asarray(alpha, dtype=float)
    u, v, s, tu, tv, ts = _transformed(params, arch, batch.rows, batch.cols,
                                       batch.depths)
    zs, es = _branch_outputs(params, arch, tu, tv, ts, active=alpha != 0)
    preds = es @ alpha
    resid = preds - batch.values
    B = batch.size
    loss = float(np.mean(resid ** 2))
    dpred = (2.0 / B) * resid

    weights = [dpred * alpha[m] if alpha[m] != 0 else None
               for m in range(arch.n_ops)]
    gtu, gtv, gts, grads = _backprop_branches(params, arch, zs, tu, tv, ts,
                                              weights, need_heads=True)

    gu = transform_vjp(u, arch.p, gtu)[0] if arch.p is not None else gtu
    gv = transform_vjp(v, arch.q, gtv)[0] if arch.q is not None else gtv
    gU = np.zeros_like(params.U)
    gV = np.zeros_like(params.V)
    np.add.at(gU, batch.rows, gu)
    np.add.at(gV, batch.cols, gv)
    if arch.is_tensor:
        gs = transform_vjp(s, arch.r, gts)[0] if arch.r is not None else gts
        gS = np.zeros_like(params.S)
        np.add.at(gS, batch.depths, gs)
        grads["S"] = gS
    if lam > 0:
        iu = np.unique(batch.rows)
        iv = np.unique(batch.cols)
        loss += 0.5 * lam * (float(np.sum(params.U[iu] ** 2))
                             + float(np.sum(params.V[iv] ** 2)))
        gU[iu] += lam * params.U[iu]
        gV[iv] += lam * params.V[iv]
        if arch.is_tensor:
            js = np.unique(batch.depths)
            loss += 0.5 * lam * float(np.sum(params.S[js] ** 2))
            grads["S"][js] += lam * params.S[js]
    grads["U"] = gU
    grads["V"] = gV
    return loss, grads


def arch_grads(params, arch, batch, alpha_bar, need_alpha=True):
    """Validation-objective value and gradients of the architecture state.

    The forward pass runs at the discrete mixture alpha_bar; the gradient
    w.r.t. each alpha_m is the loss derivative times that branch's head
    output, evaluated for every candidate (so inactive branches still get a
    signal). Transform gradients flow only through active branches.
    Returns (h, galpha, gp, gq, gr).
    """
    alpha_bar = np.asarray(alpha_bar, dtype=float)
    u, v, s, tu, tv, ts = _transformed(params, arch, batch.rows, batch.cols,
                                       batch.depths)
    zs, es = _branch_outputs(params, arch, tu, tv, ts, active=None)
    preds = es @ alpha_bar
    resid = preds - batch.values
    h = float(np.mean(resid ** 2))
    dpred = (2.0 / batch.size) * resid
    galpha = es.T @ dpred if need_alpha else None

    weights = [dpred * alpha_bar[m] if alpha_bar[m] != 0 else None
               for m in range(arch.n_ops)]
    gtu, gtv, gts, _ = _backprop_branches(params, arch, zs, tu, tv, ts,
                                          weights, need_heads=False)
    gp = transform_vjp(u, arch.p, gtu)[1] if arch.p is not None else None
    gq = transform_vjp(v, arch.q, gtv)[1] if arch.q is not None else None
    gr = (transform_vjp(s, arch.r, gts)[1]
          if arch.is_tensor and arch.r is not None else None)
    return h, galpha, gp, gq, gr


def _projected_transform_step(w, grad, lr):
    """Gradient step on one transform, projected back onto the unit ball."""
    vec = project_unit_ball(w.flat() - lr * grad.flat())
    return TransformWeights.from_flat(vec, w.n_hidden, w.activation)


def predict_split(params, arch, dataset, split_name, alpha=None):
    """Predictions plus the aligned arrays of one split."""
    _, rows, cols, depths, values = dataset.subset(split_name)
    preds = predict_batch(params, arch, rows, cols, depths, alpha)
    return preds, rows, cols, values


def split_rmse(params, arch, dataset, split_name, alpha=None):
    preds, _, _, values = predict_split(params, arch, dataset, split_name,
                                        alpha)
    return rmse(preds, values)


def objective_full(params, arch, dataset, split_name="train", lam=0.0,
                   alpha=None):
    """Global objective: summed squared error plus lam/2 full-table norms."""
    preds, _, _, values = predict_split(params, arch, dataset, split_name,
                                        alpha)
    total = float(np.sum((preds - values) ** 2))
    total += 0.5 * lam * (float(np.sum(params.U ** 2))
                          + float(np.sum(params.V ** 2)))
    if params.S is not None:
        total += 0.5 * lam * float(np.sum(params.S ** 2))
    return total


def evaluate_model(params, arch, dataset, split_name="test", ks=(5, 10),
                   positive=5.0):
    """EvalReport (RMSE plus ranking metrics) for one split."""
    preds, rows, cols, values = predict_split(params, arch, dataset,
                                              split_name)
    hit, ndcg, n_users = ranking_metrics(preds, rows, cols, values, ks,
                                         positive)
    return EvalReport(split_name, rmse(preds, values), hit, ndcg, n_users,
                      values.size)


def train_model(dataset, arch, config, rng=None, on_epoch=None,
                learn_transforms=False):
    """Fit ModelParams under a fixed architecture.

    Adagrad on mini-batches with early stopping on validation RMSE; the
    parameters returned are the snapshot of the best validation epoch.
    With learn_transforms the element-wise transforms are also updated (in
    place on arch) by projected gradient steps on the training loss.
    Returns (params, metrics) where metrics is one dict per epoch with keys
    epoch, seconds, train_rmse, val_rmse, test_rmse.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    init_rng = np.random.default_rng(rng.integers(2 ** 63))
    sampler_rng = np.random.default_rng(rng.integers(2 ** 63))
    params = init_params(dataset.dims, arch, config, init_rng)
    state = AdagradState(lr=config.lr)
    sampler = BatchSampler(dataset, "train", config.batch_size, sampler_rng)
    learn_transforms = learn_transforms and (arch.p is not None
                                             or arch.q is not None
                                             or arch.r is not None)

    metrics = []
    best_val = np.inf
    best_params = params.copy()
    wait = 0
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        for step in range(sampler.batches_per_epoch):
            batch = sampler.sample_batch()
            loss, grads = loss_and_grads(params, arch, batch, config.lam)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step + 1} "
                    f"(lr={config.lr}, lam={config.lam})")
            adagrad_step(params, grads, state)
            if learn_transforms:
                _, _, gp, gq, gr = arch_grads(params, arch, batch,
                                              arch.alpha, need_alpha=False)
                if arch.p is not None:
                    arch.p = _projected_transform_step(arch.p, gp, config.lr)
                if arch.q is not None:
                    arch.q = _projected_transform_step(arch.q, gq, config.lr)
                if arch.r is not None:
                    arch.r = _projected_transform_step(arch.r, gr, config.lr)
        row = {"epoch": epoch,
               "seconds": time.perf_counter() - start,
               "train_rmse": split_rmse(params, arch, dataset, "train"),
               "val_rmse": split_rmse(params, arch, dataset, "validation"),
               "test_rmse": split_rmse(params, arch, dataset, "test")}
        metrics.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if row["val_rmse"] < best_val:
            best_val = row["val_rmse"]
            best_params = params.copy()
            wait = 0
        else:
            wait += 1
            if wait > config.patience:
                break
    return best_params, metrics


def fixed_arch(op, k=None, p=None, q=None, r=None):
    """One-hot architecture around a single operation (or kind string)."""
    if isinstance(op, str):
        if k is None:
            raise ValueError("k is required when op is a kind string")
        op = ops_mod.InteractionOp(op, k)
    return ArchParams(np.array([1.0]), (op,), p, q, r)


def train_fixed(dataset, op, config, transforms=None, rng=None,
                on_epoch=None):
    """Train a single fixed operation (element-wise transforms optional).

    transforms is None (identity) or a (p, q) / (p, q, r) tuple of
    TransformWeights; they stay frozen for the whole run.
    Returns (params, arch, metrics).
    """
    t = tuple(transforms) if transforms is not None else ()
    arch = fixed_arch(op, config.k, *t)
    params, metrics = train_model(dataset, arch, config, rng, on_epoch)
    return params, arch, metrics


def train_lambda_grid(dataset, arch, config, grid=DEFAULT_LAMBDA_GRID,
                      on_epoch=None, learn_transforms=False):
    """Train once per lambda; keep the best validation RMSE (ties: first).

    Every grid point reuses the same seed so runs differ only in lambda.
    Returns (best, results) where best/results entries carry lam, params,
    the (possibly transform-updated) arch, metrics, and the best-epoch
    validation RMSE.
    """
    results = []
    for lam in grid:
        cfg = replace(config, lam=float(lam))
        run_arch = arch.copy()
        params, metrics = train_model(dataset, run_arch, cfg,
                                      on_epoch=on_epoch,
                                      learn_transforms=learn_transforms)
        val = min(row["val_rmse"] for row in metrics)
        results.append({"lam": float(lam), "params": params,
                        "arch": run_arch, "metrics": metrics,
                        "val_rmse": val})
    best = min(results, key=lambda r: r["val_rmse"])
    return best, results
