"""Synthetic rating data generated from known factors and a known operation.

Used as the training/recovery oracle: the generator remembers the factors,
the head vector, and the noise level, so tests can compare what a search or
trainer recovers against what actually produced the data.
"""

import json
from dataclasses import dataclass

import numpy as np

from .data import RatingDataset
from .metrics import rmse
from .ops import InteractionOp, TensorCompositeOp
from .transform import transform


@dataclass
class GroundTruth:
    """What generated a synthetic dataset."""

    op: object             # InteractionOp or TensorCompositeOp
    U: np.ndarray
    V: np.ndarray
    S: np.ndarray | None
    w: np.ndarray
    noise: float
    seed: int
    oracle_rmse: float     # RMSE of the noiseless predictor on the data

    @property
    def op_name(self):
        return self.op.name


def make_op(name, k):
    """Operation object from a name: a base kind or "inner_outer"."""
    if "_" in name:
        inner, outer = name.split("_", 1)
        return TensorCompositeOp(inner, outer, k)
    return InteractionOp(name, k)


def generate(dims, k, op_name, density, noise=0.0, seed=0, transforms=None):
    """Sample a dataset whose values come from known random factors.

    dims is (m, n) or (m, n, d); density is the fraction of observed cells;
    transforms optionally applies element-wise transforms (p, q[, r]) before
    the operation. Returns (RatingDataset, GroundTruth). The dataset has no
    split assignment yet.
    """
    if not 0 < density <= 1:
        raise ValueError(f"density must be in (0, 1], got {density}")
    rng = np.random.default_rng(seed)
    op = make_op(op_name, k)
    is_tensor = len(dims) == 3
    if is_tensor != (op.arity == 3):
        raise ValueError(f"operation {op_name!r} does not match dims {dims}")
    U = rng.normal(0.0, 1.0, size=(dims[0], k))
    V = rng.normal(0.0, 1.0, size=(dims[1], k))
    S = rng.normal(0.0, 1.0, size=(dims[2], k)) if is_tensor else None
    w = rng.normal(0.0, 1.0, size=op.output_dim)
    w /= np.linalg.norm(w)

    total = int(np.prod(dims))
    nnz = max(1, int(round(density * total)))
    flat = rng.choice(total, size=nnz, replace=False)
    flat.sort()
    if is_tensor:
        rows, rem = np.divmod(flat, dims[1] * dims[2])
        cols, depths = np.divmod(rem, dims[2])
    else:
        rows, cols = np.divmod(flat, dims[1])
        depths = None

    tu, tv, ts = U[rows], V[cols], (S[depths] if is_tensor else None)
    if transforms is not None:
        p, q = transforms[0], transforms[1]
        tu = transform(tu, p) if p is not None else tu
        tv = transform(tv, q) if q is not None else tv
        if is_tensor and len(transforms) > 2 and transforms[2] is not None:
            ts = transform(ts, transforms[2])
    feats = op.apply(tu, tv) if not is_tensor else op.apply(tu, tv, ts)
    clean = feats @ w
    values = clean + (rng.normal(0.0, noise, size=nnz) if noise > 0
                      else 0.0)

    dataset = RatingDataset(rows, cols, values, tuple(dims), depths=depths,
                            row_ids=list(range(dims[0])),
                            col_ids=list(range(dims[1])),
                            depth_ids=(list(range(dims[2]))
                                       if is_tensor else []))
    truth = GroundTruth(op, U, V, S, w, noise, seed,
                        oracle_rmse=rmse(clean, values))
    return dataset, truth


def write_dataset(dataset, path):
    """Write loader-compatible lines: tab triples+timestamp for matrices,
    comma quads for tensors."""
    with open(path, "w", encoding="utf-8") as fh:
        if dataset.is_tensor:
            for i in range(dataset.n_records):
                fh.write(f"{dataset.rows[i]},{dataset.cols[i]},"
                         f"{dataset.depths[i]},{dataset.values[i]:.12g}\n")
        else:
            for i in range(dataset.n_records):
                fh.write(f"{dataset.rows[i]}\t{dataset.cols[i]}\t"
                         f"{dataset.values[i]:.12g}\t0\n")


def write_sidecar(truth, dataset, path):
    """Ground-truth summary next to a generated file (no factor dumps)."""
    payload = {
        "kind": "tensor" if dataset.is_tensor else "matrix",
        "op": truth.op_name,
        "dims": list(dataset.dims),
        "embedding_dim": int(truth.U.shape[1]),
        "n_records": int(dataset.n_records),
        "noise": truth.noise,
        "oracle_rmse": truth.oracle_rmse,
        "seed": truth.seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
