"""One-shot interaction-function search over a shared supernet.

Alternates proximal updates of the architecture state (mixture weights and
element-wise transforms, driven by validation batches) with Adagrad updates
of the embeddings and heads (driven by training batches). Architecture
extraction keeps the top-k mixture entries, then the model is retrained from
scratch with the transforms frozen and lambda grid-searched.
"""

import dataclasses
import time
from dataclasses import dataclass, replace

import numpy as np

from .metrics import rmse
from .ops import (DEFAULT_SEARCH_KINDS, PRESERVING_KINDS, InteractionOp,
                  enumerate_tensor_ops)
from .prox import prox_c1, prox_c2, prox_ck, project_unit_ball
from .trainer import (DEFAULT_LAMBDA_GRID, ArchParams, TrainConfig,
                      TrainingDiverged, arch_grads, evaluate_model,
                      init_params, loss_and_grads, predict_split,
                      adagrad_step, AdagradState, train_fixed,
                      train_lambda_grid)
from .transform import TransformWeights, init_transform


@dataclass
class SearchConfig(TrainConfig):
    """TrainConfig plus the search-phase knobs."""

    search_epochs: int = 50
    op_kinds: tuple = DEFAULT_SEARCH_KINDS
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    n_hidden: int = 5
    activation: str = "sigmoid"
    lookahead: bool = False
    retrain_transforms: bool = False
    frozen_arch: bool = False  # debugging aid: skip all architecture updates


@dataclass
class SearchReport:
    """Everything a finished search run reports."""

    mode: str
    selected: list
    alpha: list
    alpha_bar: list
    transforms: dict
    search_epochs: list
    retrain: dict
    evaluation: dict
    config: dict
    seed: int
    timing: dict
    model: tuple = None  # (params, arch) kept for in-process use only

    def to_dict(self):
        out = dataclasses.asdict(self)
        out.pop("model")
        return out


def candidate_ops(config, is_tensor):
    """Candidate operation objects for one search."""
    if is_tensor:
        base = [kd for kd in config.op_kinds if kd in PRESERVING_KINDS]
        if not base:
            raise ValueError("no dimension-preserving kinds in "
                             f"{config.op_kinds}")
        return tuple(enumerate_tensor_ops(base, config.k))
    return tuple(InteractionOp(kd, config.k) for kd in config.op_kinds)


def extract_architecture(arch):
    """Selected operation (support of the one-nonzero projection) plus the
    element-wise transforms."""
    i = int(np.argmax(np.abs(arch.alpha)))
    return arch.ops[i], arch.p, arch.q


def _selection_order(alpha, k):
    """Indices of the k kept entries, largest |alpha| first (stable ties)."""
    return np.argsort(-np.abs(alpha), kind="stable")[:k]


def _transform_step(w, grad, lr):
    """Projected gradient step on one transform's full weight vector."""
    vec = project_unit_ball(w.flat() - lr * grad.flat())
    return TransformWeights.from_flat(vec, w.n_hidden, w.activation)


def _lookahead_params(params, arch, alpha_bar, batch, lr):
    """One plain gradient step on a copy of the training parameters."""
    _, grads = loss_and_grads(params, arch, batch, lam=0.0, alpha=alpha_bar)
    shadow = params.copy()
    for name, arr in shadow.arrays().items():
        g = grads.get(name)
        if g is not None:
            arr -= lr * g
    for head in shadow.heads:
        head.project()
    return shadow


def _transform_dict(arch):
    return {"p": None if arch.p is None else arch.p.to_dict(),
            "q": None if arch.q is None else arch.q.to_dict(),
            "r": None if arch.r is None else arch.r.to_dict()}


def _safe_eval(params, arch, dataset, split_name):
    """Test metrics; ranking only when the split has positive ratings."""
    preds, rows, cols, values = predict_split(params, arch, dataset,
                                              split_name)
    out = {"split": split_name, "rmse": rmse(preds, values)}
    try:
        report = evaluate_model(params, arch, dataset, split_name)
    except ValueError:
        return out
    return report.to_dict()


def _retrain(dataset, arch, config, selected_idx):
    """Retrain the extracted architecture from scratch, lambda from a grid.

    The kept mixture entries are rescaled so the largest equals one; with a
    single kept operation this is exactly fixed-operation training.
    """
    alpha_bar = prox_ck(arch.alpha, selected_idx.size)
    vals = alpha_bar[selected_idx]
    top = np.max(np.abs(vals))
    mix = vals / top if top > 0 else np.ones_like(vals)
    sub_arch = ArchParams(mix, tuple(arch.ops[i] for i in selected_idx),
                          arch.p, arch.q, arch.r)
    best, results = train_lambda_grid(
        dataset, sub_arch, config, config.lambda_grid,
        learn_transforms=config.retrain_transforms)
    grid_rows = [{"lam": r["lam"], "val_rmse": r["val_rmse"],
                  "test_rmse": r["metrics"][-1]["test_rmse"]}
                 for r in results]
    retrain = {"best_lambda": best["lam"], "val_rmse": best["val_rmse"],
               "epochs": len(best["metrics"]), "grid": grid_rows,
               "metrics": best["metrics"]}
    return best["params"], best["arch"], retrain


def _search(dataset, config, n_keep, mode):
    if dataset.split_labels is None:
        raise ValueError("dataset has no split assignment; call split()")
    if dataset.split_size("validation") == 0:
        raise ValueError("validation split is empty")
    start = time.perf_counter()

    # first two draws mirror train_model so a frozen-architecture search
    # replays the exact fixed-op trajectory for the same seed
    root = np.random.default_rng(np.random.SeedSequence(config.seed))
    init_rng = np.random.default_rng(root.integers(2 ** 63))
    train_rng = np.random.default_rng(root.integers(2 ** 63))
    val_rng = np.random.default_rng(root.integers(2 ** 63))
    arch_rng = np.random.default_rng(root.integers(2 ** 63))
    look_rng = np.random.default_rng(root.integers(2 ** 63))

    ops = candidate_ops(config, dataset.is_tensor)
    d = len(ops)
    arch = ArchParams(
        np.full(d, 1.0 / d), ops,
        p=init_transform(arch_rng, config.n_hidden, config.activation),
        q=init_transform(arch_rng, config.n_hidden, config.activation),
        r=(init_transform(arch_rng, config.n_hidden, config.activation)
           if dataset.is_tensor else None))
    params = init_params(dataset.dims, arch, config, init_rng)
    state = AdagradState(lr=config.lr)

    from .data import BatchSampler  # local import keeps module load light
    train_sampler = BatchSampler(dataset, "train", config.batch_size,
                                 train_rng)
    val_sampler = BatchSampler(dataset, "validation", config.batch_size,
                               val_rng)
    look_sampler = (BatchSampler(dataset, "train", config.batch_size,
                                 look_rng) if config.lookahead else None)

    def proj(z):
        return prox_c1(z) if n_keep == 1 else prox_ck(z, n_keep)

    epoch_rows = []
    for epoch in range(1, config.search_epochs + 1):
        for step in range(train_sampler.batches_per_epoch):
            if not config.frozen_arch:
                alpha_bar = proj(arch.alpha)
                vbatch = val_sampler.sample_batch()
                assert vbatch.split == "validation"
                eval_params = params
                if config.lookahead:
                    eval_params = _lookahead_params(
                        params, arch, alpha_bar,
                        look_sampler.sample_batch(), config.lr)
                h, galpha, gp, gq, gr = arch_grads(eval_params, arch, vbatch,
                                                   alpha_bar)
                if not np.isfinite(h):
                    raise TrainingDiverged(
                        f"non-finite validation objective at search epoch "
                        f"{epoch} step {step + 1}")
                arch.alpha = prox_c2(arch.alpha - config.lr * galpha)
                if arch.p is not None:
                    arch.p = _transform_step(arch.p, gp, config.lr)
                if arch.q is not None:
                    arch.q = _transform_step(arch.q, gq, config.lr)
                if arch.r is not None:
                    arch.r = _transform_step(arch.r, gr, config.lr)
            tbatch = train_sampler.sample_batch()
            assert tbatch.split == "train"
            alpha_bar = proj(arch.alpha)
            loss, grads = loss_and_grads(params, arch, tbatch, lam=0.0,
                                         alpha=alpha_bar)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite training loss at search epoch {epoch} "
                    f"step {step + 1}")
            adagrad_step(params, grads, state)
        alpha_bar = proj(arch.alpha)
        preds, _, _, values = predict_split(params, arch, dataset,
                                            "validation", alpha=alpha_bar)
        h_val = float(np.mean((preds - values) ** 2))
        epoch_rows.append({"epoch": epoch,
                           "seconds": time.perf_counter() - start,
                           "h_val": h_val,
                           "val_rmse": float(np.sqrt(h_val)),
                           "train_rmse": rmse(*_split_pv(params, arch,
                                                         dataset, "train",
                                                         alpha_bar))})
    search_seconds = time.perf_counter() - start

    selected_idx = _selection_order(arch.alpha, n_keep)
    retrain_start = time.perf_counter()
    final_params, final_arch, retrain = _retrain(dataset, arch, config,
                                                 selected_idx)
    retrain_seconds = time.perf_counter() - retrain_start

    report = SearchReport(
        mode=mode,
        selected=[ops[i].name for i in selected_idx],
        alpha=arch.alpha.tolist(),
        alpha_bar=proj(arch.alpha).tolist(),
        transforms=_transform_dict(arch),
        search_epochs=epoch_rows,
        retrain=retrain,
        evaluation=_safe_eval(final_params, final_arch, dataset, "test"),
        config=dataclasses.asdict(config),
        seed=config.seed,
        timing={"search_seconds": search_seconds,
                "retrain_seconds": retrain_seconds,
                "total_seconds": time.perf_counter() - start},
        model=(final_params, final_arch),
    )
    return report


def _split_pv(params, arch, dataset, split_name, alpha):
    preds, _, _, values = predict_split(params, arch, dataset, split_name,
                                        alpha=alpha)
    return preds, values


def sif_search(dataset, config):
    """One-shot search keeping a single operation."""
    return _search(dataset, config, n_keep=1, mode="sif")


def sif_search_topk(dataset, k, config):
    """One-shot search keeping the k strongest operations."""
    ops = candidate_ops(config, dataset.is_tensor)
    if not 1 <= k <= len(ops):
        raise ValueError(f"k must be in [1, {len(ops)}], got {k}")
    return _search(dataset, config, n_keep=k, mode="sif-topk")


def random_search(dataset, budget, config):
    """Random architectures: uniform operation, uniform transform weights.

    Transform weights are drawn uniformly in [-3, 3] per entry and used
    as-is (no ball projection). Each candidate is trained with the base
    config; the best validation RMSE wins and is then retrained across the
    lambda grid.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if dataset.split_labels is None:
        raise ValueError("dataset has no split assignment; call split()")
    start = time.perf_counter()
    root = np.random.default_rng(np.random.SeedSequence(config.seed))
    ops = candidate_ops(config, dataset.is_tensor)
    n_weights = 3 * config.n_hidden + 1

    def sample_transform():
        return TransformWeights.from_flat(
            root.uniform(-3.0, 3.0, size=n_weights), config.n_hidden,
            config.activation)

    trials = []
    for trial in range(budget):
        op = ops[int(root.integers(len(ops)))]
        p = sample_transform()
        q = sample_transform()
        r = sample_transform() if dataset.is_tensor else None
        seed = int(root.integers(2 ** 63))
        transforms = (p, q, r) if dataset.is_tensor else (p, q)
        cfg = replace(config, seed=seed)
        params, arch, metrics = train_fixed(dataset, op, cfg,
                                            transforms=transforms)
        val = min(row["val_rmse"] for row in metrics)
        trials.append({"trial": trial, "op": op.name, "val_rmse": val,
                       "arch": arch, "seed": seed})
    best_trial = min(trials, key=lambda t: t["val_rmse"])
    best_arch = best_trial["arch"]

    retrain_start = time.perf_counter()
    retrain_cfg = replace(config, seed=best_trial["seed"])
    best, results = train_lambda_grid(dataset, best_arch, retrain_cfg,
                                      config.lambda_grid)
    grid_rows = [{"lam": r["lam"], "val_rmse": r["val_rmse"],
                  "test_rmse": r["metrics"][-1]["test_rmse"]}
                 for r in results]
    report = SearchReport(
        mode="random",
        selected=[best_trial["op"]],
        alpha=best_arch.alpha.tolist(),
        alpha_bar=best_arch.alpha.tolist(),
        transforms=_transform_dict(best_arch),
        search_epochs=[{"trial": t["trial"], "op": t["op"],
                        "val_rmse": t["val_rmse"]} for t in trials],
        retrain={"best_lambda": best["lam"], "val_rmse": best["val_rmse"],
                 "epochs": len(best["metrics"]), "grid": grid_rows,
                 "metrics": best["metrics"]},
        evaluation=_safe_eval(best["params"], best_arch, dataset, "test"),
        config=dataclasses.asdict(config),
        seed=config.seed,
        timing={"search_seconds": retrain_start - start,
                "retrain_seconds": time.perf_counter() - retrain_start,
                "total_seconds": time.perf_counter() - start},
        model=(best["params"], best_arch),
    )
    return report
