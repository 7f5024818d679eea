"""Multi-task training loop, evaluation metrics, and the dual-vs-single
ablation protocol.

Losses are mean-squared errors in normalized space with per-case mean
reduction: a merged batch's loss is the plain mean of the per-case
losses, so batch composition never biases gradients.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .case_store import (
    CaseTrajectory,
    NormStats,
    compute_norm_stats,
    read_array_blob,
    write_array_blob,
)
from .errors import DataValidationError, DivergenceError
from .mesh_graph import NodeGraph, build_dual_graph, mean_neighbor_matrix
from .model import (
    BaselineParams,
    CaseInputs,
    DualParams,
    FrameOutputs,
    RolloutResult,
    SurrogateConfig,
    build_case_inputs,
    count_params,
    init_baseline_params,
    init_dual_params,
    named_tensors,
    run_rollout,
    split_rollout_results,
)


@dataclass
class LossWeights:
    """Multi-task term weights; defaults are tunable config, not reported
    values."""

    lambda_s: float = 1.0
    lambda_rf2: float = 1.0
    lambda_p: float = 1.0
    lambda_lap: float = 0.01

    def to_json(self) -> dict:
        return {
            "lambda_s": self.lambda_s,
            "lambda_rf2": self.lambda_rf2,
            "lambda_p": self.lambda_p,
            "lambda_lap": self.lambda_lap,
        }

    @classmethod
    def from_json(cls, data: dict) -> "LossWeights":
        return cls(**data)


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 8
    lr: float = 3e-3
    clip: float = 0.5
    hidden: int = 256
    k_hops: int = 2
    seed: int = 0
    stress_feedback: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)

    @property
    def surrogate(self) -> SurrogateConfig:
        return SurrogateConfig(
            hidden=self.hidden,
            k_hops=self.k_hops,
            stress_feedback=self.stress_feedback,
        )

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "clip": self.clip,
            "hidden": self.hidden,
            "k_hops": self.k_hops,
            "seed": self.seed,
            "stress_feedback": self.stress_feedback,
            "weights": self.weights.to_json(),
            "split_ratios": list(self.split_ratios),
        }

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        weights = LossWeights.from_json(data.pop("weights", {}))
        ratios = tuple(data.pop("split_ratios", (0.7, 0.15, 0.15)))
        return cls(weights=weights, split_ratios=ratios, **data)


def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(config.to_json(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# loss


def laplacian_reg(u_frame: np.ndarray, node_graph: NodeGraph) -> float:
    """Raw one-frame smoothness penalty: sum over nodes of the squared
    distance to the neighbor mean."""
    mean_adj = mean_neighbor_matrix(node_graph)
    diff = np.asarray(u_frame, dtype=np.float64) - mean_adj @ u_frame
    return float(np.sum(diff * diff))


def _case_row_weights(counts: np.ndarray, n_frames: int, comps: int) -> np.ndarray:
    """Per-row weights making sum(w * sq) the mean of per-case MSEs."""
    b = len(counts)
    per_case = 1.0 / (b * n_frames * counts * comps)
    return np.repeat(per_case, counts)


def multitask_loss_tensors(
    out: FrameOutputs,
    inputs: CaseInputs,
    weights: LossWeights,
    mean_adj: sp.csr_matrix | None = None,
) -> Tensor:
    """Tape-aware joint objective over a (possibly merged) rollout."""
    if inputs.targets is None:
        raise DataValidationError("loss needs targets")
    tg = inputs.targets
    t_frames = inputs.n_frames
    node_counts = np.diff(inputs.batched.node_offsets)
    elem_counts = np.diff(inputs.batched.elem_offsets)
    b = inputs.batched.n_cases

    w_u = _case_row_weights(node_counts, t_frames, 3)[:, None]
    w_s = _case_row_weights(elem_counts, t_frames, 1)[:, None]
    w_rf = np.full((b, 1), 1.0 / (b * t_frames))
    # Eq-style smoothness sums the squared 3-vector per node: no component
    # division, per-case normalization by T*N only.
    w_lap = _case_row_weights(node_counts, t_frames, 1)[:, None]
    p_shift = out.p_norm_shift(inputs.stats)

    if weights.lambda_lap > 0 and mean_adj is None:
        mean_adj = mean_neighbor_matrix(inputs.graph.node_graph)

    total = None

    def acc(term):
        nonlocal total
        total = term if total is None else ad.add(total, term)

    for t in range(t_frames):
        acc(ad.mse(out.u[t], tg.u[t], weight=w_u))
        if weights.lambda_s > 0:
            acc(ad.mul(ad.mse(out.s[t], tg.s[t], weight=w_s), weights.lambda_s))
        if weights.lambda_p > 0:
            p_norm = ad.sub(out.p_scaled[t], p_shift)
            acc(ad.mul(ad.mse(p_norm, tg.p[t], weight=w_s), weights.lambda_p))
        if weights.lambda_rf2 > 0:
            acc(ad.mul(ad.mse(out.rf2[t], tg.rf2[t], weight=w_rf), weights.lambda_rf2))
        if weights.lambda_lap > 0:
            smooth = ad.sub(out.u[t], ad.sparse_dense_matmul(mean_adj, out.u[t]))
            acc(ad.mul(ad.mse(smooth, np.zeros(smooth.shape), weight=w_lap), weights.lambda_lap))
    return total


def multitask_loss(
    pred: RolloutResult,
    target: CaseTrajectory,
    weights: LossWeights,
    node_graph: NodeGraph,
    stats: NormStats,
) -> float:
    """Single-case objective from numpy arrays (validation / tests)."""
    from .case_store import apply_norm

    t_frames = target.n_frames
    loss = float(np.mean((pred.u_norm - apply_norm(target.u, stats, "u")) ** 2))
    loss += weights.lambda_s * float(
        np.mean((pred.s_norm - apply_norm(target.s, stats, "s")) ** 2)
    )
    loss += weights.lambda_p * float(
        np.mean((pred.peeq_norm - apply_norm(target.peeq, stats, "peeq")) ** 2)
    )
    loss += weights.lambda_rf2 * float(
        np.mean((pred.rf2_norm - apply_norm(target.rf2, stats, "rf2")) ** 2)
    )
    if weights.lambda_lap > 0:
        mean_adj = mean_neighbor_matrix(node_graph)
        raw = 0.0
        for t in range(t_frames):
            diff = pred.u_norm[t] - mean_adj @ pred.u_norm[t]
            raw += float(np.sum(diff * diff))
        loss += weights.lambda_lap * raw / (t_frames * target.n_nodes)
    return loss


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ChannelMetrics:
    rmse_norm: float
    rmse_phys: float
    r2: float

    def to_json(self) -> dict:
        return {"rmse_norm": self.rmse_norm, "rmse_phys": self.rmse_phys, "r2": self.r2}


@dataclass
class Metrics:
    channels: dict[str, ChannelMetrics]

    def to_json(self) -> dict:
        return {name: m.to_json() for name, m in self.channels.items()}


def _channel_metrics(
    ss_res: float, ss_tot: float, count: int, std: float
) -> ChannelMetrics:
    rmse_norm = math.sqrt(ss_res / count)
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0 else 0.0
    return ChannelMetrics(rmse_norm=rmse_norm, rmse_phys=rmse_norm * std, r2=r2)


def compute_metrics(
    pairs: list[tuple[RolloutResult, CaseTrajectory]], stats: NormStats
) -> Metrics:
    """RMSE and R^2 aggregated over all cases, frames, points, components."""
    from .case_store import apply_norm

    acc = {
        name: {"res": 0.0, "sum": 0.0, "sumsq": 0.0, "n": 0}
        for name in ("u", "s", "peeq", "rf2")
    }

    def update(name: str, pred: np.ndarray, tgt: np.ndarray) -> None:
        a = acc[name]
        a["res"] += float(np.sum((pred - tgt) ** 2))
        a["sum"] += float(np.sum(tgt))
        a["sumsq"] += float(np.sum(tgt * tgt))
        a["n"] += tgt.size

    for pred, case in pairs:
        update("u", pred.u_norm, apply_norm(case.u, stats, "u"))
        update("s", pred.s_norm, apply_norm(case.s, stats, "s"))
        update("peeq", pred.peeq_norm, apply_norm(case.peeq, stats, "peeq"))
        update("rf2", pred.rf2_norm, apply_norm(case.rf2, stats, "rf2"))

    channels = {}
    for name, a in acc.items():
        ss_tot = a["sumsq"] - a["sum"] ** 2 / a["n"]
        channels[name] = _channel_metrics(
            a["res"], max(ss_tot, 0.0), a["n"], stats.std[name]
        )
    return Metrics(channels=channels)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: DualParams | BaselineParams
    stats: NormStats
    config: TrainConfig
    history: list[dict]
    best_epoch: int
    best_val_loss: float


def _init_params(kind: str, config: TrainConfig):
    if kind == "dual":
        return init_dual_params(config.surrogate, config.seed)
    if kind == "single":
        return init_baseline_params(config.surrogate, config.seed)
    raise DataValidationError(f"unknown model kind '{kind}'")


def train(
    train_cases: list[CaseTrajectory],
    val_cases: list[CaseTrajectory],
    config: TrainConfig,
    kind: str = "dual",
    log=None,
) -> TrainResult:
    """Backprop-through-rollout training with Adam, global-norm clipping,
    plateau LR decay, and best-validation checkpointing."""
    if not train_cases or not val_cases:
        raise DataValidationError("train and validation sets must be nonempty")
    from .optim import OptimizerState, adam_step, clip_global_norm, plateau_step

    stats = compute_norm_stats(train_cases)
    surrogate_cfg = config.surrogate
    params = _init_params(kind, config)
    names_and_tensors = named_tensors(params)
    tensors = [t for _, t in names_and_tensors]
    opt = OptimizerState.init(tensors, config.lr)

    train_graphs = [
        build_dual_graph(c.connectivity, c.n_nodes) for c in train_cases
    ]
    val_inputs = [
        build_case_inputs([c], [build_dual_graph(c.connectivity, c.n_nodes)], stats)
        for c in val_cases
    ]

    shuffle_rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    best_val = math.inf
    best_epoch = -1
    best_values: list[np.ndarray] | None = None

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_cases))
        epoch_loss = 0.0
        epoch_cases = 0
        for start in range(0, len(order), config.batch_size):
            batch_idx = sorted(order[start : start + config.batch_size].tolist())
            inputs = build_case_inputs(
                [train_cases[i] for i in batch_idx],
                [train_graphs[i] for i in batch_idx],
                stats,
            )
            try:
                with Tape() as tape:
                    out = run_rollout(inputs, params, surrogate_cfg, mode="free")
                    loss = multitask_loss_tensors(out, inputs, config.weights)
                if not math.isfinite(float(loss.value)):
                    raise DivergenceError("non-finite training loss")
                backward(tape, loss)
                grads = [t.grad_value() for t in tensors]
                clip_global_norm(grads, config.clip)
                adam_step(tensors, grads, opt)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"epoch {epoch}, batch starting at case {start}: {exc}"
                ) from exc
            for t in tensors:
                t.grad = None
            epoch_loss += float(loss.value) * len(batch_idx)
            epoch_cases += len(batch_idx)

        train_loss = epoch_loss / epoch_cases
        val_loss = 0.0
        for inputs in val_inputs:
            out = run_rollout(inputs, params, surrogate_cfg, mode="free")
            val_loss += float(
                multitask_loss_tensors(out, inputs, config.weights).value
            )
        val_loss /= len(val_inputs)
        plateau_step(opt, val_loss)
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "lr": opt.lr,
            }
        )
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_values = [t.value.copy() for t in tensors]
        if log is not None:
            log(history[-1])

    for t, v in zip(tensors, best_values):
        t.value = v
    return TrainResult(
        params=params,
        stats=stats,
        config=config,
        history=history,
        best_epoch=best_epoch,
        best_val_loss=best_val,
    )


def evaluate(
    params: DualParams | BaselineParams,
    stats: NormStats,
    surrogate_cfg: SurrogateConfig,
    cases: list[CaseTrajectory],
) -> Metrics:
    """Free rollout per case; pure function of (params, stats, cases)."""
    pairs = []
    for case in cases:
        inputs = build_case_inputs(
            [case], [build_dual_graph(case.connectivity, case.n_nodes)], stats
        )
        out = run_rollout(inputs, params, surrogate_cfg, mode="free")
        pairs.append((split_rollout_results(out, inputs)[0], case))
    return compute_metrics(pairs, stats)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    directory: str | Path,
    result: TrainResult,
    kind: str,
) -> None:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    blobs = []
    for name, tensor in named_tensors(result.params):
        entry = write_array_blob(directory / "params" / f"{name}.bin", tensor.value)
        entry["name"] = name
        blobs.append(entry)
    manifest = {
        "schema_version": 1,
        "kind": kind,
        "config": result.config.to_json(),
        "config_hash": config_hash(result.config),
        "seed": result.config.seed,
        "stats": result.stats.to_json(),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "n_params": count_params(result.params),
        "params": blobs,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    )


def load_checkpoint(directory: str | Path):
    """Returns (params, stats, train_config, manifest)."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DataValidationError(f"missing checkpoint manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    config = TrainConfig.from_json(manifest["config"])
    stats = NormStats.from_json(manifest["stats"])
    params = _init_params(manifest["kind"], config)
    by_name = {e["name"]: e for e in manifest["params"]}
    for name, tensor in named_tensors(params):
        if name not in by_name:
            raise DataValidationError(f"checkpoint lacks parameter '{name}'")
        entry = dict(by_name[name])
        value = read_array_blob(directory / "params", entry)
        if value.shape != tensor.value.shape:
            raise DataValidationError(
                f"parameter '{name}' has shape {value.shape}, "
                f"expected {tensor.value.shape}"
            )
        tensor.value = value
    return params, stats, config, manifest


# ---------------------------------------------------------------------------
# ablation


def ablate(
    train_cases: list[CaseTrajectory],
    val_cases: list[CaseTrajectory],
    test_cases: list[CaseTrajectory],
    config: TrainConfig,
    seeds: list[int],
    log=None,
) -> dict:
    """Train dual and single-graph models under identical settings per
    seed; report element-resolution stress/PEEQ RMSE and the relative
    reduction of the dual route."""
    rows = []
    for seed in seeds:
        cfg = copy.deepcopy(config)
        cfg.seed = seed
        per_seed = {"seed": seed}
        for kind in ("single", "dual"):
            result = train(train_cases, val_cases, cfg, kind=kind, log=log)
            metrics = evaluate(result.params, result.stats, cfg.surrogate, test_cases)
            per_seed[kind] = {
                "stress_rmse": metrics.channels["s"].rmse_phys,
                "peeq_rmse": metrics.channels["peeq"].rmse_phys,
                "stress_rmse_norm": metrics.channels["s"].rmse_norm,
                "peeq_rmse_norm": metrics.channels["peeq"].rmse_norm,
                "n_params": count_params(result.params),
            }
        rows.append(per_seed)

    def median_of(kind: str, key: str) -> float:
        return float(np.median([r[kind][key] for r in rows]))

    summary = {}
    for key in ("stress_rmse", "peeq_rmse"):
        single = median_of("single", key)
        dual = median_of("dual", key)
        reduction = (1.0 - dual / single) * 100.0 if single > 0 else 0.0
        summary[key] = {
            "single_median": single,
            "dual_median": dual,
            "reduction_percent": reduction,
        }
    return {"seeds": rows, "summary": summary}


def force_deflection_curve(
    coords: np.ndarray, u: np.ndarray, rf2: np.ndarray
) -> np.ndarray:
    """(midspan deflection, RF2) per frame; deflection is the |vertical
    displacement| of the node nearest the geometric centre."""
    centre = 0.5 * (coords.min(axis=0) + coords.max(axis=0))
    node = int(np.argmin(np.sum((coords - centre) ** 2, axis=1)))
    deflection = np.abs(u[:, node, 1])
    return np.stack([deflection, rf2], axis=1)
