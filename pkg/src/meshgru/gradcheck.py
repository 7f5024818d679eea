"""Finite-difference audits of the tape gradients.

Central differences (h = 1e-6) against the recorded adjoints, for every
primitive in isolation and for the full model loss through a complete
rollout on a single-hex case.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .case_store import CaseTrajectory, compute_norm_stats
from .mesh_graph import build_dual_graph, scaled_laplacian, build_node_graph, structured_hex_grid
from .model import SurrogateConfig, build_case_inputs, init_dual_params, named_tensors, run_rollout
from .training import LossWeights, multitask_loss_tensors

FD_STEP = 1e-6
REL_FLOOR = 1e-6


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)
    return float(np.max(np.abs(a - b) / scale))


def _fd_gradient(fn, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def primitive_audit(seed: int = 0) -> dict[str, float]:
    """Max relative error of every primitive's adjoint on random inputs."""
    rng = np.random.default_rng(seed)
    lap = scaled_laplacian(
        build_node_graph(structured_hex_grid(1, 1, 1)[1]), "fixed"
    )
    results: dict[str, float] = {}

    def check(name, build, *leaf_shapes):
        leaves = [ad.parameter(rng.standard_normal(s)) for s in leaf_shapes]
        probe = [rng.standard_normal(s) for s in leaf_shapes]
        with Tape() as tape:
            loss = build(*leaves)
        backward(tape, loss)
        worst = 0.0
        for leaf in leaves:
            fd = _fd_gradient(lambda leaf=leaf: float(build(*leaves).value), leaf.value)
            worst = max(worst, rel_error(leaf.grad_value(), fd))
            leaf.grad = None
        results[name] = worst
        del probe

    r34 = rng.standard_normal((3, 4))
    check("matmul", lambda a, b: ad.mean_all(ad.matmul(a, b)), (3, 4), (4, 2))
    check(
        "sparse_dense_matmul",
        lambda x: ad.mean_all(ad.sparse_dense_matmul(lap, x)),
        (8, 3),
    )
    check("add", lambda a, b: ad.mean_all(ad.add(a, b)), (3, 4), (3, 4))
    check("add_bias", lambda a, b: ad.mean_all(ad.add(a, b)), (3, 4), (4,))
    check("sub", lambda a, b: ad.mean_all(ad.sub(a, b)), (3, 4), (3, 4))
    check("mul", lambda a, b: ad.mean_all(ad.mul(a, b)), (3, 4), (3, 4))
    check("sigmoid", lambda a: ad.mean_all(ad.sigmoid(a)), (3, 4))
    check("tanh", lambda a: ad.mean_all(ad.tanh(a)), (3, 4))
    check("relu", lambda a: ad.mean_all(ad.relu(a)), (3, 4))
    check("softplus", lambda a: ad.mean_all(ad.softplus(a)), (3, 4))
    check(
        "concat_columns",
        lambda a, b: ad.mean_all(ad.concat_columns([a, b])),
        (3, 4),
        (3, 2),
    )
    gather_idx = np.array([0, 2, 2, 1])
    check(
        "row_gather",
        lambda a: ad.mean_all(ad.row_gather(a, gather_idx)),
        (3, 4),
    )
    scatter_idx = np.array([0, 1, 1, 0, 1])
    check(
        "scatter_mean",
        lambda a: ad.mean_all(ad.scatter_mean(a, scatter_idx, 2)),
        (5, 4),
    )
    check("mean_all", lambda a: ad.mean_all(a), (3, 4))
    check("mse", lambda a: ad.mse(a, r34), (3, 4))
    w34 = np.abs(rng.standard_normal((3, 4))) + 0.1
    check("mse_weighted", lambda a: ad.mse(a, r34, weight=w34), (3, 4))
    return results


def single_hex_case(seed: int = 0, n_frames: int = 3) -> CaseTrajectory:
    """Small valid trajectory on one element for the full-model audit."""
    rng = np.random.default_rng(seed)
    coords, conn = structured_hex_grid(1, 1, 1)
    u = rng.standard_normal((n_frames, 8, 3)) * 0.1
    u[0] = 0.0
    peeq = np.cumsum(np.abs(rng.standard_normal((n_frames, 1))) * 0.01, axis=0)
    peeq[0] = 0.0
    peeq = np.maximum.accumulate(peeq, axis=0)
    s = np.abs(rng.standard_normal((n_frames, 1))) * 5.0
    s[0] = 0.0
    rf2 = np.concatenate([[0.0], np.cumsum(np.abs(rng.standard_normal(n_frames - 1)))])
    return CaseTrajectory(
        coords=coords,
        connectivity=conn,
        u=u,
        s=s,
        peeq=peeq,
        rf2=rf2,
        frame_times=np.arange(n_frames, dtype=np.float64),
        load_nodes=np.array([4, 5, 6, 7]),
        load_positions=(0.0, 1.0),
    )


def full_model_audit(
    hidden: int = 6,
    n_frames: int = 3,
    seed: int = 0,
    stress_feedback: bool = True,
) -> dict:
    """Tape gradient vs central differences for every parameter of the
    dual model through a free rollout on a single hex."""
    case = single_hex_case(seed, n_frames)
    stats = compute_norm_stats([case])
    config = SurrogateConfig(hidden=hidden, k_hops=2, stress_feedback=stress_feedback)
    params = init_dual_params(config, seed)
    graph = build_dual_graph(case.connectivity, case.n_nodes)
    inputs = build_case_inputs([case], [graph], stats)
    weights = LossWeights()

    def loss_value() -> float:
        out = run_rollout(inputs, params, config, mode="free")
        return float(multitask_loss_tensors(out, inputs, weights).value)

    with Tape() as tape:
        out = run_rollout(inputs, params, config, mode="free")
        loss = multitask_loss_tensors(out, inputs, weights)
    backward(tape, loss)

    worst = 0.0
    worst_name = ""
    n_params = 0
    for name, tensor in named_tensors(params):
        n_params += tensor.value.size
        fd = _fd_gradient(loss_value, tensor.value)
        err = rel_error(tensor.grad_value(), fd)
        if err > worst:
            worst, worst_name = err, name
        tensor.grad = None
    return {
        "max_rel_error": worst,
        "worst_parameter": worst_name,
        "n_params": n_params,
        "loss": float(loss.value),
    }
