"""Dual-graph recurrent surrogate and its single-graph baseline.

Both models advance gated recurrent units whose linear maps are order-K
Chebyshev graph convolutions.  The dual model runs one cell on the node
graph (displacement) and one on the element graph (stress, plastic
strain, pooled reaction force); the baseline keeps only the node cell and
reconstructs element fields from nodal proxies by corner averaging.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .case_store import CaseTrajectory, NormStats, apply_norm, compute_alpha
from .errors import DataValidationError, DivergenceError
from .mesh_graph import BatchedGraph, DualGraph, ScaledLaplacian, build_dual_graph, merge_batch
from .projection import aggregate_node_hidden, scatter_node_field

GATES = ("z", "r", "h")

# Node feature columns: 0-2 normalized coordinates, 3-5 previous-step
# displacement, 6-8 displacement increment, 9 progress alpha, 10 load
# indicator, 11 optional nodal stress feedback.
BASE_FEATURES = 11


@dataclass
class SurrogateConfig:
    hidden: int = 256
    k_hops: int = 2
    stress_feedback: bool = False
    lambda_max_mode: str = "fixed"

    @property
    def n_features(self) -> int:
        return BASE_FEATURES + (1 if self.stress_feedback else 0)

    def to_json(self) -> dict:
        return {
            "hidden": self.hidden,
            "k_hops": self.k_hops,
            "stress_feedback": self.stress_feedback,
            "lambda_max_mode": self.lambda_max_mode,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SurrogateConfig":
        return cls(**data)


@dataclass
class CellParams:
    """One graph-convolutional GRU cell: per gate, K+1 Chebyshev weight
    matrices for the input path and the hidden path plus a bias."""

    wx: dict[str, list[Tensor]]
    wh: dict[str, list[Tensor]]
    b: dict[str, Tensor]


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class DualParams:
    node_cell: CellParams
    elem_cell: CellParams
    mlp_u: MlpParams
    mlp_s: MlpParams
    mlp_p: MlpParams
    mlp_rf2: MlpParams
    kind: str = field(default="dual", init=False)


@dataclass
class BaselineParams:
    node_cell: CellParams
    mlp_u: MlpParams
    mlp_s_n: MlpParams
    mlp_p_n: MlpParams
    mlp_rf2: MlpParams
    kind: str = field(default="single", init=False)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _init_cell(rng: np.random.Generator, in_dim: int, hidden: int, k: int) -> CellParams:
    wx = {g: [ad.parameter(_glorot(rng, in_dim, hidden)) for _ in range(k + 1)] for g in GATES}
    wh = {g: [ad.parameter(_glorot(rng, hidden, hidden)) for _ in range(k + 1)] for g in GATES}
    b = {g: ad.parameter(np.zeros(hidden)) for g in GATES}
    return CellParams(wx=wx, wh=wh, b=b)


def _init_mlp(rng: np.random.Generator, in_dim: int, hidden: int, out_dim: int) -> MlpParams:
    return MlpParams(
        w1=ad.parameter(_glorot(rng, in_dim, hidden)),
        b1=ad.parameter(np.zeros(hidden)),
        w2=ad.parameter(_glorot(rng, hidden, out_dim)),
        b2=ad.parameter(np.zeros(out_dim)),
    )


def init_dual_params(config: SurrogateConfig, seed: int) -> DualParams:
    rng = np.random.default_rng(seed)
    d, k = config.hidden, config.k_hops
    return DualParams(
        node_cell=_init_cell(rng, config.n_features, d, k),
        elem_cell=_init_cell(rng, d, d, k),
        mlp_u=_init_mlp(rng, d, d, 3),
        mlp_s=_init_mlp(rng, d, d, 1),
        mlp_p=_init_mlp(rng, d, d, 1),
        mlp_rf2=_init_mlp(rng, d, d, 1),
    )


def init_baseline_params(config: SurrogateConfig, seed: int) -> BaselineParams:
    rng = np.random.default_rng(seed)
    d, k = config.hidden, config.k_hops
    return BaselineParams(
        node_cell=_init_cell(rng, config.n_features, d, k),
        mlp_u=_init_mlp(rng, d, d, 3),
        mlp_s_n=_init_mlp(rng, d, d, 1),
        mlp_p_n=_init_mlp(rng, d, d, 1),
        mlp_rf2=_init_mlp(rng, d, d, 1),
    )


def _cell_named(prefix: str, cell: CellParams) -> list[tuple[str, Tensor]]:
    out = []
    for g in GATES:
        for i, w in enumerate(cell.wx[g]):
            out.append((f"{prefix}.{g}.wx{i}", w))
        for i, w in enumerate(cell.wh[g]):
            out.append((f"{prefix}.{g}.wh{i}", w))
        out.append((f"{prefix}.{g}.b", cell.b[g]))
    return out


def _mlp_named(prefix: str, mlp: MlpParams) -> list[tuple[str, Tensor]]:
    return [
        (f"{prefix}.w1", mlp.w1),
        (f"{prefix}.b1", mlp.b1),
        (f"{prefix}.w2", mlp.w2),
        (f"{prefix}.b2", mlp.b2),
    ]


def named_tensors(params: DualParams | BaselineParams) -> list[tuple[str, Tensor]]:
    """Deterministic (name, tensor) listing for optimizers and checkpoints."""
    out = _cell_named("node_cell", params.node_cell)
    if isinstance(params, DualParams):
        out += _cell_named("elem_cell", params.elem_cell)
        out += _mlp_named("mlp_u", params.mlp_u)
        out += _mlp_named("mlp_s", params.mlp_s)
        out += _mlp_named("mlp_p", params.mlp_p)
    else:
        out += _mlp_named("mlp_u", params.mlp_u)
        out += _mlp_named("mlp_s_n", params.mlp_s_n)
        out += _mlp_named("mlp_p_n", params.mlp_p_n)
    out += _mlp_named("mlp_rf2", params.mlp_rf2)
    return out


def count_params(params: DualParams | BaselineParams) -> int:
    return sum(t.value.size for _, t in named_tensors(params))


# ---------------------------------------------------------------------------
# forward pieces


def _cheb_basis(lap: ScaledLaplacian, x, k: int) -> list:
    """[T_0 x, T_1 x, ..., T_k x] via the Chebyshev recurrence."""
    basis = [x]
    if k >= 1:
        basis.append(ad.sparse_dense_matmul(lap, x))
    for _ in range(2, k + 1):
        nxt = ad.sub(ad.mul(ad.sparse_dense_matmul(lap, basis[-1]), 2.0), basis[-2])
        basis.append(nxt)
    return basis


def _gate(basis_x, basis_h, cell: CellParams, g: str):
    acc = ad.matmul(basis_x[0], cell.wx[g][0])
    for k in range(1, len(basis_x)):
        acc = ad.add(acc, ad.matmul(basis_x[k], cell.wx[g][k]))
    for k in range(len(basis_h)):
        acc = ad.add(acc, ad.matmul(basis_h[k], cell.wh[g][k]))
    return ad.add(acc, cell.b[g])


def gconv_gru_step(x, h_prev, lap: ScaledLaplacian, cell: CellParams, k: int):
    """z = sig(Cheb_z), r = sig(Cheb_r), h~ = tanh(Cheb_h with r*H),
    H = z*H_prev + (1-z)*h~."""
    basis_x = _cheb_basis(lap, x, k)
    basis_h = _cheb_basis(lap, h_prev, k)
    z = ad.sigmoid(_gate(basis_x, basis_h, cell, "z"))
    r = ad.sigmoid(_gate(basis_x, basis_h, cell, "r"))
    basis_rh = _cheb_basis(lap, ad.mul(r, h_prev), k)
    h_cand = ad.tanh(_gate(basis_x, basis_rh, cell, "h"))
    return ad.add(ad.mul(z, h_prev), ad.mul(ad.sub(1.0, z), h_cand))


def mlp_forward(x, mlp: MlpParams):
    hidden = ad.tanh(ad.add(ad.matmul(x, mlp.w1), mlp.b1))
    return ad.add(ad.matmul(hidden, mlp.w2), mlp.b2)


def node_branch_step(x, h_n_prev, lap: ScaledLaplacian, params, k: int):
    h_n = gconv_gru_step(x, h_n_prev, lap, params.node_cell, k)
    return h_n, mlp_forward(h_n, params.mlp_u)


def element_branch_step(h_n, h_e_prev, graph: DualGraph, params: DualParams, k: int):
    z_e = aggregate_node_hidden(h_n, graph.incidence)
    h_e = gconv_gru_step(z_e, h_e_prev, graph.elem_laplacian, params.elem_cell, k)
    s_hat = mlp_forward(h_e, params.mlp_s)
    p_scaled = ad.softplus(mlp_forward(h_e, params.mlp_p))
    return h_e, s_hat, p_scaled


def predict_rf2(h_e, mlp: MlpParams, case_index: np.ndarray, n_cases: int):
    if h_e.value.shape[0] == 0:
        raise DataValidationError("cannot pool over an empty element set")
    pooled = ad.scatter_mean(h_e, case_index, n_cases)
    return mlp_forward(pooled, mlp)


# ---------------------------------------------------------------------------
# case assembly


@dataclass
class TargetsNorm:
    """Normalized-space targets on the merged mesh."""

    u: np.ndarray    # [T, N, 3]
    s: np.ndarray    # [T, E, 1]
    p: np.ndarray    # [T, E, 1]
    rf2: np.ndarray  # [T, B, 1]


@dataclass
class CaseInputs:
    """Static conditions (plus optional targets) for one merged batch."""

    batched: BatchedGraph
    coords_norm: np.ndarray  # [N, 3]
    indicator: np.ndarray    # [N, 1]
    alpha_node: np.ndarray   # [T, N, 1]
    n_frames: int
    stats: NormStats
    targets: TargetsNorm | None

    @property
    def graph(self) -> DualGraph:
        return self.batched.graph


def build_case_inputs(
    cases: list[CaseTrajectory],
    graphs: list[DualGraph],
    stats: NormStats,
    with_targets: bool = True,
) -> CaseInputs:
    if len(cases) != len(graphs) or not cases:
        raise DataValidationError("need matching, nonempty case and graph lists")
    frames = {c.n_frames for c in cases}
    if len(frames) != 1:
        raise DataValidationError(f"cases disagree on frame count: {sorted(frames)}")
    t = frames.pop()
    batched = merge_batch(graphs)
    n_total = batched.graph.node_graph.n_nodes

    coords_norm = apply_norm(
        np.concatenate([c.coords for c in cases]), stats, "coords"
    )
    indicator = np.zeros((n_total, 1))
    for c, off in zip(cases, batched.node_offsets[:-1]):
        indicator[c.load_nodes + off] = 1.0

    alphas = np.stack([compute_alpha(c.frame_times) for c in cases])  # [B, T]
    node_case = batched.node_case_index
    alpha_node = alphas.T[:, node_case][:, :, None]  # [T, N, 1]

    targets = None
    if with_targets:
        targets = TargetsNorm(
            u=apply_norm(np.concatenate([c.u for c in cases], axis=1), stats, "u"),
            s=apply_norm(
                np.concatenate([c.s for c in cases], axis=1), stats, "s"
            )[:, :, None],
            p=apply_norm(
                np.concatenate([c.peeq for c in cases], axis=1), stats, "peeq"
            )[:, :, None],
            rf2=apply_norm(
                np.stack([c.rf2 for c in cases], axis=1), stats, "rf2"
            )[:, :, None],
        )
    return CaseInputs(
        batched=batched,
        coords_norm=coords_norm,
        indicator=indicator,
        alpha_node=alpha_node,
        n_frames=t,
        stats=stats,
        targets=targets,
    )


def case_inputs_for(
    case: CaseTrajectory,
    stats: NormStats,
    graph: DualGraph | None = None,
    with_targets: bool = True,
    lambda_max_mode: str = "fixed",
) -> CaseInputs:
    if graph is None:
        graph = build_dual_graph(case.connectivity, case.n_nodes, lambda_max_mode)
    return build_case_inputs([case], [graph], stats, with_targets)


# ---------------------------------------------------------------------------
# rollout


@dataclass
class FrameOutputs:
    """Per-frame prediction tensors on the merged mesh (frame 0 is the
    known initial state, held as constants)."""

    u: list        # T tensors [N, 3], normalized space
    s: list        # T tensors [E, 1], normalized space
    p_scaled: list  # T tensors [E, 1], physical/std space (nonnegative)
    rf2: list      # T tensors [B, 1], normalized space

    def p_norm_shift(self, stats: NormStats) -> float:
        return stats.mean["peeq"] / stats.std["peeq"]


@dataclass
class RolloutResult:
    """One case's trajectory in normalized space plus physical units."""

    u_norm: np.ndarray
    s_norm: np.ndarray
    peeq_norm: np.ndarray
    rf2_norm: np.ndarray
    u: np.ndarray
    s: np.ndarray
    peeq: np.ndarray
    rf2: np.ndarray


def assemble_features(
    inputs: CaseInputs,
    t: int,
    prev_u,
    prev_prev_u,
    prev_s,
    config: SurrogateConfig,
):
    """Concatenate the frame-t node features in the documented layout.

    prev_* are None at the start of the rollout, which yields the all-zero
    history columns.
    """
    if not 0 <= t < inputs.n_frames:
        raise DataValidationError(f"frame {t} outside [0, {inputs.n_frames})")
    n = inputs.coords_norm.shape[0]
    zeros3 = np.zeros((n, 3))
    cols = [ad.constant(inputs.coords_norm)]
    cols.append(ad.constant(zeros3) if prev_u is None else prev_u)
    if prev_u is None or prev_prev_u is None:
        cols.append(ad.constant(zeros3))
    else:
        cols.append(ad.sub(prev_u, prev_prev_u))
    cols.append(ad.constant(inputs.alpha_node[t]))
    cols.append(ad.constant(inputs.indicator))
    if config.stress_feedback:
        if prev_s is None:
            cols.append(ad.constant(np.zeros((n, 1))))
        else:
            cols.append(scatter_node_field(prev_s, inputs.graph.incidence))
    return ad.concat_columns(cols)


def _initial_state_constants(inputs: CaseInputs) -> tuple:
    """Frame-0 outputs: the undeformed state expressed in model space."""
    stats = inputs.stats
    n = inputs.coords_norm.shape[0]
    e = inputs.graph.element_graph.n_elems
    b = inputs.batched.n_cases
    u0 = ad.constant(np.full((n, 3), apply_norm(0.0, stats, "u")))
    s0 = ad.constant(np.full((e, 1), apply_norm(0.0, stats, "s")))
    p0 = ad.constant(np.zeros((e, 1)))  # physical zero in p/std space
    rf0 = ad.constant(np.full((b, 1), apply_norm(0.0, stats, "rf2")))
    return u0, s0, p0, rf0


def _check_finite(h: Tensor, t: int) -> None:
    if not np.all(np.isfinite(h.value)):
        raise DivergenceError(f"non-finite hidden state at frame {t}")


def run_rollout(
    inputs: CaseInputs,
    params: DualParams | BaselineParams,
    config: SurrogateConfig,
    mode: str = "free",
) -> FrameOutputs:
    """Advance the recurrence over all frames of a merged batch.

    In free mode each frame's predictions feed the next frame's features;
    teacher mode substitutes ground-truth states (diagnostic only).
    """
    if mode not in ("free", "teacher"):
        raise DataValidationError(f"unknown rollout mode '{mode}'")
    if mode == "teacher" and inputs.targets is None:
        raise DataValidationError("teacher mode needs targets")
    n = inputs.coords_norm.shape[0]
    e = inputs.graph.element_graph.n_elems
    b = inputs.batched.n_cases
    d, k = config.hidden, config.k_hops

    h_n = ad.constant(np.zeros((n, d)))
    h_e = ad.constant(np.zeros((e, d)))
    u0, s0, p0, rf0 = _initial_state_constants(inputs)
    out = FrameOutputs(u=[u0], s=[s0], p_scaled=[p0], rf2=[rf0])

    def feedback(t: int) -> tuple:
        if t == 0:
            return None, None, None
        if mode == "teacher":
            tg = inputs.targets
            prev_u = ad.constant(tg.u[t - 1])
            prev_prev = ad.constant(tg.u[t - 2]) if t >= 2 else None
            prev_s = ad.constant(tg.s[t - 1])
            return prev_u, prev_prev, prev_s
        prev_u = out.u[t - 1]
        prev_prev = out.u[t - 2] if t >= 2 else None
        if config.stress_feedback:
            # Stress feedback enters in normalized space at every t >= 1.
            prev_s = out.s[t - 1]
        else:
            prev_s = None
        return prev_u, prev_prev, prev_s

    for t in range(1, inputs.n_frames):
        prev_u, prev_prev_u, prev_s = feedback(t)
        x = assemble_features(inputs, t, prev_u, prev_prev_u, prev_s, config)
        h_n, u_hat = node_branch_step(x, h_n, inputs.graph.node_laplacian, params, k)
        _check_finite(h_n, t)
        if isinstance(params, DualParams):
            h_e, s_hat, p_scaled = element_branch_step(h_n, h_e, inputs.graph, params, k)
            _check_finite(h_e, t)
            rf2_hat = predict_rf2(
                h_e, params.mlp_rf2, inputs.batched.elem_case_index, b
            )
        else:
            s_n = mlp_forward(h_n, params.mlp_s_n)
            p_n_scaled = ad.softplus(mlp_forward(h_n, params.mlp_p_n))
            s_hat = aggregate_node_hidden(s_n, inputs.graph.incidence)
            p_scaled = aggregate_node_hidden(p_n_scaled, inputs.graph.incidence)
            rf2_hat = predict_rf2(
                h_n, params.mlp_rf2, inputs.batched.node_case_index, b
            )
        out.u.append(u_hat)
        out.s.append(s_hat)
        out.p_scaled.append(p_scaled)
        out.rf2.append(rf2_hat)
    return out


def split_rollout_results(out: FrameOutputs, inputs: CaseInputs) -> list[RolloutResult]:
    """Denormalize frame tensors and split the merged batch per case."""
    stats = inputs.stats
    t = inputs.n_frames
    p_shift = out.p_norm_shift(stats)
    u_all = np.stack([f.value for f in out.u])             # [T, N, 3]
    s_all = np.stack([f.value[:, 0] for f in out.s])       # [T, E]
    p_scaled_all = np.stack([f.value[:, 0] for f in out.p_scaled])
    rf_all = np.stack([f.value[:, 0] for f in out.rf2])    # [T, B]

    results = []
    for i in range(inputs.batched.n_cases):
        n0, n1 = inputs.batched.node_offsets[i], inputs.batched.node_offsets[i + 1]
        e0, e1 = inputs.batched.elem_offsets[i], inputs.batched.elem_offsets[i + 1]
        u_norm = u_all[:, n0:n1]
        s_norm = s_all[:, e0:e1]
        p_scaled = p_scaled_all[:, e0:e1]
        peeq_norm = p_scaled - p_shift
        rf2_norm = rf_all[:, i]
        result = RolloutResult(
            u_norm=u_norm,
            s_norm=s_norm,
            peeq_norm=peeq_norm,
            rf2_norm=rf2_norm,
            u=u_norm * stats.std["u"] + stats.mean["u"],
            s=s_norm * stats.std["s"] + stats.mean["s"],
            peeq=p_scaled * stats.std["peeq"],
            rf2=rf2_norm * stats.std["rf2"] + stats.mean["rf2"],
        )
        # Frame 0 is the known undeformed state; denormalization rounding
        # must not leave residue on it.
        result.u[0] = 0.0
        result.s[0] = 0.0
        result.peeq[0] = 0.0
        result.rf2[0] = 0.0
        results.append(result)
    return results


def rollout(
    case: CaseTrajectory,
    params: DualParams | BaselineParams,
    stats: NormStats,
    config: SurrogateConfig,
    mode: str = "free",
    graph: DualGraph | None = None,
) -> RolloutResult:
    """Free (or teacher) trajectory for one case, without gradient taping."""
    inputs = case_inputs_for(
        case,
        stats,
        graph=graph,
        with_targets=(mode == "teacher"),
        lambda_max_mode=config.lambda_max_mode,
    )
    out = run_rollout(inputs, params, config, mode=mode)
    return split_rollout_results(out, inputs)[0]


def baseline_forward(
    case: CaseTrajectory,
    params: BaselineParams,
    stats: NormStats,
    config: SurrogateConfig,
    graph: DualGraph | None = None,
) -> RolloutResult:
    """Free rollout of the node-only baseline (element fields via corner
    averaging of the nodal proxies)."""
    return rollout(case, params, stats, config, mode="free", graph=graph)
