"""Cross-scale field maps between elements and nodes.

Element-to-node averages a field over each node's incident elements;
node-to-element averages the eight corner values of each element.  Both
are convex averaging operators, so their composition attenuates peaks —
quantified by :func:`attenuation_report` without any trained model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataValidationError
from .mesh_graph import Incidence


def _as_2d(f: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(f, dtype=np.float64)
    if arr.ndim == 1:
        return arr[:, None], True
    if arr.ndim == 2:
        return arr, False
    raise DataValidationError(f"field must be 1-D or 2-D, got shape {arr.shape}")


def element_to_node(f_e: np.ndarray, inc: Incidence) -> np.ndarray:
    """Average element values onto their incident nodes."""
    values, squeeze = _as_2d(f_e)
    if values.shape[0] != inc.n_elems:
        raise DataValidationError(
            f"field has {values.shape[0]} rows, mesh has {inc.n_elems} elements"
        )
    counts = inc.node_counts()
    if np.any(counts == 0):
        raise DataValidationError("orphan node: mean over zero incident elements")
    out = np.zeros((inc.n_nodes, values.shape[1]))
    np.add.at(out, inc.elem_nodes.ravel(), np.repeat(values, 8, axis=0))
    out /= counts[:, None]
    return out[:, 0] if squeeze else out


def node_to_element(f_n: np.ndarray, inc: Incidence) -> np.ndarray:
    """Average the eight corner-node values of each element (fixed 1/8)."""
    values, squeeze = _as_2d(f_n)
    if values.shape[0] != inc.n_nodes:
        raise DataValidationError(
            f"field has {values.shape[0]} rows, mesh has {inc.n_nodes} nodes"
        )
    out = values[inc.elem_nodes].mean(axis=1)
    return out[:, 0] if squeeze else out


def aggregate_node_hidden(h_n, inc: Incidence):
    """Differentiable corner-node mean: [N, D] tensor -> [E, D] tensor.

    Same math as :func:`node_to_element`; registered on the tape so each
    node receives 1/8 of every incident element's output gradient.
    """
    if isinstance(h_n, ad.Tensor) and h_n.value.shape[0] != inc.n_nodes:
        raise DataValidationError("hidden-state rows do not match node count")
    gathered = ad.row_gather(h_n, inc.elem_nodes.ravel())
    groups = np.repeat(np.arange(inc.n_elems), 8)
    return ad.scatter_mean(gathered, groups, inc.n_elems)


def scatter_node_field(f_e, inc: Incidence):
    """Differentiable element-to-node mean on the tape (stress feedback)."""
    counts = inc.node_counts()
    if np.any(counts == 0):
        raise DataValidationError("orphan node: mean over zero incident elements")
    gathered = ad.row_gather(f_e, np.repeat(np.arange(inc.n_elems), 8))
    return ad.scatter_mean(gathered, inc.elem_nodes.ravel(), inc.n_nodes)


@dataclass
class AttenuationReport:
    """Peak attenuation of one element field under the E->N->E round trip."""

    original_peak: float
    projected_peak: float
    reduction_percent: float
    original_peak_element: int
    projected_peak_element: int
    abs_difference: np.ndarray  # per element
    zero_peak: bool = False

    def to_json(self) -> dict:
        return {
            "original_peak": self.original_peak,
            "projected_peak": self.projected_peak,
            "reduction_percent": self.reduction_percent,
            "original_peak_element": self.original_peak_element,
            "projected_peak_element": self.projected_peak_element,
            "zero_peak": self.zero_peak,
            "max_abs_difference": float(self.abs_difference.max()),
            "mean_abs_difference": float(self.abs_difference.mean()),
        }


def attenuation_report(f_e: np.ndarray, inc: Incidence) -> AttenuationReport:
    """Project a ground-truth element field E->N->E and report peak loss."""
    values = np.asarray(f_e, dtype=np.float64)
    if values.ndim != 1:
        raise DataValidationError("attenuation study expects a scalar element field")
    projected = node_to_element(element_to_node(values, inc), inc)
    original_peak = float(values.max())
    projected_peak = float(projected.max())
    if original_peak > 0:
        reduction = (1.0 - projected_peak / original_peak) * 100.0
        zero_peak = False
    else:
        reduction = 0.0
        zero_peak = True
    return AttenuationReport(
        original_peak=original_peak,
        projected_peak=projected_peak,
        reduction_percent=reduction,
        original_peak_element=int(values.argmax()),
        projected_peak_element=int(projected.argmax()),
        abs_difference=np.abs(projected - values),
        zero_peak=zero_peak,
    )
