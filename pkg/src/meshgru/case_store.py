"""On-disk case container, normalization statistics, and case-level splits.

A case is a directory holding ``manifest.json`` plus one raw binary blob per
array.  Blobs are row-major little-endian: ``f64`` for float payloads and
``u32`` for connectivity / index lists.  The same blob format backs model
checkpoints (see :mod:`meshgru.training`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConnectivityRangeError,
    DataValidationError,
    MissingBlobError,
    NonMonotoneFrameTimesError,
    ShapeMismatchError,
)

SCHEMA_VERSION = 1

# Accumulated plastic strain may wiggle by export rounding; anything above
# this threshold counts as a genuine monotonicity violation.
PEEQ_MONOTONE_TOL = 1e-9

# Constant channels get their std replaced by 1.0 instead of dividing by ~0.
STD_CLAMP = 1e-12

FLOAT_DTYPE = np.dtype("<f8")
INDEX_DTYPE = np.dtype("<u4")


@dataclass
class CaseTrajectory:
    """One simulation case: hex mesh plus per-frame response fields.

    Units: coordinates and displacement in mm, stress in MPa, reaction
    force in kN; equivalent plastic strain is dimensionless.
    """

    coords: np.ndarray        # [N, 3]
    connectivity: np.ndarray  # [E, 8]
    u: np.ndarray             # [T, N, 3]
    s: np.ndarray             # [T, E]
    peeq: np.ndarray          # [T, E]
    rf2: np.ndarray           # [T]
    frame_times: np.ndarray   # [T]
    load_nodes: np.ndarray    # sorted node indices on the load surface
    load_positions: tuple[float, float]

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elems(self) -> int:
        return self.connectivity.shape[0]

    @property
    def n_frames(self) -> int:
        return self.u.shape[0]

    def validate(self) -> None:
        """Raise :class:`DataValidationError` if any invariant is broken."""
        n, e, t = self.n_nodes, self.n_elems, self.n_frames
        if n < 8 or e < 1 or t < 2:
            raise DataValidationError(
                f"mesh/trajectory too small: N={n}, E={e}, T={t}"
            )
        if self.coords.shape != (n, 3):
            raise ShapeMismatchError(f"coords shape {self.coords.shape}")
        if self.connectivity.shape != (e, 8):
            raise ShapeMismatchError(
                f"connectivity shape {self.connectivity.shape}"
            )
        for name, arr, shape in (
            ("u", self.u, (t, n, 3)),
            ("s", self.s, (t, e)),
            ("peeq", self.peeq, (t, e)),
            ("rf2", self.rf2, (t,)),
            ("frame_times", self.frame_times, (t,)),
        ):
            if arr.shape != shape:
                raise ShapeMismatchError(
                    f"{name} has shape {arr.shape}, expected {shape}"
                )
        if self.connectivity.min() < 0 or self.connectivity.max() >= n:
            raise ConnectivityRangeError(
                f"connectivity index outside [0, {n})"
            )
        if np.any(np.diff(self.frame_times) <= 0):
            raise NonMonotoneFrameTimesError(
                "frame_times must be strictly increasing"
            )
        if np.any(self.u[0] != 0) or np.any(self.peeq[0] != 0) or self.rf2[0] != 0:
            raise DataValidationError(
                "frame 0 must be the undeformed state (u, peeq, rf2 all zero)"
            )
        if self.peeq.min() < -PEEQ_MONOTONE_TOL:
            raise DataValidationError("peeq must be nonnegative")
        if np.any(np.diff(self.peeq, axis=0) < -PEEQ_MONOTONE_TOL):
            raise DataValidationError("peeq must be nondecreasing per element")
        if self.load_nodes.size == 0:
            raise DataValidationError("load_nodes must be nonempty")
        if self.load_nodes.min() < 0 or self.load_nodes.max() >= n:
            raise DataValidationError(f"load_nodes outside [0, {n})")


def write_array_blob(path: Path, arr: np.ndarray) -> dict:
    """Write one row-major little-endian blob; return its manifest entry."""
    dtype = INDEX_DTYPE if arr.dtype.kind in "iu" else FLOAT_DTYPE
    data = np.ascontiguousarray(arr, dtype=dtype)
    path.write_bytes(data.tobytes())
    return {
        "name": path.stem,
        "shape": list(arr.shape),
        "dtype": "u32" if dtype == INDEX_DTYPE else "f64",
        "byte_length": data.nbytes,
    }


def read_array_blob(directory: Path, entry: dict) -> np.ndarray:
    path = directory / (entry["name"] + ".bin")
    if not path.is_file():
        raise MissingBlobError(f"missing blob {path}")
    raw = path.read_bytes()
    if len(raw) != entry["byte_length"]:
        raise ShapeMismatchError(
            f"blob {path} holds {len(raw)} bytes, manifest says "
            f"{entry['byte_length']}"
        )
    dtype = INDEX_DTYPE if entry["dtype"] == "u32" else FLOAT_DTYPE
    shape = tuple(entry["shape"])
    expected = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
    if expected != len(raw):
        raise ShapeMismatchError(
            f"blob {path}: shape {shape} needs {expected} bytes, got {len(raw)}"
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    if dtype == INDEX_DTYPE:
        return arr.astype(np.int64)
    return arr.astype(np.float64)


def save_case(case: CaseTrajectory, path: str | Path) -> None:
    """Serialize a validated case into a container directory."""
    case.validate()
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = []
    for name, arr in (
        ("coords", case.coords),
        ("connectivity", case.connectivity.astype(np.uint32)),
        ("u", case.u),
        ("s", case.s),
        ("peeq", case.peeq),
        ("rf2", case.rf2),
        ("frame_times", case.frame_times),
    ):
        blobs.append(write_array_blob(directory / (name + ".bin"), arr))
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "n_nodes": case.n_nodes,
        "n_elems": case.n_elems,
        "n_frames": case.n_frames,
        "dtype": "f64",
        "endianness": "little",
        "blobs": blobs,
        "load_positions": [float(p) for p in case.load_positions],
        "load_nodes": [int(i) for i in case.load_nodes],
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    )


def load_case(path: str | Path) -> CaseTrajectory:
    """Load and validate a case container written by :func:`save_case`."""
    directory = Path(path)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise MissingBlobError(f"missing manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    entries = {b["name"]: b for b in manifest["blobs"]}
    arrays = {}
    for name in ("coords", "connectivity", "u", "s", "peeq", "rf2", "frame_times"):
        if name not in entries:
            raise MissingBlobError(f"manifest lists no blob named '{name}'")
        arrays[name] = read_array_blob(directory, entries[name])
    case = CaseTrajectory(
        coords=arrays["coords"],
        connectivity=arrays["connectivity"],
        u=arrays["u"],
        s=arrays["s"],
        peeq=arrays["peeq"],
        rf2=arrays["rf2"],
        frame_times=arrays["frame_times"],
        load_nodes=np.asarray(sorted(manifest["load_nodes"]), dtype=np.int64),
        load_positions=tuple(manifest["load_positions"]),
    )
    declared = (manifest["n_nodes"], manifest["n_elems"], manifest["n_frames"])
    actual = (case.n_nodes, case.n_elems, case.n_frames)
    if declared != actual:
        raise ShapeMismatchError(
            f"manifest declares (N, E, T)={declared}, blobs give {actual}"
        )
    case.validate()
    return case


def compute_alpha(frame_times: np.ndarray) -> np.ndarray:
    """Map frame times linearly onto the progress grid [0, 1].

    Invariant under affine rescaling of the time axis.
    """
    times = np.asarray(frame_times, dtype=np.float64)
    if times.ndim != 1 or times.size < 2:
        raise DataValidationError("need at least two frame times")
    if np.any(np.diff(times) <= 0):
        raise NonMonotoneFrameTimesError(
            "frame_times must be strictly increasing"
        )
    span = times[-1] - times[0]
    return (times - times[0]) / span


CHANNELS = ("coords", "u", "s", "peeq", "rf2")


@dataclass
class NormStats:
    """Global z-score statistics, one (mean, std) pair per channel.

    Computed from training cases only; every std is strictly positive
    (constant channels are clamped to std 1).
    """

    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_json(cls, data: dict) -> "NormStats":
        return cls(mean=dict(data["mean"]), std=dict(data["std"]))


def compute_norm_stats(train_cases: list[CaseTrajectory]) -> NormStats:
    """Pool every frame, point, and component of each channel.

    Population convention (divide by count).  rf2 keeps its own statistics
    so the scalar target is not swamped by the field channels.
    """
    if not train_cases:
        raise DataValidationError("cannot compute statistics of zero cases")
    pooled = {
        "coords": np.concatenate([c.coords.ravel() for c in train_cases]),
        "u": np.concatenate([c.u.ravel() for c in train_cases]),
        "s": np.concatenate([c.s.ravel() for c in train_cases]),
        "peeq": np.concatenate([c.peeq.ravel() for c in train_cases]),
        "rf2": np.concatenate([c.rf2.ravel() for c in train_cases]),
    }
    stats = NormStats()
    for name, values in pooled.items():
        mean = float(values.mean())
        std = float(values.std())
        stats.mean[name] = mean
        stats.std[name] = 1.0 if std < STD_CLAMP else std
    return stats


def apply_norm(x: np.ndarray, stats: NormStats, channel: str) -> np.ndarray:
    if channel not in stats.mean:
        raise DataValidationError(f"unknown channel '{channel}'")
    return (np.asarray(x, dtype=np.float64) - stats.mean[channel]) / stats.std[channel]


def invert_norm(x: np.ndarray, stats: NormStats, channel: str) -> np.ndarray:
    if channel not in stats.mean:
        raise DataValidationError(f"unknown channel '{channel}'")
    return np.asarray(x, dtype=np.float64) * stats.std[channel] + stats.mean[channel]


@dataclass
class SplitAssignment:
    """Whole-case partition into train / validation / test."""

    train: list[int]
    val: list[int]
    test: list[int]
    seed: int

    def to_json(self) -> dict:
        return {
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SplitAssignment":
        return cls(
            train=list(data["train"]),
            val=list(data["val"]),
            test=list(data["test"]),
            seed=int(data["seed"]),
        )


def split_cases(
    n_cases: int, ratios: tuple[float, float, float], seed: int
) -> SplitAssignment:
    """Seeded case-level split.

    Validation and test sizes are the rounded ratios; the remainder goes
    to train.
    """
    if n_cases < 3:
        raise DataValidationError("need at least 3 cases to split")
    if min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataValidationError(f"ratios must be positive and sum to 1: {ratios}")
    n_val = round(n_cases * ratios[1])
    n_test = round(n_cases * ratios[2])
    n_train = n_cases - n_val - n_test
    if n_train < 1:
        raise DataValidationError("rounded split leaves no training cases")
    perm = np.random.default_rng(seed).permutation(n_cases)
    return SplitAssignment(
        train=sorted(int(i) for i in perm[:n_train]),
        val=sorted(int(i) for i in perm[n_train : n_train + n_val]),
        test=sorted(int(i) for i in perm[n_train + n_val :]),
        seed=seed,
    )


def write_campaign_index(
    directory: Path,
    case_dirs: list[str],
    meta: dict,
    split: SplitAssignment | None = None,
) -> None:
    index = {"schema_version": SCHEMA_VERSION, "cases": case_dirs, **meta}
    if split is not None:
        index["split"] = split.to_json()
    (directory / "campaign.json").write_text(
        json.dumps(index, indent=1, sort_keys=True) + "\n"
    )


def read_campaign_index(directory: Path) -> dict:
    path = Path(directory) / "campaign.json"
    if not path.is_file():
        raise MissingBlobError(f"missing campaign index {path}")
    return json.loads(path.read_text())
