"""Exception hierarchy shared across the engine.

The CLI maps these onto process exit codes: usage errors exit 2 (argparse),
:class:`DataValidationError` exits 3, :class:`DivergenceError` exits 4.
"""


class MeshGruError(Exception):
    """Base class for all engine errors."""


class DataValidationError(MeshGruError):
    """Invalid input data: bad shapes, broken invariants, malformed files."""


class MissingBlobError(DataValidationError):
    """A manifest references a binary blob that is absent on disk."""


class ShapeMismatchError(DataValidationError):
    """Blob byte length or array shape disagrees with the manifest."""


class NonMonotoneFrameTimesError(DataValidationError):
    """frame_times are not strictly increasing."""


class ConnectivityRangeError(DataValidationError):
    """Connectivity references a node index outside [0, n_nodes)."""


class NonManifoldMeshError(DataValidationError):
    """A face is shared by more than two elements."""


class DivergenceError(MeshGruError):
    """Training produced a non-finite value (loss, gradient, or update)."""
