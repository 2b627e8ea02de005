"""States, operators and density matrices on small Hilbert spaces.

Everything here is dense-friendly: the network model never exceeds a few
dozen basis states, so operators carry a sparse (CSR) payload for cheap
construction but are freely densified by the propagators.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatchError, ZeroNormError

__all__ = [
    "StateVector",
    "Operator",
    "DensityMatrix",
    "expectation",
    "hs_overlap",
    "normalize",
]

_HERMITICITY_ATOL = 1e-10


def _as_complex_vector(amplitudes) -> np.ndarray:
    arr = np.asarray(amplitudes, dtype=np.complex128)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("state amplitudes must form a non-empty 1-d array")
    if not np.all(np.isfinite(arr.view(np.float64))):
        raise ValueError("state amplitudes must be finite")
    return arr


@dataclass(frozen=True)
class StateVector:
    """Pure state |psi> as a complex amplitude vector.

    Amplitudes are stored as an immutable complex128 array; the vector is
    not required to be normalized (sub-normalized states are the working
    representation inside the jump propagator).
    """

    amplitudes: np.ndarray

    def __post_init__(self):
        arr = _as_complex_vector(self.amplitudes)
        arr.setflags(write=False)
        object.__setattr__(self, "amplitudes", arr)

    @property
    def dim(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def norm_sq(self) -> float:
        # vdot accumulates in complex128; imaginary part is exactly 0 here
        return float(np.real(np.vdot(self.amplitudes, self.amplitudes)))

    def overlap(self, other: "StateVector") -> complex:
        """Return <self|other>."""
        if other.dim != self.dim:
            raise DimensionMismatchError(
                f"overlap of dim {self.dim} with dim {other.dim}"
            )
        return complex(np.vdot(self.amplitudes, other.amplitudes))


@dataclass(frozen=True)
class Operator:
    """Linear operator with a sparse payload and a hermiticity tag.

    Parameters
    ----------
    matrix : scipy.sparse matrix or array_like
        Square complex matrix; converted to CSR.
    hermitian : bool
        Declares A == A^dagger.  Checked (elementwise, atol 1e-10) at
        construction so downstream code may rely on the tag.
    """

    matrix: sp.csr_matrix
    hermitian: bool = False

    def __post_init__(self):
        m = self.matrix
        if not sp.issparse(m):
            m = sp.csr_matrix(np.asarray(m, dtype=np.complex128))
        else:
            m = m.tocsr().astype(np.complex128)
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"operator matrix must be square, got {m.shape}")
        if self.hermitian:
            delta = (m - m.conj().T).toarray()
            if delta.size and np.max(np.abs(delta)) > _HERMITICITY_ATOL:
                raise ValueError("operator tagged hermitian fails the check")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def dagger(self) -> "Operator":
        return Operator(self.matrix.conj().T.tocsr(), hermitian=self.hermitian)

    def apply(self, psi: StateVector) -> StateVector:
        """Return A|psi>."""
        if psi.dim != self.dim:
            raise DimensionMismatchError(
                f"operator dim {self.dim} applied to state dim {psi.dim}"
            )
        return StateVector(self.matrix @ psi.amplitudes)


@dataclass(frozen=True)
class DensityMatrix:
    """Density matrix (or co-state matrix) as a dense complex array.

    Hermiticity is enforced at construction; positivity and unit trace
    are properties of the dynamics, not of the container, and are left
    to the propagators' own checks.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"density matrix must be square, got {m.shape}")
        if np.max(np.abs(m - m.conj().T)) > _HERMITICITY_ATOL:
            raise ValueError("density matrix fails hermiticity check")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def trace(self) -> float:
        return float(np.real(np.trace(self.matrix)))

    @classmethod
    def from_state(cls, psi: StateVector) -> "DensityMatrix":
        return cls(np.outer(psi.amplitudes, psi.amplitudes.conj()))


def expectation(op: Operator, psi: StateVector) -> complex:
    """Return <psi|A|psi>.

    The result is complex in general; for a hermitian operator and any
    state the imaginary part vanishes to rounding.
    """
    if op.dim != psi.dim:
        raise DimensionMismatchError(
            f"operator dim {op.dim} vs state dim {psi.dim}"
        )
    return complex(np.vdot(psi.amplitudes, op.matrix @ psi.amplitudes))


def _payload(x) -> np.ndarray:
    if isinstance(x, DensityMatrix):
        return x.matrix
    if isinstance(x, Operator):
        return x.to_dense()
    raise TypeError(f"expected Operator or DensityMatrix, got {type(x).__name__}")


def hs_overlap(a, b) -> complex:
    """Hilbert-Schmidt overlap tr[a^dagger b] of two matrices.

    Accepts any mix of :class:`Operator` and :class:`DensityMatrix`.
    ``hs_overlap(a, a)`` is real and non-negative for any argument.
    """
    ma, mb = _payload(a), _payload(b)
    if ma.shape != mb.shape:
        raise DimensionMismatchError(f"hs_overlap shapes {ma.shape} vs {mb.shape}")
    # tr[a^H b] as an elementwise sum avoids forming the product matrix
    return complex(np.sum(ma.conj() * mb))


def normalize(psi: StateVector) -> tuple[StateVector, float]:
    """Scale a state to unit norm.

    Returns
    -------
    (normalized, norm_sq) : (StateVector, float)
        The unit-norm state and the squared norm of the input.

    Raises
    ------
    ZeroNormError
        If the input norm is numerically zero (annihilated trajectory).
    """
    ns = psi.norm_sq
    if ns <= 0.0 or not np.isfinite(ns):
        raise ZeroNormError("cannot normalize a zero-norm state")
    return StateVector(psi.amplitudes / np.sqrt(ns)), ns
