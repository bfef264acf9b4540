"""
Qubit linear algebra: Pauli constants, state maps and the generator pieces
(commutator, dissipator, measurement superoperator) of the stochastic master
equation.

All matrices are complex arrays whose last two axes are 2x2; any leading axes
are batch axes. Every operation accepts ``autodiff.Dual`` arrays as well, so the
learning code differentiates through exactly the same algebra.

Convention: sigma_z|0> = +|0>. Preparations are indexed 0-5 as
(|0>, |1>, |+>, |->, |+i>, |-i>) and readout axes 0-2 as (x, y, z).
"""

from typing import Any

import numpy as np
import numpy.typing as npt

from .autodiff import Dual, primal, sqrt, stack

Complex2x2 = npt.NDArray[np.complex128]

IDENTITY = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
# sigma_minus maps |1> to |0>
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)
SIGMA_PLUS = np.array([[0, 0], [1, 0]], dtype=complex)
PAULIS = (SIGMA_X, SIGMA_Y, SIGMA_Z)

AXES = ("x", "y", "z")
PREP_LABELS = ("0", "1", "+", "-", "+i", "-i")
PREP_STATES = np.array(
    [
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)

ALGEBRA_TOL = 1e-12
POSITIVITY_TOL = 2e-9


class InvalidState(ValueError):
    """Raised when a Bloch vector lies outside the (tolerance-padded) Bloch ball."""


def dag(a: Any) -> Any:
    """Conjugate transpose over the last two axes."""
    return a.conj().swapaxes(-1, -2)


def trace(a: Any) -> Any:
    return a[..., 0, 0] + a[..., 1, 1]


def _scalar(x: Any) -> Any:
    # batch scalar -> broadcastable against (..., 2, 2)
    return x[..., None, None]


def rho_from_bloch(r: Any, check: bool = True) -> Any:
    """
    Density matrix 1/2 (I + r . sigma) for Bloch vectors of shape (..., 3).

    Raises:
        InvalidState: If ``check`` is set and any |r| exceeds 1 + 2e-9.
    """
    if not isinstance(r, Dual):
        r = np.asarray(r, dtype=float)
    if check:
        norm = np.linalg.norm(primal(r), axis=-1)
        if np.any(norm > 1.0 + POSITIVITY_TOL):
            raise InvalidState(f"Bloch vector norm {norm.max():.12g} exceeds 1")
    out = 0.5 * IDENTITY
    for k, pauli in enumerate(PAULIS):
        out = out + 0.5 * _scalar(r[..., k]) * pauli
    return out


def bloch_from_rho(rho: Any) -> Any:
    """Bloch vector (Tr sigma_x rho, Tr sigma_y rho, Tr sigma_z rho), shape (..., 3)."""
    return stack([trace(pauli @ rho).real for pauli in PAULIS], axis=-1)


def commutator_term(h: Any, rho: Any) -> Any:
    """-i [H, rho]"""
    return -1j * (h @ rho - rho @ h)


def dissipator(lindblad: Any, rho: Any) -> Any:
    """D[L]rho = L rho L^dag - 1/2 (L^dag L rho + rho L^dag L)"""
    ldl = dag(lindblad) @ lindblad
    return lindblad @ rho @ dag(lindblad) - 0.5 * (ldl @ rho + rho @ ldl)


def meas_superop(c: Any, rho: Any) -> Any:
    """H[c]rho = c rho + rho c^dag - rho Tr[rho (c + c^dag)]"""
    c_sum = c + dag(c)
    return c @ rho + rho @ dag(c) - rho * _scalar(trace(rho @ c_sum))


def meas_superop_dderiv(c: Any, rho: Any, direction: Any) -> Any:
    """
    Directional derivative of H[c] at rho along ``direction``.

    H[c] is quadratic in rho, so the derivative is exact:
    c B + B c^dag - B Tr[rho (c + c^dag)] - rho Tr[B (c + c^dag)].
    """
    c_sum = c + dag(c)
    return (
        c @ direction
        + direction @ dag(c)
        - direction * _scalar(trace(rho @ c_sum))
        - rho * _scalar(trace(direction @ c_sum))
    )


def hermitian_part(a: Any) -> Any:
    return 0.5 * (a + dag(a))


def bloch_norm(r: Any) -> Any:
    return sqrt((r * r).sum(axis=-1))


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Trace distance of qubit states, 1/2 |r_rho - r_sigma|."""
    diff = bloch_from_rho(rho) - bloch_from_rho(sigma)
    return 0.5 * np.linalg.norm(diff, axis=-1)


def is_density_matrix(rho: np.ndarray, tol: float = ALGEBRA_TOL) -> bool:
    """Hermitian, unit trace and inside the Bloch ball within tolerance."""
    rho = np.asarray(rho)
    hermitian = np.max(np.abs(rho - dag(rho)), initial=0.0) <= tol
    unit_trace = np.max(np.abs(trace(rho) - 1.0), initial=0.0) <= tol
    norm = np.linalg.norm(bloch_from_rho(rho), axis=-1)
    return bool(hermitian and unit_trace and np.all(norm <= 1.0 + POSITIVITY_TOL))
