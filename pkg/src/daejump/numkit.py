"""Dense numerical kernels used throughout the package.

Rank decisions, null-space bases, and row compression are all derived from
one singular value decomposition so that the tolerance logic stays in a
single place.  The nonlinear solver is a damped Newton iteration, derivatives
fall back to central differences, and initial value problems are delegated to
``scipy.integrate.solve_ivp`` behind a small two-mode configuration (explicit
adaptive or implicit for stiff right-hand sides).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    ConfigError,
    DomainError,
    IntegrationError,
    InvalidInputError,
    NoConvergenceError,
    ProbeEvaluationError,
    SingularSystemError,
)

#: Default relative threshold on singular values for rank decisions.
DEFAULT_RANK_TOL = 1e-9

#: Maximum number of step halvings tried by the damped Newton iteration.
MAX_HALVINGS = 30


def _as_matrix(m) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.ndim != 2:
        raise InvalidInputError(f"expected a matrix, got array of ndim {m.ndim}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix has non-finite entries")
    return m


def _as_vector(v) -> np.ndarray:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.ndim != 1:
        raise InvalidInputError(f"expected a vector, got array of ndim {v.ndim}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("vector has non-finite entries")
    return v


@dataclass(frozen=True)
class RankDecision:
    """Outcome of a tolerance-based rank determination.

    ``rank`` counts the singular values strictly above ``tolerance_used``,
    which is ``rel_tol * sigma_max`` (zero matrices get rank 0).
    """

    rank: int
    singular_values: np.ndarray
    tolerance_used: float


def numeric_rank(m, rel_tol: float = DEFAULT_RANK_TOL) -> RankDecision:
    """Decide the numerical rank of a matrix from its singular values.

    Parameters
    ----------
    m : array_like
        Matrix with finite entries.
    rel_tol : float
        Relative threshold in (0, 1); singular values above
        ``rel_tol * sigma_max`` count toward the rank.
    """
    m = _as_matrix(m)
    if not 0.0 < rel_tol < 1.0:
        raise InvalidInputError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    sigma = np.linalg.svd(m, compute_uv=False)
    smax = sigma[0] if sigma.size else 0.0
    tol = rel_tol * smax
    rank = int(np.sum(sigma > tol)) if smax > 0.0 else 0
    return RankDecision(rank=rank, singular_values=sigma, tolerance_used=tol)


def kernel_basis(m, rel_tol: float = DEFAULT_RANK_TOL) -> list[np.ndarray]:
    """Orthonormal basis of the numerical null space of ``m``.

    Returns a list of length ``cols - numeric_rank(m)``; each basis vector v
    satisfies ``norm(m @ v) <= rel_tol * sigma_max * sqrt(cols)``.
    """
    m = _as_matrix(m)
    _, sigma, vt = np.linalg.svd(m)
    smax = sigma[0] if sigma.size else 0.0
    rank = int(np.sum(sigma > rel_tol * smax)) if smax > 0.0 else 0
    return [vt[i] for i in range(rank, m.shape[1])]


def kernel_matrix(m, rel_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Null-space basis stacked as columns (shape ``(cols, cols - rank)``)."""
    vecs = kernel_basis(m, rel_tol)
    if not vecs:
        return np.zeros((np.atleast_2d(m).shape[1], 0))
    return np.column_stack(vecs)


@dataclass(frozen=True)
class RowCompression:
    """Invertible left factor ``q`` with ``q @ m`` zero below row ``rank``.

    ``q`` is orthogonal (transpose of the left singular vectors), so its
    condition number is 1 up to roundoff; it is still reported for the
    record.
    """

    q: np.ndarray
    rank: int
    cond: float


def row_compress(m, rel_tol: float = DEFAULT_RANK_TOL) -> RowCompression:
    """Left factor compressing ``m`` to full-row-rank top block.

    The rows ``rank..n`` of ``q @ m`` have norm at most ``rel_tol * sigma_max``.
    Built from the SVD, hence deterministic for a fixed LAPACK build.
    """
    m = _as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"row compression expects a square matrix, got {m.shape}")
    u, sigma, _ = np.linalg.svd(m)
    smax = sigma[0] if sigma.size else 0.0
    rank = int(np.sum(sigma > rel_tol * smax)) if smax > 0.0 else 0
    q = u.T
    return RowCompression(q=q, rank=rank, cond=float(np.linalg.cond(q)))


def procrustes_rotate(block: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Orthogonal ``R`` minimizing ``norm(R @ block - reference)`` (rows as frame)."""
    u, _, vt = np.linalg.svd(reference @ block.T)
    return u @ vt


def align_rows(block: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Rotate the rows of ``block`` (an orthonormal frame) toward ``reference``.

    Used to pick a continuous selection out of factorizations that are only
    defined up to an orthogonal factor (SVD sign/order ambiguity).
    """
    if block.shape[0] == 0:
        return block
    return procrustes_rotate(block, reference) @ block


def align_columns(basis: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Column-frame version of :func:`align_rows`."""
    return align_rows(basis.T, reference.T).T


@dataclass(frozen=True)
class NewtonResult:
    x: np.ndarray
    iterations: int
    residual_norm: float


def newton_solve(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    x0,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> NewtonResult:
    """Damped Newton iteration for square nonlinear systems.

    Steps are halved (up to 30 times) until the residual norm decreases.
    Raises :class:`NoConvergenceError` with the last iterate when the budget
    is exhausted and :class:`SingularSystemError` when the Jacobian solve
    fails beyond what damping can absorb.
    """
    x = _as_vector(x0).copy()
    r = np.atleast_1d(np.asarray(residual(x), dtype=float))
    rnorm = float(np.linalg.norm(r))
    for it in range(1, max_iter + 1):
        if rnorm <= tol:
            return NewtonResult(x=x, iterations=it - 1, residual_norm=rnorm)
        jac = np.atleast_2d(np.asarray(jacobian(x), dtype=float))
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"singular Jacobian at iterate {it - 1}") from exc
        if not np.all(np.isfinite(step)):
            raise SingularSystemError(f"non-finite Newton step at iterate {it - 1}")
        alpha = 1.0
        for _ in range(MAX_HALVINGS + 1):
            x_try = x + alpha * step
            r_try = np.atleast_1d(np.asarray(residual(x_try), dtype=float))
            n_try = float(np.linalg.norm(r_try))
            if np.isfinite(n_try) and (n_try < rnorm or n_try <= tol):
                break
            alpha *= 0.5
        else:
            raise NoConvergenceError(
                "Newton damping exhausted without residual decrease",
                x_last=x, residual_norm=rnorm, iterations=it - 1,
            )
        x, r, rnorm = x_try, r_try, n_try
    if rnorm <= tol:
        return NewtonResult(x=x, iterations=max_iter, residual_norm=rnorm)
    raise NoConvergenceError(
        f"no convergence within {max_iter} Newton iterations",
        x_last=x, residual_norm=rnorm, iterations=max_iter,
    )


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], x, step: float | None = None) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``.

    The default step ``1e-6 * (1 + norm(x))`` balances truncation against
    rounding; the result matches an analytic Jacobian to O(step^2).
    Evaluation failures are re-raised with the offending probe point.
    """
    x = _as_vector(x)
    if step is None:
        step = 1e-6 * (1.0 + float(np.linalg.norm(x)))
    cols = []
    for j in range(x.size):
        offset = np.zeros_like(x)
        offset[j] = step
        try:
            f_plus = np.atleast_1d(np.asarray(f(x + offset), dtype=float))
            f_minus = np.atleast_1d(np.asarray(f(x - offset), dtype=float))
        except Exception as exc:
            raise ProbeEvaluationError(
                f"function evaluation failed near component {j}", probe=x + offset
            ) from exc
        cols.append((f_plus - f_minus) / (2.0 * step))
    return np.column_stack(cols)


@dataclass(frozen=True)
class IntegratorConfig:
    """Tolerance and mode selection for :func:`integrate_ode`.

    ``mode`` is one of ``explicit_adaptive``, ``implicit_stiff`` or ``auto``;
    in auto mode the caller declares stiffness (e.g. a perturbation parameter
    below ``stiffness_threshold``) instead of the integrator guessing from
    runtime behaviour, which keeps runs reproducible.
    """

    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float = np.inf
    mode: str = "auto"
    stiffness_threshold: float | None = None

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ConfigError("rel_tol and abs_tol must be positive")
        if self.max_step <= 0:
            raise ConfigError("max_step must be positive")
        if self.mode not in ("explicit_adaptive", "implicit_stiff", "auto"):
            raise ConfigError(f"unknown integrator mode {self.mode!r}")

    def tolerance_at(self, state) -> float:
        """Mixed absolute/relative tolerance at a given state."""
        return self.abs_tol + self.rel_tol * float(np.linalg.norm(state))


@dataclass
class Trajectory:
    """Time grid, state sequence and integrator metadata of one run."""

    times: np.ndarray
    states: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.states.shape[1]

    def state_at_end(self) -> np.ndarray:
        return self.states[-1]

    def write_csv(self, path) -> None:
        """Write ``t, x1, ..., xn`` rows with full round-trip precision."""
        with open(path, "w", encoding="utf-8") as handle:
            cols = ["t"] + [f"x{i + 1}" for i in range(self.n_states)]
            handle.write(",".join(cols) + "\n")
            for t, row in zip(self.times, self.states):
                vals = [f"{t:.17g}"] + [f"{v:.17g}" for v in row]
                handle.write(",".join(vals) + "\n")

    def to_json_dict(self) -> dict:
        return {
            "metadata": dict(self.metadata),
            "times": [float(t) for t in self.times],
            "states": [[float(v) for v in row] for row in self.states],
        }


def integrate_ode(
    field_fn: Callable[[np.ndarray], np.ndarray],
    x0,
    t_span: tuple[float, float],
    config: IntegratorConfig | None = None,
    t_eval: Sequence[float] | None = None,
    stiff: bool | None = None,
) -> Trajectory:
    """Integrate ``dx/dt = field_fn(x)`` over ``t_span``.

    Parameters
    ----------
    field_fn : callable
        Autonomous right-hand side, state -> derivative.  May raise
        :class:`DomainError` to signal that the state left its domain of
        validity; the error is re-raised with the exit time attached.
    x0 : array_like
        Initial state.
    t_span : (float, float)
        Integration window; must be nonempty.
    config : IntegratorConfig, optional
        Tolerances and mode.  In ``auto`` mode the ``stiff`` flag picks the
        stepper; explicit Runge-Kutta otherwise.
    t_eval : sequence, optional
        Output times (dense output); defaults to the solver's own steps.
    stiff : bool, optional
        Caller-declared stiffness, consulted only in ``auto`` mode.

    Raises
    ------
    IntegrationError
        On step-size underflow or solver failure, with the last accepted
        time and state attached.
    """
    config = config or IntegratorConfig()
    x0 = _as_vector(x0)
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ConfigError(f"empty time span ({t0}, {t1})")

    if config.mode == "explicit_adaptive":
        method = "RK45"
    elif config.mode == "implicit_stiff":
        method = "Radau"
    else:
        method = "Radau" if stiff else "RK45"

    def rhs(t, y):
        try:
            return np.asarray(field_fn(y), dtype=float)
        except DomainError as exc:
            exc.t = t
            raise

    sol = solve_ivp(
        rhs,
        (t0, t1),
        x0,
        method=method,
        rtol=config.rel_tol,
        atol=config.abs_tol,
        max_step=config.max_step,
        t_eval=None if t_eval is None else np.asarray(t_eval, dtype=float),
        dense_output=False,
    )
    if not sol.success:
        t_last = float(sol.t[-1]) if sol.t.size else t0
        x_last = sol.y[:, -1] if sol.t.size else x0
        raise IntegrationError(
            f"integration stalled at t={t_last:.6g}: {sol.message}",
            t_last=t_last, x_last=np.asarray(x_last, dtype=float),
        )
    metadata = {
        "method": method,
        "rel_tol": config.rel_tol,
        "abs_tol": config.abs_tol,
        "nfev": int(sol.nfev),
        "t_span": [t0, t1],
    }
    return Trajectory(times=sol.t.copy(), states=sol.y.T.copy(), metadata=metadata)
