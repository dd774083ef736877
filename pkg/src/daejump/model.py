"""DAE system abstraction, local charts, and the built-in scenarios.

A scenario bundles a quasilinear system ``E(x) x' = F(x)`` with the local
data needed by the jump and perturbation machinery: a chart splitting the
state into slow coordinates (first integrals of ker E) and constraint
coordinates, and the reduced dynamics plus left transformation that decouple
the system in those coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    CapabilityError,
    ChartRangeError,
    DomainError,
    InvalidInputError,
    PureOdeError,
    ScenarioValidationError,
)
from .numkit import (
    DEFAULT_RANK_TOL,
    RowCompression,
    fd_jacobian,
    newton_solve,
    row_compress,
)

#: Safety margin keeping samplers and integrators away from chart boundaries.
DOMAIN_MARGIN = 1e-6

_SQRT3_3 = np.sqrt(3.0) / 3.0
# Lower edge of the image of x2 -> x2^3 - x2 on the branch x2 > sqrt(3)/3.
_CUBIC_U_MIN = _SQRT3_3**3 - _SQRT3_3


@dataclass(frozen=True)
class Predicate:
    """Boolean test on states with a human-readable description."""

    fn: Callable[[np.ndarray], bool]
    description: str

    def __call__(self, x) -> bool:
        return bool(self.fn(np.asarray(x, dtype=float)))


@dataclass(frozen=True)
class DaeSystem:
    """Quasilinear system ``E(x) x' = F(x)`` on an open domain.

    ``dE`` (directional derivative, ``dE(x, v)``) and ``dF`` (Jacobian) are
    optional; finite differences are used where they are missing.
    """

    n: int
    E: Callable[[np.ndarray], np.ndarray]
    F: Callable[[np.ndarray], np.ndarray]
    domain: Predicate
    nominal_point: np.ndarray
    dE: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    dF: Callable[[np.ndarray], np.ndarray] | None = None

    def e(self, x) -> np.ndarray:
        m = np.asarray(self.E(np.asarray(x, dtype=float)), dtype=float)
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("E(x) evaluated to non-finite entries")
        return m

    def f(self, x) -> np.ndarray:
        v = np.asarray(self.F(np.asarray(x, dtype=float)), dtype=float)
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("F(x) evaluated to non-finite entries")
        return v


@dataclass(frozen=True)
class Chart:
    """Local diffeomorphism splitting the state into (slow, constraint) parts.

    ``psi`` maps a state to coordinates whose first ``r`` components are
    first integrals of ker E; ``psi_inv`` inverts it (closed form or Newton
    on a branch) and ``dpsi`` is its Jacobian.
    """

    r: int
    psi: Callable[[np.ndarray], np.ndarray]
    psi_inv: Callable[[np.ndarray], np.ndarray]
    dpsi: Callable[[np.ndarray], np.ndarray]
    chart_domain: Predicate

    def xi(self, x) -> np.ndarray:
        return np.asarray(self.psi(np.asarray(x, dtype=float)), dtype=float)

    def xi1(self, x) -> np.ndarray:
        return self.xi(x)[: self.r]

    def xi2(self, x) -> np.ndarray:
        return self.xi(x)[self.r:]

    def project_coordinates(self, xi) -> np.ndarray:
        """Zero the constraint block of a coordinate vector."""
        out = np.asarray(xi, dtype=float).copy()
        out[self.r:] = 0.0
        return out


@dataclass(frozen=True)
class InwfData:
    """Decoupled form of the system in chart coordinates.

    ``fstar`` is the reduced vector field on the slow block; ``q_equiv`` is
    the state-dependent invertible left factor realizing the equivalence.
    """

    fstar: Callable[[np.ndarray], np.ndarray]
    q_equiv: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Scenario:
    """A named DAE with optional chart/decoupling data and reference points."""

    name: str
    system: DaeSystem
    chart: Chart | None = None
    inwf: InwfData | None = None
    reference_points: dict = field(default_factory=dict)
    notes: tuple = ()
    manifold_guard: Predicate | None = None
    sample_box: tuple | None = None
    linear_data: dict | None = None

    def require_chart(self) -> Chart:
        if self.chart is None:
            raise CapabilityError(f"scenario {self.name!r} carries no chart")
        return self.chart

    def require_inwf(self) -> InwfData:
        if self.inwf is None:
            raise CapabilityError(f"scenario {self.name!r} carries no decoupled form")
        return self.inwf


# ---------------------------------------------------------------------------
# row compression and constraint residuals


def consistency_residual(scenario: Scenario, x, rel_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Constraint part of ``F`` at ``x`` (bottom block after row compression).

    Zero (within tolerance) exactly on the local constraint set of the
    scenario.  The residual depends on the compression only up to an
    invertible reweighting, so its zero set is well defined.
    """
    x = np.asarray(x, dtype=float)
    if not scenario.system.domain(x):
        raise DomainError(
            f"state outside scenario domain: {scenario.system.domain.description}", x=x
        )
    rc = row_compress(scenario.system.e(x), rel_tol)
    return (rc.q @ scenario.system.f(x))[rc.rank:]


class AnchoredSplit:
    """Row compression with a left factor frozen at an anchor state.

    Freezing ``q`` keeps the induced constraint map smooth (no SVD
    sign/order flips between nearby evaluations) and lets analytic
    Jacobians of ``F`` pass through exactly.  Validity requires the left
    null space of ``E`` not to drift away from the anchor's; this is
    checked on every evaluation.
    """

    def __init__(self, system: DaeSystem, x_anchor, rel_tol: float = DEFAULT_RANK_TOL):
        self.system = system
        self.rel_tol = rel_tol
        self.x_anchor = np.asarray(x_anchor, dtype=float)
        rc = row_compress(system.e(self.x_anchor), rel_tol)
        self.q = rc.q
        self.rank = rc.rank

    def check_valid(self, x) -> None:
        e = self.system.e(x)
        smax = np.linalg.norm(e, 2)
        drift = np.linalg.norm((self.q @ e)[self.rank:])
        if drift > 100.0 * self.rel_tol * max(smax, 1.0):
            raise DomainError(
                "row-compression anchor invalid here (left null space drifted)", x=x
            )

    def e1(self, x) -> np.ndarray:
        self.check_valid(x)
        return (self.q @ self.system.e(x))[: self.rank]

    def f1(self, x) -> np.ndarray:
        return (self.q @ self.system.f(x))[: self.rank]

    def f2(self, x) -> np.ndarray:
        self.check_valid(x)
        return (self.q @ self.system.f(x))[self.rank:]

    def df2(self, x) -> np.ndarray:
        """Jacobian of the constraint map; analytic when the system has one."""
        if self.system.dF is not None:
            return (self.q @ np.asarray(self.system.dF(np.asarray(x, dtype=float)), dtype=float))[self.rank:]
        return fd_jacobian(self.f2, x)


def constraint_jacobian(scenario: Scenario, x, rel_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Jacobian of the constraint residual, anchored at ``x`` for smoothness."""
    return AnchoredSplit(scenario.system, x, rel_tol).df2(x)


# ---------------------------------------------------------------------------
# cubic scenario


def _cubic_branch_root(u: float) -> float:
    """Solve ``x^3 - x = u`` on the branch ``x > sqrt(3)/3``.

    Newton from 1.2 (damped); bisection fallback keeps the result on the
    branch for arguments near the fold at u = -2*sqrt(3)/9.
    """
    u = float(u)
    if u < _CUBIC_U_MIN + 1e-12:
        raise ChartRangeError(
            f"no branch solution of x^3 - x = {u:.6g}; branch requires u > {_CUBIC_U_MIN:.6g}"
        )

    def residual(v):
        return np.array([v[0] ** 3 - v[0] - u])

    def jac(v):
        return np.array([[3.0 * v[0] ** 2 - 1.0]])

    try:
        res = newton_solve(residual, jac, np.array([1.2]), tol=1e-14, max_iter=80)
        root = float(res.x[0])
        if root > _SQRT3_3:
            return root
    except Exception:
        pass
    # bisection on a bracket that always contains the branch root
    lo = _SQRT3_3 + 1e-15
    hi = max(1.5, (abs(u) + 1.0) ** (1.0 / 3.0) + 1.0)
    flo = lo**3 - lo - u
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fmid = mid**3 - mid - u
        if flo * fmid <= 0.0:
            hi = mid
        else:
            lo, flo = mid, fmid
        if hi - lo < 1e-15:
            break
    return 0.5 * (lo + hi)


def scenario_cubic() -> Scenario:
    """Planar system with a cubic first integral and a scalar constraint.

    ``E(x) = [[1, 3*x2^2 - 1], [0, 0]]``, ``F(x) = (-x2, x1)``.  The chart is
    ``psi(x) = (x1 + x2^3 - x2, x1)`` with the inverse solved on the branch
    ``x2 > sqrt(3)/3``; the constraint set is ``x1 = 0`` on that branch.
    """

    def e_fn(x):
        return np.array([[1.0, 3.0 * x[1] ** 2 - 1.0], [0.0, 0.0]])

    def f_fn(x):
        return np.array([-x[1], x[0]])

    def df_fn(x):
        return np.array([[0.0, -1.0], [1.0, 0.0]])

    def de_fn(x, v):
        return np.array([[0.0, 6.0 * x[1] * v[1]], [0.0, 0.0]])

    domain = Predicate(
        fn=lambda x: min(abs(x[1] - _SQRT3_3), abs(x[1] + _SQRT3_3)) > DOMAIN_MARGIN,
        description="x2 away from +/- sqrt(3)/3 (margin 1e-6)",
    )

    def psi(x):
        return np.array([x[0] + x[1] ** 3 - x[1], x[0]])

    def psi_inv(xi):
        x2 = _cubic_branch_root(xi[0] - xi[1])
        return np.array([xi[1], x2])

    def dpsi(x):
        return np.array([[1.0, 3.0 * x[1] ** 2 - 1.0], [1.0, 0.0]])

    chart_domain = Predicate(
        fn=lambda x: (
            x[1] > _SQRT3_3 + DOMAIN_MARGIN
            and (x[0] + x[1] ** 3 - x[1]) > _CUBIC_U_MIN + DOMAIN_MARGIN
        ),
        description=(
            "branch x2 > sqrt(3)/3 with the slow coordinate above the fold value "
            "-2*sqrt(3)/9 (margins 1e-6)"
        ),
    )

    def fstar(xi1):
        return np.array([-_cubic_branch_root(xi1[0])])

    def q_equiv(x):
        # Exact off-diagonal entry (alpha - beta)/x1 written in a
        # cancellation-free form via the factorization of alpha^3 - beta^3.
        alpha = x[1]
        beta = _cubic_branch_root(x[0] + x[1] ** 3 - x[1])
        q12 = -1.0 / (alpha * alpha + alpha * beta + beta * beta - 1.0)
        return np.array([[1.0, q12], [0.0, 1.0]])

    return Scenario(
        name="cubic",
        system=DaeSystem(
            n=2, E=e_fn, F=f_fn, dE=de_fn, dF=df_fn,
            domain=domain, nominal_point=np.array([0.0, 1.0]),
        ),
        chart=Chart(r=1, psi=psi, psi_inv=psi_inv, dpsi=dpsi, chart_domain=chart_domain),
        inwf=InwfData(fstar=fstar, q_equiv=q_equiv),
        reference_points={
            "x_minus": np.array([1.0, 0.7]),
            "nominal": np.array([0.0, 1.0]),
            "kernel_rule_published": np.array([0.0, 0.109]),
        },
        notes=(
            "constraint set: x1 = 0 on the branch x2 > sqrt(3)/3",
            "a previously published kernel-rule result (0, 0.109) is recorded for "
            "comparison; it does not satisfy the kernel-jump equations",
        ),
        manifold_guard=Predicate(
            fn=lambda x: x[1] > _SQRT3_3,
            description="branch x2 > sqrt(3)/3",
        ),
        sample_box=(np.array([-0.15, 0.95]), np.array([0.6, 1.35])),
    )


# ---------------------------------------------------------------------------
# circuit scenario


def scenario_circuit() -> Scenario:
    """Capacitor / nonlinear-resistor network with a controlled source.

    State ``eta = (x, y, z)`` (resistor current, resistor voltage, capacitor
    voltage), unit capacitance, resistor law ``x = y^2 + 2y`` and source gain
    ``y``.  Only the first equation is differential:
    ``-y*dy + dz = x``; the algebraic part is ``(y + z, x - y^2 - 2y)``.
    """

    def e_fn(eta):
        return np.array([
            [0.0, -eta[1], 1.0],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
        ])

    def f_fn(eta):
        x, y, z = eta
        return np.array([x, y + z, x - y * y - 2.0 * y])

    def df_fn(eta):
        y = eta[1]
        return np.array([
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 1.0],
            [1.0, -2.0 * y - 2.0, 0.0],
        ])

    def de_fn(eta, v):
        out = np.zeros((3, 3))
        out[0, 1] = -v[1]
        return out

    # Both exclusions are kept on purpose: y = -1 is where the chart Jacobian
    # (det = -(1 + y)) and the perturbed field degenerate, while y = 1 is the
    # conventional constant-rank restriction documented for this model.  The
    # two do not coincide; flagged, not reconciled.
    domain = Predicate(
        fn=lambda eta: abs(eta[1] - 1.0) > DOMAIN_MARGIN and abs(eta[1] + 1.0) > DOMAIN_MARGIN,
        description="y != 1 (documented constant-rank restriction) and y != -1 "
        "(chart/perturbation singular locus); both excluded, discrepancy flagged",
    )

    def psi(eta):
        x, y, z = eta
        return np.array([-0.5 * y * y + z, y + z, x - y * y - 2.0 * y])

    def psi_inv(xi):
        disc = 1.0 + 2.0 * (xi[1] - xi[0])
        if disc <= DOMAIN_MARGIN**2:
            raise ChartRangeError(
                f"coordinates outside chart range: 1 + 2*(xi2 - xi1) = {disc:.6g} <= 0"
            )
        y = -1.0 + np.sqrt(disc)
        z = xi[1] - y
        x = xi[2] + y * y + 2.0 * y
        return np.array([x, y, z])

    def dpsi(eta):
        y = eta[1]
        return np.array([
            [0.0, -y, 1.0],
            [0.0, 1.0, 1.0],
            [1.0, -2.0 * y - 2.0, 0.0],
        ])

    chart_domain = Predicate(
        fn=lambda eta: -1.0 + DOMAIN_MARGIN < eta[1] < 1.0 - DOMAIN_MARGIN,
        description="-1 < y < 1 (margin 1e-6)",
    )

    def fstar(xi1):
        return np.array([-2.0 * xi1[0]])

    q_const = np.array([
        [1.0, -2.0, -1.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ])

    def q_equiv(eta):
        return q_const

    y_plus = np.sqrt(0.8) - 1.0
    return Scenario(
        name="circuit",
        system=DaeSystem(
            n=3, E=e_fn, F=f_fn, dE=de_fn, dF=df_fn,
            domain=domain, nominal_point=np.zeros(3),
        ),
        chart=Chart(r=1, psi=psi, psi_inv=psi_inv, dpsi=dpsi, chart_domain=chart_domain),
        inwf=InwfData(fstar=fstar, q_equiv=q_equiv),
        reference_points={
            "eta_minus": np.array([0.0, 0.0, 0.1]),
            "nominal": np.zeros(3),
            "eta_plus": np.array([-0.2, y_plus, -y_plus]),
        },
        notes=(
            "constraint set: y + z = 0 and x - y^2 - 2y = 0, restricted to y < 1",
        ),
        manifold_guard=Predicate(
            fn=lambda eta: -1.0 < eta[1] < 1.0,
            description="-1 < y < 1",
        ),
        sample_box=(np.array([-0.6, -0.6, -0.6]), np.array([0.6, 0.6, 0.6])),
    )


# ---------------------------------------------------------------------------
# user-defined linear scenario


def scenario_linear(e_mat, h_mat, decoupling) -> Scenario:
    """Constant-coefficient scenario ``E x' = H x`` with a supplied decoupling.

    Parameters
    ----------
    e_mat, h_mat : array_like
        Square matrices of the same size.
    decoupling : (Q, P, A1)
        Invertible factors with ``Q E inv(P) = [[I, 0], [0, 0]]`` and
        ``Q H inv(P) = [[A1, 0], [0, I]]`` (checked to 1e-9); ``A1`` is the
        reduced dynamics matrix of size equal to the differential block.

    Raises
    ------
    ScenarioValidationError
        If the factors do not produce the stated block forms.
    PureOdeError
        If the algebraic block is empty (``E`` invertible): the system is a
        plain ODE and none of the jump machinery applies.
    """
    e_mat = np.asarray(e_mat, dtype=float)
    h_mat = np.asarray(h_mat, dtype=float)
    q_mat, p_mat, a1 = (np.asarray(m, dtype=float) for m in decoupling)
    n = e_mat.shape[0]
    if e_mat.shape != (n, n) or h_mat.shape != (n, n):
        raise ScenarioValidationError("E and H must be square and of equal size")
    if q_mat.shape != (n, n) or p_mat.shape != (n, n):
        raise ScenarioValidationError("Q and P must match the system size")
    a1 = np.atleast_2d(a1)
    n1 = a1.shape[0]
    if a1.shape != (n1, n1) or n1 > n:
        raise ScenarioValidationError("A1 must be square and no larger than the system")
    n2 = n - n1
    if n2 == 0:
        raise PureOdeError("E is invertible: pure ODE, no algebraic block to decouple")

    p_inv = np.linalg.inv(p_mat)
    block_e = q_mat @ e_mat @ p_inv
    block_h = q_mat @ h_mat @ p_inv
    want_e = np.zeros((n, n))
    want_e[:n1, :n1] = np.eye(n1)
    want_h = np.zeros((n, n))
    want_h[:n1, :n1] = a1
    want_h[n1:, n1:] = np.eye(n2)
    if np.max(np.abs(block_e - want_e)) > 1e-9:
        raise ScenarioValidationError(
            "Q E P^-1 is not [[I, 0], [0, 0]] within 1e-9; decoupling rejected"
        )
    if np.max(np.abs(block_h - want_h)) > 1e-9:
        raise ScenarioValidationError(
            "Q H P^-1 is not [[A1, 0], [0, I]] within 1e-9; decoupling rejected"
        )

    everywhere = Predicate(fn=lambda x: True, description="all states")
    system = DaeSystem(
        n=n,
        E=lambda x: e_mat,
        F=lambda x: h_mat @ x,
        dE=lambda x, v: np.zeros((n, n)),
        dF=lambda x: h_mat,
        domain=everywhere,
        nominal_point=np.zeros(n),
    )
    chart = Chart(
        r=n1,
        psi=lambda x: p_mat @ x,
        psi_inv=lambda xi: p_inv @ xi,
        dpsi=lambda x: p_mat,
        chart_domain=everywhere,
    )
    inwf = InwfData(fstar=lambda xi1: a1 @ xi1, q_equiv=lambda x: q_mat)
    return Scenario(
        name="linear",
        system=system,
        chart=chart,
        inwf=inwf,
        reference_points={"nominal": np.zeros(n)},
        notes=("constant-coefficient system with user-supplied decoupling",),
        manifold_guard=everywhere,
        sample_box=(-np.ones(n), np.ones(n)),
        linear_data={"E": e_mat, "H": h_mat, "Q": q_mat, "P": p_mat, "A1": a1},
    )


# ---------------------------------------------------------------------------
# registry and serialization

BUILTIN_SCENARIOS = {
    "cubic": scenario_cubic,
    "circuit": scenario_circuit,
}


def get_scenario(name: str) -> Scenario:
    try:
        return BUILTIN_SCENARIOS[name]()
    except KeyError:
        raise CapabilityError(
            f"unknown scenario {name!r}; built-ins: {sorted(BUILTIN_SCENARIOS)}"
        ) from None


def scenario_to_json_dict(scenario: Scenario) -> dict:
    """JSON document for a scenario.

    Built-in scenarios serialize by name (their evaluators are code,
    not data); linear scenarios carry their matrices row-major.
    """
    doc = {
        "name": scenario.name,
        "dimension": scenario.system.n,
        "reference_points": {
            key: [float(v) for v in np.atleast_1d(val)]
            for key, val in scenario.reference_points.items()
        },
        "notes": list(scenario.notes),
    }
    if scenario.linear_data is not None:
        doc["kind"] = "linear"
        for key in ("E", "H", "Q", "P"):
            doc[key] = [[float(v) for v in row] for row in scenario.linear_data[key]]
    else:
        doc["kind"] = "builtin"
    return doc


def scenario_from_json_dict(doc: dict) -> Scenario:
    kind = doc.get("kind", "builtin")
    if kind == "builtin":
        scenario = get_scenario(doc["name"])
        if int(doc.get("dimension", scenario.system.n)) != scenario.system.n:
            raise ScenarioValidationError(
                f"dimension {doc['dimension']} does not match scenario {doc['name']!r}"
            )
        return scenario
    if kind != "linear":
        raise ScenarioValidationError(f"unknown scenario kind {kind!r}")
    e_mat = np.asarray(doc["E"], dtype=float)
    h_mat = np.asarray(doc["H"], dtype=float)
    q_mat = np.asarray(doc["Q"], dtype=float)
    p_mat = np.asarray(doc["P"], dtype=float)
    block_e = q_mat @ e_mat @ np.linalg.inv(p_mat)
    n1 = int(np.sum(np.abs(np.diag(block_e)) > 0.5))
    a1 = (q_mat @ h_mat @ np.linalg.inv(p_mat))[:n1, :n1]
    return scenario_linear(e_mat, h_mat, (q_mat, p_mat, a1))


def load_scenario(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as handle:
        return scenario_from_json_dict(json.load(handle))


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(scenario_to_json_dict(scenario), handle, indent=2, sort_keys=True)
        handle.write("\n")
