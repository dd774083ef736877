"""Structural verification of a DAE scenario over a sampled region.

Constant-rank conditions can only be refuted numerically, never proved, so
every passing verdict is labelled "pass (not refuted)".  Rank comparisons
across a family of sampled matrices use a family-wide scale (the largest
singular value seen in the family) so that a sample sitting on a singular
locus is detected as a rank drop instead of being re-normalized away.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .errors import InconclusiveError, NoConvergenceError
from .model import AnchoredSplit, Scenario, consistency_residual
from .numkit import align_columns, fd_jacobian, kernel_matrix, numeric_rank

VERDICT_PASS = "pass (not refuted)"
VERDICT_FAIL = "fail"
VERDICT_INCONCLUSIVE = "inconclusive"


# ---------------------------------------------------------------------------
# sampling


def box_sampler(lo, hi, seed: int = 0) -> Callable[[int], np.ndarray]:
    """Deterministic sampler over an axis-aligned box.

    Returns ``count`` scrambled-Halton points plus a small structured grid
    (all corner/mid combinations per axis) so that region boundaries and
    centers are always probed exactly.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dim = lo.size
    axes = [np.array([lo[i], 0.5 * (lo[i] + hi[i]), hi[i]]) for i in range(dim)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)

    def sample(count: int) -> np.ndarray:
        halton = qmc.Halton(d=dim, scramble=True, seed=seed)
        pts = qmc.scale(halton.random(count), lo, hi)
        return np.vstack([grid, pts])

    return sample


def default_sampler(scenario: Scenario, seed: int = 0) -> Callable[[int], np.ndarray]:
    if scenario.sample_box is None:
        raise InconclusiveError(f"scenario {scenario.name!r} has no default sample box")
    lo, hi = scenario.sample_box
    return box_sampler(lo, hi, seed=seed)


# ---------------------------------------------------------------------------
# report containers


@dataclass
class CrSection:
    verdict: str
    rank_e: int
    rank_df2: int
    rank_e_ker: int
    min_margin: float
    failures: list = field(default_factory=list)
    samples_total: int = 0
    constraint_samples: int = 0
    projection_failures: int = 0

    def to_json_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "rank_E": self.rank_e,
            "rank_DF2": self.rank_df2,
            "rank_E_ker_DF2": self.rank_e_ker,
            "min_rank_margin": self.min_margin,
            "failures": list(self.failures),
            "samples_total": self.samples_total,
            "constraint_samples": self.constraint_samples,
            "projection_failures": self.projection_failures,
        }


@dataclass
class Index1Section:
    verdict: str
    min_abs_det: float
    worst_cond: float
    failures: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "min_abs_det_A": self.min_abs_det,
            "worst_cond_A": self.worst_cond,
            "failures": list(self.failures),
        }


@dataclass
class InvolutivitySection:
    verdict: str
    worst_residual: float
    points_checked: int
    inconclusive_points: int = 0

    def to_json_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "worst_bracket_residual": self.worst_residual,
            "points_checked": self.points_checked,
            "inconclusive_points": self.inconclusive_points,
        }


@dataclass
class AnalysisReport:
    """Aggregated structural verdicts for one scenario."""

    scenario: str
    seed: int
    samples_used: int
    cr: CrSection | None = None
    index1: Index1Section | None = None
    involutivity: InvolutivitySection | None = None

    @property
    def structural_pass(self) -> bool:
        sections = [s for s in (self.cr, self.index1, self.involutivity) if s is not None]
        return bool(sections) and all(s.verdict == VERDICT_PASS for s in sections)

    def to_json_dict(self) -> dict:
        doc = {
            "scenario": self.scenario,
            "seed": self.seed,
            "samples_used": self.samples_used,
            "structural_pass": self.structural_pass,
        }
        if self.cr is not None:
            doc["constant_rank"] = self.cr.to_json_dict()
        if self.index1 is not None:
            doc["index1"] = self.index1.to_json_dict()
        if self.involutivity is not None:
            doc["involutivity"] = self.involutivity.to_json_dict()
        return doc

    def summary_lines(self) -> list[str]:
        lines = [f"scenario: {self.scenario}  (samples {self.samples_used}, seed {self.seed})"]
        if self.cr is not None:
            lines.append(
                f"  constant rank : {self.cr.verdict}  "
                f"(rk E={self.cr.rank_e}, rk DF2={self.cr.rank_df2}, "
                f"rk E*ker DF2={self.cr.rank_e_ker}, margin {self.cr.min_margin:.3e})"
            )
            for fail in self.cr.failures[:3]:
                lines.append(f"    offending sample [{fail['check']}]: {fail['point']}")
        if self.index1 is not None:
            lines.append(
                f"  index-1       : {self.index1.verdict}  "
                f"(min |det A|={self.index1.min_abs_det:.3e}, "
                f"worst cond={self.index1.worst_cond:.3e})"
            )
        if self.involutivity is not None:
            lines.append(
                f"  involutivity  : {self.involutivity.verdict}  "
                f"(worst bracket residual {self.involutivity.worst_residual:.3e})"
            )
        lines.append(f"  structural pass: {self.structural_pass}")
        return lines


# ---------------------------------------------------------------------------
# helpers


def project_to_constraint(scenario: Scenario, x, tol: float = 1e-11, max_iter: int = 60) -> np.ndarray:
    """Gauss-Newton projection of ``x`` onto the constraint set ``F2 = 0``.

    Uses least-norm steps, so along linear constraints the untouched
    components are preserved exactly.
    """
    current = np.asarray(x, dtype=float).copy()
    for _ in range(max_iter):
        split = AnchoredSplit(scenario.system, current)
        residual = split.f2(current)
        if np.linalg.norm(residual) <= tol:
            return current
        jac = split.df2(current)
        step, *_ = np.linalg.lstsq(jac, -residual, rcond=None)
        current = current + step
    raise NoConvergenceError(
        "constraint projection did not converge",
        x_last=current,
        residual_norm=float(np.linalg.norm(residual)),
    )


def _family_ranks(mats: list[np.ndarray], rel_tol: float):
    """Ranks of a family of matrices against a family-wide scale.

    Returns (ranks, margin) where margin is the smallest accepted singular
    value divided by the scale; a tiny margin means a near rank drop.
    """
    sigmas = [np.linalg.svd(np.atleast_2d(m), compute_uv=False) for m in mats]
    scale = max((s[0] if s.size else 0.0) for s in sigmas)
    if scale == 0.0:
        return [0] * len(mats), np.inf
    thr = rel_tol * scale
    ranks = [int(np.sum(s > thr)) for s in sigmas]
    margin = np.inf
    for s, r in zip(sigmas, ranks):
        if r > 0:
            margin = min(margin, s[r - 1] / scale)
    return ranks, margin


def _majority(values: list[int]) -> int:
    counts = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return max(sorted(counts), key=lambda v: counts[v])


# ---------------------------------------------------------------------------
# operations


def check_cr(
    scenario: Scenario,
    region_sampler: Callable[[int], np.ndarray] | None = None,
    tol: float = 1e-9,
    count: int = 200,
    seed: int = 0,
) -> AnalysisReport:
    """Constant-rank verification over a sampled region.

    Checks that rank E is constant over the region samples and that both
    rank DF2 and rank(E * ker DF2) are constant over the samples projected
    onto the constraint set.  A passing verdict means "not refuted"; failures
    report the offending sample points.
    """
    sampler = region_sampler or default_sampler(scenario, seed=seed)
    pts = [p for p in sampler(count) if scenario.system.domain(p)]
    failures: list[dict] = []
    if not pts:
        section = CrSection(
            verdict=VERDICT_INCONCLUSIVE, rank_e=-1, rank_df2=-1, rank_e_ker=-1,
            min_margin=np.nan, failures=[{"check": "sampling", "point": None,
                                          "detail": "no samples inside the domain"}],
        )
        return AnalysisReport(scenario=scenario.name, seed=seed, samples_used=0, cr=section)

    mats_e = [scenario.system.e(p) for p in pts]
    ranks_e, margin_e = _family_ranks(mats_e, tol)
    rank_e = _majority(ranks_e)
    for p, r in zip(pts, ranks_e):
        if r != rank_e:
            failures.append({"check": "rank E", "point": [float(v) for v in p],
                             "detail": f"rank {r} (majority {rank_e})"})

    projected = []
    projection_failures = 0
    for p in pts:
        try:
            projected.append(project_to_constraint(scenario, p))
        except Exception:
            projection_failures += 1
    if not projected:
        section = CrSection(
            verdict=VERDICT_INCONCLUSIVE, rank_e=rank_e, rank_df2=-1, rank_e_ker=-1,
            min_margin=margin_e, samples_total=len(pts),
            projection_failures=projection_failures,
            failures=[{"check": "projection", "point": None,
                       "detail": "no sample could be projected onto the constraint set"}],
        )
        return AnalysisReport(scenario=scenario.name, seed=seed,
                              samples_used=len(pts), cr=section)

    splits = [AnchoredSplit(scenario.system, p) for p in projected]
    mats_df2 = [sp.df2(p) for sp, p in zip(splits, projected)]
    ranks_df2, margin_df2 = _family_ranks(mats_df2, tol)
    rank_df2 = _majority(ranks_df2)
    for p, r in zip(projected, ranks_df2):
        if r != rank_df2:
            failures.append({"check": "rank DF2", "point": [float(v) for v in p],
                             "detail": f"rank {r} (majority {rank_df2})"})

    mats_eker = [
        scenario.system.e(p) @ kernel_matrix(m, tol)
        for p, m in zip(projected, mats_df2)
    ]
    ranks_eker, margin_eker = _family_ranks(mats_eker, tol)
    rank_eker = _majority(ranks_eker)
    for p, r in zip(projected, ranks_eker):
        if r != rank_eker:
            failures.append({"check": "rank E*ker DF2", "point": [float(v) for v in p],
                             "detail": f"rank {r} (majority {rank_eker})"})

    section = CrSection(
        verdict=VERDICT_FAIL if failures else VERDICT_PASS,
        rank_e=rank_e,
        rank_df2=rank_df2,
        rank_e_ker=rank_eker,
        min_margin=float(min(margin_e, margin_df2, margin_eker)),
        failures=failures,
        samples_total=len(pts),
        constraint_samples=len(projected),
        projection_failures=projection_failures,
    )
    return AnalysisReport(scenario=scenario.name, seed=seed, samples_used=len(pts), cr=section)


@dataclass
class Index1Result:
    invertible: bool
    cond: float
    abs_det: float
    x_used: np.ndarray


def index1_test(scenario: Scenario, x, tol: float = 1e-9) -> Index1Result:
    """Invertibility of the stacked matrix [E1; DF2] at a constraint point.

    ``x`` is projected onto the constraint set first if needed.  The verdict
    is by numerical rank; the condition number is reported alongside.
    """
    x = np.asarray(x, dtype=float)
    split = AnchoredSplit(scenario.system, x)
    if np.linalg.norm(split.f2(x)) > 1e-9:
        x = project_to_constraint(scenario, x)
        split = AnchoredSplit(scenario.system, x)
    a_mat = np.vstack([split.e1(x), split.df2(x)])
    decision = numeric_rank(a_mat, tol)
    cond = float(np.linalg.cond(a_mat)) if decision.rank == a_mat.shape[0] else np.inf
    return Index1Result(
        invertible=decision.rank == scenario.system.n,
        cond=cond,
        abs_det=float(abs(np.linalg.det(a_mat))),
        x_used=x,
    )


@dataclass
class InvolutivityResult:
    involutive: bool
    residual: float
    kernel_dim: int


def involutivity_check(
    scenario: Scenario, x, fd_step: float = 1e-5, tol: float = 1e-6
) -> InvolutivityResult:
    """Closure of the kernel distribution of E under Lie brackets near ``x``.

    A smooth orthonormal kernel frame is built by aligning each nearby basis
    to the base-point basis (orthogonal Procrustes), brackets are formed by
    central differences of the frame columns, and the residual is the
    distance of the worst bracket to the span of the frame.  Raises
    :class:`InconclusiveError` when the kernel dimension jumps among the
    probe points.
    """
    x = np.asarray(x, dtype=float)
    system = scenario.system
    base = kernel_matrix(system.e(x))
    k = base.shape[1]
    if k == 0:
        return InvolutivityResult(involutive=True, residual=0.0, kernel_dim=0)

    for j in range(x.size):
        for sign in (-1.0, 1.0):
            probe = x.copy()
            probe[j] += sign * fd_step
            if kernel_matrix(system.e(probe)).shape[1] != k:
                raise InconclusiveError(
                    f"kernel dimension jumps at probe point {probe.tolist()}"
                )

    def frame(y):
        return align_columns(kernel_matrix(system.e(y)), base)

    jacobians = [
        fd_jacobian(lambda y, col=i: frame(y)[:, col], x, step=fd_step)
        for i in range(k)
    ]
    residual = 0.0
    projector = np.eye(x.size) - base @ base.T
    for i in range(k):
        for j in range(i + 1, k):
            bracket = jacobians[j] @ base[:, i] - jacobians[i] @ base[:, j]
            residual = max(residual, float(np.linalg.norm(projector @ bracket)))
    return InvolutivityResult(involutive=residual <= tol, residual=residual, kernel_dim=k)


def on_manifold(scenario: Scenario, x, tol: float = 1e-8) -> bool:
    """True iff the constraint residual vanishes and the branch guard holds."""
    x = np.asarray(x, dtype=float)
    try:
        residual = consistency_residual(scenario, x)
    except Exception:
        return False
    if float(np.linalg.norm(residual)) > tol:
        return False
    guard = scenario.manifold_guard
    return True if guard is None else guard(x)


def analyze_scenario(
    scenario: Scenario,
    seed: int = 0,
    count: int = 200,
    rank_tol: float = 1e-9,
    involutivity_tol: float = 1e-6,
    fd_step: float = 1e-5,
    region_sampler: Callable[[int], np.ndarray] | None = None,
    index1_points: int = 40,
    involutivity_points: int = 12,
) -> AnalysisReport:
    """Full structural report: constant rank, index-1, involutivity."""
    report = check_cr(scenario, region_sampler, tol=rank_tol, count=count, seed=seed)

    sampler = region_sampler or default_sampler(scenario, seed=seed)
    pts = [p for p in sampler(count) if scenario.system.domain(p)]

    index_failures: list[dict] = []
    min_det, worst_cond = np.inf, 0.0
    checked = 0
    for p in pts:
        if checked >= index1_points:
            break
        try:
            res = index1_test(scenario, p, tol=rank_tol)
        except Exception as exc:
            index_failures.append({"point": [float(v) for v in p], "detail": str(exc)})
            continue
        checked += 1
        min_det = min(min_det, res.abs_det)
        worst_cond = max(worst_cond, res.cond)
        if not res.invertible:
            index_failures.append({
                "point": [float(v) for v in res.x_used],
                "detail": f"stacked matrix singular (|det|={res.abs_det:.3e})",
            })
    if checked == 0:
        index_verdict = VERDICT_INCONCLUSIVE
    else:
        index_verdict = VERDICT_FAIL if index_failures else VERDICT_PASS
    report.index1 = Index1Section(
        verdict=index_verdict,
        min_abs_det=float(min_det) if checked else np.nan,
        worst_cond=float(worst_cond) if checked else np.nan,
        failures=index_failures,
    )

    worst_residual = 0.0
    inv_failures = 0
    inconclusive = 0
    inv_checked = 0
    for p in pts:
        if inv_checked >= involutivity_points:
            break
        try:
            res = involutivity_check(scenario, p, fd_step=fd_step, tol=involutivity_tol)
        except InconclusiveError:
            inconclusive += 1
            continue
        inv_checked += 1
        worst_residual = max(worst_residual, res.residual)
        if not res.involutive:
            inv_failures += 1
    if inv_checked == 0:
        inv_verdict = VERDICT_INCONCLUSIVE
    else:
        inv_verdict = VERDICT_FAIL if inv_failures else VERDICT_PASS
    report.involutivity = InvolutivitySection(
        verdict=inv_verdict,
        worst_residual=float(worst_residual),
        points_checked=inv_checked,
        inconclusive_points=inconclusive,
    )
    return report
