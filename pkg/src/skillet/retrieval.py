"""Chamfer-based skill retrieval with yaw-hypothesis search, joint
multi-object demo selection, and the deploy-time yaw selection rule.

A query cloud is centered at its centroid and compared against each stored
canonical cloud: rotating the query by R_z(-theta) should overlay the
canonical shape when theta equals the object's yaw in that skill's frame.
When the estimator's yaw flag is on the evaluation collapses to the single
hypothesis theta = psi_task (pi-ambiguous skills also check psi_task + pi,
since PCA yaw cannot distinguish the two); otherwise every hypothesis in
the grid is scored and the minimizer wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import spatial
from .errors import EmptyInput, InsufficientPoints, InvalidArgument, LibraryIncomplete
from .estimator import ObsState
from .geometry import PointCloud, pca_yaw, wrap_pi
from .skills import SkillLibrary, SkillSegment

_TIE_TOL = 1e-12
IDENTIFIABLE_ANISOTROPY = 0.3


@dataclass(frozen=True)
class YawGrid:
    """Discrete yaw hypotheses covering (-pi, pi], sorted ascending."""

    hypotheses: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.hypotheses, dtype=float).reshape(-1)
        if h.size == 0:
            raise InvalidArgument("yaw grid must be nonempty")
        if np.any(h <= -np.pi) or np.any(h > np.pi):
            raise InvalidArgument("yaw hypotheses must lie in (-pi, pi]")
        if np.any(np.diff(h) <= 0):
            raise InvalidArgument("yaw hypotheses must be sorted")
        h = h.copy()
        h.setflags(write=False)
        object.__setattr__(self, "hypotheses", h)

    @classmethod
    def default(cls, n=72):
        """n evenly spaced hypotheses ending at +pi (default 5 degrees)."""
        return cls(-np.pi + 2.0 * np.pi * (np.arange(n) + 1) / n)


@dataclass(frozen=True)
class ObjectAlignment:
    theta_star: float
    flag_retr: bool
    psi_retr: float
    best_score: float


@dataclass(frozen=True)
class RetrievalResult:
    demo_id: str
    demo_index: int
    per_object: dict        # object id -> ObjectAlignment
    totals: dict            # demo id -> joint score


def _pick(thetas, scores):
    """Minimum score; ties within 1e-12 resolved by smallest |theta|, then theta."""
    best = np.min(scores)
    cand = [i for i, s in enumerate(scores) if s <= best + _TIE_TOL]
    i = min(cand, key=lambda i: (abs(thetas[i]), thetas[i]))
    return float(thetas[i]), float(scores[i])


def score_skill(observed: PointCloud, skill: SkillSegment, psi_task: float,
                flag_obs: bool, grid: YawGrid):
    """Best (theta, Chamfer score) aligning `observed` to one skill."""
    if observed.size == 0:
        raise EmptyInput("cannot score an empty query cloud")
    if observed.size < 3:
        raise InsufficientPoints("query cloud needs at least 3 points")
    centered = observed.points - observed.points.mean(axis=0)
    if flag_obs:
        if skill.yaw_ambiguous:
            thetas = np.sort(wrap_pi(np.array([psi_task, psi_task + np.pi])))
        else:
            thetas = np.array([float(wrap_pi(psi_task))])
    else:
        thetas = grid.hypotheses
    scores = spatial.chamfer_sweep(centered, skill.canonical_cloud.points, thetas)
    return _pick(thetas, scores)


def retrieve_joint(observed: dict, library: SkillLibrary, est_states: dict,
                   grid: YawGrid = None) -> RetrievalResult:
    """Pick the demo minimizing the summed per-object scores.

    `observed` maps object id -> cloud and `est_states` maps object id ->
    ObsState; both must cover the library's object labels that are queried.
    Ties go to the lowest demo id in sorted order.
    """
    grid = grid or YawGrid.default()
    demo_ids = library.demo_ids
    if not demo_ids:
        raise InvalidArgument("library has no demonstrations")
    subtask_of = {oid: k + 1 for k, oid in enumerate(library.objects)}
    for oid in observed:
        if oid not in subtask_of:
            raise InvalidArgument(f"object {oid!r} is not a library object")

    totals = {}
    per_demo = {}
    for demo in demo_ids:
        total = 0.0
        aligns = {}
        for oid, cloud in observed.items():
            k = subtask_of[oid]
            skill = library.skills.get((demo, k))
            if skill is None:
                raise LibraryIncomplete(demo, k)
            obs = est_states[oid]
            theta, score = score_skill(cloud, skill, obs.psi_task, obs.flag, grid)
            total += score
            aligns[oid] = (theta, score, skill)
        totals[demo] = total
        per_demo[demo] = aligns

    best_total = min(totals.values())
    best_demo = next(d for d in demo_ids if totals[d] <= best_total + _TIE_TOL)

    per_object = {}
    for oid, (theta, score, skill) in per_demo[best_demo].items():
        anis = pca_yaw(observed[oid]).anisotropy
        flag_retr = bool(anis > IDENTIFIABLE_ANISOTROPY and not skill.yaw_ambiguous)
        psi_retr = float(est_states[oid].psi_task) if flag_retr else theta
        per_object[oid] = ObjectAlignment(theta, flag_retr, psi_retr, score)

    return RetrievalResult(best_demo, demo_ids.index(best_demo), per_object, totals)


def select_yaw(flag_retr: bool, psi_retr: float, flag_obs: bool,
               psi_task: float, psi_prev: float) -> float:
    """Yaw used for the world-frame transform during alignment.

    Three cases: retrieval-time and live observability both on -> live
    task yaw; retrieval-time on but live off -> hold the previous task
    yaw; retrieval-time off -> the retrieval alignment yaw, regardless of
    the live flag.
    """
    if flag_retr and flag_obs:
        return float(psi_task)
    if flag_retr:
        return float(psi_prev)
    return float(psi_retr)


def retrieval_report(result: RetrievalResult) -> dict:
    """Plain-data report for audit logs and the CLI."""
    return {
        "demo": result.demo_id,
        "demo_index": result.demo_index,
        "totals": {d: float(s) for d, s in sorted(result.totals.items())},
        "objects": {
            oid: {
                "theta_star": float(a.theta_star),
                "flag_retr": bool(a.flag_retr),
                "psi_retr": float(a.psi_retr),
                "best_score": float(a.best_score),
            }
            for oid, a in sorted(result.per_object.items())
        },
    }
