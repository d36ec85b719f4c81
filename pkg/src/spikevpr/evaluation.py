"""Retrieval evaluation: exhaustive matching, Recall@N, PR curves, F1-max, threshold sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .events import pairwise_distances

RECALL_NS = (1, 5, 10, 20)


@dataclass
class RetrievalResult:
    """``ranking[q]`` lists db indices by ascending L2 distance (ties by db index)."""

    ranking: np.ndarray
    distances: np.ndarray
    query_poses: list
    db_poses: list
    skipped: int = 0

    def geo(self) -> np.ndarray:
        return pairwise_distances(self.query_poses, self.db_poses)


@dataclass
class PRPoint:
    tau: float
    precision: float
    recall: float


@dataclass
class MetricReport:
    phi: float
    recall: dict[int, float]
    pr: list[PRPoint] = field(default_factory=list)
    f1_max: float = 0.0
    queries: int = 0
    skipped: int = 0


def rank_descriptors(q: np.ndarray, d: np.ndarray, top_k: int | None = None):
    """Exact L2 ranking of every db row for every query row; returns (ranking, sorted distances)."""
    q = np.asarray(q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if len(d) == 0:
        raise ValueError("empty database")
    sq = (q * q).sum(1)[:, None] + (d * d).sum(1)[None, :] - 2 * q @ d.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    # lexsort: last key is primary -> distance, then db index
    idx = np.broadcast_to(np.arange(len(d)), dist.shape)
    ranking = np.stack([np.lexsort((idx[i], dist[i])) for i in range(len(q))]) if len(q) else np.zeros((0, len(d)), int)
    ranked = np.take_along_axis(dist, ranking, axis=1)
    if top_k is not None:
        ranking, ranked = ranking[:, :top_k], ranked[:, :top_k]
    return ranking, ranked


def match_all(query_desc, db_desc, query_poses, db_poses, top_k: int | None = None) -> RetrievalResult:
    """Brute-force L2 retrieval over precomputed descriptors."""
    if torch.is_tensor(query_desc):
        query_desc = query_desc.detach().cpu().numpy()
    if torch.is_tensor(db_desc):
        db_desc = db_desc.detach().cpu().numpy()
    ranking, dist = rank_descriptors(query_desc, db_desc, top_k)
    return RetrievalResult(ranking, dist, list(query_poses), list(db_poses))


def describe_volumes(model, volumes, seeds, chunk: int = 64) -> torch.Tensor:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(volumes), chunk):
            out.append(model.describe(volumes[i:i + chunk], seeds[i:i + chunk]))
    return torch.cat(out) if out else torch.zeros(0, model.descriptor_dim)


def match_volumes(queries, database, model, seed: int, top_k: int | None = None) -> RetrievalResult:
    """Describe both volume sets with ``model`` and rank exhaustively."""
    from .training import volume_seed

    if not database:
        raise ValueError("empty database")
    qd = describe_volumes(model, queries, [volume_seed(seed, "eval-query", i) for i in range(len(queries))])
    dd = describe_volumes(model, database, [volume_seed(seed, "eval-db", i) for i in range(len(database))])
    return match_all(qd, dd, [v.pose for v in queries], [v.pose for v in database], top_k)


def _correct(result: RetrievalResult, phi: float) -> np.ndarray:
    """Boolean ``(Q, K)``: is the db entry at each rank within ``phi`` meters of the query."""
    if math.isinf(phi):
        return np.ones(result.ranking.shape, dtype=bool)
    geo = result.geo()
    return np.take_along_axis(geo, result.ranking, axis=1) <= phi


def recall_at_n(result: RetrievalResult, n: int, phi: float = 75.0) -> float:
    if len(result.ranking) == 0:
        return 0.0
    hit = _correct(result, phi)[:, :n].any(axis=1)
    return float(hit.mean())


def pr_curve(result: RetrievalResult, phi: float = 75.0) -> list[PRPoint]:
    """Sweep acceptance threshold ``tau`` over the rank-1 distances.

    A query is accepted when its rank-1 distance is ``<= tau``; precision is
    correct/accepted and recall is correct/all queries.
    """
    nq = len(result.ranking)
    if nq == 0:
        raise ValueError("need at least one query")
    d1 = result.distances[:, 0]
    ok = _correct(result, phi)[:, 0]
    points = []
    for tau in np.unique(d1):
        acc = d1 <= tau
        n_acc = int(acc.sum())
        n_ok = int((acc & ok).sum())
        points.append(PRPoint(float(tau), n_ok / n_acc if n_acc else 0.0, n_ok / nq))
    return points


def f1_max(points) -> float:
    if not points:
        raise ValueError("need at least one PR point")
    best = 0.0
    for pt in points:
        p, r = (pt.precision, pt.recall) if isinstance(pt, PRPoint) else pt
        if p + r > 0:
            best = max(best, 2 * p * r / (p + r))
    return best


def evaluate(result: RetrievalResult, phi: float = 75.0, ns=RECALL_NS) -> MetricReport:
    pr = pr_curve(result, phi)
    return MetricReport(
        phi=phi, recall={n: recall_at_n(result, n, phi) for n in ns}, pr=pr, f1_max=f1_max(pr),
        queries=len(result.ranking), skipped=result.skipped,
    )


def sweep_thresholds(result: RetrievalResult, phis=(15, 30, 45, 60, 75), ns=RECALL_NS) -> list[MetricReport]:
    phis = list(phis)
    if any(p <= 0 for p in phis) or phis != sorted(phis):
        raise ValueError("thresholds must be positive and ascending")
    return [evaluate(result, phi, ns) for phi in phis]


def write_reports_csv(reports, path) -> None:
    ns = sorted(reports[0].recall) if reports else list(RECALL_NS)
    with open(path, "w") as fh:
        fh.write("phi," + ",".join(f"recall@{n}" for n in ns) + ",f1_max,queries,skipped\n")
        for r in reports:
            fh.write(
                f"{r.phi!r}," + ",".join(f"{r.recall[n]!r}" for n in ns)
                + f",{r.f1_max!r},{r.queries},{r.skipped}\n"
            )


def write_pr_csv(points, path) -> None:
    with open(path, "w") as fh:
        fh.write("tau,precision,recall\n")
        for p in points:
            fh.write(f"{p.tau!r},{p.precision!r},{p.recall!r}\n")


def format_reports(reports) -> str:
    ns = sorted(reports[0].recall) if reports else list(RECALL_NS)
    head = f"{'phi (m)':>8} " + " ".join(f"{'R@' + str(n):>7}" for n in ns) + f" {'F1-max':>7} {'queries':>8}"
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(
            f"{r.phi:>8g} " + " ".join(f"{100 * r.recall[n]:>6.2f}%" for n in ns)
            + f" {r.f1_max:>7.4f} {r.queries:>8d}"
        )
    return "\n".join(lines)
