"""Density clustering of micro-instruction embeddings under cosine distance.

DBSCAN conventions, stated because implementations differ:

- min_samples counts the point itself: a point is core iff at least
  min_samples points (itself included) lie within epsilon.
- Clusters are maximal sets of density-connected core points plus their
  border points; everything else is NOISE (cluster id -1).
- Cluster ids are 0..k-1 in order of the first core point encountered in
  input order.
- A border point reachable from cores of several clusters joins the cluster
  of the lowest-input-index core point within epsilon, which makes runs
  reproducible where the textbook formulation is order-dependent.

Vectors are unit-normalized up front so cosine distance reduces to
1 - u.v and one O(n^2) exhaustive neighborhood pass suffices; at a few
thousand points that is milliseconds and removes index-structure risk.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import gateway
from .errors import ConfigError, DimensionMismatch, ZeroVector
from .extraction import MicroInstruction
from .gateway import BackendConfig

logger = logging.getLogger("promptdistill.clustering")

NOISE = -1


@dataclass(eq=False)
class EmbeddedInstruction:
    instruction_id: str
    vector: np.ndarray  # unit-normalized
    norm_original: float

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-9:
            raise ConfigError(
                f"instruction {self.instruction_id!r} vector norm {norm} is not 1"
            )


def embed_point(instruction_id: str, values: np.ndarray) -> EmbeddedInstruction:
    """Unit-normalize raw embedding values, keeping the original norm for
    diagnostics."""
    v = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ZeroVector(f"instruction {instruction_id!r} has a zero embedding")
    return EmbeddedInstruction(instruction_id=instruction_id, vector=v / norm, norm_original=norm)


@dataclass(frozen=True)
class ClusteringParams:
    epsilon: float = 0.4
    min_samples: int = 6

    def __post_init__(self):
        if not (0.0 < self.epsilon < 2.0):
            raise ConfigError("epsilon must lie in (0, 2), the cosine distance range")
        if self.min_samples < 1:
            raise ConfigError("min_samples must be >= 1")


@dataclass(frozen=True)
class ClusterAssignment:
    instruction_id: str
    cluster_id: int  # >= 0, or NOISE (-1)


@dataclass
class Cluster:
    cluster_id: int
    member_ids: list[str]
    label_histogram: dict[str, int]


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - (u.v)/(|u||v|) in double precision, clipped to [0, 2]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(int(u.shape[0]), int(v.shape[0]))
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine distance is undefined for a zero vector")
    d = 1.0 - float(np.dot(u, v)) / (nu * nv)
    return min(2.0, max(0.0, d))


def dbscan(points: list[EmbeddedInstruction], params: ClusteringParams) -> list[ClusterAssignment]:
    """Exhaustive-neighborhood DBSCAN over unit vectors; single-threaded and
    deterministic for a given input order."""
    if not points:
        raise ConfigError("dbscan requires at least one point")
    dims = {p.vector.shape[0] for p in points}
    if len(dims) > 1:
        a, b = sorted(dims)
        raise DimensionMismatch(int(a), int(b))
    n = len(points)
    V = np.stack([p.vector for p in points])
    D = 1.0 - V @ V.T
    np.clip(D, 0.0, 2.0, out=D)
    within = D <= params.epsilon
    neighbor_counts = within.sum(axis=1)
    core = neighbor_counts >= params.min_samples

    labels = np.full(n, NOISE, dtype=np.int64)
    cluster_id = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        labels[i] = cluster_id
        stack = [i]
        while stack:
            j = stack.pop()
            for k in np.flatnonzero(within[j]):
                if core[k] and labels[k] == NOISE:
                    labels[k] = cluster_id
                    stack.append(int(k))
        cluster_id += 1

    # Border points: lowest-input-index core neighbor decides the cluster.
    core_indices = np.flatnonzero(core)
    for i in range(n):
        if core[i]:
            continue
        nearby_cores = core_indices[within[i, core_indices]]
        if nearby_cores.size:
            labels[i] = labels[int(nearby_cores[0])]

    return [
        ClusterAssignment(instruction_id=p.instruction_id, cluster_id=int(labels[i]))
        for i, p in enumerate(points)
    ]


def cluster_instructions(
    instructions: list[MicroInstruction],
    embedder: BackendConfig,
    params: ClusteringParams,
) -> tuple[list[Cluster], list[str]]:
    """Embed executable-rule texts, cluster, and aggregate label histograms.

    Duplicate rule texts are embedded once and fan out to every holder.
    Returns (clusters ordered by cluster_id, noise instruction ids); noise is
    excluded from synthesis entirely.
    """
    clusters, noise_ids, _ = cluster_instructions_detailed(instructions, embedder, params)
    return clusters, noise_ids


def cluster_instructions_detailed(
    instructions: list[MicroInstruction],
    embedder: BackendConfig,
    params: ClusteringParams,
) -> tuple[list[Cluster], list[str], list[EmbeddedInstruction]]:
    """cluster_instructions plus the embedded points, for medoid reporting."""
    if not instructions:
        raise ConfigError("cluster_instructions requires at least one instruction")
    unique_texts: list[str] = []
    index_of: dict[str, int] = {}
    for ins in instructions:
        if ins.executable_rule not in index_of:
            index_of[ins.executable_rule] = len(unique_texts)
            unique_texts.append(ins.executable_rule)
    vectors = gateway.embed_batch(unique_texts, embedder)
    points = [
        embed_point(ins.instruction_id, vectors[index_of[ins.executable_rule]].values)
        for ins in instructions
    ]
    assignments = dbscan(points, params)

    by_id = {ins.instruction_id: ins for ins in instructions}
    members: dict[int, list[str]] = {}
    noise_ids: list[str] = []
    for a in assignments:
        if a.cluster_id == NOISE:
            noise_ids.append(a.instruction_id)
        else:
            members.setdefault(a.cluster_id, []).append(a.instruction_id)
    clusters = []
    for cid in sorted(members):
        ids = members[cid]
        histogram = Counter(by_id[i].gold_label for i in ids)
        clusters.append(
            Cluster(cluster_id=cid, member_ids=ids, label_histogram=dict(sorted(histogram.items())))
        )
    logger.info(
        "clustered %d instructions into %d clusters (%d noise)",
        len(instructions),
        len(clusters),
        len(noise_ids),
    )
    return clusters, noise_ids, points


def medoid_instruction_id(cluster: Cluster, points_by_id: dict[str, EmbeddedInstruction]) -> str:
    """Member minimizing total cosine distance to the other members; ties go to
    the earliest member."""
    ids = cluster.member_ids
    vectors = np.stack([points_by_id[i].vector for i in ids])
    totals = (1.0 - vectors @ vectors.T).sum(axis=1)
    return ids[int(np.argmin(totals))]
