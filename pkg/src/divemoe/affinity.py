"""Domain affinity mining: prune per calibration set, cross-evaluate PPL,
normalize columnwise, correlate calibration profiles, and cluster them.

The resulting clusters decide which domains share an expert. Matrix cells are
independent, so calibration rows are processed by a small thread pool capped
by the DIVE_THREADS environment variable.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .corpus import generate_domain_bytes, mix_cluster_calibration, sample_calibration
from .errors import DimensionError, FormatError, ParameterError, StatisticsError
from .model import eval_perplexity
from .pruner import prune_model


def worker_threads(task_count=None):
    """Thread cap: DIVE_THREADS when set, else min(4, cpu, task count)."""
    raw = os.environ.get("DIVE_THREADS", "").strip()
    if raw:
        n = int(raw)
        if n < 1:
            raise ParameterError("DIVE_THREADS must be >= 1, got %d" % n)
    else:
        n = min(4, os.cpu_count() or 1)
    if task_count is not None:
        n = min(n, max(1, task_count))
    return n


@dataclasses.dataclass
class AffinityMatrix:
    task_names: list
    raw_ppl: np.ndarray  # [n, n] float64; row = calibration task, col = eval task
    norm_ppl: np.ndarray  # Eq-style columnwise min(p)/p, range (0, 1]

    def __post_init__(self):
        n = len(self.task_names)
        if self.raw_ppl.shape != (n, n) or self.norm_ppl.shape != (n, n):
            raise DimensionError("affinity matrices must be %dx%d" % (n, n))
        if np.any(self.raw_ppl <= 1.0):
            raise ParameterError("raw perplexities must exceed 1")

    def heatmap_data(self):
        names = tuple(self.task_names)
        return names, names, self.norm_ppl


@dataclasses.dataclass
class ClusterAssignment:
    n_clusters: int
    labels: list  # task index -> cluster id in [0, n_clusters)
    merges: list  # (members_a, members_b, height) in merge order

    def members(self, cluster_id):
        return [i for i, c in enumerate(self.labels) if c == cluster_id]


def normalize_ppl(raw) -> np.ndarray:
    """Columnwise min(p) / p; every entry lands in (0, 1]."""
    p = np.asarray(raw, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionError("PPL matrix must be rank 2, got %s" % (p.shape,))
    if np.any(p <= 0.0) or not np.all(np.isfinite(p)):
        raise ParameterError("PPL entries must be positive and finite")
    return p.min(axis=0, keepdims=True) / p


def pearson_corr(d1, d2) -> float:
    """Pearson correlation; sample convention cancels between cov and sigma."""
    a = np.asarray(d1, dtype=np.float64).reshape(-1)
    b = np.asarray(d2, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError("vectors differ in length: %d vs %d" % (a.size, b.size))
    if a.size < 2:
        raise ParameterError("correlation needs at least 2 points")
    da = a - a.mean()
    db = b - b.mean()
    va = float(np.dot(da, da))
    vb = float(np.dot(db, db))
    if va == 0.0 or vb == 0.0:
        raise StatisticsError("correlation undefined for a zero-variance vector")
    return float(np.dot(da, db) / np.sqrt(va * vb))


def build_ppl_matrix(model, tasks, ratio, eval_seq_len=None) -> AffinityMatrix:
    """raw_ppl[i, j] = PPL of (model pruned on task i's calibration) on task j's eval stream."""
    if len(tasks) < 2:
        raise ParameterError("affinity mining needs at least 2 tasks")
    names = [sp.domain for sp in tasks]
    evals = []
    for sp in tasks:
        if sp.eval_bytes <= 0:
            raise ParameterError("task %r has no eval stream" % sp.domain)
        evals.append(generate_domain_bytes(sp.domain, sp.seed, sp.eval_bytes, "eval"))
    n = len(tasks)
    raw = np.zeros((n, n), dtype=np.float64)

    def run_row(i):
        try:
            calib = sample_calibration(tasks[i])
            pruned = prune_model(model, calib, ratio)
            return [
                eval_perplexity(pruned, evals[j], seq_len=tasks[j].sample_len).perplexity
                for j in range(n)
            ]
        except Exception as e:
            raise type(e)("affinity row %d (%s): %s" % (i, names[i], e)) from e

    with ThreadPoolExecutor(max_workers=worker_threads(n)) as pool:
        for i, row in enumerate(pool.map(run_row, range(n))):
            raw[i, :] = row
    return AffinityMatrix(task_names=names, raw_ppl=raw, norm_ppl=normalize_ppl(raw))


def hierarchical_cluster(norm_rows, n_clusters) -> ClusterAssignment:
    """Agglomerative average-linkage clustering of calibration profiles.

    Distance = 1 - pearson(row_i, row_j); cluster distance is the mean of
    original pairwise distances; equal distances merge the lexicographically
    lowest pair of cluster representatives.

    Tiny models can yield constant profiles, where correlation is undefined.
    The distance stays total: equal rows get 0 (identical profiles always
    co-cluster), and a constant row gets the maximal distance 2 to every
    differing row (no affinity evidence).
    """
    rows = np.asarray(norm_rows, dtype=np.float64)
    if rows.ndim != 2:
        raise DimensionError("row matrix must be rank 2")
    n = rows.shape[0]
    if not (1 <= n_clusters <= n):
        raise ParameterError("n_clusters must lie in [1, %d], got %d" % (n, n_clusters))

    constant = [bool(np.all(r == r[0])) for r in rows]
    base = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            if np.array_equal(rows[i], rows[j]):
                d = 0.0
            elif constant[i] or constant[j]:
                d = 2.0
            else:
                d = 1.0 - pearson_corr(rows[i], rows[j])
            base[i, j] = base[j, i] = d

    clusters = [[i] for i in range(n)]
    merges = []
    while len(clusters) > n_clusters:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                pairs = [(i, j) for i in clusters[a] for j in clusters[b]]
                d = float(np.mean([base[i, j] for i, j in pairs]))
                key = (d, clusters[a][0], clusters[b][0])
                if best is None or key < best[0]:
                    best = (key, a, b)
        (d, _, _), a, b = best
        merges.append((tuple(clusters[a]), tuple(clusters[b]), d))
        merged = sorted(clusters[a] + clusters[b])
        clusters = [c for idx, c in enumerate(clusters) if idx not in (a, b)]
        clusters.append(merged)
        clusters.sort(key=lambda c: c[0])

    clusters.sort(key=lambda c: c[0])
    labels = [0] * n
    for cid, members in enumerate(clusters):
        for i in members:
            labels[i] = cid
    return ClusterAssignment(n_clusters=n_clusters, labels=labels, merges=merges)


def build_cluster_calibrations(assignment: ClusterAssignment, specs, budget, seed=0):
    """One uniformly mixed calibration batch per cluster."""
    if len(assignment.labels) != len(specs):
        raise DimensionError("assignment covers %d tasks, specs has %d" % (len(assignment.labels), len(specs)))
    batches = []
    for cid in range(assignment.n_clusters):
        members = [specs[i] for i in assignment.members(cid)]
        assert members, "cluster %d is empty" % cid
        sample_len = members[0].sample_len
        batches.append(mix_cluster_calibration(members, budget, sample_len, seed + cid))
    return batches


def export_affinity_csv(matrix: AffinityMatrix, path):
    """Rows: calib,eval,raw_ppl,norm_ppl."""
    lines = ["calib,eval,raw_ppl,norm_ppl"]
    n = len(matrix.task_names)
    for i in range(n):
        for j in range(n):
            lines.append(
                "%s,%s,%.9g,%.9g"
                % (matrix.task_names[i], matrix.task_names[j], matrix.raw_ppl[i, j], matrix.norm_ppl[i, j])
            )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def export_cluster_csv(assignment: ClusterAssignment, task_names, path):
    """Rows: task,cluster."""
    lines = ["task,cluster"]
    for name, label in zip(task_names, assignment.labels):
        lines.append("%s,%d" % (name, label))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_affinity_csv(path) -> AffinityMatrix:
    """Inverse of export_affinity_csv; task order follows first appearance."""
    with open(path) as f:
        header = f.readline().strip()
        if header != "calib,eval,raw_ppl,norm_ppl":
            raise FormatError("unexpected affinity header %r" % header)
        names, cells = [], {}
        for line in f:
            line = line.strip()
            if not line:
                continue
            calib, ev, raw, norm = line.split(",")
            for name in (calib, ev):
                if name not in names:
                    names.append(name)
            cells[(calib, ev)] = (float(raw), float(norm))
    n = len(names)
    raw_ppl = np.zeros((n, n))
    norm_ppl = np.zeros((n, n))
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            if (a, b) not in cells:
                raise FormatError("affinity matrix is missing cell (%s, %s)" % (a, b))
            raw_ppl[i, j], norm_ppl[i, j] = cells[(a, b)]
    return AffinityMatrix(names, raw_ppl, norm_ppl)


def read_cluster_csv(path):
    """Inverse of export_cluster_csv: (task_names, ClusterAssignment labels list)."""
    with open(path) as f:
        header = f.readline().strip()
        if header != "task,cluster":
            raise FormatError("unexpected cluster header %r" % header)
        names, labels = [], []
        for line in f:
            line = line.strip()
            if not line:
                continue
            name, label = line.split(",")
            names.append(name)
            labels.append(int(label))
    if not names:
        raise FormatError("cluster file %s has no rows" % path)
    return names, labels
