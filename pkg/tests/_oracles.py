"""Shared test oracles: central finite differences, error metrics, graph relabeling."""

import numpy as np


def numerical_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at ndarray x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return g


def rel_err(analytic, numeric):
    """Max elementwise |a - n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def permute_graph(g, perm):
    """Relabel node ids by perm (old id -> new id), keeping everything consistent."""
    from conceptshot.graph import ConceptGraph, NodeRecord
    nodes = [NodeRecord(int(perm[n.id]), n.name, n.level, n.split) for n in g.nodes]
    edges = [(int(perm[i]), int(perm[j])) for i, j in g.edges]
    sem = np.empty_like(g.semantics)
    sem[perm] = g.semantics
    return ConceptGraph(nodes, edges, sem, g.num_levels)
