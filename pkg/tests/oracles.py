"""Independent reference implementations used only by the tests.

These are deliberately naive: explicit loops, no shared code paths with the
package beyond the scalar distance helpers.
"""

import math

import numpy as np
from scipy.spatial.distance import cdist


def central_difference(fn, x, step=1e-5):
    """Gradient of scalar ``fn`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


def loop_distance(a, b):
    acc = 0.0
    for u, v in zip(a, b):
        acc += (u - v) * (u - v)
    return math.sqrt(acc)


def triplet_bruteforce(features, labels, margin):
    """Enumerate every (anchor, positive, negative) triple and take per-anchor extremes."""
    n = len(labels)
    terms = []
    for a in range(n):
        best_pos, best_neg = None, None
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            for q in range(n):
                if labels[q] == labels[a]:
                    continue
                dp = loop_distance(features[a], features[p])
                dn = loop_distance(features[a], features[q])
                best_pos = dp if best_pos is None else max(best_pos, dp)
                best_neg = dn if best_neg is None else min(best_neg, dn)
        terms.append(max(0.0, margin + best_pos - best_neg))
    return math.fsum(terms) / n, terms


def dbscan_reference(x, eps, min_pts, metric):
    """Cores, connected components of the core graph, then border attachment.

    A border point joins the component with the smallest core index among
    its core neighbours (that component is expanded first).  Ids are
    renumbered by first appearance.  Distances come from scipy.
    """
    n = len(x)
    dmat = cdist(x, x, "euclidean" if metric == "euclidean" else "cosine")
    nb = [[j for j in range(n) if dmat[i, j] <= eps] for i in range(n)]
    core = [len(nb[i]) >= min_pts for i in range(n)]
    comp = [-1] * n
    ncomp = 0
    for i in range(n):
        if not core[i] or comp[i] != -1:
            continue
        stack = [i]
        comp[i] = ncomp
        while stack:
            p = stack.pop()
            for q in nb[p]:
                if core[q] and comp[q] == -1:
                    comp[q] = ncomp
                    stack.append(q)
        ncomp += 1
    # component seeds are their minimum core index, which is also their order
    labels = list(comp)
    for i in range(n):
        if core[i]:
            continue
        cands = [comp[j] for j in nb[i] if core[j]]
        labels[i] = min(cands) if cands else -1
    mapping, out = {}, []
    for lab in labels:
        if lab == -1:
            out.append(-1)
            continue
        mapping.setdefault(lab, len(mapping))
        out.append(mapping[lab])
    return np.array(out), len(mapping)


def retrieval_bruteforce(qf, q_ids, q_cams, gf, g_ids, g_cams, ranks, metric, exclude=True):
    aps, firsts = [], []
    for i in range(len(qf)):
        rows = []
        for j in range(len(gf)):
            if exclude and g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i]:
                continue
            if metric == "euclidean":
                d = loop_distance(qf[i], gf[j])
            else:
                d = 1.0 - float(np.dot(qf[i], gf[j])) / (np.linalg.norm(qf[i]) * np.linalg.norm(gf[j]))
            rows.append((d, j))
        rows.sort()
        rel = [g_ids[j] == q_ids[i] for _, j in rows]
        if not any(rel):
            continue
        hits, precs = 0, []
        for rank, r in enumerate(rel, start=1):
            if r:
                hits += 1
                precs.append(hits / rank)
        aps.append(sum(precs) / len(precs))
        firsts.append(rel.index(True) + 1)
    cmc = {r: sum(f <= r for f in firsts) / len(firsts) for r in ranks}
    return sum(aps) / len(aps), cmc, len(aps)
