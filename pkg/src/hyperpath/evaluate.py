"""Downstream evaluation: stratified splits, a linear probe, classification
F1 scores, k-means clustering with NMI/ARI, and dot-product link prediction.

Everything is deterministic given the seeds and implemented directly on
numpy arrays so the exact conventions (sqrt-normalised NMI, average-rank tie
handling in AUC, lowest-index ties in k-means) are pinned down.
"""

from __future__ import annotations

from math import comb

import numpy as np

from .hetgraph import HeteroGraph


def split_labeled(
    labels: np.ndarray, train_ratio: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train, test) index split, deterministic per seed.

    Per-class counts follow the largest-remainder rule so the train side has
    exactly ``round(train_ratio * n)`` items. Classes with fewer than two
    members are rejected.
    """
    labels = np.asarray(labels)
    if not 0.0 < train_ratio < 1.0:
        raise ValueError(f"train_ratio must lie in (0, 1), got {train_ratio}")
    n = len(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if (counts < 2).any():
        small = classes[counts < 2]
        raise ValueError(f"class {small[0]} has fewer than 2 members")
    target_total = int(round(train_ratio * n))
    quota = train_ratio * counts
    take = np.floor(quota).astype(int)
    remainder = quota - take
    short = target_total - int(take.sum())  # >= 0: sum of floors <= round(sum)
    # Distribute the leftover to the largest fractional parts (ties by
    # class order).
    for ci in np.argsort(-remainder, kind="stable")[:short]:
        take[ci] += 1

    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for ci, cls in enumerate(classes):
        members = np.flatnonzero(labels == cls)
        perm = rng.permutation(len(members))
        train_idx.append(members[perm[: take[ci]]])
        test_idx.append(members[perm[take[ci] :]])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))


def linear_probe(
    embeddings: np.ndarray,
    train_ids: np.ndarray,
    test_ids: np.ndarray,
    labels: np.ndarray,
    *,
    iters: int = 500,
    lr: float = 0.1,
    l2: float = 1e-4,
) -> np.ndarray:
    """Multinomial logistic probe fit by full-batch gradient descent.

    Fixed iteration count, zero init, L2 on the weights only; predictions
    are argmax logits on ``test_ids``. Fully deterministic.
    """
    x_tr = embeddings[train_ids]
    y_tr = labels[train_ids]
    n_classes = int(labels.max()) + 1
    w = np.zeros((n_classes, x_tr.shape[1]))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y_tr]
    for _ in range(iters):
        logits = x_tr @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / len(x_tr)
        w -= lr * (err.T @ x_tr + l2 * w)
        b -= lr * err.sum(axis=0)
    return np.argmax(embeddings[test_ids] @ w.T + b, axis=1)


def f1_scores(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(macro_f1, micro_f1). Macro averages per-class F1 over classes present
    in pred or truth; micro pools counts globally (equals accuracy for
    single-label prediction)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if len(pred) != len(truth):
        raise ValueError("pred and truth must have the same length")
    classes = np.union1d(pred, truth)
    f1s = []
    tp_all = fp_all = fn_all = 0
    for cls in classes:
        tp = int(np.sum((pred == cls) & (truth == cls)))
        fp = int(np.sum((pred == cls) & (truth != cls)))
        fn = int(np.sum((pred != cls) & (truth == cls)))
        tp_all, fp_all, fn_all = tp_all + tp, fp_all + fp, fn_all + fn
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    macro = float(np.mean(f1s)) if f1s else 0.0
    micro_den = 2 * tp_all + fp_all + fn_all
    micro = 2 * tp_all / micro_den if micro_den else 0.0
    return macro, float(micro)


def kmeans(embeddings: np.ndarray, k: int, seed: int, *, max_iter: int = 300) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding.

    Assignment ties go to the lowest centroid index; an emptied cluster is
    re-seeded to the point farthest from its assigned centroid. Runs to an
    assignment fixpoint or ``max_iter``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total == 0:
            centroids[i] = x[rng.integers(n)]
        else:
            centroids[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centroids[i]) ** 2).sum(axis=1))

    assign = np.full(n, -1)
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dist, axis=1)  # argmin takes the lowest index
        for ci in range(k):
            members = new_assign == ci
            if members.any():
                centroids[ci] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(dist[np.arange(n), new_assign]))
                centroids[ci] = x[far]
                new_assign[far] = ci
        if (new_assign == assign).all():
            break
        assign = new_assign
    return assign


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def nmi(assignments: np.ndarray, labels: np.ndarray) -> float:
    """Normalised mutual information I(A;L) / sqrt(H(A) H(L)), natural logs;
    0 by convention when either entropy is 0."""
    a, b = np.asarray(assignments), np.asarray(labels)
    if len(a) != len(b):
        raise ValueError("length mismatch")
    n = len(a)
    table = _contingency(a, b)
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    ha = -np.sum(pa[pa > 0] * np.log(pa[pa > 0]))
    hb = -np.sum(pb[pb > 0] * np.log(pb[pb > 0]))
    if ha == 0 or hb == 0:
        return 0.0
    pij = table / n
    outer = pa[:, None] * pb[None, :]
    mask = pij > 0
    mi = float(np.sum(pij[mask] * np.log(pij[mask] / outer[mask])))
    return mi / float(np.sqrt(ha * hb))


def ari(assignments: np.ndarray, labels: np.ndarray) -> float:
    """Adjusted Rand index via the pair-counting contingency formula."""
    a, b = np.asarray(assignments), np.asarray(labels)
    if len(a) != len(b):
        raise ValueError("length mismatch")
    table = _contingency(a, b)
    n = len(a)
    index = sum(comb(int(nij), 2) for nij in table.ravel())
    sum_a = sum(comb(int(x), 2) for x in table.sum(axis=1))
    sum_b = sum(comb(int(x), 2) for x in table.sum(axis=0))
    expected = sum_a * sum_b / comb(n, 2)
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        return 0.0
    return float((index - expected) / (max_index - expected))


def auc_score(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Rank-statistic ROC-AUC; tied scores count half."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need at least one positive and one negative score")
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(len(combined))
    # Average ranks over ties.
    sorted_scores = combined[order]
    i = 0
    while i < len(combined):
        j = i
        while j + 1 < len(combined) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    r_pos = ranks[: len(pos)].sum()
    u = r_pos - len(pos) * (len(pos) + 1) / 2
    return float(u / (len(pos) * len(neg)))


def binary_f1(pred: np.ndarray, truth: np.ndarray) -> float:
    """F1 of the positive class for 0/1 arrays."""
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    tp = int(np.sum(pred & truth))
    denom = 2 * tp + int(np.sum(pred & ~truth)) + int(np.sum(~pred & truth))
    return 2 * tp / denom if denom else 0.0


def link_predict_eval(
    g: HeteroGraph,
    embeddings: dict[int, np.ndarray],
    positive_pairs: list[tuple[int, int]],
    seed: int,
) -> tuple[float, float]:
    """(roc_auc, f1) of sigmoid dot-product scores.

    Negatives are sampled uniformly over unconnected pairs with the same
    endpoint types as the positives, matched 1:1 in count; F1 uses the 0.5
    threshold.
    """
    if not positive_pairs:
        raise ValueError("need at least one positive pair")
    src_t = int(g.node_type[positive_pairs[0][0]])
    dst_t = int(g.node_type[positive_pairs[0][1]])
    src_nodes = g.nodes_of_type(src_t)
    dst_nodes = g.nodes_of_type(dst_t)
    connected = {(min(u, v), max(u, v)) for u, v in positive_pairs}
    max_pairs = len(src_nodes) * len(dst_nodes)
    if max_pairs - len(connected) < len(positive_pairs):
        raise ValueError("not enough unconnected pairs to sample negatives")
    rng = np.random.default_rng(seed)
    negatives: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    attempts = 0
    while len(negatives) < len(positive_pairs):
        attempts += 1
        if attempts > 1000 * len(positive_pairs):
            raise ValueError("negative sampling did not converge")
        u = int(rng.choice(src_nodes))
        v = int(rng.choice(dst_nodes))
        key = (min(u, v), max(u, v))
        if u == v or key in connected or key in seen:
            continue
        seen.add(key)
        negatives.append((u, v))

    def scores(pairs: list[tuple[int, int]]) -> np.ndarray:
        dots = np.array([embeddings[u] @ embeddings[v] for u, v in pairs])
        return 1.0 / (1.0 + np.exp(-dots))

    s_pos = scores(positive_pairs)
    s_neg = scores(negatives)
    auc = auc_score(s_pos, s_neg)
    pred = np.concatenate([s_pos, s_neg]) >= 0.5
    truth = np.concatenate([np.ones(len(s_pos)), np.zeros(len(s_neg))]).astype(bool)
    return auc, binary_f1(pred, truth)
