"""Slow reference implementations used to cross-check the vectorized code.

Everything here is written with explicit Python loops and ``math`` so that it
shares no code path with the library proper.
"""
from __future__ import annotations

import itertools
import math
from collections import deque
from fractions import Fraction


def _softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return [x / s for x in e]


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def marginal_scores_loop(class_logits, mask_logits, no_object=False):
    """S[z][i][j] = sum_n softmax(C_n)[z] * sigmoid(M[n][i][j])."""
    n_q = len(class_logits)
    n_cls = len(class_logits[0]) - (1 if no_object else 0)
    h, w = len(mask_logits[0]), len(mask_logits[0][0])
    probs = [_softmax([float(v) for v in class_logits[n][:n_cls]]) for n in range(n_q)]
    out = [[[0.0] * w for _ in range(h)] for _ in range(n_cls)]
    for n in range(n_q):
        for z in range(n_cls):
            for i in range(h):
                for j in range(w):
                    out[z][i][j] += probs[n][z] * _sigmoid(float(mask_logits[n][i][j]))
    return out


def anomaly_score_loop(class_logits, mask_logits, no_object=False):
    S = marginal_scores_loop(class_logits, mask_logits, no_object)
    h, w = len(S[0]), len(S[0][0])
    return [[1.0 - max(S[z][i][j] for z in range(len(S))) for j in range(w)] for i in range(h)]


def negative_likelihood_loop(class_logits, mask_logits, no_object=False):
    S = marginal_scores_loop(class_logits, mask_logits, no_object)
    h, w = len(S[0]), len(S[0][0])
    return [[-max(S[z][i][j] for z in range(len(S))) for j in range(w)] for i in range(h)]


def background_loop(known_class_logits, known_mask_logits, hw):
    """1 - max over known queries of (top class prob) * sigmoid(mask)."""
    h, w = hw
    out = [[1.0] * w for _ in range(h)]
    for c_row, m in zip(known_class_logits, known_mask_logits):
        conf = max(_softmax([float(v) for v in c_row]))
        for i in range(h):
            for j in range(w):
                out[i][j] = min(out[i][j], 1.0 - conf * _sigmoid(float(m[i][j])))
    return out


def attention_loop(Q, K, V, X_in, fg=None, bg=None, mode="GMA", scale=1.0):
    """Masked attention evaluated entry by entry. ``fg``/``bg`` hold 0 or -inf."""
    n, p, c = len(Q), len(K), len(V[0])

    def term(mask):
        out = [[0.0] * c for _ in range(n)]
        for a in range(n):
            logits = []
            for b in range(p):
                s = scale * sum(Q[a][k] * K[b][k] for k in range(len(Q[a])))
                logits.append(s + (mask[a][b] if mask is not None else 0.0))
            finite = [x for x in logits if x != -math.inf]
            if not finite:
                continue
            m = max(finite)
            e = [math.exp(x - m) if x != -math.inf else 0.0 for x in logits]
            tot = sum(e)
            for b in range(p):
                for k in range(c):
                    out[a][k] += e[b] / tot * V[b][k]
        return out

    result = [[X_in[a][k] for k in range(c)] for a in range(n)]
    terms = [term(None if mode == "CA" else fg)]
    if mode == "GMA":
        terms.append(term(bg))
    for t in terms:
        for a in range(n):
            for k in range(c):
                result[a][k] += t[a][k]
    return result


def decoder_forward_loop(X0, layers, W_c, features, hw, mode="GMA", threshold=0.5):
    """The toy decoder recurrence written out with loops.

    ``layers`` is a list of ``(W_q, W_k, W_v)``. Returns ``(C, M)`` as nested lists.
    """
    def matmul(A, B):
        return [[sum(A[i][k] * B[k][j] for k in range(len(B))) for j in range(len(B[0]))]
                for i in range(len(A))]

    def transpose(A):
        return [list(col) for col in zip(*A)]

    F = [list(map(float, row)) for row in features]
    X = [list(map(float, row)) for row in X0]
    for W_q, W_k, W_v in layers:
        logits = matmul(X, transpose(F))
        fg = [[0.0 if _sigmoid(v) >= threshold else -math.inf for v in row] for row in logits]
        bg = [[-math.inf if v == 0.0 else 0.0 for v in row] for row in fg]
        X = attention_loop(matmul(X, W_q), matmul(F, W_k), matmul(F, W_v), X, fg, bg, mode)
    C = matmul(X, W_c)
    flat = matmul(X, transpose(F))
    h, w = hw
    M = [[row[i * w:(i + 1) * w] for i in range(h)] for row in flat]
    return C, M


def flood_fill_components(binary, connectivity=8):
    """BFS labeling; components numbered by first pixel in raster order."""
    h, w = len(binary), len(binary[0])
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    labels = [[0] * w for _ in range(h)]
    count = 0
    for r in range(h):
        for c in range(w):
            if not binary[r][c] or labels[r][c]:
                continue
            count += 1
            labels[r][c] = count
            queue = deque([(r, c)])
            while queue:
                y, x = queue.popleft()
                for dy, dx in steps:
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and binary[yy][xx] and not labels[yy][xx]:
                        labels[yy][xx] = count
                        queue.append((yy, xx))
    return labels, count


def auprc_exhaustive(scores, labels):
    """AP by trying every distinct score as a threshold, in exact arithmetic."""
    pairs = list(zip(scores, labels))
    n_pos = sum(1 for _, y in pairs if y)
    ap, prev_recall = Fraction(0), Fraction(0)
    for t in sorted({s for s, _ in pairs}, reverse=True):
        tp = sum(1 for s, y in pairs if s >= t and y)
        pp = sum(1 for s, _ in pairs if s >= t)
        recall = Fraction(tp, n_pos)
        ap += (recall - prev_recall) * Fraction(tp, pp)
        prev_recall = recall
    return ap


def fpr_exhaustive(scores, labels, tpr=0.95):
    """FPR at the largest threshold whose TPR reaches ``tpr``."""
    n_pos = sum(1 for y in labels if y)
    n_neg = len(labels) - n_pos
    target = Fraction(str(tpr))
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y)
        if Fraction(tp, n_pos) >= target:
            fp = sum(1 for s, y in zip(scores, labels) if s >= t and not y)
            return Fraction(fp, n_neg)
    return Fraction(1)


def brute_force_assign(cost):
    """Exhaustive minimum over all injections of ground truths (columns) into predictions (rows).

    Returns ``(cost, rows)`` where ``rows[g]`` is the prediction for ground
    truth ``g``. Permutations come in lexicographic order, so the first
    optimum found is the lexicographically smallest.
    """
    n_pred, n_gt = len(cost), len(cost[0]) if len(cost) else 0
    best, best_rows = math.inf, None
    for rows in itertools.permutations(range(n_pred), n_gt):
        total = sum(float(cost[r][g]) for g, r in enumerate(rows))
        if total < best:
            best, best_rows = total, rows
    return best, best_rows
