"""Compiled inner loops for split finding and batch tree traversal.

All scoring goes through ``info_gain_counts`` / ``numeric_score`` so that the
public ``split_score`` operation and the scan kernels produce bit-identical
values from identical statistics.

Scan kernels take value-sorted inputs and return ``(score, threshold_or_cut,
n_pos)`` with score < 0 meaning "no valid split". Ties keep the first (lowest
threshold / lowest cut) candidate, which makes every scan deterministic.
"""

import numpy as np
from numba import njit

NO_SPLIT = -1.0


@njit(cache=True, nogil=True)
def entropy_counts(counts):
    total = 0.0
    acc = 0.0
    nonzero = 0
    for c in counts:
        total += c
        if c > 0.0:
            nonzero += 1
            acc += c * np.log(c)
    # A single-class distribution has exactly zero entropy; computing it
    # through the log identity would leave 1-ulp noise.
    if total <= 0.0 or nonzero <= 1:
        return 0.0
    return np.log(total) - acc / total


@njit(cache=True, nogil=True)
def info_gain_counts(parent, pos, neg):
    # The combined form keeps the value invariant under swapping pos/neg
    # (float addition is commutative), so any enumeration orientation of the
    # same partition scores bit-identically.
    n = 0.0
    for c in parent:
        n += c
    n_pos = 0.0
    for c in pos:
        n_pos += c
    n_neg = 0.0
    for c in neg:
        n_neg += c
    if n <= 0.0:
        return 0.0
    children = n_pos * entropy_counts(pos) + n_neg * entropy_counts(neg)
    return entropy_counts(parent) - children / n


@njit(cache=True, nogil=True)
def _variance(count, total, total_sq):
    if count <= 0.0:
        return 0.0
    mean = total / count
    v = total_sq / count - mean * mean
    if v < 0.0:
        return 0.0
    return v


@njit(cache=True, nogil=True)
def variance_reduction(cp, sp, ssp, ca, sa, ssa, cb, sb, ssb):
    if cp <= 0.0:
        return 0.0
    children = ca * _variance(ca, sa, ssa) + cb * _variance(cb, sb, ssb)
    return _variance(cp, sp, ssp) - children / cp


@njit(cache=True, nogil=True)
def hessian_gain(sg, sh, sga, sha, sgb, shb, l2):
    return (
        (sga * sga) / (sha + l2)
        + (sgb * sgb) / (shb + l2)
        - (sg * sg) / (sh + l2)
    )


# ---------------------------------------------------------------------------
# Exact numerical scans over value-sorted arrays. The positive branch is
# "value >= threshold", i.e. the right-hand side of the sorted order, and
# thresholds are midpoints between consecutive distinct values.

@njit(cache=True, nogil=True)
def scan_numerical_classification(values, labels, n_classes, min_examples):
    n = len(values)
    total = np.zeros(n_classes)
    for i in range(n):
        total[labels[i]] += 1.0
    left = np.zeros(n_classes)
    right = np.empty(n_classes)
    best_score = NO_SPLIT
    best_thr = 0.0
    best_pos = 0
    for i in range(n - 1):
        left[labels[i]] += 1.0
        nl = i + 1
        nr = n - nl
        if nr < min_examples:
            break
        if nl < min_examples or values[i] == values[i + 1]:
            continue
        for c in range(n_classes):
            right[c] = total[c] - left[c]
        score = info_gain_counts(total, right, left)
        if score > best_score:
            best_score = score
            best_thr = (values[i] + values[i + 1]) / 2.0
            best_pos = nr
    if best_score <= 0.0:
        return NO_SPLIT, 0.0, 0
    return best_score, best_thr, best_pos


@njit(cache=True, nogil=True)
def scan_numerical_numeric(values, y, h, min_examples, use_hessian, l2):
    """Regression / gradient labels; ``h`` is used only under hessian gain."""
    n = len(values)
    total_s = 0.0
    total_ss = 0.0
    total_h = 0.0
    for i in range(n):
        total_s += y[i]
        total_ss += y[i] * y[i]
        total_h += h[i]
    left_s = 0.0
    left_ss = 0.0
    left_h = 0.0
    best_score = NO_SPLIT
    best_thr = 0.0
    best_pos = 0
    for i in range(n - 1):
        left_s += y[i]
        left_ss += y[i] * y[i]
        left_h += h[i]
        nl = i + 1
        nr = n - nl
        if nr < min_examples:
            break
        if nl < min_examples or values[i] == values[i + 1]:
            continue
        if use_hessian:
            score = hessian_gain(
                total_s, total_h,
                total_s - left_s, total_h - left_h,
                left_s, left_h, l2,
            )
        else:
            score = variance_reduction(
                float(n), total_s, total_ss,
                float(nr), total_s - left_s, total_ss - left_ss,
                float(nl), left_s, left_ss,
            )
        if score > best_score:
            best_score = score
            best_thr = (values[i] + values[i + 1]) / 2.0
            best_pos = nr
    if best_score <= 0.0:
        return NO_SPLIT, 0.0, 0
    return best_score, best_thr, best_pos


# ---------------------------------------------------------------------------
# Histogram numerical scans: candidate thresholds are the given boundaries.

@njit(cache=True, nogil=True)
def scan_boundaries_classification(values, labels, boundaries, n_classes, min_examples):
    n = len(values)
    total = np.zeros(n_classes)
    for i in range(n):
        total[labels[i]] += 1.0
    left = np.zeros(n_classes)
    right = np.empty(n_classes)
    best_score = NO_SPLIT
    best_thr = 0.0
    best_pos = 0
    p = 0
    for b in range(len(boundaries)):
        thr = boundaries[b]
        while p < n and values[p] < thr:
            left[labels[p]] += 1.0
            p += 1
        nl = p
        nr = n - nl
        if nl < min_examples or nr < min_examples:
            continue
        for c in range(n_classes):
            right[c] = total[c] - left[c]
        score = info_gain_counts(total, right, left)
        if score > best_score:
            best_score = score
            best_thr = thr
            best_pos = nr
    if best_score <= 0.0:
        return NO_SPLIT, 0.0, 0
    return best_score, best_thr, best_pos


@njit(cache=True, nogil=True)
def scan_boundaries_numeric(values, y, h, boundaries, min_examples, use_hessian, l2):
    n = len(values)
    total_s = 0.0
    total_ss = 0.0
    total_h = 0.0
    for i in range(n):
        total_s += y[i]
        total_ss += y[i] * y[i]
        total_h += h[i]
    left_s = 0.0
    left_ss = 0.0
    left_h = 0.0
    best_score = NO_SPLIT
    best_thr = 0.0
    best_pos = 0
    p = 0
    for b in range(len(boundaries)):
        thr = boundaries[b]
        while p < n and values[p] < thr:
            left_s += y[p]
            left_ss += y[p] * y[p]
            left_h += h[p]
            p += 1
        nl = p
        nr = n - nl
        if nl < min_examples or nr < min_examples:
            continue
        if use_hessian:
            score = hessian_gain(
                total_s, total_h,
                total_s - left_s, total_h - left_h,
                left_s, left_h, l2,
            )
        else:
            score = variance_reduction(
                float(n), total_s, total_ss,
                float(nr), total_s - left_s, total_ss - left_ss,
                float(nl), left_s, left_ss,
            )
        if score > best_score:
            best_score = score
            best_thr = thr
            best_pos = nr
    if best_score <= 0.0:
        return NO_SPLIT, 0.0, 0
    return best_score, best_thr, best_pos


# ---------------------------------------------------------------------------
# Categorical scans. Categories are pre-ordered by label response; the scan
# walks prefix cuts. The positive side is the suffix starting at the cut.

@njit(cache=True, nogil=True)
def scan_ordered_categories_classification(counts, min_examples):
    k, n_classes = counts.shape
    total = np.zeros(n_classes)
    for j in range(k):
        for c in range(n_classes):
            total[c] += counts[j, c]
    n = 0.0
    for c in range(n_classes):
        n += total[c]
    left = np.zeros(n_classes)
    right = np.empty(n_classes)
    best_score = NO_SPLIT
    best_cut = -1
    best_pos = 0
    nl = 0.0
    for j in range(k - 1):
        for c in range(n_classes):
            left[c] += counts[j, c]
            nl += counts[j, c]
        nr = n - nl
        if nr < min_examples:
            break
        if nl < min_examples:
            continue
        for c in range(n_classes):
            right[c] = total[c] - left[c]
        score = info_gain_counts(total, right, left)
        if score > best_score:
            best_score = score
            best_cut = j + 1
            best_pos = int(nr)
    if best_score <= 0.0:
        return NO_SPLIT, -1, 0
    return best_score, best_cut, best_pos


@njit(cache=True, nogil=True)
def scan_ordered_categories_numeric(cnt, s, ss, sh, min_examples, use_hessian, l2):
    k = len(cnt)
    n = 0.0
    total_s = 0.0
    total_ss = 0.0
    total_h = 0.0
    for j in range(k):
        n += cnt[j]
        total_s += s[j]
        total_ss += ss[j]
        total_h += sh[j]
    nl = 0.0
    left_s = 0.0
    left_ss = 0.0
    left_h = 0.0
    best_score = NO_SPLIT
    best_cut = -1
    best_pos = 0
    for j in range(k - 1):
        nl += cnt[j]
        left_s += s[j]
        left_ss += ss[j]
        left_h += sh[j]
        nr = n - nl
        if nr < min_examples:
            break
        if nl < min_examples:
            continue
        if use_hessian:
            score = hessian_gain(
                total_s, total_h,
                total_s - left_s, total_h - left_h,
                left_s, left_h, l2,
            )
        else:
            score = variance_reduction(
                n, total_s, total_ss,
                nr, total_s - left_s, total_ss - left_ss,
                nl, left_s, left_ss,
            )
        if score > best_score:
            best_score = score
            best_cut = j + 1
            best_pos = int(nr)
    if best_score <= 0.0:
        return NO_SPLIT, -1, 0
    return best_score, best_cut, best_pos


@njit(cache=True, nogil=True)
def scan_random_categories_classification(counts, present, trials, min_examples, seed):
    k, n_classes = counts.shape
    total = np.zeros(n_classes)
    for j in range(k):
        for c in range(n_classes):
            total[c] += counts[j, c]
    n = 0.0
    for c in range(n_classes):
        n += total[c]
    np.random.seed(seed)
    pos = np.zeros(n_classes)
    neg = np.empty(n_classes)
    best_score = NO_SPLIT
    best_mask = np.zeros(k, dtype=np.uint8)
    best_pos = 0
    mask = np.zeros(k, dtype=np.uint8)
    for _ in range(trials):
        n_pos = 0.0
        for c in range(n_classes):
            pos[c] = 0.0
        for j in range(k):
            if present[j] and np.random.randint(0, 2) == 1:
                mask[j] = 1
                for c in range(n_classes):
                    pos[c] += counts[j, c]
                    n_pos += counts[j, c]
            else:
                mask[j] = 0
        n_neg = n - n_pos
        if n_pos < min_examples or n_neg < min_examples:
            continue
        for c in range(n_classes):
            neg[c] = total[c] - pos[c]
        score = info_gain_counts(total, pos, neg)
        if score > best_score:
            best_score = score
            best_pos = int(n_pos)
            for j in range(k):
                best_mask[j] = mask[j]
    if best_score <= 0.0:
        return NO_SPLIT, best_mask, 0
    return best_score, best_mask, best_pos


@njit(cache=True, nogil=True)
def scan_random_categories_numeric(cnt, s, ss, sh, present, trials, min_examples, seed, use_hessian, l2):
    k = len(cnt)
    n = 0.0
    total_s = 0.0
    total_ss = 0.0
    total_h = 0.0
    for j in range(k):
        n += cnt[j]
        total_s += s[j]
        total_ss += ss[j]
        total_h += sh[j]
    np.random.seed(seed)
    best_score = NO_SPLIT
    best_mask = np.zeros(k, dtype=np.uint8)
    best_pos = 0
    mask = np.zeros(k, dtype=np.uint8)
    for _ in range(trials):
        n_pos = 0.0
        pos_s = 0.0
        pos_ss = 0.0
        pos_h = 0.0
        for j in range(k):
            if present[j] and np.random.randint(0, 2) == 1:
                mask[j] = 1
                n_pos += cnt[j]
                pos_s += s[j]
                pos_ss += ss[j]
                pos_h += sh[j]
            else:
                mask[j] = 0
        n_neg = n - n_pos
        if n_pos < min_examples or n_neg < min_examples:
            continue
        if use_hessian:
            score = hessian_gain(
                total_s, total_h,
                pos_s, pos_h,
                total_s - pos_s, total_h - pos_h, l2,
            )
        else:
            score = variance_reduction(
                n, total_s, total_ss,
                n_pos, pos_s, pos_ss,
                n_neg, total_s - pos_s, total_ss - pos_ss,
            )
        if score > best_score:
            best_score = score
            best_pos = int(n_pos)
            for j in range(k):
                best_mask[j] = mask[j]
    if best_score <= 0.0:
        return NO_SPLIT, best_mask, 0
    return best_score, best_mask, best_pos


@njit(cache=True, nogil=True)
def scan_onehot_classification(counts, present, min_examples):
    k, n_classes = counts.shape
    total = np.zeros(n_classes)
    for j in range(k):
        for c in range(n_classes):
            total[c] += counts[j, c]
    n = 0.0
    for c in range(n_classes):
        n += total[c]
    neg = np.empty(n_classes)
    best_score = NO_SPLIT
    best_cat = -1
    best_pos = 0
    for j in range(k):
        if not present[j]:
            continue
        n_pos = 0.0
        for c in range(n_classes):
            n_pos += counts[j, c]
        n_neg = n - n_pos
        if n_pos < min_examples or n_neg < min_examples:
            continue
        for c in range(n_classes):
            neg[c] = total[c] - counts[j, c]
        score = info_gain_counts(total, counts[j], neg)
        if score > best_score:
            best_score = score
            best_cat = j
            best_pos = int(n_pos)
    if best_score <= 0.0:
        return NO_SPLIT, -1, 0
    return best_score, best_cat, best_pos


@njit(cache=True, nogil=True)
def scan_onehot_numeric(cnt, s, ss, sh, present, min_examples, use_hessian, l2):
    k = len(cnt)
    n = 0.0
    total_s = 0.0
    total_ss = 0.0
    total_h = 0.0
    for j in range(k):
        n += cnt[j]
        total_s += s[j]
        total_ss += ss[j]
        total_h += sh[j]
    best_score = NO_SPLIT
    best_cat = -1
    best_pos = 0
    for j in range(k):
        if not present[j]:
            continue
        n_pos = cnt[j]
        n_neg = n - n_pos
        if n_pos < min_examples or n_neg < min_examples:
            continue
        if use_hessian:
            score = hessian_gain(
                total_s, total_h,
                s[j], sh[j],
                total_s - s[j], total_h - sh[j], l2,
            )
        else:
            score = variance_reduction(
                n, total_s, total_ss,
                n_pos, s[j], ss[j],
                n_neg, total_s - s[j], total_ss - ss[j],
            )
        if score > best_score:
            best_score = score
            best_cat = j
            best_pos = int(n_pos)
    if best_score <= 0.0:
        return NO_SPLIT, -1, 0
    return best_score, best_cat, best_pos


# ---------------------------------------------------------------------------
# Flattened-forest batch traversal (the fast generic engines).
#
# Node kinds: 0 leaf, 1 higher, 2 bitmap (contains conditions are flattened
# to bitmaps), 3 oblique, 4 boolean. Categorical codes are stored as floats
# in X; a code >= bitmap length means "missing". Boolean missing is 2.

@njit(cache=True, nogil=True)
def traverse_forest(
    X,
    tree_roots,
    node_kind,
    node_feature,
    node_thr,
    node_na,
    node_neg,
    node_pos,
    node_leaf,
    bitmap_pool,
    node_bm_off,
    node_bm_len,
    obq_feats,
    obq_w,
    node_ob_off,
    node_ob_len,
    leaf_values,
    out,
):
    n = X.shape[0]
    for i in range(n):
        for t in range(len(tree_roots)):
            node = tree_roots[t]
            while node_kind[node] != 0:
                kind = node_kind[node]
                positive = False
                if kind == 1:
                    v = X[i, node_feature[node]]
                    if np.isnan(v):
                        positive = node_na[node] == 1
                    else:
                        positive = v >= node_thr[node]
                elif kind == 2:
                    code = int(X[i, node_feature[node]])
                    if code >= node_bm_len[node]:
                        positive = node_na[node] == 1
                    else:
                        positive = bitmap_pool[node_bm_off[node] + code] == 1
                elif kind == 3:
                    acc = 0.0
                    missing = False
                    for j in range(node_ob_len[node]):
                        v = X[i, obq_feats[node_ob_off[node] + j]]
                        if np.isnan(v):
                            missing = True
                            break
                        acc += obq_w[node_ob_off[node] + j] * v
                    if missing:
                        positive = node_na[node] == 1
                    else:
                        positive = acc >= node_thr[node]
                else:
                    v = X[i, node_feature[node]]
                    if v == 2.0:
                        positive = node_na[node] == 1
                    else:
                        positive = v == 1.0
                node = node_pos[node] if positive else node_neg[node]
            row = node_leaf[node]
            for d in range(leaf_values.shape[1]):
                out[i, d] += leaf_values[row, d]


# ---------------------------------------------------------------------------
# QuickScorer: per (node, condition) entries carrying 64-bit leaf masks that
# clear the leaves of the node's positive subtree when the condition is
# false. The lowest surviving bit indexes the reached leaf in canonical
# (negative-child-first) order.

@njit(cache=True, nogil=True)
def quickscorer(
    X,
    tree_entry_start,
    tree_entry_end,
    entry_feature,
    entry_kind,
    entry_thr,
    entry_na,
    entry_mask,
    entry_bm_off,
    entry_bm_len,
    bitmap_pool,
    tree_init_mask,
    tree_num_leaves,
    tree_leaf_off,
    leaf_values,
    tree_class,
    out,
):
    n = X.shape[0]
    n_trees = len(tree_entry_start)
    for i in range(n):
        for t in range(n_trees):
            mask = tree_init_mask[t]
            for e in range(tree_entry_start[t], tree_entry_end[t]):
                true_branch = False
                if entry_kind[e] == 1:
                    v = X[i, entry_feature[e]]
                    if np.isnan(v):
                        true_branch = entry_na[e] == 1
                    else:
                        true_branch = v >= entry_thr[e]
                else:
                    code = int(X[i, entry_feature[e]])
                    if code >= entry_bm_len[e]:
                        true_branch = entry_na[e] == 1
                    else:
                        true_branch = bitmap_pool[entry_bm_off[e] + code] == 1
                if not true_branch:
                    mask &= entry_mask[e]
            # Masks clear positive subtrees, so with leaves in negative-first
            # order the reached leaf is the highest surviving bit.
            leaf = tree_num_leaves[t] - 1
            while (mask >> np.uint64(leaf)) & np.uint64(1) == np.uint64(0):
                leaf -= 1
            out[i, tree_class[t]] += leaf_values[tree_leaf_off[t] + leaf]
