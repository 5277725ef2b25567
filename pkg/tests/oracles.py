"""Independent reference implementations used as test oracles."""

import math


def ecdf_ks_distance(ref, mov):
    """Brute-force two-sample KS distance: evaluate both ECDFs at every pooled point."""
    ref, mov = list(ref), list(mov)
    best = 0.0
    for x in ref + mov:
        fr = sum(1 for v in ref if v <= x) / len(ref)
        fm = sum(1 for v in mov if v <= x) / len(mov)
        best = max(best, abs(fr - fm))
    return best


def series_pvalue(d, n_eff):
    if d == 0:
        return 1.0
    lam = (math.sqrt(n_eff) + 0.12 + 0.11 / math.sqrt(n_eff)) * d
    acc, i = 0.0, 1
    while i <= 100:
        term = 2.0 * (-1) ** (i - 1) * math.exp(-2.0 * (i * lam) ** 2)
        if abs(term) < 2e-12:
            break
        acc += term
        i += 1
    else:
        return 1.0
    return min(1.0, max(0.0, acc))


def faded_gmean(ys, yhats, alpha):
    tp = p = tn = n = 0.0
    out = []
    for y, yh in zip(ys, yhats):
        tp, p, tn, n = alpha * tp, alpha * p, alpha * tn, alpha * n
        if y:
            p += 1
            tp += yh
        else:
            n += 1
            tn += 1 - yh
        rp = tp / p if p > 1e-12 else 1.0
        rn = tn / n if n > 1e-12 else 1.0
        out.append(math.sqrt(rp * rn))
    return out
