"""Independent loop-based reference computations used by the tests."""
import itertools


def brute_metrics(truth, pred, mode="tp"):
    n, k = len(truth), len(truth[0])
    prec, rec = [], []
    for c in range(k):
        tp = fp = fn = 0
        for i in range(n):
            t, p = truth[i][c], pred[i][c]
            if t == 1 and p == 1:
                tp += 1
            elif t == 0 and p == 1:
                fp += 1
            elif t == 1 and p == 0:
                fn += 1
        prec.append(tp / (tp + fp) if tp + fp else 0.0)
        rec.append(tp / (tp + fn) if tp + fn else 0.0)
    ap = sum(prec) / k
    ar = sum(rec) / k
    af1 = 2 * ap * ar / (ap + ar) if ap + ar else 0.0
    if mode == "tp":
        hit = sum(1 for i in range(n) for c in range(k) if truth[i][c] == 1 and pred[i][c] == 1)
        npred = sum(pred[i][c] for i in range(n) for c in range(k))
        ntrue = sum(truth[i][c] for i in range(n) for c in range(k))
        op = hit / npred if npred else 0.0
        orr = hit / ntrue if ntrue else 0.0
    else:
        hit = sum(1 for i in range(n) for c in range(k) if truth[i][c] == pred[i][c])
        ntrue = sum(truth[i][c] for i in range(n) for c in range(k))
        op = hit / (n * k)
        orr = hit / ntrue if ntrue else (None if hit else 0.0)
    of1 = None if orr is None else (2 * op * orr / (op + orr) if op + orr else 0.0)
    return prec, rec, (ap, ar, af1), (op, orr, of1)


def brute_cooccurrence(strengths):
    k = len(strengths[0])
    R = [[0.0] * k for _ in range(k)]
    for i in range(k):
        occ = sum(1 for s in strengths if s[i] >= 0.5)
        for j in range(k):
            conc = sum(1 for s in strengths if s[i] >= 0.5 and s[j] >= 0.5)
            R[i][j] = conc / occ if occ else 0.0
    r = []
    for i in range(k):
        num = sum(R[i][j] for j in range(k))
        den = sum(R[j][i] for j in range(k))
        r.append(num / den if den else 0.0)
    order = sorted(range(k), key=lambda c: (-r[c], c))
    return R, r, order


def all_binary_matrices(n, k):
    for bits in itertools.product((0, 1), repeat=n * k):
        yield [list(bits[i * k:(i + 1) * k]) for i in range(n)]
