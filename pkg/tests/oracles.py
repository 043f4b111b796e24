"""Slow, obviously-correct reference implementations used by the tests."""
import math
from fractions import Fraction


def brute_neighbors(points):
    n = len(points)
    out = []
    for i in range(n):
        best, best_j = math.inf, -1
        for j in range(n):
            if j == i:
                continue
            d = sum((float(a) - float(b)) ** 2 for a, b in zip(points[i], points[j]))
            if d < best:
                best, best_j = d, j
        out.append(best_j)
    return out


def brute_adjacency(omega):
    n = len(omega)
    return [
        [i != j and (omega[i] == j or omega[j] == i or omega[i] == omega[j]) for j in range(n)] for i in range(n)
    ]


def brute_components(adj):
    """Component ids by repeated transitive closure, numbered by smallest member."""
    n = len(adj)
    reach = [[adj[i][j] or i == j for j in range(n)] for i in range(n)]
    for k in range(n):
        for i in range(n):
            if reach[i][k]:
                for j in range(n):
                    if reach[k][j]:
                        reach[i][j] = True
    labels, roots = [], []
    for i in range(n):
        root = min(j for j in range(n) if reach[i][j])
        if root not in roots:
            roots.append(root)
        labels.append(roots.index(root))
    return labels


def metrics(cm):
    """(ACC, MF1, kappa) as Fractions straight from the textbook formulas."""
    c = len(cm)
    n = sum(sum(r) for r in cm)
    acc = Fraction(sum(cm[i][i] for i in range(c)), n)
    f1 = []
    for k in range(c):
        tp = cm[k][k]
        fp = sum(cm[i][k] for i in range(c)) - tp
        fn = sum(cm[k]) - tp
        p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        r = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        f1.append(2 * p * r / (p + r) if p + r else Fraction(0))
    pe = sum(Fraction(sum(cm[k]) * sum(cm[i][k] for i in range(c)), n * n) for k in range(c))
    kappa = (acc - pe) / (1 - pe) if pe != 1 else Fraction(int(acc == 1))
    return acc, sum(f1) / c, kappa


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))


def softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)
