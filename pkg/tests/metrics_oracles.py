"""Independent oracles for ranking metrics."""
import itertools
from fractions import Fraction


def brute_force_ap(scores, labels) -> Fraction:
    """Exact AP by sweeping every distinct score threshold and counting directly."""
    n_pos = sum(labels)
    ap, prev_recall = Fraction(0), Fraction(0)
    for t in sorted(set(scores), reverse=True):
        picked = [y for s, y in zip(scores, labels) if s >= t]
        recall = Fraction(sum(picked), n_pos)
        ap += (recall - prev_recall) * Fraction(sum(picked), len(picked))
        prev_recall = recall
    return ap


def labelled_rankings(n):
    """Every ranking of n items with ties: a composition of n into tie groups times a label string."""
    for cuts in itertools.product((0, 1), repeat=n - 1):
        scores, level = [], n
        for i in range(n):
            scores.append(level)
            if i < n - 1 and cuts[i]:
                level -= 1
        for labels in itertools.product((0, 1), repeat=n):
            if any(labels):
                yield scores, list(labels)


def prevalence_oracle(labels) -> float:
    prev = [Fraction(int(c.sum()), len(c)) for c in labels.T if c.any()]
    return float(sum(prev) / len(prev))
