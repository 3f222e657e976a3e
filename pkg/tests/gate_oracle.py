"""Second, deliberately naive implementation of the gating rules.

Written against the rule text only, with pure-Python lists and no shared code
with ``ssmdg.gating``. Returns ``(tag, pseudo_label)`` with tags
"C" / "D" / "R".
"""
import itertools


def _argmax(p):
    best = 0
    for i in range(len(p)):
        if p[i] > p[best]:
            best = i
    return best


def oracle(uni, fused, tau, variant):
    yf = _argmax(fused)
    fused_ok = fused[yf] > tau
    if not fused_ok:
        return "R", None
    if variant == "fused_only":
        return "C", yf

    per_head = [(_argmax(p), p[_argmax(p)]) for p in uni]
    if variant == "full":
        ok = False
        for cls, conf in per_head:
            if cls == yf and conf > tau:
                ok = True
    elif variant == "strict":
        ok = True
        for cls, conf in per_head:
            if not (cls == yf and conf > tau):
                ok = False
    elif variant == "any2":
        views = per_head + [(yf, fused[yf])]
        ok = False
        for (c1, p1), (c2, p2) in itertools.combinations(views, 2):
            if c1 == c2 and c1 == yf and p1 > tau and p2 > tau:
                ok = True
    elif variant == "mean":
        chosen = [p for p in list(uni) + [fused] if max(p) > tau]
        avg = [sum(p[c] for p in chosen) / len(chosen) for c in range(len(fused))]
        ok = max(avg) > tau and _argmax(avg) == yf
    else:
        raise ValueError(variant)
    return ("C" if ok else "D"), yf


def grid_distributions(num_classes=3, maxes=(0.90, 0.94, 0.96, 0.99)):
    """Every (max value, argmax position) pair; the rest of the mass is split evenly."""
    out = []
    for mx in maxes:
        for pos in range(num_classes):
            rest = (1.0 - mx) / (num_classes - 1)
            out.append([mx if c == pos else rest for c in range(num_classes)])
    return out
