"""Independent reference solutions shared by the attack and acceptance tests."""

import itertools

import numpy as np

from prunebench.attacks import linear_oracle


def brute_force_l0(W, b, x, y):
    """Smallest number of pixels whose change can flip a 2-class linear model.

    For a fixed pixel subset the most adversarial choice pushes each pixel to
    the box edge favouring the other class, so checking that corner decides
    feasibility of the subset.
    """
    d = len(x)
    t = 1 - y
    push = np.where(W[:, t] - W[:, y] > 0, 1.0, 0.0)
    for k in range(d + 1):
        for subset in itertools.combinations(range(d), k):
            xt = x.copy()
            xt[list(subset)] = push[list(subset)]
            if np.argmax(xt @ W + b) != y:
                return k
    return None


def linear_l0_instances(count, seed=0, dim=4):
    """Random 2-class linear models on ``dim`` pixels with a reachable
    adversarial region and an adversarial starting point."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        W = rng.normal(size=(dim, 2))
        b = rng.normal(size=2) * 0.5
        x = rng.uniform(size=dim)
        oracle = linear_oracle(W, b)
        y = int(oracle.predict(x[None])[0])
        k = brute_force_l0(W, b, x, y)
        if k is None or k == 0:
            continue
        starts = rng.uniform(size=(200, dim))
        adv = starts[oracle.predict(starts) != y]
        if len(adv) == 0:
            continue
        out.append((W, b, x, y, adv[0], k))
    return out


def hyperplane_instances(count, seed=0):
    """2-d binary linear classifiers whose closest boundary point (plus a
    small overshoot) lies well inside the unit box."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        w = rng.normal(size=2)
        x = rng.uniform(0.2, 0.8, size=2)
        dist = rng.uniform(0.05, 0.3)
        bias = -(w @ x) + dist * np.linalg.norm(w)  # w.x + bias = dist * |w| > 0: class 1
        foot = x - dist * w / np.linalg.norm(w)
        if np.any(foot < 0.05) or np.any(foot > 0.95):
            continue
        W = np.stack([np.zeros(2), w], axis=1)
        out.append((W, np.array([0.0, bias]), x, 1, abs(w @ x + bias) / np.linalg.norm(w)))
    return out
