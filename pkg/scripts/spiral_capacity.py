"""Train accuracy ceiling of polynomial features on the spiral.

Fits plain softmax regression on all monomials of (x, y) up to a degree.
A two-layer degree-n head yields logits of degree n*n, so this bounds it.
"""
import argparse
from itertools import combinations_with_replacement

import numpy as np

from kdl.data import gen_synthetic


def monomials(xy, degree):
    cols = [np.ones(len(xy))]
    for d in range(1, degree + 1):
        for idx in combinations_with_replacement(range(2), d):
            cols.append(np.prod(xy[:, idx], axis=1))
    return np.stack(cols, axis=1)


def fit(feats, labels, k, steps, lr):
    feats = (feats - feats.mean(0)) / (feats.std(0) + 1e-12)
    feats[:, 0] = 1.0
    w = np.zeros((feats.shape[1], k))
    onehot = np.eye(k)[labels]
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t in range(1, steps + 1):
        z = feats @ w
        z -= z.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        g = feats.T @ (p - onehot) / len(labels)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    return float(np.mean((feats @ w).argmax(1) == labels))


def run():
    ap = argparse.ArgumentParser()
    ap.add_argument("--degrees", default="1,2,4,6,9")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--turns", type=float, default=2.0)
    ap.add_argument("--steps", type=int, default=5000)
    args = ap.parse_args()
    data = gen_synthetic("spiral", 200, 3, seed=args.seed, turns=args.turns)
    xy = data.images.reshape(len(data.labels), 2).astype(np.float64)
    for d in (int(s) for s in args.degrees.split(",")):
        acc = fit(monomials(xy, d), data.labels, 3, args.steps, 0.05)
        print(f"degree {d:2d}  train acc {acc:.3f}")


if __name__ == "__main__":
    run()
