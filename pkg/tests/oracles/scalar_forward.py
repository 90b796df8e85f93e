"""Loss of a tiny conv -> ReLU -> flatten -> dense net, with plain Python loops."""

import math

import numpy as np


def inputs():
    rng = np.random.default_rng(0)
    conv_w = rng.normal(size=(2, 1, 3, 3))
    conv_b = rng.normal(size=2)
    dense_w = 0.5 * rng.normal(size=(3, 8))
    dense_b = rng.normal(size=3)
    x = rng.normal(size=(4, 1, 4, 4))
    y = [0, 1, 2, 1]
    return conv_w, conv_b, dense_w, dense_b, x, y


def main():
    conv_w, conv_b, dense_w, dense_b, x, y = (a.tolist() if hasattr(a, "tolist") else a for a in inputs())
    total = 0.0
    for s in range(4):
        feats = []
        for f in range(2):
            for r in range(2):
                for c in range(2):
                    acc = conv_b[f]
                    for i in range(3):
                        for j in range(3):
                            acc += conv_w[f][0][i][j] * x[s][0][r + i][c + j]
                    feats.append(max(acc, 0.0))
        logits = []
        for o in range(3):
            acc = dense_b[o]
            for k in range(8):
                acc += dense_w[o][k] * feats[k]
            logits.append(acc)
        top = max(logits)
        lse = top + math.log(sum(math.exp(v - top) for v in logits))
        total += lse - logits[y[s]]
    print(repr(total / 4))


if __name__ == "__main__":
    main()
