"""Independent numpy recomputations used as test oracles.

Everything here is deliberately written with plain loops and explicit
arithmetic, sharing no code with the library implementations it checks.
"""

import numpy as np


def conv2d(x, weight, bias, pad_mode="zero"):
    """Direct 2-D cross-correlation; x is (C_in, H, W), weight (C_out, C_in, kh, kw)."""
    c_out, c_in, kh, kw = weight.shape
    ph, pw = kh // 2, kw // 2
    if pad_mode == "zero":
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    elif pad_mode == "replicate":
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)), mode="edge")
    else:
        raise ValueError(pad_mode)
    h, w = x.shape[1:]
    out = np.zeros((c_out, h, w))
    for co in range(c_out):
        for r in range(h):
            for c in range(w):
                out[co, r, c] = np.sum(xp[:, r : r + kh, c : c + kw] * weight[co]) + bias[co]
    return out


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def max_pool2(x):
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for r in range(h // 2):
        for col in range(w // 2):
            out[:, r, col] = x[:, 2 * r : 2 * r + 2, 2 * col : 2 * col + 2].max(axis=(1, 2))
    return out


def cab_forward(x, w1, b1, w2, b2, wg1, bg1, wg2, bg2):
    """Channel-attention block: conv-relu-conv, pooled gate, residual add."""
    y = conv2d(relu(conv2d(x, w1, b1)), w2, b2)
    pooled = y.mean(axis=(1, 2))
    g = sigmoid(wg2[:, :, 0, 0] @ relu(wg1[:, :, 0, 0] @ pooled + bg1) + bg2)
    return x + y * g[:, None, None]


def attention_head_forward(x, layers):
    """Conv stack ending in a sigmoid; layers is [(w, b), ...]."""
    out = x
    for idx, (w, b) in enumerate(layers):
        out = conv2d(out, w, b)
        if idx < len(layers) - 1:
            out = relu(out)
    return sigmoid(out)
