"""Independent pure-Python reference implementations used by the tests."""

import math


def softplus(x):
    return x + math.log1p(math.exp(-x)) if x > 0 else math.log1p(math.exp(x))


def rmsnorm(v, eps=1e-6):
    r = 1.0 / math.sqrt(sum(a * a for a in v) / len(v) + eps)
    return [a * r for a in v]


def vecmat(v, W):
    """``v @ W`` for a list ``v`` and a nested-list matrix ``W``."""
    cols = len(W[0])
    return [sum(v[i] * W[i][j] for i in range(len(v))) for j in range(cols)]


def layer_lists(layer):
    return {
        "W1": layer.proj1_w.data.tolist(), "b1": layer.proj1_b.data.tolist(),
        "W2": layer.proj2_w.data.tolist(), "W3": layer.proj3_w.data.tolist(),
        "WC": layer.projC_w.data.tolist(), "Wo": layer.out_proj_w.data.tolist(),
        "A": [[-math.exp(a) for a in row] for row in layer.a_log.data.tolist()],
        "theta": layer.theta.data.tolist(),
    }


def scalar_forward(model, embeddings, alphas=None, gates=None, exact=False):
    """Per-position, per-element recurrence over one ``[L][H]`` sequence.

    Returns (final-normed hidden rows, final per-layer states as nested lists).
    """
    layers = [layer_lists(l) for l in model.layers]
    L = len(embeddings)
    h = [list(row) for row in embeddings]
    finals = []
    for P in layers:
        D, N = len(P["A"]), len(P["A"][0])
        S = [[0.0] * N for _ in range(D)]
        out = []
        for t in range(L):
            u = rmsnorm(h[t])
            if gates is not None and gates[t] is not None:
                u = [a * gates[t] for a in u]
            lin = [a + b for a, b in zip(vecmat(u, P["W1"]), P["b1"])]
            alpha = None if alphas is None else alphas[t]
            if alpha is None:
                delta = [softplus(v) for v in lin]
            elif exact:
                delta = [softplus(v) * alpha for v in lin]
            else:
                delta = [softplus(v * alpha + th) for v, th in zip(lin, P["theta"])]
            B, x, C = vecmat(u, P["W2"]), vecmat(u, P["W3"]), vecmat(u, P["WC"])
            y = []
            for d in range(D):
                acc = 0.0
                for n in range(N):
                    S[d][n] = math.exp(delta[d] * P["A"][d][n]) * S[d][n] + delta[d] * B[n] * x[d]
                    acc += S[d][n] * C[n]
                y.append(acc)
            out.append([a + b for a, b in zip(h[t], vecmat(y, P["Wo"]))])
        h = out
        finals.append(S)
    return [rmsnorm(row) for row in h], finals
