"""Pure Python / numpy implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` mirrors them loop for loop.
"""
import numpy as np


def composite_forward(sigma, delta, rgb, t, background, t_far):
    """Alpha-composite samples along each ray.

    sigma, delta, t: (B, S); rgb: (B, S, 3); background: (3,).
    Returns color (B, 3), depth (B,), final transmittance (B,), weights (B, S).
    """
    tau = sigma * delta
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))
    weights = trans * -np.expm1(-tau)
    t_final = np.exp(-cum[:, -1])
    color = np.einsum("bs,bsc->bc", weights, rgb) + t_final[:, None] * background
    depth = np.einsum("bs,bs->b", weights, t) + t_final * t_far
    return color, depth, t_final, weights


def composite_backward(sigma, delta, rgb, weights, t_final, background, grad_color):
    """Gradient of ``sum(grad_color * color)`` with respect to sigma and rgb.

    Uses d color / d tau_k = T_{k+1} c_k - (sum_{i>k} w_i c_i + T_N bg).
    """
    tau = sigma * delta
    trans_next = np.exp(-np.cumsum(tau, axis=1))
    wc = weights[..., None] * rgb
    # suffix sums excluding k, plus background term
    tail = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
    tail += (t_final[:, None] * background)[:, None, :]
    dtau = np.einsum("bsc,bc->bs", trans_next[..., None] * rgb - tail, grad_color)
    grad_sigma = dtau * delta
    grad_rgb = weights[..., None] * grad_color[:, None, :]
    return grad_sigma, grad_rgb


def fh_merge(a, b, w, n, k, min_size):
    """Felzenszwalb-Huttenlocher merging over edges already sorted by weight.

    a, b: int64 endpoints; w: float64 weights; returns int64 root labels (not dense).
    """
    parent = list(range(n))
    size = [1] * n
    thresh = [float(k)] * n
    a = a.tolist()
    b = b.tolist()
    w = w.tolist()

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(x, y):
        if size[x] < size[y]:
            x, y = y, x
        parent[y] = x
        size[x] += size[y]
        return x

    for i in range(len(a)):
        ra, rb = find(a[i]), find(b[i])
        if ra != rb and w[i] <= thresh[ra] and w[i] <= thresh[rb]:
            r = union(ra, rb)
            thresh[r] = w[i] + k / size[r]
    for i in range(len(a)):
        ra, rb = find(a[i]), find(b[i])
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            union(ra, rb)
    return np.array([find(x) for x in range(n)], dtype=np.int64)
