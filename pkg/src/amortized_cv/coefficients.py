"""Providers of control variate coefficient blocks ``[batch, P, K*D]``.

A provider has a flat ``params`` vector, ``forward(contexts) -> (block,
cache)`` and ``backward(cache, upstream) -> grad`` where ``upstream`` is the
derivative of a scalar objective with respect to the block.
"""
from __future__ import annotations

import numpy as np


class StaleCacheError(RuntimeError):
    pass


class InsufficientSamplesError(ValueError):
    pass


class _Provider:
    def __init__(self, params, out_shape):
        self._params = np.asarray(params, dtype=float)
        self.out_shape = tuple(int(s) for s in out_shape)
        self._version = 0

    @property
    def params(self):
        return self._params

    @params.setter
    def params(self, value):
        value = np.asarray(value, dtype=float)
        if value.shape != self._params.shape:
            raise ValueError(f"expected {self._params.shape} parameters, got {value.shape}")
        self._params = value.copy()
        self._version += 1

    def _check_cache(self, cache):
        if cache.get("owner") is not self or cache.get("version") != self._version:
            raise StaleCacheError("cache does not belong to the current parameters")

    def coefficients(self, contexts):
        return self.forward(contexts)[0]


class RecognitionNet(_Provider):
    """ReLU MLP mapping a context point to a ``[P, K*D]`` coefficient block.

    Weights are stored ``(fan_in, fan_out)`` so a layer computes ``h @ W + b``.
    All weights and biases live in one flat vector; ``weights`` and
    ``biases`` return views into it.
    """

    def __init__(self, layer_sizes, out_shape, params=None):
        self.layer_sizes = [int(s) for s in layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"invalid layer sizes {layer_sizes}")
        if int(np.prod(out_shape)) != self.layer_sizes[-1]:
            raise ValueError(f"output layer {self.layer_sizes[-1]} cannot hold {out_shape}")
        self._slices = []
        pos = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(pos, pos + fan_in * fan_out)
            pos += fan_in * fan_out
            b = slice(pos, pos + fan_out)
            pos += fan_out
            self._slices.append((w, b, (fan_in, fan_out)))
        if params is None:
            params = np.zeros(pos)
        super().__init__(params, out_shape)
        if self._params.shape != (pos,):
            raise ValueError(f"net needs {pos} parameters, got {self._params.shape}")

    @property
    def num_layers(self):
        return len(self._slices)

    @property
    def weights(self):
        return [self._params[w].reshape(shape) for w, _, shape in self._slices]

    @property
    def biases(self):
        return [self._params[b] for _, b, _ in self._slices]

    def forward(self, contexts):
        x = np.asarray(contexts, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"contexts must be [batch, {self.layer_sizes[0]}], got {x.shape}")
        acts = [x]
        pre = []
        h = x
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W + b
            pre.append(a)
            h = a if k == self.num_layers - 1 else np.maximum(a, 0.0)
            acts.append(h)
        cache = {"owner": self, "version": self._version, "acts": acts, "pre": pre}
        return h.reshape((x.shape[0],) + self.out_shape), cache

    def backward(self, cache, upstream):
        self._check_cache(cache)
        acts, pre = cache["acts"], cache["pre"]
        batch = acts[0].shape[0]
        delta = np.asarray(upstream, dtype=float).reshape(batch, self.layer_sizes[-1])
        grad = np.zeros_like(self._params)
        weights = self.weights
        for k in range(self.num_layers - 1, -1, -1):
            w_sl, b_sl, _ = self._slices[k]
            grad[w_sl] = (acts[k].T @ delta).ravel()
            grad[b_sl] = delta.sum(axis=0)
            if k > 0:
                # ReLU'(0) := 0
                delta = (delta @ weights[k].T) * (pre[k - 1] > 0.0)
        return grad


def xavier_init(layer_sizes, seed, out_shape=None):
    """Glorot-uniform weights on ``+-sqrt(6 / (fan_in + fan_out))``, zero biases."""
    rng = np.random.default_rng(seed)
    if out_shape is None:
        out_shape = (layer_sizes[-1],)
    net = RecognitionNet(layer_sizes, out_shape)
    params = np.zeros_like(net.params)
    for w_sl, _, (fan_in, fan_out) in net._slices:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[w_sl] = rng.uniform(-limit, limit, size=fan_in * fan_out)
    net.params = params
    return net


def net_forward(net, contexts):
    return net.forward(contexts)


def net_backward(net, cache, upstream):
    return net.backward(cache, upstream)


class ContextFreeCoefficient(_Provider):
    """A single optimizable block broadcast to every datum of a batch."""

    def __init__(self, out_shape, params=None):
        if params is None:
            params = np.zeros(int(np.prod(out_shape)))
        super().__init__(params, out_shape)

    @property
    def c_global(self):
        return self._params.reshape(self.out_shape)

    def forward(self, contexts):
        batch = np.asarray(contexts).shape[0]
        block = np.broadcast_to(self.c_global, (batch,) + self.out_shape).copy()
        return block, {"owner": self, "version": self._version}

    def backward(self, cache, upstream):
        self._check_cache(cache)
        return np.asarray(upstream, dtype=float).sum(axis=0).ravel()


def empirical_optimal_coefficient(grad_samples, basis_samples, ridge=1e-8):
    """Least-squares control variate coefficients from replicate draws.

    Args:
      grad_samples: ``[R, P]`` gradient replicates for one datum.
      basis_samples: ``[R, F]`` basis features for the same draws.
      ridge: added to the basis covariance diagonal.

    Returns:
      ``[P, F]`` array whose row ``i`` is ``(Cov[w] + ridge I)^-1 Cov[w, g_i]``.
    """
    g = np.asarray(grad_samples, dtype=float)
    w = np.asarray(basis_samples, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if w.ndim == 1:
        w = w[:, None]
    if g.shape[0] < 2 or w.shape[0] != g.shape[0]:
        raise InsufficientSamplesError(
            f"need >= 2 paired replicates, got {g.shape[0]} and {w.shape[0]}")
    gc = g - g.mean(axis=0)
    wc = w - w.mean(axis=0)
    n = g.shape[0] - 1
    cov_ww = wc.T @ wc / n + ridge * np.eye(w.shape[1])
    cov_wg = wc.T @ gc / n
    return np.linalg.solve(cov_ww, cov_wg).T


# -- checkpoint text format ---------------------------------------------------
#
#   recognition-net 1
#   layers <n0> <n1> ... <nk>
#   output <dim> <dim> ...
#   W<k> <fan_in> <fan_out>
#   <fan_in * fan_out floats, row-major, one per line>
#   b<k> <fan_out>
#   <fan_out floats>
#   ...


def save_net(net, path):
    lines = ["recognition-net 1",
             "layers " + " ".join(str(s) for s in net.layer_sizes),
             "output " + " ".join(str(s) for s in net.out_shape)]
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W{k} {W.shape[0]} {W.shape[1]}")
        lines.extend(repr(float(v)) for v in W.ravel())
        lines.append(f"b{k} {b.size}")
        lines.extend(repr(float(v)) for v in b)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_net(path):
    with open(path) as fh:
        tokens = fh.read().split("\n")
    it = iter(t for t in tokens if t.strip())
    header = next(it).split()
    if header != ["recognition-net", "1"]:
        raise ValueError(f"{path}: not a recognition-net v1 checkpoint")
    sizes = [int(s) for s in next(it).split()[1:]]
    out_shape = tuple(int(s) for s in next(it).split()[1:])
    net = RecognitionNet(sizes, out_shape)
    params = []
    for k in range(net.num_layers):
        tag, fan_in, fan_out = next(it).split()
        if tag != f"W{k}" or (int(fan_in), int(fan_out)) != net._slices[k][2]:
            raise ValueError(f"{path}: bad weight header {tag}")
        params.extend(float(next(it)) for _ in range(int(fan_in) * int(fan_out)))
        tag, size = next(it).split()
        if tag != f"b{k}" or int(size) != net._slices[k][2][1]:
            raise ValueError(f"{path}: bad bias header {tag}")
        params.extend(float(next(it)) for _ in range(int(size)))
    net.params = np.array(params)
    return net
