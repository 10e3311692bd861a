"""Three-layer graph convolutional regressor with Monte Carlo dropout.

Each pass computes::

    H1 = relu(P X W1 + b1)
    H2 = relu(P drop(H1) W2 + b2)
    Y  = P drop(H2) W3 + b3

where ``P`` is the normalized propagation matrix of the patch graph and
``drop`` is inverted dropout (active only in stochastic mode). Gradients
are derived by hand; the network is small enough that a tape is not worth
it, and the finite-difference tests pin every term.
"""

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .exceptions import NumericalError, ShapeError
from .raster_io import RasterGrid, ensure_dir, read_raster, write_raster
from .supervision import LossTerms, PatchTargets, TERMS, BalancerState, balanced_total, balancer_gradient

HIDDEN = 128
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass(eq=False)
class GcnParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @property
    def n_features(self):
        return self.W1.shape[0]

    @property
    def hidden(self):
        return self.W1.shape[1]

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**{name: np.asarray(d[name], dtype=np.float64) for name in PARAM_NAMES})

    def copy(self):
        return GcnParams(**{k: v.copy() for k, v in self.to_dict().items()})

    @classmethod
    def zeros_like(cls, other):
        return cls(**{k: np.zeros_like(v) for k, v in other.to_dict().items()})

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.to_dict().values())


def glorot_bound(fan_in, fan_out):
    return np.sqrt(6.0 / (fan_in + fan_out))


def init_params(feature_count, seed=0, hidden=HIDDEN):
    if feature_count < 1:
        raise ShapeError("feature_count must be >= 1")
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        b = glorot_bound(fan_in, fan_out)
        return rng.uniform(-b, b, size=(fan_in, fan_out))

    return GcnParams(
        W1=glorot(feature_count, hidden), b1=np.zeros(hidden),
        W2=glorot(hidden, hidden), b2=np.zeros(hidden),
        W3=glorot(hidden, 1), b3=np.zeros(1),
    )


@dataclass(frozen=True)
class DropoutConfig:
    rate: float = 0.2
    passes: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")


def _propagate(P, T):
    """Apply the (n, n) sparse propagation matrix along axis 0 of T."""
    shape = T.shape
    return (P @ T.reshape(shape[0], -1)).reshape(shape)


def _masks(rng, n, passes, hidden, rate):
    """Inverted-dropout multipliers (0 or 1/keep) for both hidden layers."""
    if rate == 0.0:
        return None, None
    keep = 1.0 - rate
    m = (rng.random((2, n, passes, hidden), dtype=np.float32) < keep) * (1.0 / keep)
    return m[0], m[1]


def _forward(params, P, X, n_passes, masks):
    """Forward for one patch. Returns predictions (n, passes) and a cache."""
    n, h = X.shape[0], params.hidden
    AX = P @ X
    Z1 = AX @ params.W1 + params.b1
    H1 = np.maximum(Z1, 0.0)
    m1, m2 = masks
    if m1 is None:
        D1 = np.repeat(H1[:, None, :], n_passes, axis=1)
    else:
        D1 = H1[:, None, :] * m1
    AD1 = _propagate(P, D1)
    Z2 = (AD1.reshape(-1, h) @ params.W2).reshape(n, n_passes, h)
    Z2 += params.b2
    gate2 = (Z2 > 0).astype(np.float64)
    if m2 is not None:
        gate2 *= m2
    D2 = Z2
    D2 *= gate2  # relu then dropout, in place
    AD2 = _propagate(P, D2)
    Y = (AD2.reshape(-1, h) @ params.W3).reshape(n, n_passes) + params.b3[0]
    return Y, (AX, Z1, AD1, gate2, AD2, m1)


def _backward(params, PT, dY, cache):
    AX, Z1, AD1, gate2, AD2, m1 = cache
    n, n_passes = dY.shape
    h = params.hidden
    g = {}
    g["W3"] = AD2.reshape(-1, h).T @ dY.reshape(-1, 1)
    g["b3"] = np.array([dY.sum()])
    dZ2 = _propagate(PT, dY[:, :, None] * params.W3[:, 0])
    dZ2 *= gate2
    g["W2"] = AD1.reshape(-1, h).T @ dZ2.reshape(-1, h)
    g["b2"] = dZ2.sum(axis=(0, 1))
    dD1 = _propagate(PT, (dZ2.reshape(-1, h) @ params.W2.T).reshape(n, n_passes, h))
    if m1 is not None:
        dD1 *= m1
    dZ1 = dD1.sum(axis=1)
    dZ1 *= Z1 > 0
    g["W1"] = AX.T @ dZ1
    g["b1"] = dZ1.sum(axis=0)
    return g


def _check_features(params, graph, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != graph.node_count or X.shape[1] != params.n_features:
        raise ShapeError(
            f"features of shape {X.shape} do not match graph with {graph.node_count} nodes "
            f"and model with {params.n_features} inputs")
    return X


def predict_passes(params, graph, X, dropout=None, stochastic=True, rng=None, P=None):
    """All pass predictions for one patch as an (N, n) array."""
    X = _check_features(params, graph, X)
    P = graph.adjacency() if P is None else P
    dropout = dropout or DropoutConfig(rate=0.0, passes=1)
    if not stochastic:
        Y, _ = _forward(params, P, X, 1, (None, None))
        return Y.T
    rng = np.random.default_rng(dropout.seed) if rng is None else rng
    masks = _masks(rng, X.shape[0], dropout.passes, params.hidden, dropout.rate)
    Y, _ = _forward(params, P, X, dropout.passes, masks)
    return Y.T


def forward(params, graph, X, dropout=None, stochastic=True, rng=None):
    """Per-node predictions, one array per pass (N if stochastic, else 1)."""
    return list(predict_passes(params, graph, X, dropout, stochastic, rng))


@dataclass(frozen=True, eq=False)
class Gradients:
    params: GcnParams
    s: np.ndarray

    def to_dict(self):
        d = self.params.to_dict()
        d["s"] = self.s
        return d


def _as_batch(X, targets):
    X = np.asarray(X, dtype=np.float64) if not isinstance(X, (list, tuple)) else X
    if isinstance(targets, PatchTargets):
        return [X], [targets]
    return list(X), list(targets)


def loss_and_gradients(params, graph, X, targets, dropout, balancer, rngs=None, P=None, want_grad=True):
    """Balanced hybrid loss of a batch of patches and its exact gradient.

    ``X``/``targets`` are one patch (``(n, F)`` array and ``PatchTargets``)
    or equal-length sequences of them; a batch is treated as the disjoint
    union of its patch graphs, so the loss normalizers count cells across
    the whole batch. Supervised terms use the mean over the N passes; the
    variance term uses the same passes, and the gradient flows through all
    of them with the dropout masks of the forward pass.

    Returns ``(LossTerms, total, Gradients or None)``.
    """
    Xs, Ts = _as_batch(X, targets)
    if len(Xs) != len(Ts):
        raise ShapeError("features and targets batches differ in length")
    P = graph.adjacency() if P is None else P
    PT = P.T.tocsr()
    if rngs is None:
        rngs = [np.random.default_rng([dropout.seed, i]) for i in range(len(Xs))]

    counts = np.sum([t.counts() for t in Ts], axis=0)
    norm = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    active = np.array(balancer.active)
    a = np.where(active, balancer.weights, 0.0)
    N = dropout.passes

    sums = np.zeros(3)
    grad = {k: 0.0 for k in PARAM_NAMES}
    for Xp, t, rng in zip(Xs, Ts, rngs):
        Xp = _check_features(params, graph, Xp)
        masks = _masks(rng, Xp.shape[0], N, params.hidden, dropout.rate)
        Y, cache = _forward(params, P, Xp, N, masks)
        m = Y[:, 0] + (Y - Y[:, :1]).mean(axis=1)  # exact when passes agree
        dev = Y - m[:, None]
        e_r = np.where(t.radar_sel, m - t.radar, 0.0)
        e_b = np.where(t.ref_sel, m - t.ref, 0.0)
        var = np.where(t.unc_sel, (dev ** 2).mean(axis=1), 0.0)
        sums += [np.sum(t.radar_weight * e_r ** 2), np.sum(e_b ** 2), np.sum(var)]
        if not want_grad:
            continue
        dm = 2.0 * (a[0] * norm[0] * t.radar_weight * e_r + a[1] * norm[1] * e_b)
        dY = (dm[:, None] + 2.0 * a[2] * norm[2] * np.where(t.unc_sel[:, None], dev, 0.0)) / N
        for k, v in _backward(params, PT, dY, cache).items():
            grad[k] = grad[k] + v

    L = sums * norm
    for name, value in zip(TERMS, L):
        if not np.isfinite(value):
            raise NumericalError(f"loss term '{name}' is not finite", term=name)
    terms = LossTerms(*(float(v) for v in L), *(int(c) for c in counts))
    total = balanced_total(terms, balancer)
    if not want_grad:
        return terms, total, None
    grads = Gradients(GcnParams.from_dict(grad), balancer_gradient(terms, balancer))
    return terms, total, grads


@dataclass(eq=False)
class AdamState:
    step: int = 0
    m: dict = None
    v: dict = None
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def copy(self):
        return AdamState(self.step,
                         None if self.m is None else {k: x.copy() for k, x in self.m.items()},
                         None if self.v is None else {k: x.copy() for k, x in self.v.items()},
                         self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params, grads, state):
    """Bias-corrected Adam on a dict of arrays; returns ``(params, state)``."""
    if state.m is None:
        m = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        v2 = {k: np.zeros_like(x) for k, x in m.items()}
    else:
        m, v2 = state.m, state.v
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter has {np.shape(p)}")
        new_m[k] = b1 * m[k] + (1.0 - b1) * g
        new_v[k] = b2 * v2[k] + (1.0 - b2) * g * g
        m_hat = new_m[k] / (1.0 - b1 ** t)
        v_hat = new_v[k] / (1.0 - b2 ** t)
        new_params[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(t, new_m, new_v, state.lr, b1, b2, state.eps)


def _as_2d(a):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(1, -1) if a.ndim == 1 else a


def save_checkpoint(directory, params, balancer, extra=None):
    """Tensors as raster files plus ``params.manifest.json``."""
    directory = ensure_dir(directory)
    tensors = dict(params.to_dict(), s=balancer.s)
    shapes = {}
    for name, arr in tensors.items():
        write_raster(RasterGrid(_as_2d(arr)), directory / f"{name}.npy")
        shapes[name] = list(np.shape(arr))
    manifest = {
        "tensors": {name: f"{name}.npy" for name in tensors},
        "shapes": shapes,
        "n_features": params.n_features,
        "hidden": params.hidden,
        "balancer": {"s": balancer.s.tolist(), "active": list(balancer.active)},
    }
    manifest.update(extra or {})
    (directory / "params.manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory):
    """Returns ``(GcnParams, BalancerState, manifest)``."""
    directory = Path(directory)
    manifest = json.loads((directory / "params.manifest.json").read_text())
    tensors = {name: read_raster(directory / fname).values.reshape(manifest["shapes"][name])
               for name, fname in manifest["tensors"].items()}
    params = GcnParams.from_dict(tensors)
    bal = manifest["balancer"]
    return params, BalancerState(tensors["s"], bal["active"]), manifest
