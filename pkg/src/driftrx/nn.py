"""Small feedforward networks trained with plain SGD.

Networks are ReLU MLPs whose output layer is split into one or more softmax
heads.  Everything runs in float64 so finite-difference checks stay tight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_HIDDEN = 64
DEFAULT_LR = 5e-3
DEFAULT_BATCH = 64
PROB_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class Mlp:
    """Parameters of a ReLU MLP with ``n_heads`` softmax heads of ``n_classes``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    n_heads: int = 1
    n_classes: int = 2

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, nonempty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")
        if self.weights[-1].shape[1] != self.n_heads * self.n_classes:
            raise ValueError("output layer width must equal n_heads * n_classes")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.n_heads, self.n_classes)

    def flat(self) -> np.ndarray:
        """All parameters as one vector, layer by layer (weights row-major, then bias)."""
        return np.concatenate([a.ravel() for w, b in zip(self.weights, self.biases) for a in (w, b)])

    def to_bytes(self) -> bytes:
        return self.flat().tobytes()


@dataclass
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int = 2

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim == 1:
            labels = labels[:, None]
        self.labels = labels
        if len(self.inputs) < 1:
            raise ValueError("labeled set is empty")
        if len(self.labels) != len(self.inputs):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")


def init_mlp(sizes, n_heads: int = 1, n_classes: int = 2, rng=None, init: str = "he") -> Mlp:
    """Build an MLP with layer widths ``sizes`` (input first, hidden after).

    The output layer of width ``n_heads * n_classes`` is appended automatically.
    ``init="zeros"`` gives an all-zero network whose outputs are uniform.
    """
    dims = list(sizes) + [n_heads * n_classes]
    rng = np.random.default_rng(rng)
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        if init == "zeros":
            w = np.zeros((d_in, d_out))
        elif init == "he":
            w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        weights.append(w)
        biases.append(np.zeros(d_out))
    return Mlp(weights, biases, n_heads, n_classes)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _logits(params: Mlp, x: np.ndarray):
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def predict_proba(params: Mlp, x) -> np.ndarray:
    """Batch forward pass; returns shape (n, n_heads, n_classes)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.n_inputs:
        raise ValueError(f"input dim {x.shape[1]} != network input dim {params.n_inputs}")
    z = _logits(params, x)[-1]
    return _softmax(z.reshape(len(x), params.n_heads, params.n_classes))


def forward(params: Mlp, x) -> np.ndarray:
    """Probability output for a single input vector (or a batch).

    Single-head networks drop the head axis, so a vector input yields a plain
    probability vector.
    """
    x = np.asarray(x, dtype=float)
    p = predict_proba(params, x)
    if params.n_heads == 1:
        p = p[:, 0, :]
    return p[0] if x.ndim == 1 else p


def loss_and_grads(params: Mlp, x: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy (summed over heads) and its gradients.

    Returns ``(loss, grad_w, grad_b)``; the loss uses the log-sum-exp form.
    """
    n = len(x)
    labels = labels.reshape(n, params.n_heads)
    acts = _logits(params, x)
    z = acts[-1].reshape(n, params.n_heads, params.n_classes)
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
    picked = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
    loss = float(np.mean(np.sum(lse - picked, axis=1)))

    delta = _softmax(z)
    np.put_along_axis(delta, labels[..., None],
                      np.take_along_axis(delta, labels[..., None], axis=-1) - 1.0, axis=-1)
    delta = delta.reshape(n, -1) / n

    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        grad_w[i] = acts[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ params.weights[i].T) * (acts[i] > 0)
    return loss, grad_w, grad_b


def dataset_loss(params: Mlp, data: LabeledSet) -> float:
    return loss_and_grads(params, data.inputs, data.labels)[0]


def train(params: Mlp, data: LabeledSet, epochs: int = 50, lr: float = DEFAULT_LR,
          batch_size: int = DEFAULT_BATCH, seed=0) -> Mlp:
    """Mini-batch SGD on the cross-entropy loss; returns a new parameter set.

    The shuffle order comes from ``seed`` only, so results are bit-reproducible.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    if data.labels.shape[1] != params.n_heads:
        raise ValueError(f"labels carry {data.labels.shape[1]} heads, network has {params.n_heads}")
    out = params.copy()
    if lr == 0:
        return out
    rng = np.random.default_rng(seed)
    x, y = data.inputs, data.labels
    n = len(x)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, gw, gb = loss_and_grads(out, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss} at epoch {epoch}, batch starting {start} (lr={lr})")
            for w, b, dw, db in zip(out.weights, out.biases, gw, gb):
                w -= lr * dw
                b -= lr * db
    return out


def train_many(params_list, data_list, epochs: int = 50, lr: float = DEFAULT_LR,
               batch_size: int = DEFAULT_BATCH, seeds=None) -> list:
    """Train several same-shaped single-head networks side by side.

    Each network sees only its own data, in the shuffle order of its own
    seed, exactly as :func:`train` would; the stacking only batches the
    arithmetic.  All data sets must have the same number of samples.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    if not params_list:
        return []
    seeds = seeds if seeds is not None else [0] * len(params_list)
    sizes = params_list[0].sizes
    n = len(data_list[0].inputs)
    for p, d in zip(params_list, data_list):
        if p.sizes != sizes or p.n_heads != 1 or len(d.inputs) != n:
            raise ValueError("train_many needs single-head networks of equal shape and equal-size data")
    if len(params_list) == 1 or lr == 0:
        return [train(p, d, epochs, lr, batch_size, s) for p, d, s in zip(params_list, data_list, seeds)]
    G = len(params_list)
    Ws = [np.stack([p.weights[i] for p in params_list]) for i in range(len(sizes) - 1)]
    bs = [np.stack([p.biases[i] for p in params_list])[:, None, :] for i in range(len(sizes) - 1)]
    X = np.stack([d.inputs for d in data_list])
    Y = np.stack([d.labels[:, 0] for d in data_list])
    rngs = [np.random.default_rng(s) for s in seeds]
    rows = np.arange(G)[:, None]
    last = len(Ws) - 1
    for epoch in range(epochs):
        orders = np.stack([r.permutation(n) for r in rngs])
        for start in range(0, n, batch_size):
            idx = orders[:, start:start + batch_size]
            m = idx.shape[1]
            acts = [X[rows, idx]]
            h = acts[0]
            for i, (w, b) in enumerate(zip(Ws, bs)):
                h = np.matmul(h, w) + b
                if i < last:
                    h = np.maximum(h, 0.0)
                acts.append(h)
            z = h
            delta = _softmax(z)
            y = Y[rows, idx]
            picked = np.take_along_axis(z, y[..., None], axis=-1)[..., 0]
            zmax = z.max(axis=-1)
            loss = np.log(np.exp(z - zmax[..., None]).sum(axis=-1)) + zmax - picked
            if not np.isfinite(loss).all():
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start} (lr={lr})")
            np.put_along_axis(delta, y[..., None], np.take_along_axis(delta, y[..., None], axis=-1) - 1.0, axis=-1)
            delta /= m
            for i in range(last, -1, -1):
                gw = np.matmul(acts[i].transpose(0, 2, 1), delta)
                gb = delta.sum(axis=1, keepdims=True)
                if i:
                    delta = np.matmul(delta, Ws[i].transpose(0, 2, 1)) * (acts[i] > 0)
                Ws[i] -= lr * gw
                bs[i] -= lr * gb
    out = []
    for g, p in enumerate(params_list):
        out.append(Mlp([w[g].copy() for w in Ws], [b[g, 0].copy() for b in bs], 1, p.n_classes))
    return out


def gradient_check(params: Mlp, data: LabeledSet, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences."""
    _, gw, gb = loss_and_grads(params, data.inputs, data.labels)
    analytic = np.concatenate([a.ravel() for w, b in zip(gw, gb) for a in (w, b)])
    probe = params.copy()
    tensors = [a for w, b in zip(probe.weights, probe.biases) for a in (w, b)]
    numeric = []
    for t in tensors:
        flat = t.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = dataset_loss(probe, data)
            flat[j] = orig - eps
            down = dataset_loss(probe, data)
            flat[j] = orig
            numeric.append((up - down) / (2 * eps))
    numeric = np.asarray(numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def save_mlp(params: Mlp, path) -> None:
    """Write a flat text snapshot: a sizes header line then one value per line."""
    header = " ".join(str(s) for s in params.sizes[:-1])
    with open(path, "w") as fh:
        fh.write(f"# sizes {header} heads {params.n_heads} classes {params.n_classes}\n")
        for v in params.flat():
            fh.write(f"{float(v)!r}\n")


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        tokens = fh.readline().split()
        values = np.array([float(line) for line in fh if line.strip()])
    if tokens[:2] != ["#", "sizes"]:
        raise ValueError(f"{path}: missing sizes header")
    hi = tokens.index("heads")
    sizes = [int(t) for t in tokens[2:hi]]
    n_heads, n_classes = int(tokens[hi + 1]), int(tokens[hi + 3])
    params = init_mlp(sizes, n_heads, n_classes, init="zeros")
    if values.size != params.n_params:
        raise ValueError(f"{path}: expected {params.n_params} values, found {values.size}")
    pos = 0
    for w, b in zip(params.weights, params.biases):
        for a in (w, b):
            a.reshape(-1)[:] = values[pos:pos + a.size]
            pos += a.size
    return params
