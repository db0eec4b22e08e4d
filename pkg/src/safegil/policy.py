"""Small tanh MLP policies trained by behavior cloning.

The network maps engineered state features to a scalar turn rate and
squashes its output with ``omega_max * tanh`` so predictions always respect
the control bound. Training is plain minibatch Adam on squared error.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

FEATURE_KINDS = ("unicycle", "taxi", "integrator1d")


def features(kind: str, X) -> np.ndarray:
    """Raw feature matrix for a batch of states."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if kind == "integrator1d":
        return X[:, :1].copy()
    if kind == "unicycle":
        return np.column_stack([X[:, 0], X[:, 1], np.cos(X[:, 2]), np.sin(X[:, 2])])
    if kind == "taxi":
        return np.column_stack([X[:, 0], X[:, 1] / 200.0, np.cos(X[:, 2]), np.sin(X[:, 2])])
    raise ValueError(f"unknown feature kind {kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple = (64, 64)
    epochs: int = 500
    batch: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.epochs < 1 or self.batch < 1 or self.lr <= 0:
            raise ValueError("epochs, batch and lr must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class MlpPolicy:
    kind: str
    out_scale: float
    shift: np.ndarray
    scale: np.ndarray
    weights: list
    biases: list
    loss_curve: list = field(default_factory=list)

    @classmethod
    def init(cls, kind: str, out_scale: float, shift, scale, hidden=(64, 64), rng=None) -> "MlpPolicy":
        """Glorot-uniform weights, zero biases."""
        rng = rng or np.random.default_rng(0)
        sizes = [len(shift), *hidden, 1]
        W, b = [], []
        for a, c in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (a + c))
            W.append(rng.uniform(-lim, lim, size=(a, c)))
            b.append(np.zeros(c))
        return cls(kind, float(out_scale), np.asarray(shift, float), np.asarray(scale, float), W, b)

    # --- evaluation ------------------------------------------------------------

    def _inputs(self, X):
        return (features(self.kind, X) - self.shift) / self.scale

    def _forward(self, Z):
        acts = [Z]
        h = Z
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ W + b)
            acts.append(h)
        t = np.tanh(h @ self.weights[-1] + self.biases[-1])
        return acts, t

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite state passed to the policy")
        _, t = self._forward(self._inputs(X))
        return self.out_scale * t[:, 0]

    def __call__(self, x) -> float:
        return float(self.predict(np.asarray(x, dtype=float)[None, :])[0])

    # --- loss and gradients ------------------------------------------------------

    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def loss(self, X, y) -> float:
        return float(np.mean((self.predict(X) - np.asarray(y, float)) ** 2))

    def loss_and_grads(self, Z, y):
        """Mean squared error and its gradients on normalized inputs ``Z``."""
        acts, t = self._forward(Z)
        err = self.out_scale * t[:, 0] - y
        n = len(y)
        delta = (2.0 / n) * err[:, None] * self.out_scale * (1.0 - t ** 2)
        grads = []
        for i in range(len(self.weights) - 1, -1, -1):
            gW = acts[i].T @ delta
            gb = delta.sum(axis=0)
            grads.append(gb)
            grads.append(gW)
            if i:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        grads.reverse()
        return float(np.mean(err ** 2)), grads

    # --- serialization --------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "out_scale": self.out_scale,
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "layers": [{"W": W.tolist(), "b": b.tolist(), "activation": "tanh"}
                       for W, b in zip(self.weights, self.biases)],
            "loss_curve": [float(v) for v in self.loss_curve],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpPolicy":
        W = [np.asarray(layer["W"], float) for layer in d["layers"]]
        b = [np.asarray(layer["b"], float) for layer in d["layers"]]
        for w0, w1 in zip(W[:-1], W[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("layer shapes do not chain")
        return cls(d["kind"], float(d["out_scale"]), np.asarray(d["shift"], float),
                   np.asarray(d["scale"], float), W, b, list(d.get("loss_curve", [])))


def _flatten(pol: MlpPolicy) -> np.ndarray:
    """Move all parameters into one buffer; the layer arrays become views of it."""
    flat = np.concatenate([p.reshape(-1) for p in pol.params()])
    pos = 0
    for i, (W, b) in enumerate(zip(pol.weights, pol.biases)):
        pol.weights[i] = flat[pos:pos + W.size].reshape(W.shape)
        pos += W.size
        pol.biases[i] = flat[pos:pos + b.size]
        pos += b.size
    return flat


def train_policy(states, labels, kind: str, out_scale: float, cfg: TrainConfig = TrainConfig()) -> MlpPolicy:
    """Fit an MLP to ``(states, labels)`` with minibatch Adam."""
    states = np.asarray(states, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(y) == 0:
        raise ValueError("cannot train on an empty dataset")
    F = features(kind, states)
    shift = F.mean(axis=0)
    scale = F.std(axis=0)
    scale[scale < 1e-6] = 1.0
    rng = np.random.default_rng(cfg.seed)
    pol = MlpPolicy.init(kind, out_scale, shift, scale, cfg.hidden, rng)
    Z = (F - shift) / scale
    flat = _flatten(pol)
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    g = np.empty_like(flat)
    tmp = np.empty_like(flat)
    step = 0
    n = len(y)
    curve = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch):
            idx = order[s:s + cfg.batch]
            loss, grads = pol.loss_and_grads(Z[idx], y[idx])
            np.concatenate([gr.reshape(-1) for gr in grads], out=g)
            total += loss * len(idx)
            step += 1
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            np.multiply(g, g, out=g)
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g
            np.sqrt(v * (1.0 / (1.0 - cfg.beta2 ** step)), out=tmp)
            tmp += cfg.eps
            np.divide(m, tmp, out=tmp)
            tmp *= cfg.lr / (1.0 - cfg.beta1 ** step)
            flat -= tmp
        if not np.isfinite(total):
            raise FloatingPointError(f"training loss is not finite at epoch {len(curve)}")
        curve.append(total / n)
    pol.loss_curve = curve
    log.debug("trained on %d samples, loss %.4g -> %.4g", n, curve[0], curve[-1])
    return pol


def train_on_dataset(ds, env=None, cfg: TrainConfig = TrainConfig()) -> MlpPolicy:
    """Train on expert labels; without ``env`` the model comes from the dataset provenance."""
    if env is not None:
        model = env.model
    else:
        from .envmodels import model_from_dict

        if "model" not in ds.provenance:
            raise ValueError("dataset provenance does not name a model; pass the environment")
        model = model_from_dict(ds.provenance["model"])
    return train_policy(ds.states, ds.labels, model.name, model.omega_max, cfg)


def grad_check(policy: MlpPolicy, X, y, n_params: int = 100, h: float = 1e-6, seed: int = 0,
               grad_fn=None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Checks ``n_params`` randomly chosen scalar parameters. ``grad_fn`` can
    replace ``policy.loss_and_grads`` (used to confirm the check catches bugs).
    """
    Z = policy._inputs(X)
    y = np.asarray(y, float)
    _, grads = (grad_fn or policy.loss_and_grads)(Z, y)
    params = policy.params()
    sizes = np.array([p.size for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for f in flat:
        k = int(np.searchsorted(bounds, f, side="right"))
        j = int(f - (bounds[k - 1] if k else 0))
        p = params[k].reshape(-1)
        old = p[j]
        p[j] = old + h
        up, _ = policy.loss_and_grads(Z, y)
        p[j] = old - h
        down, _ = policy.loss_and_grads(Z, y)
        p[j] = old
        num = (up - down) / (2 * h)
        ana = float(grads[k].reshape(-1)[j])
        denom = max(abs(ana), abs(num))
        rel = 0.0 if denom < 1e-7 and abs(ana - num) < 1e-10 else abs(ana - num) / max(denom, 1e-7)
        worst = max(worst, rel)
    return worst


def training_summary(policy: MlpPolicy, cfg: TrainConfig) -> dict:
    return {"config": asdict(cfg), "initial_loss": policy.loss_curve[0], "final_loss": policy.loss_curve[-1]}
