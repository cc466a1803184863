"""Per-cell MLP surrogate: seven cell features in, RSRP (dBm) out.

Two leaky-ReLU hidden layers, manual backpropagation, AdamW with a
reduce-on-plateau schedule, masked MSE on normalised targets.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureStack
from .optim import AdamW, ReduceLROnPlateau
from .radiomap import RadioMap

FEATURE_NAMES = ("channel", "distance", "elevation", "azimuth", "height", "landuse", "road")


class SurrogateError(ValueError):
    pass


@dataclass
class SurrogateConfig:
    hidden: tuple = (64, 64)
    slope: float = 0.01
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 5e-2
    batch_size: int = 128
    val_fraction: float = 0.2
    factor: float = 0.7
    patience: int = 10
    seed: int = 0


def stack_matrix(stack: FeatureStack) -> np.ndarray:
    """(H*W, 7) feature matrix in FEATURE_NAMES order."""
    cols = [stack.L, stack.D, stack.Theta, stack.Phi, stack.height, stack.landuse, stack.road]
    return np.stack([np.asarray(c, dtype=float).ravel() for c in cols], axis=1)


def cell_samples(stack: FeatureStack, truth: RadioMap, mask=None):
    """Features and targets of the truth-valid cells (optionally restricted by ``mask``)."""
    use = truth.valid if mask is None else (truth.valid & mask)
    flat = np.flatnonzero(use.ravel())
    return stack_matrix(stack)[flat], truth.values.ravel()[flat], flat


def _leaky(z, slope):
    return np.where(z > 0, z, slope * z)


@dataclass
class SurrogateModel:
    weights: list
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    slope: float = 0.01
    history: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, n_inputs=7, hidden=(64, 64), slope=0.01, seed=0, x_mean=None, x_std=None, y_mean=0.0, y_std=1.0):
        rng = np.random.default_rng(seed)
        sizes = [n_inputs, *hidden, 1]
        weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
            weights.append(np.zeros(fan_out))
        x_mean = np.zeros(n_inputs) if x_mean is None else np.asarray(x_mean, float)
        x_std = np.ones(n_inputs) if x_std is None else np.asarray(x_std, float)
        return cls(weights, x_mean, x_std, float(y_mean), float(y_std), slope)

    def copy(self):
        return SurrogateModel([w.copy() for w in self.weights], self.x_mean.copy(), self.x_std.copy(),
                              self.y_mean, self.y_std, self.slope, dict(self.history))

    # normalised-space network

    def forward(self, xn):
        acts = [xn]
        pre = []
        h = xn
        n_layers = len(self.weights) // 2
        for k in range(n_layers):
            z = h @ self.weights[2 * k] + self.weights[2 * k + 1]
            pre.append(z)
            h = _leaky(z, self.slope) if k < n_layers - 1 else z
            acts.append(h)
        return h[:, 0], (acts, pre)

    def backward(self, cache, dout):
        acts, pre = cache
        grads = [None] * len(self.weights)
        delta = dout[:, None]
        n_layers = len(self.weights) // 2
        for k in reversed(range(n_layers)):
            grads[2 * k] = acts[k].T @ delta
            grads[2 * k + 1] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.weights[2 * k].T) * np.where(pre[k - 1] > 0, 1.0, self.slope)
        return grads

    def loss_and_grad(self, xn, yn):
        """Mean squared error on normalised targets and its parameter gradients."""
        out, cache = self.forward(xn)
        r = out - yn
        return float(np.mean(r * r)), self.backward(cache, 2.0 * r / r.size)

    # physical units

    def normalise(self, X):
        return (np.asarray(X, float) - self.x_mean) / self.x_std

    def predict(self, X) -> np.ndarray:
        out, _ = self.forward(self.normalise(X))
        return out * self.y_std + self.y_mean

    def predict_map(self, stack: FeatureStack) -> RadioMap:
        values = self.predict(stack_matrix(stack)).reshape(stack.L.shape)
        return RadioMap(values, np.ones(values.shape, dtype=bool), stack.transform)

    def to_json(self):
        return {
            "weights": [w.tolist() for w in self.weights], "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(), "y_mean": self.y_mean, "y_std": self.y_std,
            "slope": self.slope, "features": list(FEATURE_NAMES), "history": self.history,
        }

    @classmethod
    def from_json(cls, d):
        return cls([np.asarray(w, float) for w in d["weights"]], np.asarray(d["x_mean"]), np.asarray(d["x_std"]),
                    d["y_mean"], d["y_std"], d.get("slope", 0.01), d.get("history", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


def gradient_check(model: SurrogateModel, xn, yn, n_points=10, eps=1e-6, seed=0):
    """Relative errors of backprop vs central differences at random weight entries."""
    rng = np.random.default_rng(seed)
    _, grads = model.loss_and_grad(xn, yn)
    errors = []
    for _ in range(n_points):
        k = int(rng.integers(len(model.weights)))
        idx = tuple(int(rng.integers(s)) for s in model.weights[k].shape)
        orig = model.weights[k][idx]
        model.weights[k][idx] = orig + eps
        lp, _ = model.loss_and_grad(xn, yn)
        model.weights[k][idx] = orig - eps
        lm, _ = model.loss_and_grad(xn, yn)
        model.weights[k][idx] = orig
        num = (lp - lm) / (2 * eps)
        ana = grads[k][idx]
        errors.append(abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    return np.array(errors)


def _fit(model, X, y, Xv, yv, config: SurrogateConfig, rng):
    """Minibatch AdamW on normalised data; returns the best-by-validation snapshot."""
    xn, yn = model.normalise(X), (y - model.y_mean) / model.y_std
    xv, yvn = model.normalise(Xv), (yv - model.y_mean) / model.y_std
    opt = AdamW(config.lr, config.weight_decay)
    sched = ReduceLROnPlateau(opt, config.factor, config.patience)
    train_hist, val_hist, lr_hist = [], [], []
    best, best_model = np.inf, model.copy()
    for epoch in range(config.epochs):
        perm = rng.permutation(len(xn))
        for s in range(0, len(xn), config.batch_size):
            b = perm[s:s + config.batch_size]
            _, grads = model.loss_and_grad(xn[b], yn[b])
            model.weights = opt.step(model.weights, grads)
        tl = model.loss_and_grad(xn, yn)[0]
        vl = model.loss_and_grad(xv, yvn)[0]
        train_hist.append(tl)
        val_hist.append(vl)
        lr_hist.append(opt.lr)
        sched.step(vl)
        if vl < best:
            best, best_model = vl, model.copy()
    best_model.history = {"train_loss": train_hist, "val_loss": val_hist, "lr": lr_hist,
                          "best_val_loss": float(best)}
    return best_model


def surrogate_train(stacks, truths, config: SurrogateConfig | None = None) -> SurrogateModel:
    """Train on the valid cells of every (feature stack, truth map) pair."""
    config = config or SurrogateConfig()
    if len(stacks) < 1 or len(stacks) != len(truths):
        raise SurrogateError("need at least one scene with matching truth map")
    parts = [cell_samples(s, t)[:2] for s, t in zip(stacks, truths)]
    X = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    return surrogate_train_arrays(X, y, config)


def surrogate_train_arrays(X, y, config: SurrogateConfig | None = None) -> SurrogateModel:
    config = config or SurrogateConfig()
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    if len(y) == 0:
        raise SurrogateError("no valid cells to train on")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(y))
    n_val = int(round(config.val_fraction * len(y))) if len(y) >= 5 else 0
    val, train = perm[:n_val], perm[n_val:]
    if n_val == 0:
        val = train
    std = X[train].std(axis=0)
    ystd = float(y[train].std())
    model = SurrogateModel.initial(X.shape[1], config.hidden, config.slope, config.seed,
                                   X[train].mean(axis=0), np.where(std > 0, std, 1.0),
                                   float(y[train].mean()), ystd if ystd > 0 else 1.0)
    return _fit(model, X[train], y[train], X[val], y[val], config, rng)


@dataclass
class SurrogateCalibration:
    model: SurrogateModel
    validation_mae: list
    best_validation_mae: float
    best_epoch: int
    n_train_cells: int
    n_validation_cells: int

    def to_json(self):
        return {"validation_mae": self.validation_mae, "best_validation_mae": self.best_validation_mae,
                "best_epoch": self.best_epoch, "n_train_cells": self.n_train_cells,
                "n_validation_cells": self.n_validation_cells}


def surrogate_calibrate(model: SurrogateModel, stack: FeatureStack, truth: RadioMap, epochs=50,
                        train_fraction=0.7, config: SurrogateConfig | None = None) -> SurrogateCalibration:
    """Fine-tune a trained model on one scene's 70 % cell split.

    Epoch 0 is the frozen model, so the best validation MAE never exceeds it.
    """
    from .calibrate import split_cells

    config = config or SurrogateConfig()
    try:
        train, val = split_cells(truth, train_fraction, config.seed)
    except Exception as exc:  # noqa: BLE001 - re-raised as the surrogate's error type
        raise SurrogateError(str(exc)) from exc
    Xall = stack_matrix(stack)
    yall = truth.values.ravel()
    Xt, yt, Xv, yv = Xall[train], yall[train], Xall[val], yall[val]
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    xn, yn = model.normalise(Xt), (yt - model.y_mean) / model.y_std
    opt = AdamW(config.lr, config.weight_decay)
    sched = ReduceLROnPlateau(opt, config.factor, config.patience)

    def val_mae(m):
        return float(np.mean(np.abs(m.predict(Xv) - yv)))

    maes = [val_mae(model)]
    best, best_epoch, best_model = maes[0], 0, model.copy()
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(xn))
        for s in range(0, len(xn), config.batch_size):
            b = perm[s:s + config.batch_size]
            _, grads = model.loss_and_grad(xn[b], yn[b])
            model.weights = opt.step(model.weights, grads)
        m = val_mae(model)
        maes.append(m)
        sched.step(m)
        if m < best:
            best, best_epoch, best_model = m, epoch, model.copy()
    return SurrogateCalibration(best_model, maes, best, best_epoch, len(train), len(val))
