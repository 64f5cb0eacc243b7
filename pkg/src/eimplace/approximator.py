"""Dense one-hidden-layer map from feature channels to a per-cell score.

    out = W2 @ tanh(W1 @ flatten(features) + b1) + b2

The same model class backs the soft-Q function, the preference reward and
the PPO actor; the critic uses ``out_dim=1``. Parameters live in one flat
float64 vector so the optimizer, gradient checks and checkpoints all work on
plain arrays.

With ``pixel_hidden > 0`` a second, per-cell path is added to the map
output: a shared one-hidden-layer network (a 1x1 convolution stack) reads
the C channel values of a cell together with one geometric input, the
normalized distance from the current macro, anchored at that cell, to the
nearest canvas edge (derived from the cell position and the macro-size
channels). It sees no absolute cell identity, so what it learns carries
over between designs. ``hidden=0`` leaves only the per-cell path plus a
learned per-cell bias.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .env import N_CHANNELS, FeatureMaps


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Arch:
    grid_n: int
    channels: int = N_CHANNELS
    hidden: int = 256
    activation: str = "tanh"
    out_dim: int | None = None
    pixel_hidden: int = 0

    def __post_init__(self):
        if self.pixel_hidden and self.out_dim is not None:
            raise ShapeError("the per-cell path needs a full N x N output map")

    @property
    def in_dim(self) -> int:
        return self.channels * self.grid_n ** 2

    @property
    def outputs(self) -> int:
        return self.grid_n ** 2 if self.out_dim is None else self.out_dim

    @property
    def pixel_inputs(self) -> int:
        return self.channels + 1

    @property
    def dense_param_count(self) -> int:
        H = self.hidden
        return H * self.in_dim + H + self.outputs * H + self.outputs

    @property
    def param_count(self) -> int:
        P = self.pixel_hidden
        return self.dense_param_count + (P * self.pixel_inputs + P + P + 1 if P else 0)


@dataclass
class QMapModel:
    arch: Arch
    params: np.ndarray
    init_seed: int = 0

    def __post_init__(self):
        if self.params.shape != (self.arch.param_count,):
            raise ShapeError(f"expected {self.arch.param_count} params, got {self.params.shape}")

    def unpack(self, vec: np.ndarray | None = None):
        """Views ``(W1, b1, W2, b2)`` into ``vec`` (default: the parameters)."""
        vec = self.params if vec is None else vec
        a = self.arch
        H, D, O = a.hidden, a.in_dim, a.outputs
        i = 0
        W1 = vec[i:i + H * D].reshape(H, D); i += H * D
        b1 = vec[i:i + H]; i += H
        W2 = vec[i:i + O * H].reshape(O, H); i += O * H
        b2 = vec[i:i + O]
        return W1, b1, W2, b2

    def unpack_pixel(self, vec: np.ndarray | None = None):
        """Views ``(P1, c1, p2, c2)`` of the per-cell path."""
        vec = self.params if vec is None else vec
        a = self.arch
        P, K = a.pixel_hidden, a.pixel_inputs
        i = a.dense_param_count
        P1 = vec[i:i + P * K].reshape(P, K); i += P * K
        c1 = vec[i:i + P]; i += P
        p2 = vec[i:i + P]; i += P
        c2 = vec[i:i + 1]
        return P1, c1, p2, c2

    def with_params(self, params: np.ndarray) -> "QMapModel":
        return replace(self, params=params)

    def copy(self) -> "QMapModel":
        return self.with_params(self.params.copy())


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, model: QMapModel, lr: float = 1e-3, **hyper) -> "OptimizerState":
        z = np.zeros_like(model.params)
        return cls(z, z.copy(), 0, lr, **hyper)


def init_model(arch: Arch, seed: int) -> QMapModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    model = QMapModel(arch, np.zeros(arch.param_count), seed)
    W1, _, W2, _ = model.unpack()
    for W in (W1, W2):
        fan_out, fan_in = W.shape
        a = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-a, a, size=W.shape)
    if arch.pixel_hidden:
        P1, _, p2, _ = model.unpack_pixel()
        for W, fan_in, fan_out in ((P1, arch.pixel_inputs, arch.pixel_hidden),
                                   (p2, arch.pixel_hidden, 1)):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            W[...] = rng.uniform(-a, a, size=W.shape)
    return model


MACRO_W, MACRO_H = 3, 4   # channel indices of the broadcast macro size


def _pixel_inputs(arch: Arch, X: np.ndarray) -> np.ndarray:
    """Per-cell input rows ``(B, N^2, C + 1)``: channel values and edge distance."""
    N = arch.grid_n
    B = X.shape[0]
    chans = X.reshape(B, arch.channels, N * N).transpose(0, 2, 1)
    ys, xs = np.divmod(np.arange(N * N), N)
    xs, ys = xs / N, ys / N
    w, h = chans[:, :1, MACRO_W], chans[:, :1, MACRO_H]
    edge = np.minimum(np.minimum(xs, ys), np.minimum(1.0 - w - xs, 1.0 - h - ys))
    return np.concatenate([chans, edge[:, :, None]], axis=2)


def _as_batch(model: QMapModel, features) -> tuple[np.ndarray, bool]:
    if isinstance(features, FeatureMaps):
        features = features.stack()
    x = np.asarray(features, dtype=np.float64)
    D = model.arch.in_dim
    if x.size == D and x.ndim in (1, 3):
        return x.reshape(1, D), True
    if x.ndim >= 2 and x[0].size == D:
        return x.reshape(x.shape[0], D), False
    raise ShapeError(f"features of shape {x.shape} do not match arch input {D}")


def forward(model: QMapModel, features) -> np.ndarray:
    """Scores for one state (shape ``(out,)``) or a batch (``(B, out)``)."""
    X, single = _as_batch(model, features)
    W1, b1, W2, b2 = model.unpack()
    out = np.tanh(X @ W1.T + b1) @ W2.T + b2
    if model.arch.pixel_hidden:
        P1, c1, p2, c2 = model.unpack_pixel()
        out = out + np.tanh(_pixel_inputs(model.arch, X) @ P1.T + c1) @ p2 + c2
    return out[0] if single else out


def backward(model: QMapModel, features, out_grad) -> np.ndarray:
    """Gradient of ``sum(out_grad * forward(model, features))`` w.r.t. the params.

    For a batch the per-sample gradients are summed.
    """
    X, single = _as_batch(model, features)
    G = np.asarray(out_grad, dtype=np.float64).reshape(X.shape[0], model.arch.outputs)
    W1, b1, W2, b2 = model.unpack()
    hid = np.tanh(X @ W1.T + b1)
    grad = np.zeros_like(model.params)
    gW1, gb1, gW2, gb2 = model.unpack(grad)
    gW2[...] = G.T @ hid
    gb2[...] = G.sum(0)
    dpre = (G @ W2) * (1.0 - hid ** 2)
    gW1[...] = dpre.T @ X
    gb1[...] = dpre.sum(0)
    if model.arch.pixel_hidden:
        P1, c1, p2, _ = model.unpack_pixel()
        gP1, gc1, gp2, gc2 = model.unpack_pixel(grad)
        Z = _pixel_inputs(model.arch, X)
        hp = np.tanh(Z @ P1.T + c1)
        gp2[...] = np.einsum("bn,bnh->h", G, hp)
        gc2[...] = G.sum()
        dz = G[:, :, None] * p2 * (1.0 - hp ** 2)
        K = model.arch.pixel_inputs
        gP1[...] = dz.reshape(-1, len(c1)).T @ Z.reshape(-1, K)
        gc1[...] = dz.sum((0, 1))
    return grad


def adam_step(opt: OptimizerState, model: QMapModel, grad: np.ndarray):
    """One bias-corrected Adam descent step; returns new ``(opt, model)``."""
    t = opt.step_count + 1
    m = opt.beta1 * opt.first_moment + (1 - opt.beta1) * grad
    v = opt.beta2 * opt.second_moment + (1 - opt.beta2) * grad * grad
    m_hat = m / (1 - opt.beta1 ** t)
    v_hat = v / (1 - opt.beta2 ** t)
    params = model.params - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return replace(opt, first_moment=m, second_moment=v, step_count=t), model.with_params(params)


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def check_param_gradient(model: QMapModel, loss_and_grad, n_coords: int = 200,
                         h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between ``loss_and_grad(model)[1]`` and central differences.

    ``loss_and_grad`` maps a model to ``(loss, grad)``; it is re-evaluated on
    perturbed copies of the parameters at ``n_coords`` random coordinates.
    """
    rng = np.random.default_rng(seed)
    _, grad = loss_and_grad(model)
    idx = rng.choice(model.params.size, size=min(n_coords, model.params.size), replace=False)
    numeric = np.empty(len(idx))
    for j, i in enumerate(idx):
        p = model.params.copy()
        p[i] += h
        up = loss_and_grad(model.with_params(p))[0]
        p[i] -= 2 * h
        down = loss_and_grad(model.with_params(p))[0]
        numeric[j] = (up - down) / (2 * h)
    return float(_rel_errors(grad[idx], numeric).max())


def finite_diff_check(model: QMapModel, features, scalar_loss, n_coords: int = 200,
                      h: float = 1e-5, seed: int = 0) -> float:
    """Gradient check for a scalar functional of the forward outputs.

    ``scalar_loss(outputs)`` returns ``(value, d value / d outputs)``; the
    analytic parameter gradient is obtained through :func:`backward`.
    """
    def loss_and_grad(mdl):
        out = forward(mdl, features)
        val, g = scalar_loss(out)
        return val, backward(mdl, features, g)

    return check_param_gradient(model, loss_and_grad, n_coords, h, seed)


def model_to_dict(model: QMapModel) -> dict:
    raw = np.ascontiguousarray(model.params, dtype="<f8").tobytes()
    return {"arch": asdict(model.arch), "params": base64.b64encode(raw).decode("ascii"),
            "param_count": model.arch.param_count, "seed": model.init_seed}


def model_from_dict(doc: dict) -> QMapModel:
    arch = Arch(**doc["arch"])
    params = np.frombuffer(base64.b64decode(doc["params"]), dtype="<f8").astype(np.float64)
    if params.size != doc["param_count"] or params.size != arch.param_count:
        raise ShapeError(f"checkpoint holds {params.size} params, arch needs {arch.param_count}")
    return QMapModel(arch, params, int(doc.get("seed", 0)))


def save_model(model: QMapModel, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_dict(model), f, sort_keys=True)
        f.write("\n")


def load_model(path) -> QMapModel:
    with open(path, encoding="utf-8") as f:
        return model_from_dict(json.load(f))
