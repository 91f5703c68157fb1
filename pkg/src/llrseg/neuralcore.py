"""Minimal dense layers with analytic gradients, losses, and optimizers.

Everything runs in float64. Forward passes are pure; a tape produced by
mlp_forward carries the per-layer inputs and pre-activations needed for
the exact reverse pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from .datamodel import IGNORE
from .errors import AllIgnored, NonFiniteGradient, StaleTape

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "identity":
        return pre
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "gelu":
        return 0.5 * pre * (1.0 + erf(pre / _SQRT2))
    raise ValueError(f"unknown activation {name!r}")


def _activate_grad(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(pre)
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(pre / _SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * pre**2)
        return cdf + pre * pdf
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray    # [out]
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"bad dense shapes W={self.weight.shape}, b={self.bias.shape}"
            )
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValueError("non-finite layer parameters")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Mlp:
    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)


def xavier_dense(in_dim: int, out_dim: int, activation: str,
                 rng: np.random.Generator) -> DenseLayer:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
    return DenseLayer(weight=w, bias=np.zeros(out_dim), activation=activation)


def make_mlp(dims: list[int], rng: np.random.Generator,
             hidden_activation: str = "gelu",
             final_activation: str = "identity") -> Mlp:
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        act = final_activation if i == len(dims) - 2 else hidden_activation
        layers.append(xavier_dense(a, b, act, rng))
    return Mlp(layers=layers)


@dataclass
class Tape:
    inputs: list[np.ndarray]       # per-layer input
    pre_activations: list[np.ndarray]
    layer_shapes: list[tuple]


def mlp_forward(m: Mlp, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.in_dim:
        raise ValueError(f"input shape {x.shape} does not match in_dim {m.in_dim}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite input")
    inputs, pres = [], []
    h = x
    for layer in m.layers:
        inputs.append(h)
        pre = h @ layer.weight.T + layer.bias
        pres.append(pre)
        h = _activate(layer.activation, pre)
    tape = Tape(inputs=inputs, pre_activations=pres,
                layer_shapes=[l.weight.shape for l in m.layers])
    return h, tape


def mlp_backward(m: Mlp, tape: Tape, d_out: np.ndarray):
    """Exact reverse pass. Returns (grads, d_x) with grads a list of
    (dW, db) matching the layer order."""
    if tape.layer_shapes != [l.weight.shape for l in m.layers]:
        raise StaleTape("tape does not match this MLP")
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != (tape.inputs[0].shape[0], m.out_dim):
        raise StaleTape(f"upstream gradient shape {d_out.shape} mismatch")
    grads = [None] * len(m.layers)
    d = d_out
    for i in reversed(range(len(m.layers))):
        layer = m.layers[i]
        d_pre = d * _activate_grad(layer.activation, tape.pre_activations[i])
        grads[i] = (d_pre.T @ tape.inputs[i], d_pre.sum(axis=0))
        d = d_pre @ layer.weight
    return grads, d


def mlp_params(m: Mlp, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(m.layers):
        out[f"{prefix}.{i}.weight"] = layer.weight
        out[f"{prefix}.{i}.bias"] = layer.bias
    return out


def set_mlp_params(m: Mlp, prefix: str, params: dict[str, np.ndarray]) -> None:
    for i, layer in enumerate(m.layers):
        layer.weight = np.asarray(params[f"{prefix}.{i}.weight"], dtype=np.float64)
        layer.bias = np.asarray(params[f"{prefix}.{i}.bias"], dtype=np.float64)


def mlp_grads_dict(grads, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, (dw, db) in enumerate(grads):
        out[f"{prefix}.{i}.weight"] = dw
        out[f"{prefix}.{i}.bias"] = db
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                          ignore: int = IGNORE):
    """Mean CE over non-ignored rows; gradient is zero on ignored rows."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    valid = labels != ignore
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise AllIgnored("every row is ignored")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    rows = np.nonzero(valid)[0]
    picked = log_probs[rows, labels[rows].astype(int)]
    loss = -picked.mean()
    d_logits = np.zeros_like(logits)
    softmax = np.exp(log_probs[rows])
    softmax[np.arange(rows.size), labels[rows].astype(int)] -= 1.0
    d_logits[rows] = softmax / n_valid
    return float(loss), d_logits


def sigmoid_bce_with_logits(z: np.ndarray, targets: np.ndarray,
                            ignore: int = IGNORE):
    """Numerically stable binary cross entropy on raw logits.

    targets holds {0, 1, ignore}; ignored entries contribute nothing to
    loss or gradient.
    """
    z = np.asarray(z, dtype=np.float64)
    targets = np.asarray(targets)
    valid = targets != ignore
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise AllIgnored("every entry is ignored")
    zv = z[valid]
    tv = targets[valid].astype(np.float64)
    loss = (np.maximum(zv, 0.0) - zv * tv + np.log1p(np.exp(-np.abs(zv)))).mean()
    dz = np.zeros_like(z)
    sig = expit(zv)
    dz[valid] = (sig - tv) / n_valid
    return float(loss), dz


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def make_optimizer(kind: str, lr: float, **kwargs) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {kind!r}")
    return OptimizerState(kind=kind, lr=lr, **kwargs)


def optimizer_step(state: OptimizerState, params: dict, grads: dict):
    """Returns (state', params'). SGD: p - lr*g; Adam: bias-corrected."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(name)
    new_params = {}
    if state.kind == "sgd":
        for name, p in params.items():
            g = grads.get(name)
            new_params[name] = p if g is None else p - state.lr * g
        state.step += 1
        return state, new_params
    t = state.step + 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g**2
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step = t
    return state, new_params


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(fn, params: dict, h: float = 1e-5, max_coords: int = 200,
               seed: int = 0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    fn(params) must return (loss, grads) with grads keyed like params.
    At most max_coords coordinates are sampled across all tensors.
    """
    _, grads = fn(params)
    rng = np.random.default_rng(seed)
    coords = []
    for name in sorted(params):
        for idx in range(params[name].size):
            coords.append((name, idx))
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    max_err = 0.0
    for name, idx in coords:
        base = params[name].ravel()[idx]
        plus = {k: v.copy() for k, v in params.items()}
        plus[name].ravel()[idx] = base + h
        minus = {k: v.copy() for k, v in params.items()}
        minus[name].ravel()[idx] = base - h
        loss_p, _ = fn(plus)
        loss_m, _ = fn(minus)
        numeric = (loss_p - loss_m) / (2.0 * h)
        analytic = grads[name].ravel()[idx]
        denom = max(abs(numeric), abs(analytic), 1e-8)
        max_err = max(max_err, abs(numeric - analytic) / denom)
    return float(max_err)
