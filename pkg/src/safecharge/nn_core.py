"""Small fully connected networks with hand-written backpropagation.

All parameters of one network live in a single flat float64 buffer; the
per-layer weight matrices and bias vectors are views into it. That keeps soft
target updates and the Adam step to a handful of whole-array operations.

Weight matrix ``k`` has shape ``(layer_sizes[k+1], layer_sizes[k])``. Hidden
layers use ReLU; the output is either identity or ``scale * tanh``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

CHECKPOINT_FORMAT = "safecharge-mlp-v1"

_instance_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """A gradient, loss or parameter contains NaN or inf."""


class CheckpointError(ValueError):
    """Checkpoint file is missing fields, has the wrong format tag, or is corrupted."""


def _layout(layer_sizes: tuple[int, ...]) -> list[tuple[slice, tuple[int, int], slice]]:
    spans = []
    offset = 0
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = slice(offset, offset + fan_in * fan_out)
        offset = w.stop
        b = slice(offset, offset + fan_out)
        offset = b.stop
        spans.append((w, (fan_out, fan_in), b))
    return spans


def _views(flat: np.ndarray, layer_sizes: tuple[int, ...]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    weights, biases = [], []
    for w, shape, b in _layout(layer_sizes):
        weights.append(flat[w].reshape(shape))
        biases.append(flat[b])
    return weights, biases


def param_count(layer_sizes: tuple[int, ...]) -> int:
    return sum(i * o + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass(eq=False)
class MlpParams:
    layer_sizes: tuple[int, ...]
    flat: np.ndarray
    output_activation: str = "identity"
    # tanh outputs are output_scale * tanh(z) + output_shift.
    output_scale: float = 1.0
    output_shift: float = 0.0
    weights: list[np.ndarray] = field(init=False, repr=False)
    biases: list[np.ndarray] = field(init=False, repr=False)
    # Bumped on every in-place change; forward caches remember it.
    version: int = field(default=0, init=False)
    uid: int = field(default_factory=lambda: next(_instance_ids), init=False)

    def __post_init__(self) -> None:
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {self.layer_sizes}")
        if self.output_activation not in ("identity", "tanh"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (param_count(self.layer_sizes),):
            raise ValueError(f"flat buffer has {self.flat.size} entries, layout needs {param_count(self.layer_sizes)}")
        self.weights, self.biases = _views(self.flat, self.layer_sizes)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def copy(self) -> "MlpParams":
        return MlpParams(self.layer_sizes, self.flat.copy(), self.output_activation, self.output_scale, self.output_shift)

    def touch(self) -> None:
        self.version += 1

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.flat).all())


def init_mlp(
    layer_sizes: tuple[int, ...] | list[int],
    rng: np.random.Generator,
    output_activation: str = "identity",
    output_scale: float = 1.0,
    final_scale: float | None = None,
    output_shift: float = 0.0,
) -> MlpParams:
    """Uniform init: +-1/sqrt(fan_in) for every layer, except +-final_scale for the last one if given."""
    sizes = tuple(int(n) for n in layer_sizes)
    params = MlpParams(sizes, np.zeros(param_count(sizes)), output_activation, output_scale, output_shift)
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        bound = 1.0 / math.sqrt(sizes[k])
        if k == params.n_layers - 1 and final_scale is not None:
            bound = final_scale
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return params


def zeros_like(params: MlpParams) -> MlpParams:
    return MlpParams(
        params.layer_sizes, np.zeros_like(params.flat), params.output_activation, params.output_scale, params.output_shift
    )


@dataclass
class ForwardCache:
    owner: int
    version: int
    # activations[0] is the input; activations[k+1] is the post-activation of layer k.
    activations: list[np.ndarray]
    pre_activations: list[np.ndarray]
    output: np.ndarray
    squeeze: bool


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on one input vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"input shape {x.shape} does not match input size {params.layer_sizes[0]}")
    activations = [h]
    pre = []
    last = params.n_layers - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W.T
        z += b
        pre.append(z)
        if k < last:
            h = np.maximum(z, 0.0)
        elif params.output_activation == "tanh":
            h = params.output_scale * np.tanh(z) + params.output_shift
        else:
            h = z
        activations.append(h)
    out = h[0] if squeeze else h
    return out, ForwardCache(params.uid, params.version, activations, pre, h, squeeze)


def predict(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return forward(params, x)[0]


def backward(
    params: MlpParams,
    cache: ForwardCache,
    output_gradient: np.ndarray,
    input_gradient: bool = False,
    param_gradients: bool = True,
    out: MlpParams | None = None,
    param_rows: slice | None = None,
) -> MlpParams | tuple[MlpParams | None, np.ndarray]:
    """Backpropagate ``output_gradient`` (dLoss/dOutput) through the cached pass.

    Returns parameter gradients packed like ``params`` (written into ``out``
    when given). With ``input_gradient=True`` returns ``(grads, dLoss/dInput)``;
    grads is None when ``param_gradients=False``. ``param_rows`` restricts the
    parameter gradient to a slice of the batch while the input gradient still
    covers every row; two losses can then share one pass.
    """
    if cache.owner != params.uid or cache.version != params.version:
        raise ValueError("stale forward cache: parameters changed since the forward pass")
    g = np.asarray(output_gradient, dtype=np.float64)
    if cache.squeeze:
        g = g.reshape(1, -1)
    if g.shape != cache.output.shape:
        raise ValueError(f"output gradient shape {g.shape} does not match output {cache.output.shape}")

    if params.output_activation == "tanh":
        t = (cache.output - params.output_shift) / params.output_scale
        g = g * (params.output_scale * (1.0 - t * t))

    grads = None
    if param_gradients:
        grads = out if out is not None else zeros_like(params)
        if grads.layer_sizes != params.layer_sizes:
            raise ValueError("gradient buffer layout does not match parameters")
    for k in range(params.n_layers - 1, -1, -1):
        if k < params.n_layers - 1:
            g = g * (cache.pre_activations[k] > 0.0)
        if grads is not None:
            gp = g if param_rows is None else g[param_rows]
            ap = cache.activations[k] if param_rows is None else cache.activations[k][param_rows]
            np.matmul(gp.T, ap, out=grads.weights[k])
            gp.sum(axis=0, out=grads.biases[k])
        if k > 0 or input_gradient:
            g = g @ params.weights[k]

    if input_gradient:
        return grads, (g[0] if cache.squeeze else g)
    return grads


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments (``mode="adam"``) or plain gradient descent (``mode="sgd"``)."""

    learning_rate: float
    size: int
    mode: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    @classmethod
    def for_params(cls, params: MlpParams, learning_rate: float, mode: str = "adam") -> "OptimizerState":
        return cls(learning_rate=learning_rate, size=params.flat.size, mode=mode)


def apply_gradients(params: MlpParams, grads: MlpParams, opt: OptimizerState) -> MlpParams:
    """One descent step, in place. Raises NonFiniteError and leaves everything untouched on NaN/inf."""
    g = grads.flat
    if g.shape != params.flat.shape or opt.m.shape != params.flat.shape:
        raise ValueError("gradient / optimizer shapes do not match parameters")
    if not all_finite(g):
        raise NonFiniteError("non-finite gradient; update rejected")

    if opt.mode == "sgd":
        params.flat -= opt.learning_rate * g
        params.touch()
        return params

    opt.step += 1
    step_size = opt.learning_rate * math.sqrt(1.0 - opt.beta2**opt.step) / (1.0 - opt.beta1**opt.step)
    eps_hat = opt.eps * math.sqrt(1.0 - opt.beta2**opt.step)
    _adam_kernel(params.flat, g, opt.m, opt.v, opt.beta1, opt.beta2, step_size, eps_hat)
    params.touch()
    return params


@njit(cache=True)
def all_finite(a):  # pragma: no cover - compiled
    for x in a.flat:
        if not math.isfinite(x):
            return False
    return True


@njit(cache=True, error_model="numpy")
def _adam_kernel(p, g, m, v, beta1, beta2, step_size, eps_hat):  # pragma: no cover - compiled
    # Bias correction is folded into step_size and eps_hat.
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step_size * mi / (math.sqrt(vi) + eps_hat)


@njit(cache=True, error_model="numpy")
def _blend_kernel(target, online, tau):  # pragma: no cover - compiled
    for i in range(target.size):
        target[i] = tau * online[i] + (1.0 - tau) * target[i]


def soft_update(online: MlpParams, target: MlpParams, tau: float) -> MlpParams:
    """target <- tau * online + (1 - tau) * target, in place."""
    if online.layer_sizes != target.layer_sizes:
        raise ValueError(f"shape mismatch {online.layer_sizes} vs {target.layer_sizes}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if tau == 1.0:
        target.flat[...] = online.flat
    elif tau > 0.0:
        _blend_kernel(target.flat, online.flat, tau)
    target.touch()
    return target


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_params(path: str | Path, params: MlpParams, opt: OptimizerState | None = None, seed: int | None = None) -> Path:
    path = Path(path)
    payload: dict[str, np.ndarray] = {
        "format": np.array(CHECKPOINT_FORMAT),
        "layer_sizes": np.array(params.layer_sizes, dtype=np.int64),
        "output_activation": np.array(params.output_activation),
        "output_scale": np.array(params.output_scale),
        "output_shift": np.array(params.output_shift),
        "seed": np.array(-1 if seed is None else seed, dtype=np.int64),
    }
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        payload[f"W{k}"] = np.ascontiguousarray(W)
        payload[f"b{k}"] = np.ascontiguousarray(b)
    if opt is not None:
        payload.update(
            opt_mode=np.array(opt.mode),
            opt_hyper=np.array([opt.learning_rate, opt.beta1, opt.beta2, opt.eps]),
            opt_step=np.array(opt.step, dtype=np.int64),
            opt_m=opt.m,
            opt_v=opt.v,
        )
    # Write through a file handle so numpy does not append ".npz".
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_params(path: str | Path) -> tuple[MlpParams, OptimizerState | None, int | None]:
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            files = set(data.files)
            if "format" not in files or str(data["format"]) != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
            sizes = tuple(int(n) for n in data["layer_sizes"])
            shift = float(data["output_shift"]) if "output_shift" in files else 0.0
            params = MlpParams(sizes, np.zeros(param_count(sizes)), str(data["output_activation"]), float(data["output_scale"]), shift)
            for k in range(params.n_layers):
                W, b = data[f"W{k}"], data[f"b{k}"]
                if W.shape != params.weights[k].shape or b.shape != params.biases[k].shape:
                    raise CheckpointError(f"{path}: layer {k} has shape {W.shape}, expected {params.weights[k].shape}")
                params.weights[k][...] = W
                params.biases[k][...] = b
            opt = None
            if "opt_mode" in files:
                lr, b1, b2, eps = (float(x) for x in data["opt_hyper"])
                opt = OptimizerState(
                    learning_rate=lr,
                    size=params.flat.size,
                    mode=str(data["opt_mode"]),
                    beta1=b1,
                    beta2=b2,
                    eps=eps,
                    step=int(data["opt_step"]),
                    m=np.array(data["opt_m"], dtype=np.float64),
                    v=np.array(data["opt_v"], dtype=np.float64),
                )
            seed = int(data["seed"])
    except CheckpointError:
        raise
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return params, opt, (None if seed < 0 else seed)
