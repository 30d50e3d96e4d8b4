"""Differentiable layers with explicit forward/backward passes.

Every layer maps a batch (first axis) to a batch.  ``layer_forward`` returns
the output together with a cache; ``layer_backward`` consumes that cache,
returns the gradient with respect to the input and accumulates parameter
gradients (``+=``) into the :class:`~ltekge.params.ParameterStore`.

Parameter names are ``<spec.name>.<role>``, e.g. ``conv.weight``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, ContractError, DegenerateBatchError, ShapeError
from .params import ParameterStore

KINDS = ("identity", "linear", "bias", "sigmoid", "tanh", "relu", "batchnorm",
         "dropout", "conv2d", "reshape2d", "concat")
MODES = ("train", "eval")

BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_features: int | None = None
    out_features: int | None = None
    features: int | None = None
    in_channels: int | None = None
    filters: int | None = None
    kernel_size: tuple = (3, 3)
    use_bias: bool = True
    rate: float = 0.0
    eps: float = BATCHNORM_EPS
    momentum: float = BATCHNORM_MOMENTUM
    shape: tuple = field(default=())
    axis: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        k = self.kind
        if k == "linear" and not (_positive(self.in_features) and _positive(self.out_features)):
            raise ConfigError("linear needs positive in_features and out_features")
        if k in ("bias", "batchnorm") and not _positive(self.features):
            raise ConfigError(f"{k} needs positive features")
        if k == "conv2d":
            if not (_positive(self.in_channels) and _positive(self.filters)):
                raise ConfigError("conv2d needs positive in_channels and filters")
            if len(self.kernel_size) != 2 or not all(_positive(v) for v in self.kernel_size):
                raise ConfigError(f"bad kernel_size {self.kernel_size}")
            object.__setattr__(self, "kernel_size", tuple(int(v) for v in self.kernel_size))
        if k == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")
        if k == "batchnorm" and (self.eps <= 0 or not 0.0 <= self.momentum <= 1.0):
            raise ConfigError("batchnorm needs eps > 0 and momentum in [0, 1]")
        if k == "reshape2d":
            if not self.shape or any(int(s) <= 0 for s in self.shape):
                raise ConfigError(f"reshape2d needs a positive target shape, got {self.shape}")
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if k in ("linear", "bias", "batchnorm", "conv2d") and not self.name:
            raise ConfigError(f"{k} layer needs a name for its parameters")

    def param(self, role: str) -> str:
        return f"{self.name}.{role}"

    @property
    def param_roles(self) -> tuple:
        if self.kind == "linear":
            return ("weight",)
        if self.kind == "bias":
            return ("bias",)
        if self.kind == "batchnorm":
            return ("weight", "bias")
        if self.kind == "conv2d":
            return ("weight", "bias") if self.use_bias else ("weight",)
        return ()

    # convenience constructors

    @classmethod
    def linear(cls, name, in_features, out_features):
        return cls("linear", name, in_features=in_features, out_features=out_features)

    @classmethod
    def conv2d(cls, name, in_channels, filters, kernel_size=(3, 3), use_bias=True):
        return cls("conv2d", name, in_channels=in_channels, filters=filters,
                   kernel_size=tuple(kernel_size), use_bias=use_bias)

    @classmethod
    def batchnorm(cls, name, features, eps=BATCHNORM_EPS, momentum=BATCHNORM_MOMENTUM):
        return cls("batchnorm", name, features=features, eps=eps, momentum=momentum)


def _positive(v):
    return v is not None and int(v) > 0


def init_layer_params(spec: LayerSpec, params: ParameterStore, rng: np.random.Generator):
    """Create the parameters a layer needs (uniform, scaled by fan-in)."""
    if spec.kind == "linear":
        bound = 1.0 / np.sqrt(spec.in_features)
        params.add(spec.param("weight"),
                   rng.uniform(-bound, bound, (spec.out_features, spec.in_features)))
    elif spec.kind == "bias":
        params.add(spec.param("bias"), np.zeros(spec.features))
    elif spec.kind == "batchnorm":
        params.add(spec.param("weight"), np.ones(spec.features))
        params.add(spec.param("bias"), np.zeros(spec.features))
        params.add_buffer(spec.param("running_mean"), np.zeros(spec.features))
        params.add_buffer(spec.param("running_var"), np.ones(spec.features))
    elif spec.kind == "conv2d":
        kh, kw = spec.kernel_size
        bound = 1.0 / np.sqrt(spec.in_channels * kh * kw)
        params.add(spec.param("weight"),
                   rng.uniform(-bound, bound, (spec.filters, spec.in_channels, kh, kw)))
        if spec.use_bias:
            params.add(spec.param("bias"), np.zeros(spec.filters))


def output_shape(spec: LayerSpec, input_shape: tuple) -> tuple:
    if spec.kind == "linear":
        return tuple(input_shape[:-1]) + (spec.out_features,)
    if spec.kind == "conv2d":
        n, _, h, w = input_shape
        kh, kw = spec.kernel_size
        return (n, spec.filters, h - kh + 1, w - kw + 1)
    if spec.kind == "reshape2d":
        return (input_shape[0],) + spec.shape
    return tuple(input_shape)


def dropout_mask(shape, rate, rng_seed):
    rng = np.random.default_rng(rng_seed)
    return rng.random(shape) >= rate


def layer_forward(spec: LayerSpec, input, params: ParameterStore | None = None,
                  mode: str = "eval", rng_seed: int = 0):
    """Run one layer.  Returns ``(output, cache)``."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    kind = spec.kind
    cache = {"kind": kind, "mode": mode, "params": params, "spec": spec}

    if kind == "concat":
        parts = [np.asarray(p) for p in input]
        ref = parts[0].shape
        for p in parts[1:]:
            if p.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(p.shape, ref))
                                         if i != spec.axis):
                raise ShapeError(f"concat: incompatible shapes {ref} and {p.shape}")
        cache["sizes"] = [p.shape[spec.axis] for p in parts]
        return np.concatenate(parts, axis=spec.axis), cache

    x = np.asarray(input)
    cache["input_shape"] = x.shape

    if kind == "identity":
        return x.copy(), cache

    if kind == "linear":
        w = params[spec.param("weight")]
        if x.shape[-1] != spec.in_features or w.shape != (spec.out_features, spec.in_features):
            raise ShapeError(f"linear {spec.name}: input shape {x.shape} vs weight shape {w.shape}")
        cache["x"] = x
        return x @ w.T, cache

    if kind == "bias":
        b = params[spec.param("bias")]
        if x.ndim < 2 or x.shape[1] != spec.features:
            raise ShapeError(f"bias {spec.name}: input shape {x.shape} vs bias shape {b.shape}")
        return x + b.reshape((1, -1) + (1,) * (x.ndim - 2)), cache

    if kind == "sigmoid":
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        cache["y"] = y
        return y, cache

    if kind == "tanh":
        y = np.tanh(x)
        cache["y"] = y
        return y, cache

    if kind == "relu":
        cache["mask"] = x > 0
        return np.where(cache["mask"], x, np.zeros((), x.dtype)), cache

    if kind == "dropout":
        if mode == "eval" or spec.rate == 0.0:
            cache["mask"] = None
            return x.copy(), cache
        mask = dropout_mask(x.shape, spec.rate, rng_seed)
        scale = x.dtype.type(1.0 / (1.0 - spec.rate))
        cache["mask"] = mask
        cache["scale"] = scale
        return np.where(mask, x * scale, np.zeros((), x.dtype)), cache

    if kind == "batchnorm":
        return _batchnorm_forward(spec, x, params, mode, cache)

    if kind == "conv2d":
        w = params[spec.param("weight")]
        kh, kw = spec.kernel_size
        if x.ndim != 4 or x.shape[1] != spec.in_channels or x.shape[2] < kh or x.shape[3] < kw:
            raise ShapeError(f"conv2d {spec.name}: input shape {x.shape} vs weight shape {w.shape}")
        windows = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n c ho wo kh kw
        out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # n ho wo f
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        if spec.use_bias:
            out += params[spec.param("bias")].reshape(1, -1, 1, 1)
        cache["x"] = x
        return out, cache

    if kind == "reshape2d":
        per_sample = int(np.prod(x.shape[1:])) if x.ndim > 1 else 1
        if x.ndim < 1 or per_sample != int(np.prod(spec.shape)):
            raise ShapeError(f"reshape2d: input shape {x.shape} vs target per-sample shape {spec.shape}")
        return x.reshape((x.shape[0],) + spec.shape), cache

    raise ConfigError(f"unhandled layer kind {kind!r}")


def _reduce_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bshape(x):
    return (1, -1) + (1,) * (x.ndim - 2)


def _batchnorm_forward(spec, x, params, mode, cache):
    if x.ndim < 2 or x.shape[1] != spec.features:
        raise ShapeError(f"batchnorm {spec.name}: input shape {x.shape} vs features ({spec.features},)")
    gamma = params[spec.param("weight")].reshape(_bshape(x))
    beta = params[spec.param("bias")].reshape(_bshape(x))
    axes = _reduce_axes(x)
    if mode == "train":
        count = x.size // x.shape[1]
        if count < 2:
            raise DegenerateBatchError(
                f"batchnorm {spec.name}: train-mode statistics need more than one value per feature, "
                f"got input shape {x.shape}")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        rm = params[spec.param("running_mean")]
        rv = params[spec.param("running_var")]
        m = spec.momentum
        rm[...] = (1 - m) * rm + m * mean
        rv[...] = (1 - m) * rv + m * var * (count / (count - 1))
        cache["count"] = count
    else:
        mean = params[spec.param("running_mean")]
        var = params[spec.param("running_var")]
    inv_std = 1.0 / np.sqrt(var + spec.eps)
    xhat = (x - mean.reshape(_bshape(x))) * inv_std.reshape(_bshape(x))
    cache["xhat"] = xhat
    cache["inv_std"] = inv_std
    return (gamma * xhat + beta).astype(x.dtype, copy=False), cache


def _backward(spec: LayerSpec, cache, upstream):
    """Pure backward pass: ``(input_grad, {param_name: grad})``."""
    if cache.get("spec") != spec or cache.get("kind") != spec.kind:
        raise ContractError(f"cache was produced by a different layer than {spec.kind!r} {spec.name!r}")
    g = np.asarray(upstream)
    kind = spec.kind
    params = cache["params"]

    if kind == "concat":
        splits = np.cumsum(cache["sizes"])[:-1]
        return tuple(np.split(g, splits, axis=spec.axis)), {}

    expected = output_shape(spec, cache["input_shape"])
    if g.shape != expected:
        raise ShapeError(f"{kind} {spec.name}: upstream shape {g.shape} vs output shape {expected}")

    if kind in ("identity",):
        return g.copy(), {}
    if kind == "linear":
        w = params[spec.param("weight")]
        x = cache["x"]
        gw = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        return g @ w, {spec.param("weight"): gw}
    if kind == "bias":
        return g.copy(), {spec.param("bias"): g.sum(axis=_reduce_axes(g))}
    if kind == "sigmoid":
        y = cache["y"]
        return g * y * (1 - y), {}
    if kind == "tanh":
        y = cache["y"]
        return g * (1 - y * y), {}
    if kind == "relu":
        return np.where(cache["mask"], g, np.zeros((), g.dtype)), {}
    if kind == "dropout":
        if cache["mask"] is None:
            return g.copy(), {}
        return np.where(cache["mask"], g * cache["scale"], np.zeros((), g.dtype)), {}
    if kind == "batchnorm":
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        axes = _reduce_axes(g)
        gamma = params[spec.param("weight")]
        grads = {spec.param("weight"): (g * xhat).sum(axis=axes),
                 spec.param("bias"): g.sum(axis=axes)}
        dxhat = g * gamma.reshape(_bshape(g))
        if cache["mode"] == "train":
            n = cache["count"]
            s1 = dxhat.sum(axis=axes).reshape(_bshape(g))
            s2 = (dxhat * xhat).sum(axis=axes).reshape(_bshape(g))
            dx = (inv_std.reshape(_bshape(g)) / n) * (n * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std.reshape(_bshape(g))
        return dx.astype(g.dtype, copy=False), grads
    if kind == "conv2d":
        x = cache["x"]
        w = params[spec.param("weight")]
        kh, kw = spec.kernel_size
        windows = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n c ho wo kh kw
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))  # f c kh kw
        padded = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gwin = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # n f h w kh kw
        flipped = w[:, :, ::-1, ::-1]
        dx = np.tensordot(gwin, flipped, axes=([1, 4, 5], [0, 2, 3]))  # n h w c
        grads = {spec.param("weight"): gw}
        if spec.use_bias:
            grads[spec.param("bias")] = g.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), grads
    if kind == "reshape2d":
        return g.reshape(cache["input_shape"]), {}
    raise ConfigError(f"unhandled layer kind {kind!r}")


def layer_backward(spec: LayerSpec, cache, upstream):
    """Backward pass; parameter gradients are added into the store's buffers."""
    input_grad, grads = _backward(spec, cache, upstream)
    params = cache["params"]
    for name, value in grads.items():
        params.grad(name)[...] += value
    return input_grad


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass(frozen=True)
class GradCheckReport:
    op: str
    max_abs_error: float
    max_rel_error: float
    probes: int

    def passed(self, rel_tol: float) -> bool:
        return self.max_rel_error < rel_tol


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(spec: LayerSpec, point, params: ParameterStore | None = None,
                            step: float = 1e-6, mode: str = "eval", rng_seed: int = 0,
                            probes: int | None = None, seed: int = 0,
                            check_params: bool = True, exclude=None) -> GradCheckReport:
    """Compare ``layer_backward`` with central differences.

    The scalar objective is ``sum(R * (forward(x) - forward(x0)))`` for a
    fixed random projection ``R``.  Coordinates of the input (and of the
    layer's parameters when ``check_params``) are probed; with ``probes``
    set, that many coordinates are drawn per tensor, otherwise every
    coordinate is checked.  ``exclude(x)`` may return a boolean mask of input
    coordinates to skip (used to stay off kinks).
    """
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")
    if params is None:
        params = ParameterStore(np.float64)
    rng = np.random.default_rng(seed)
    inputs = [np.array(p, dtype=np.float64) for p in point] if spec.kind == "concat" \
        else np.array(point, dtype=np.float64)

    def run(x):
        state = {k: v.copy() for k, v in params.buffers.items()}
        out, cache = layer_forward(spec, x, params, mode=mode, rng_seed=rng_seed)
        for k, v in state.items():  # train-mode batchnorm mutates running stats
            params.buffers[k][...] = v
        return out, cache

    base, cache = run(inputs)
    base = base.copy()
    proj = rng.choice([-1.0, 1.0], size=base.shape) * rng.uniform(0.5, 1.5, size=base.shape)
    saved = {k: g.copy() for k, g in params.grads.items()}
    for g in params.grads.values():
        g.fill(0)
    input_grad, param_grads = _backward(spec, cache, proj)
    for k, g in saved.items():
        params.grads[k][...] = g

    def objective():
        out, _ = run(inputs)
        return float(np.sum(proj * (out - base)))

    targets = []
    if spec.kind == "concat":
        for i, (x, gx) in enumerate(zip(inputs, input_grad)):
            targets.append((x, gx, None))
    else:
        targets.append((inputs, input_grad, exclude(inputs) if exclude else None))
    if check_params:
        for name, gp in param_grads.items():
            targets.append((params[name], gp, None))

    abs_err, rel_err, count = 0.0, 0.0, 0
    for array, analytic, skip in targets:
        flat_idx = np.arange(array.size)
        if skip is not None:
            flat_idx = flat_idx[~np.asarray(skip).ravel()]
        if probes is not None and probes < len(flat_idx):
            flat_idx = rng.choice(flat_idx, size=probes, replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, array.shape)
            orig = array[idx]
            array[idx] = orig + step
            f_plus = objective()
            array[idx] = orig - step
            f_minus = objective()
            array[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(np.asarray(analytic)[idx])
            abs_err = max(abs_err, abs(a - numeric))
            rel_err = max(rel_err, float(relative_error(a, numeric)))
            count += 1
    return GradCheckReport(spec.kind if not spec.name else f"{spec.kind}:{spec.name}",
                           abs_err, rel_err, count)
