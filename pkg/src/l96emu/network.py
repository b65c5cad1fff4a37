"""Residual convolutional surrogate of the one-step resolvent.

The map is y = x + f(x) where f is: input batch-norm, three parallel
circular convolutions each rectified (one branch passed through, the other
two multiplied elementwise into a 48-channel concatenation), a circular
convolution to 37 channels with ReLU, and a final 1-tap linear convolution
back to one channel.  Forward, reverse-mode gradients and the tangent (Jacobian-vector)
map are written out by hand for this fixed architecture family; there is no
general autodiff here.

Convolution weights are stored as (kernel * in_channels, out_channels)
matrices so that a circular convolution is one patch gather plus one matmul.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, IntegrationError

BN_EPS = 1e-3
BN_MOMENTUM = 0.99
L2_COEF = 1e-4

TRAINABLE = (
    "bn_scale",
    "bn_shift",
    "w2a",
    "b2a",
    "w2b",
    "b2b",
    "w2c",
    "b2c",
    "w3",
    "b3",
    "w4",
    "b4",
)


@dataclass(frozen=True)
class Architecture:
    """Layer sizes; the defaults give the 9389-parameter reference network."""

    m: int = 40
    branch_channels: int = 24
    branch_kernel: int = 5
    mix_channels: int = 37
    mix_kernel: int = 5

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ContractViolation("m must be positive")
        for k in (self.branch_kernel, self.mix_kernel):
            if k < 1 or k % 2 == 0:
                raise ContractViolation("kernel sizes must be odd and positive")
        if self.branch_channels < 0 or self.mix_channels < 0:
            raise ContractViolation("channel counts must be >= 0")

    @property
    def degenerate(self) -> bool:
        """True for the residual-identity variant (no convolution stack)."""
        return self.branch_channels == 0 or self.mix_channels == 0

    def param_count(self) -> int:
        if self.degenerate:
            return 2
        branch = 3 * (self.branch_channels * self.branch_kernel + self.branch_channels)
        mix_in = 2 * self.branch_channels
        mix = self.mix_channels * mix_in * self.mix_kernel + self.mix_channels
        out = self.mix_channels + 1
        return 2 + branch + mix + out


@dataclass
class NetworkParameters:
    """All trainable values plus the batch-norm running statistics."""

    arch: Architecture
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    w2a: np.ndarray
    b2a: np.ndarray
    w2b: np.ndarray
    b2b: np.ndarray
    w2c: np.ndarray
    b2c: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray

    def trainable(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TRAINABLE}

    def copy(self) -> "NetworkParameters":
        arrays = {
            name: getattr(self, name).copy()
            for name in (*TRAINABLE, "bn_mean", "bn_var")
        }
        return NetworkParameters(arch=self.arch, **arrays)

    def check_finite(self) -> None:
        for name in (*TRAINABLE, "bn_mean", "bn_var"):
            if not np.isfinite(getattr(self, name)).all():
                raise ContractViolation(f"parameter group {name} is non-finite")


def param_count(params: NetworkParameters | Architecture) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    if isinstance(params, Architecture):
        return params.param_count()
    return sum(v.size for v in params.trainable().values())


def _glorot(rng: np.random.Generator, k: int, c_in: int, c_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (k * c_in + k * c_out))
    return rng.uniform(-bound, bound, size=(k * c_in, c_out))


def init_parameters(arch: Architecture, seed: int = 0) -> NetworkParameters:
    """Symmetric uniform kernel initialization, zero biases, unit batch-norm."""
    rng = np.random.default_rng(seed)
    c = arch.branch_channels
    mc = arch.mix_channels
    if arch.degenerate:
        zero = np.zeros(0)
        return NetworkParameters(
            arch=arch,
            bn_scale=np.ones(1),
            bn_shift=np.zeros(1),
            bn_mean=np.zeros(1),
            bn_var=np.ones(1),
            w2a=zero.reshape(0, 0), b2a=zero,
            w2b=zero.reshape(0, 0), b2b=zero,
            w2c=zero.reshape(0, 0), b2c=zero,
            w3=zero.reshape(0, 0), b3=zero,
            w4=zero.reshape(0, 0), b4=zero,
        )
    return NetworkParameters(
        arch=arch,
        bn_scale=np.ones(1),
        bn_shift=np.zeros(1),
        bn_mean=np.zeros(1),
        bn_var=np.ones(1),
        w2a=_glorot(rng, arch.branch_kernel, 1, c),
        b2a=np.zeros(c),
        w2b=_glorot(rng, arch.branch_kernel, 1, c),
        b2b=np.zeros(c),
        w2c=_glorot(rng, arch.branch_kernel, 1, c),
        b2c=np.zeros(c),
        w3=_glorot(rng, arch.mix_kernel, 2 * c, mc),
        b3=np.zeros(mc),
        w4=_glorot(rng, 1, mc, 1),
        b4=np.zeros(1),
    )


# --- circular convolution primitives -------------------------------------

_IDX_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _patch_index(m: int, k: int) -> np.ndarray:
    """(m, k) gather table for a centered circular kernel."""
    key = (m, k)
    idx = _IDX_CACHE.get(key)
    if idx is None:
        offsets = np.arange(k) - k // 2
        idx = (np.arange(m)[:, None] + offsets[None, :]) % m
        _IDX_CACHE[key] = idx
    return idx


def _gather_patches(x: np.ndarray, k: int) -> np.ndarray:
    """(B, m, Cin) -> (B, m, k*Cin) circular patch matrix."""
    B, m, c_in = x.shape
    return x[:, _patch_index(m, k), :].reshape(B, m, k * c_in)


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, k: int) -> np.ndarray:
    """Circular conv of x (B, m, Cin) with w (k*Cin, Cout)."""
    if k == 1:
        y = x @ w
    else:
        y = _gather_patches(x, k) @ w
    if b is not None:
        y += b
    return y


def _patches_grad_w(patches: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Kernel and bias gradients given the cached (B, m, k*Cin) patches."""
    B, m, kc = patches.shape
    gw = patches.reshape(B * m, kc).T @ g.reshape(B * m, -1)
    gb = g.sum(axis=(0, 1))
    return gw, gb


def _conv_grad_x(g: np.ndarray, w: np.ndarray, k: int, c_in: int) -> np.ndarray:
    """Gradient w.r.t. the conv input as shifted matmuls on padded g."""
    c_out = w.shape[1]
    if k == 1:
        return g @ w.T
    wj = w.reshape(k, c_in, c_out)
    pad = k // 2
    m = g.shape[1]
    gp = np.concatenate([g[:, -pad:], g, g[:, :pad]], axis=1)
    gx = gp[:, k - 1 : k - 1 + m] @ wj[0].T
    for j in range(1, k):
        gx += gp[:, k - 1 - j : k - 1 - j + m] @ wj[j].T
    return gx


# --- forward / backward ----------------------------------------------------


def _bn_forward(
    params: NetworkParameters, x: np.ndarray, train: bool, update_stats: bool
) -> tuple[np.ndarray, dict]:
    """Input batch-norm over batch and space (one channel)."""
    if train:
        mu = x.mean()
        var = x.var()
        if update_stats:
            params.bn_mean[0] = BN_MOMENTUM * params.bn_mean[0] + (1 - BN_MOMENTUM) * mu
            params.bn_var[0] = BN_MOMENTUM * params.bn_var[0] + (1 - BN_MOMENTUM) * var
    else:
        mu = params.bn_mean[0]
        var = params.bn_var[0]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xn = (x - mu) * inv_std
    u = params.bn_scale[0] * xn + params.bn_shift[0]
    return u, {"xn": xn, "inv_std": inv_std, "train": train}


def _bn_backward(
    params: NetworkParameters, cache: dict, gu: np.ndarray
) -> tuple[np.ndarray, float, float]:
    xn = cache["xn"]
    inv_std = cache["inv_std"]
    g_scale = float((gu * xn).sum())
    g_shift = float(gu.sum())
    gxn = gu * params.bn_scale[0]
    if cache["train"]:
        gx = inv_std * (gxn - gxn.mean() - xn * (gxn * xn).mean())
    else:
        gx = gxn * inv_std
    return gx, g_scale, g_shift


def _forward_cached(
    params: NetworkParameters, x: np.ndarray, train: bool, update_stats: bool
) -> tuple[np.ndarray, dict]:
    arch = params.arch
    cb = arch.branch_channels
    u, bn_cache = _bn_forward(params, x, train, update_stats)
    kb, km = arch.branch_kernel, arch.mix_kernel
    pu = _gather_patches(u[:, :, None], kb)
    w2 = np.hstack([params.w2a, params.w2b, params.w2c])
    abc = pu @ w2 + np.concatenate([params.b2a, params.b2b, params.b2c])
    rabc = np.maximum(abc, 0.0)
    ra = rabc[:, :, :cb]
    rb = rabc[:, :, cb : 2 * cb]
    rc = rabc[:, :, 2 * cb :]
    r2 = np.concatenate([ra, rb * rc], axis=2)
    p2 = _gather_patches(r2, km)
    h3 = p2 @ params.w3 + params.b3
    r3 = np.maximum(h3, 0.0)
    h4 = r3 @ params.w4 + params.b4
    y = x + h4[:, :, 0]
    cache = {
        "x": x, "bn": bn_cache, "pu": pu, "abc": abc, "rb": rb, "rc": rc,
        "p2": p2, "h3": h3, "r3": r3,
    }
    return y, cache


def _backward_cached(
    params: NetworkParameters, cache: dict, gy: np.ndarray, grads: dict[str, np.ndarray]
) -> np.ndarray:
    """Backprop one application; accumulates into grads, returns dL/dx."""
    arch = params.arch
    kb, km = arch.branch_kernel, arch.mix_kernel
    cb = arch.branch_channels
    gh4 = gy[:, :, None]
    grads["w4"] += cache["r3"].reshape(-1, arch.mix_channels).T @ gh4.reshape(-1, 1)
    grads["b4"] += gh4.sum(axis=(0, 1))
    gr3 = gh4 @ params.w4.T
    gh3 = gr3 * (cache["h3"] > 0)
    gw3, gb3 = _patches_grad_w(cache["p2"], gh3)
    grads["w3"] += gw3
    grads["b3"] += gb3
    gr2 = _conv_grad_x(gh3, params.w3, km, 2 * cb)
    gprod = gr2[:, :, cb:]
    # branch ReLU masks apply after routing the product gradient to b and c
    gabc = np.concatenate(
        [gr2[:, :, :cb], gprod * cache["rc"], gprod * cache["rb"]], axis=2
    ) * (cache["abc"] > 0)
    gw2, gb2 = _patches_grad_w(cache["pu"], gabc)
    grads["w2a"] += gw2[:, :cb]
    grads["w2b"] += gw2[:, cb : 2 * cb]
    grads["w2c"] += gw2[:, 2 * cb :]
    grads["b2a"] += gb2[:cb]
    grads["b2b"] += gb2[cb : 2 * cb]
    grads["b2c"] += gb2[2 * cb :]
    w2 = np.hstack([params.w2a, params.w2b, params.w2c])
    gu = _conv_grad_x(gabc, w2, kb, 1)
    gx_bn, g_scale, g_shift = _bn_backward(params, cache["bn"], gu[:, :, 0])
    grads["bn_scale"][0] += g_scale
    grads["bn_shift"][0] += g_shift
    return gy + gx_bn


def _as_batch(x: np.ndarray, m: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m:
        raise ContractViolation(f"state has length {x.shape[-1]}, expected {m}")
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ContractViolation("input must be (m,) or (batch, m)")


_LAYER_ORDER = ("batch-norm", "conv2", "bilinear-product", "conv3", "conv4", "residual")


def _first_nonfinite_layer(cache: dict, y: np.ndarray) -> str:
    checks = (
        ("batch-norm", cache["pu"]),
        ("conv2", cache["abc"]),
        ("conv3", cache["h3"]),
        ("conv4", cache["r3"]),
        ("residual", y),
    )
    for name, arr in checks:
        if not np.isfinite(arr).all():
            return name
    return "residual"


def forward(
    params: NetworkParameters,
    x: np.ndarray,
    mode: str = "infer",
    update_stats: bool = False,
) -> np.ndarray:
    """One surrogate step y = x + f(x); x may be (m,) or (batch, m)."""
    if mode not in ("train", "infer"):
        raise ContractViolation(f"unknown mode {mode!r}")
    xb, single = _as_batch(x, params.arch.m)
    if not np.isfinite(xb).all():
        raise ContractViolation("input state contains non-finite values")
    if params.arch.degenerate:
        y = xb.copy()
    else:
        y, cache = _forward_cached(params, xb, mode == "train", update_stats)
        if not np.isfinite(y).all():
            # Numerical blow-up of the map, not a caller error.
            raise IntegrationError(
                f"non-finite activation in layer {_first_nonfinite_layer(cache, y)}"
            )
    return y[0] if single else y


@dataclass
class TrainingBatch:
    """Inputs with their next-N_f targets and per-entry loss weights."""

    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.targets.ndim != 3 or self.inputs.ndim != 2:
            raise ContractViolation("batch arrays must be (B, m) and (B, N_f, m)")
        if self.targets.shape != self.weights.shape:
            raise ContractViolation("targets/weights shape mismatch")
        if self.targets.shape[0] != self.inputs.shape[0] or (
            self.targets.shape[2] != self.inputs.shape[1]
        ):
            raise ContractViolation("inputs/targets shape mismatch")
        if (self.weights < 0).any() or not np.isfinite(self.weights).all():
            raise ContractViolation("loss weights must be finite and >= 0")

    @property
    def n_lead(self) -> int:
        return self.targets.shape[1]


def _l2_penalty(params: NetworkParameters) -> float:
    return L2_COEF * float((params.w4 ** 2).sum())


def loss(params: NetworkParameters, batch: TrainingBatch, mode: str = "train") -> float:
    """Weighted multi-step squared error plus the L2 term on the final kernel."""
    train = mode == "train"
    s = batch.inputs
    total = 0.0
    for i in range(batch.n_lead):
        s = forward(params, s, mode="train" if train else "infer")
        r = s - batch.targets[:, i, :]
        total += float((batch.weights[:, i, :] * r * r).sum())
    return total + _l2_penalty(params)


def zero_gradients(params: NetworkParameters) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.trainable().items()}


def backward(
    params: NetworkParameters,
    batch: TrainingBatch,
    update_stats: bool = False,
    mode: str = "train",
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its gradient w.r.t. every trainable parameter group.

    Differentiates through the N_f-fold composition and, in train mode,
    through the batch statistics of every application.
    """
    if params.arch.degenerate:
        raise ContractViolation("degenerate architecture has no trainable stack")
    train = mode == "train"
    grads = zero_gradients(params)
    states = [batch.inputs]
    caches = []
    total = 0.0
    for i in range(batch.n_lead):
        y, cache = _forward_cached(params, states[-1], train, update_stats)
        caches.append(cache)
        states.append(y)
        r = y - batch.targets[:, i, :]
        total += float((batch.weights[:, i, :] * r * r).sum())
    gs = np.zeros_like(batch.inputs)
    for i in range(batch.n_lead - 1, -1, -1):
        gs = gs + 2.0 * batch.weights[:, i, :] * (states[i + 1] - batch.targets[:, i, :])
        gs = _backward_cached(params, caches[i], gs, grads)
    grads["w4"] += 2.0 * L2_COEF * params.w4
    return total + _l2_penalty(params), grads


def forward_tangent(
    params: NetworkParameters, x: np.ndarray, dxs: np.ndarray
) -> np.ndarray:
    """Exact Jacobian of the infer-mode map at x applied to rows of dxs.

    Batch-norm statistics are frozen, so the map is piecewise linear and the
    tangent is exact away from ReLU kinks.
    """
    m = params.arch.m
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m,):
        raise ContractViolation("base state must have shape (m,)")
    dxs, single = _as_batch(dxs, m)
    if params.arch.degenerate:
        out = dxs.copy()
        return out[0] if single else out
    _, cache = _forward_cached(params, x[None, :], train=False, update_stats=False)
    arch = params.arch
    kb, km = arch.branch_kernel, arch.mix_kernel
    scale = params.bn_scale[0] * cache["bn"]["inv_std"]
    du = (dxs * scale)[:, :, None]
    cb = params.arch.branch_channels
    mask = cache["abc"] > 0
    da = _conv(du, params.w2a, None, kb) * mask[:, :, :cb]
    db = _conv(du, params.w2b, None, kb) * mask[:, :, cb : 2 * cb]
    dc = _conv(du, params.w2c, None, kb) * mask[:, :, 2 * cb :]
    dr2 = np.concatenate([da, db * cache["rc"] + cache["rb"] * dc], axis=2)
    dh3 = _conv(dr2, params.w3, None, km)
    dr3 = dh3 * (cache["h3"] > 0)
    dy = dxs + (dr3 @ params.w4)[:, :, 0]
    out = dy
    return out[0] if single else out


def infer_step(params: NetworkParameters):
    """The surrogate as a plain batched state-to-state map (frozen statistics)."""

    def step(x: np.ndarray) -> np.ndarray:
        return forward(params, x, mode="infer")

    return step
