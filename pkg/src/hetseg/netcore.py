"""A small fully convolutional segmentation net with hand-written backprop.

Activations are kept channel-first across the batch in a zero-padded flat
layout (see ``_Grid``). Public entry points take and return batch-first
``(N, C, H, W)`` arrays.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_CHANNELS = (16, 16, 32, 32, 32, 32)
CHECKPOINT_VERSION = 1


class NetError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    """Architecture: ``len(channels)`` 3x3 conv+ReLU layers, then a 1x1 classifier.

    ``dropout_rates[i]`` is applied to the input of layer ``i``; there is one
    rate per layer including the classifier.
    """

    num_classes: int = 6
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    dropout_rates: tuple[float, ...] = (0.0,) * (len(DEFAULT_CHANNELS) + 1)
    in_channels: int = 1
    kernel: int = 3
    dtype: str = "float32"

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "dropout_rates", tuple(float(p) for p in self.dropout_rates))
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not self.channels or min(self.channels) < 1:
            raise ValueError("need at least one hidden layer with >= 1 channel")
        if len(self.dropout_rates) != self.n_layers:
            raise ValueError(
                f"dropout_rates has {len(self.dropout_rates)} entries, "
                f"expected one per layer ({self.n_layers})"
            )
        if any(not 0.0 <= p < 1.0 for p in self.dropout_rates):
            raise ValueError(f"dropout rates must lie in [0, 1): {self.dropout_rates}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")

    @property
    def n_layers(self) -> int:
        return len(self.channels) + 1

    @property
    def n_outputs(self) -> int:
        return self.num_classes + 1

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * len(self.channels)

    def layer_shapes(self) -> list[tuple[int, int, int, int]]:
        shapes = []
        cin = self.in_channels
        for cout in self.channels:
            shapes.append((cout, cin, self.kernel, self.kernel))
            cin = cout
        shapes.append((self.n_outputs, cin, 1, 1))
        return shapes

    def with_dropout(self, rates) -> "NetConfig":
        return replace(self, dropout_rates=tuple(rates))


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        """Flat view in checkpoint order: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def zeros_like(self) -> "ModelParams":
        return ModelParams([np.zeros_like(w) for w in self.weights],
                           [np.zeros_like(b) for b in self.biases])

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def check(self, cfg: NetConfig) -> None:
        shapes = cfg.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise NetError(f"expected {len(shapes)} layers, got {len(self.weights)}")
        for i, (w, b, s) in enumerate(zip(self.weights, self.biases, shapes)):
            if w.shape != s or b.shape != (s[0],):
                raise NetError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {s}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.shape == y.shape and x.dtype == y.dtype and np.array_equal(x, y) for x, y in zip(a, b)
        )


@dataclass
class ForwardTrace:
    cfg: NetConfig
    batch_shape: tuple[int, int, int]
    inputs: list[np.ndarray] = field(default_factory=list)  # padded-flat layer inputs
    masks: list[np.ndarray | None] = field(default_factory=list)
    active: list[np.ndarray] = field(default_factory=list)  # ReLU on-sets, zero on the border
    weights: list[np.ndarray] = field(default_factory=list)
    consumed: bool = False


@dataclass
class EmaState:
    params: ModelParams
    alpha: float = 0.99
    steps: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {self.alpha}")


@dataclass
class SgdState:
    velocity: ModelParams
    steps: int = 0


def init_params(cfg: NetConfig, seed: int) -> ModelParams:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for shape in cfg.layer_shapes():
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        weights.append(w.astype(cfg.dtype))
        biases.append(np.zeros(shape[0], dtype=cfg.dtype))
    return ModelParams(weights, biases)


def zero_params(cfg: NetConfig) -> ModelParams:
    return ModelParams([np.zeros(s, dtype=cfg.dtype) for s in cfg.layer_shapes()],
                       [np.zeros(s[0], dtype=cfg.dtype) for s in cfg.layer_shapes()])


def _taps(wt: np.ndarray) -> np.ndarray:
    """(Cout, Cin, k, k) -> contiguous (k*k, Cout, Cin) so each tap feeds BLAS directly."""
    k = wt.shape[-1]
    return np.ascontiguousarray(wt.transpose(2, 3, 0, 1)).reshape(k * k, *wt.shape[:2])


class _Grid:
    """Zero-padded, flattened layout shared by every layer of one pass.

    An activation is stored as ``(C, slack + N*(H+2p)*(W+2p) + slack)`` with
    zero borders, so the input window of a k x k convolution at offset
    ``(dy, dx)`` is a contiguous column slice and the convolution becomes
    k*k matrix products with no im2col copy.
    """

    def __init__(self, n: int, h: int, w: int, k: int, dtype) -> None:
        self.n, self.h, self.w, self.k = n, h, w, k
        self.p = k // 2
        self.hp, self.wp = h + 2 * self.p, w + 2 * self.p
        self.length = n * self.hp * self.wp
        self.slack = self.p * self.wp + self.p
        self.offsets = [dy * self.wp + dx for dy in range(k) for dx in range(k)]
        interior = np.zeros((n, self.hp, self.wp), dtype=bool)
        interior[:, self.p:self.p + h, self.p:self.p + w] = True
        self.interior = interior.reshape(1, -1)
        self.dtype = dtype

    def embed(self, x: np.ndarray) -> np.ndarray:
        """(C, N, H, W) -> padded flat buffer with slack."""
        c = x.shape[0]
        buf = np.zeros((c, 2 * self.slack + self.length), dtype=self.dtype)
        view = buf[:, self.slack:self.slack + self.length].reshape(c, self.n, self.hp, self.wp)
        view[:, :, self.p:self.p + self.h, self.p:self.p + self.w] = x
        return buf

    def extend(self, core: np.ndarray) -> np.ndarray:
        """Add slack columns around a (C, length) array already in padded layout."""
        buf = np.zeros((core.shape[0], 2 * self.slack + self.length), dtype=self.dtype)
        buf[:, self.slack:self.slack + self.length] = core
        return buf

    def core(self, buf: np.ndarray) -> np.ndarray:
        return buf[:, self.slack:self.slack + self.length]

    def crop(self, core: np.ndarray) -> np.ndarray:
        """(C, length) -> (C, N, H, W)."""
        c = core.shape[0]
        grid = core.reshape(c, self.n, self.hp, self.wp)
        return grid[:, :, self.p:self.p + self.h, self.p:self.p + self.w]

    def conv(self, wt: np.ndarray, buf: np.ndarray) -> np.ndarray:
        """Same-padded convolution of a slack buffer; result is (Cout, length)."""
        k = wt.shape[-1]
        if k == 1:
            return wt[:, :, 0, 0] @ self.core(buf)
        taps = _taps(wt)
        out = np.empty((wt.shape[0], self.length), dtype=self.dtype)
        tmp = np.empty_like(out)
        for j, off in enumerate(self.offsets):
            target = out if j == 0 else tmp
            np.matmul(taps[j], buf[:, off:off + self.length], out=target)
            if j:
                out += tmp
        return out

    def conv_grads(self, wt: np.ndarray, buf: np.ndarray, dz: np.ndarray,
                   need_input: bool) -> tuple[np.ndarray, np.ndarray | None]:
        """Weight gradient and (optionally) input gradient in padded-core layout."""
        k = wt.shape[-1]
        if k == 1:
            dw = (dz @ self.core(buf).T)[:, :, None, None]
            dx = wt[:, :, 0, 0].T @ dz if need_input else None
            return dw, dx
        taps = _taps(wt)
        dw = np.empty((k * k,) + wt.shape[:2], dtype=self.dtype)
        for j, off in enumerate(self.offsets):
            np.matmul(dz, buf[:, off:off + self.length].T, out=dw[j])
        dw = np.ascontiguousarray(dw.reshape(k, k, *wt.shape[:2]).transpose(2, 3, 0, 1))
        if not need_input:
            return dw, None
        dze = self.extend(dz)
        dx = np.empty((wt.shape[1], self.length), dtype=self.dtype)
        tmp = np.empty_like(dx)
        for j, off in enumerate(self.offsets):
            start = 2 * self.slack - off
            target = dx if j == 0 else tmp
            np.matmul(taps[j].T, dze[:, start:start + self.length], out=target)
            if j:
                dx += tmp
        return dw, dx


def forward(
    params: ModelParams,
    images: np.ndarray,
    cfg: NetConfig,
    rng: np.random.Generator | None = None,
    keep_trace: bool = True,
) -> tuple[np.ndarray, ForwardTrace | None]:
    """Compute logits for one image ``(H, W)`` or a batch ``(N, H, W)``.

    Passing ``rng`` selects train mode, where each layer with a non-zero rate
    draws an inverted-dropout mask from it. Without ``rng`` the net runs in
    eval mode and dropout is inert.
    """
    images = np.asarray(images)
    single = images.ndim == 2
    if single:
        images = images[None]
    if images.ndim != 3:
        raise ValueError(f"expected (H, W) or (N, H, W) input, got shape {images.shape}")
    if not np.all(np.isfinite(images)):
        raise NetError("input image contains non-finite values")
    n, h, w = images.shape
    dtype = np.dtype(cfg.dtype)
    grid = _Grid(n, h, w, cfg.kernel, dtype)
    buf = grid.embed(images.astype(dtype, copy=False)[None])

    trace = ForwardTrace(cfg, (n, h, w)) if keep_trace else None
    last = cfg.n_layers - 1
    for i, (wt, b) in enumerate(zip(params.weights, params.biases)):
        mask = None
        rate = cfg.dropout_rates[i]
        if rng is not None and rate > 0.0:
            keep = rng.random(buf.shape, dtype=dtype.type if dtype == np.float64 else np.float32)
            mask = (keep >= rate).astype(dtype) * dtype.type(1.0 / (1.0 - rate))
            buf = buf * mask
        with np.errstate(over="ignore", invalid="ignore"):  # reported just below
            z = grid.conv(wt, buf)
            z += b[:, None]
        if not np.all(np.isfinite(z)):
            raise NetError(f"non-finite activations in layer {i}")
        if trace is not None:
            trace.inputs.append(buf)
            trace.masks.append(mask)
            trace.weights.append(wt)
        if i < last:
            on = (z > 0) & grid.interior
            if trace is not None:
                trace.active.append(on)
            buf = grid.extend(z * on)
        else:
            logits = grid.crop(z)
    logits = np.ascontiguousarray(logits.transpose(1, 0, 2, 3))
    return (logits[0] if single else logits), trace


def backward(trace: ForwardTrace, grad_logits: np.ndarray) -> ModelParams:
    """Parameter gradients given dLoss/dlogits for the traced forward pass."""
    if trace.consumed:
        raise NetError("forward trace was already consumed by a backward pass")
    g = np.asarray(grad_logits)
    n, h, w = trace.batch_shape
    if g.ndim == 3:
        g = g[None]
    k_out = trace.cfg.n_outputs
    if g.shape != (n, k_out, h, w):
        raise ValueError(f"grad_logits shape {g.shape} does not match {(n, k_out, h, w)}")
    if not np.all(np.isfinite(g)):
        raise NetError("non-finite gradient passed to backward")
    trace.consumed = True
    dtype = np.dtype(trace.cfg.dtype)
    grid = _Grid(n, h, w, trace.cfg.kernel, dtype)
    dz = grid.core(grid.embed(g.astype(dtype, copy=False).transpose(1, 0, 2, 3)))

    n_layers = trace.cfg.n_layers
    dws: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in range(n_layers - 1, -1, -1):
        dws[i], dx = grid.conv_grads(trace.weights[i], trace.inputs[i], dz, need_input=i > 0)
        dbs[i] = dz.sum(axis=1)
        if i == 0:
            break
        mask = trace.masks[i]
        if mask is not None:
            dx = dx * grid.core(mask)
        dz = dx * trace.active[i - 1]
    # a trace is single use; drop the cached buffers
    trace.inputs.clear()
    trace.masks.clear()
    trace.active.clear()
    return ModelParams(dws, dbs)


def softmax(logits: np.ndarray, axis: int = -3) -> np.ndarray:
    """Class posteriors; the class axis defaults to the channel axis of (…, K, H, W)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sgd_step(params: ModelParams, grads: ModelParams, state: SgdState, lr: float,
             momentum: float) -> None:
    """Heavy-ball update in place: v <- m*v + g, theta <- theta - lr*v."""
    for p, g, v in zip(params.arrays(), grads.arrays(), state.velocity.arrays()):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        v *= p.dtype.type(momentum)
        v += g
        if not np.all(np.isfinite(v)):
            raise NetError("non-finite parameter update")
        p -= p.dtype.type(lr) * v
    state.steps += 1


def new_sgd_state(params: ModelParams) -> SgdState:
    return SgdState(params.zeros_like())


def ema_from(params: ModelParams, alpha: float) -> EmaState:
    return EmaState(params.copy(), alpha)


def ema_update(ema: EmaState, params: ModelParams) -> None:
    """theta_ema <- alpha*theta_ema + (1-alpha)*theta, element-wise."""
    for e, p in zip(ema.params.arrays(), params.arrays()):
        if e.shape != p.shape:
            raise ValueError(f"EMA shape {e.shape} does not match parameter {p.shape}")
        e *= e.dtype.type(ema.alpha)
        e += e.dtype.type(1.0 - ema.alpha) * p
    ema.steps += 1


# -- checkpoints -----------------------------------------------------------

def _write_f32(path: Path, params: ModelParams) -> None:
    flat = np.concatenate([a.ravel() for a in params.arrays()]).astype("<f4")
    path.write_bytes(flat.tobytes())


def _read_f32(path: Path, cfg: NetConfig) -> ModelParams:
    shapes = cfg.layer_shapes()
    expected = sum(int(np.prod(s)) + s[0] for s in shapes)
    if not path.exists():
        raise FileNotFoundError(f"missing parameter file {path}")
    flat = np.frombuffer(path.read_bytes(), dtype="<f4")
    if flat.size != expected:
        raise NetError(f"{path.name}: {flat.size} values, expected {expected}")
    weights, biases, at = [], [], 0
    for s in shapes:
        size = int(np.prod(s))
        weights.append(flat[at:at + size].reshape(s).astype(cfg.dtype))
        at += size
        biases.append(flat[at:at + s[0]].astype(cfg.dtype))
        at += s[0]
    return ModelParams(weights, biases)


def save_checkpoint(directory, params: ModelParams, cfg: NetConfig, ema: EmaState | None = None,
                    step: int = 0, meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params.check(cfg)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "num_classes": cfg.num_classes,
        "channels": list(cfg.channels),
        "dropout_rates": list(cfg.dropout_rates),
        "layer_shapes": [list(s) for s in cfg.layer_shapes()],
        "step": int(step),
        "ema_alpha": None if ema is None else ema.alpha,
        "has_ema": ema is not None,
        "meta": meta or {},
    }
    _write_f32(directory / "params.f32", params)
    ema_path = directory / "ema.f32"
    if ema is not None:
        _write_f32(ema_path, ema.params)
    elif ema_path.exists():
        ema_path.unlink()
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    return directory


def load_checkpoint(directory) -> tuple[ModelParams, EmaState | None, NetConfig, dict]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise NetError(f"unsupported checkpoint version {manifest.get('version')}")
    cfg = NetConfig(num_classes=manifest["num_classes"], channels=tuple(manifest["channels"]),
                    dropout_rates=tuple(manifest["dropout_rates"]))
    if [list(s) for s in cfg.layer_shapes()] != manifest["layer_shapes"]:
        raise NetError("manifest layer shapes disagree with its architecture fields")
    params = _read_f32(directory / "params.f32", cfg)
    ema = None
    if manifest["has_ema"]:
        ema = EmaState(_read_f32(directory / "ema.f32", cfg), manifest["ema_alpha"],
                       manifest["step"])
    return params, ema, cfg, manifest


# -- gradient check ----------------------------------------------------------

def reduced_config(num_classes: int = 6, dropout_rates=(0.0, 0.0)) -> NetConfig:
    """Two-layer, four-channel float64 net used for gradient and dropout checks."""
    return NetConfig(num_classes=num_classes, channels=(4,), dropout_rates=tuple(dropout_rates),
                     dtype="float64")


def grad_check(cfg: NetConfig | None = None, loss: str = "ce", seed: int = 0,
               n_params: int = 200, step: float = 1e-4, size: int = 8) -> float:
    """Max relative error between backprop and central differences.

    ``loss`` is ``"ce"``, ``"ace"`` (protocol annotating only the lower half
    of the classes) or ``"consistency"`` (against a fixed random teacher).
    """
    from hetseg import losses
    from hetseg.labelspace import AnnotationProtocol, build_label_space, relabel_to_protocol

    cfg = cfg or reduced_config()
    if cfg.dtype != "float64" or any(cfg.dropout_rates):
        cfg = replace(cfg, dtype="float64", dropout_rates=(0.0,) * cfg.n_layers)
    rng = np.random.default_rng(seed)
    c = cfg.num_classes
    params = init_params(cfg, seed)
    for b in params.biases:
        b[:] = rng.normal(0.0, 0.1, size=b.shape)
    image = rng.normal(size=(size, size))
    full = rng.integers(0, c + 1, size=(size, size))
    space = build_label_space([f"c{i}" for i in range(1, c + 1)], ["overlapping"] * c)
    proto = AnnotationProtocol(2, frozenset(range(1, max(1, c // 2) + 1)))
    teacher = softmax(rng.normal(size=(c + 1, size, size)))

    if loss == "ce":
        def objective(post):
            return losses.ce_loss(post, full)
    elif loss == "ace":
        labels = relabel_to_protocol(full, proto, space)

        def objective(post):
            return losses.ace_loss(post, labels, proto, space)
    elif loss == "consistency":
        def objective(post):
            return losses.consistency_loss(post, teacher)
    else:
        raise ValueError(f"unknown loss {loss!r}")

    def value(p: ModelParams) -> float:
        logits, _ = forward(p, image, cfg, keep_trace=False)
        return objective(softmax(logits)).loss

    logits, trace = forward(params, image, cfg)
    analytic = backward(trace, objective(softmax(logits)).grad_logits)

    arrays, grads = params.arrays(), analytic.arrays()
    index = [(a, j) for a, arr in enumerate(arrays) for j in range(arr.size)]
    picks = rng.choice(len(index), size=min(n_params, len(index)), replace=False)
    worst = 0.0
    for pick in picks:
        a, j = index[pick]
        flat = arrays[a].reshape(-1)
        saved = flat[j]
        flat[j] = saved + step
        up = value(params)
        flat[j] = saved - step
        down = value(params)
        flat[j] = saved
        g_fd = (up - down) / (2 * step)
        g_a = grads[a].reshape(-1)[j]
        err = abs(g_a - g_fd) / max(1e-8, abs(g_a) + abs(g_fd))
        worst = max(worst, float(err))
    log.debug("grad_check %s: max relative error %.3e", loss, worst)
    return worst
