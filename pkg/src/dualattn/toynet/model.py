"""Attention-gated convolutional classifier with two gate sites and a witness layer.

Layout (NCHW, 64x64x1 input)::

    conv 3x3/2 -> 16@32x32 -> relu
    conv 3x3/2 -> 32@16x16 -> relu -> [fine attention unit]     (site "fine")
    conv 3x3/2 -> 64@8x8   -> relu -> [coarse attention unit]   (site "coarse")
    global average pool -> affine -> logits
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..attention import cascade_t
from ..consistency import direct_kl_t, penalty_t
from ..diffkit import Tensor, ops, parameter
from ..errors import RejectedInput
from ..grid import build_neighborhood

INPUT_SIDE = 64
FINE_SIDE, FINE_CHANNELS = 16, 32
COARSE_SIDE, COARSE_CHANNELS = 8, 64
STEM_CHANNELS = 16
N_CLASSES = 2

VARIANTS = ("baseline", "tau_k", "tau_l", "unconstrained", "dual", "kl_zero_lf", "kl_zero_fl")
PENALIZED = ("dual", "kl_zero_lf", "kl_zero_fl")
WITNESS_MODES = ("free", "map", "closed_form")
_SITES = {
    "baseline": (),
    "tau_k": ("fine",),
    "tau_l": ("coarse",),
    "unconstrained": ("fine", "coarse"),
    "dual": ("fine", "coarse"),
    "kl_zero_lf": ("fine", "coarse"),
    "kl_zero_fl": ("fine", "coarse"),
}

NMAP = build_neighborhood(FINE_SIDE, COARSE_SIDE)
ASSIGNMENT = NMAP.assignment_matrix()


@dataclass
class TrainConfig:
    variant: str = "dual"
    alpha: float = 10.0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    witness: str = "free"
    key_scale: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise RejectedInput(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.witness not in WITNESS_MODES:
            raise RejectedInput(f"unknown witness mode {self.witness!r}")
        if self.alpha < 0:
            raise RejectedInput("alpha must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise RejectedInput("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")

    @property
    def sites(self) -> tuple:
        return _SITES[self.variant]

    @property
    def penalized(self) -> bool:
        return self.variant in PENALIZED

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise RejectedInput(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(config: TrainConfig) -> dict[str, Tensor]:
    """Deterministic initialization from ``config.seed``; conv biases and head start at zero."""
    rng = np.random.default_rng(config.seed)
    p = {
        "conv1.w": _he(rng, (STEM_CHANNELS, 1, 3, 3), 9),
        "conv1.b": np.zeros(STEM_CHANNELS),
        "conv2.w": _he(rng, (FINE_CHANNELS, STEM_CHANNELS, 3, 3), 9 * STEM_CHANNELS),
        "conv2.b": np.zeros(FINE_CHANNELS),
        "conv3.w": _he(rng, (COARSE_CHANNELS, FINE_CHANNELS, 3, 3), 9 * FINE_CHANNELS),
        "conv3.b": np.zeros(COARSE_CHANNELS),
        "head.w": np.zeros((N_CLASSES, COARSE_CHANNELS)),
        "head.b": np.zeros(N_CLASSES),
    }
    for site, side, d in (("fine", FINE_SIDE, FINE_CHANNELS), ("coarse", COARSE_SIDE, COARSE_CHANNELS)):
        if site not in config.sites:
            continue
        for stage in ("a", "b"):
            p[f"{site}.{stage}.U"] = np.eye(d) + rng.normal(0.0, 0.1 / np.sqrt(d), size=(d, d))
            p[f"{site}.{stage}.keys"] = rng.normal(0.0, config.key_scale, size=(side * side, d))
    if config.variant == "dual":
        if config.witness == "free":
            p["witness.lam"] = np.zeros(COARSE_SIDE * COARSE_SIDE)
        elif config.witness == "map":
            p["witness.map"] = np.array([-0.5, 0.5, 0.0])
    return {name: parameter(v, name) for name, v in p.items()}


@dataclass
class ForwardResult:
    logits: Tensor
    tau_fine: Tensor | None
    tau_coarse: Tensor | None
    lam: Tensor | None


def _to_cells(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def _from_cells(cells: Tensor, side: int) -> Tensor:
    n, p, c = cells.shape
    return ops.transpose(ops.reshape(cells, (n, side, side, c)), (0, 3, 1, 2))


def _attention_unit(params, site, x: Tensor) -> tuple[Tensor, Tensor]:
    side = x.shape[2]
    cells = _to_cells(x)
    gate_a = (params[f"{site}.a.U"], params[f"{site}.a.keys"])
    gate_b = (params[f"{site}.b.U"], params[f"{site}.b.keys"])
    tau, attended = cascade_t(gate_a, gate_b, cells)
    # each attend stage scales a uniform map by 1/P; undo that so activations keep their range
    n_cells = side * side
    attended = ops.scale(attended, float(n_cells * n_cells))
    return tau, _from_cells(attended, side)


def witness_closed_form_t(tau_fine: Tensor, tau_coarse: Tensor) -> Tensor:
    from ..consistency import SMOOTHING_FLOOR

    log_t = ops.log(ops.clip_min(ops.matmul(tau_fine, Tensor(ASSIGNMENT)), SMOOTHING_FLOOR))
    log_l = ops.log(ops.clip_min(tau_coarse, SMOOTHING_FLOOR))
    return ops.scale(ops.sub(log_t, log_l), 0.5)


def _witness(params, config: TrainConfig, tau_fine: Tensor, tau_coarse: Tensor) -> Tensor:
    from ..consistency import SMOOTHING_FLOOR

    n = tau_coarse.shape[0]
    if config.witness == "free":
        return ops.broadcast_to(params["witness.lam"], (n, tau_coarse.shape[1]))
    if config.witness == "closed_form":
        return witness_closed_form_t(tau_fine, tau_coarse)
    wmap = params["witness.map"]
    w1, w2, b = (ops.reshape(ops.matmul(ops.reshape(wmap, (1, 3)), Tensor(np.eye(3)[:, [k]])), ()) for k in range(3))
    log_l = ops.log(ops.clip_min(tau_coarse, SMOOTHING_FLOOR))
    log_t = ops.log(ops.clip_min(ops.matmul(tau_fine, Tensor(ASSIGNMENT)), SMOOTHING_FLOOR))
    return ops.add(ops.add(ops.pointwise_mul(w1, log_l), ops.pointwise_mul(w2, log_t)), b)


def forward(params: dict[str, Tensor], config: TrainConfig, images) -> ForwardResult:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
    if x.data.ndim == 3 and x.shape[1:] == (INPUT_SIDE, INPUT_SIDE):
        x = ops.reshape(x, (x.shape[0], 1, INPUT_SIDE, INPUT_SIDE))
    if x.data.ndim != 4 or x.shape[1:] != (1, INPUT_SIDE, INPUT_SIDE):
        raise RejectedInput(f"expected images of shape (N, {INPUT_SIDE}, {INPUT_SIDE}), got {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise RejectedInput("images contain non-finite values")
    h = ops.relu(ops.conv2d(x, params["conv1.w"], params["conv1.b"], stride=2, padding=1))
    h = ops.relu(ops.conv2d(h, params["conv2.w"], params["conv2.b"], stride=2, padding=1))
    tau_fine = tau_coarse = lam = None
    if "fine" in config.sites:
        tau_fine, h = _attention_unit(params, "fine", h)
    h = ops.relu(ops.conv2d(h, params["conv3.w"], params["conv3.b"], stride=2, padding=1))
    if "coarse" in config.sites:
        tau_coarse, h = _attention_unit(params, "coarse", h)
    pooled = ops.mean(ops.reshape(h, (h.shape[0], COARSE_CHANNELS, -1)), axis=2)
    logits = ops.linear(pooled, params["head.w"], params["head.b"])
    if config.variant == "dual":
        lam = _witness(params, config, tau_fine, tau_coarse)
    return ForwardResult(logits, tau_fine, tau_coarse, lam)


def penalty_terms(out: ForwardResult, config: TrainConfig) -> Tensor | None:
    """Per-sample consistency penalty for penalized variants, else ``None``."""
    if config.variant == "dual":
        return penalty_t(out.tau_fine, out.tau_coarse, out.lam, ASSIGNMENT)
    if config.variant in ("kl_zero_lf", "kl_zero_fl"):
        marg = ops.matmul(out.tau_fine, Tensor(ASSIGNMENT))
        if config.variant == "kl_zero_lf":
            return direct_kl_t(out.tau_coarse, marg)
        return direct_kl_t(marg, out.tau_coarse)
    return None


def loss(out: ForwardResult, labels, config: TrainConfig) -> tuple[Tensor, Tensor, Tensor | None]:
    """Returns ``(total, cross_entropy, mean_penalty or None)``."""
    ce = ops.cross_entropy_with_logits(out.logits, labels)
    pen = penalty_terms(out, config)
    if pen is None:
        return ce, ce, None
    mean_pen = ops.mean(pen)
    return ops.add(ce, ops.scale(mean_pen, config.alpha)), ce, mean_pen


def marginal_residual_batch(tau_fine: np.ndarray, tau_coarse: np.ndarray) -> np.ndarray:
    """Per-sample mean over coarse cells of ``|tau_coarse - marginal(tau_fine)|``."""
    return np.abs(tau_coarse - tau_fine @ ASSIGNMENT).mean(axis=1)
