"""Sharing policy: ground truth, policy network, selection, training.

The policy decides which superpatches (2x2 blocks of patches, i.e.
2P x 2P pixel squares) may share one token. Ground truth marks a
superpatch when its mask square holds exactly one class id. The policy
network is a small strided conv stack ending in a 1x1 head with two
logits per superpatch; softmax gives the probability of "single class".
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .optim import SGD
from .scenes import single_class_grid
from .tensor import (Tape, Tensor, add, conv2d, cross_entropy, gelu,
                     reshape, scale, transpose)

# Threshold on policy scores for dynamic selection; the sweep's best
# combined-mIoU value.
DEFAULT_TAU = 0.4


@dataclass(frozen=True)
class PolicyNetConfig:
    widths: tuple = (16, 32, 64, 64)
    downsample: int = 8  # must equal 2 * patch_size
    lr: float = 0.05
    weight_decay: float = 1e-3
    iterations: int = 400
    batch_size: int = 8

    def __post_init__(self):
        if not self.widths:
            raise ConfigError("policy needs at least one conv stage")
        strides = _stride_schedule(len(self.widths), self.downsample)
        object.__setattr__(self, "_strides", strides)

    @property
    def patch_size(self) -> int:
        return self.downsample // 2

    @property
    def strides(self) -> tuple:
        return self._strides


def _stride_schedule(num_stages: int, downsample: int) -> tuple:
    """Distribute stride-2 stages so the stack downsamples by `downsample`."""
    k = downsample.bit_length() - 1
    if downsample < 2 or (1 << k) != downsample:
        raise ConfigError(f"downsample must be a power of two >= 2, got {downsample}")
    if k > num_stages:
        raise ConfigError(
            f"{num_stages} conv stages cannot downsample by {downsample}"
        )
    return (2,) * k + (1,) * (num_stages - k)


# ------------------------------------------------------------- ground truth


def gt_policy(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Boolean grid [H/(2P), W/(2P)]: true iff the superpatch is one class."""
    return single_class_grid(mask, patch_size)


# ------------------------------------------------------------------ network


def init_policy(config: PolicyNetConfig, seed: int, in_channels: int = 3) -> dict:
    """Conv stages get scaled-normal weights; the 1x1 head starts at zero,
    so an untrained policy scores every superpatch exactly 0.5."""
    rng = np.random.default_rng(seed)
    params = {}
    prev = in_channels
    for i, width in enumerate(config.widths):
        params[f"stage{i}.w"] = Tensor(
            0.02 * rng.standard_normal((width, prev, 3, 3)), requires_grad=True
        )
        params[f"stage{i}.b"] = Tensor(np.zeros(width), requires_grad=True)
        prev = width
    params["head.w"] = Tensor(np.zeros((2, prev, 1, 1)), requires_grad=True)
    params["head.b"] = Tensor(np.zeros(2), requires_grad=True)
    return params


def _num_stages(params: dict) -> int:
    return sum(1 for name in params if name.endswith(".w") and name.startswith("stage"))


def policy_logits(image, params: dict, patch_size: int) -> Tensor:
    """Differentiable forward pass to the two-logit grid [2, Gh, Gw]."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim != 3:
        raise DimensionError(f"policy input must be [3, H, W], got {x.shape}")
    sp = 2 * patch_size
    if x.data.shape[1] % sp or x.data.shape[2] % sp:
        raise DimensionError(
            f"image {x.data.shape[1]}x{x.data.shape[2]} not divisible by {sp}"
        )
    strides = _stride_schedule(_num_stages(params), sp)
    for i, stride in enumerate(strides):
        x = conv2d(x, params[f"stage{i}.w"], params[f"stage{i}.b"],
                   stride=stride, padding=1)
        x = gelu(x)
    return conv2d(x, params["head.w"], params["head.b"])


def policy_forward(image, params: dict, patch_size: int) -> np.ndarray:
    """PolicyScores grid [Gh, Gw]: probability each superpatch is one class."""
    logits = policy_logits(image, params, patch_size).data
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e[1] / e.sum(axis=0)


# ---------------------------------------------------------------- selection


@dataclass
class SharingPolicy:
    """Which superpatches share a token, and in what selection order."""

    share_grid: np.ndarray  # bool [Gh, Gw]
    ordered_shared: list = field(default_factory=list)  # (row, col) pairs

    def __post_init__(self):
        self.share_grid = np.asarray(self.share_grid, dtype=bool)
        if self.share_grid.ndim != 2:
            raise DimensionError("share_grid must be 2-D")
        if int(self.share_grid.sum()) != len(self.ordered_shared):
            raise UsageError("share_grid and ordered_shared disagree about S")

    @property
    def s_shared(self) -> int:
        return len(self.ordered_shared)

    @classmethod
    def empty(cls, grid_hw) -> "SharingPolicy":
        return cls(np.zeros(grid_hw, dtype=bool), [])


def select_top_s(scores: np.ndarray, s_shared: int) -> SharingPolicy:
    """Select the S highest scores; ties resolved by raster order."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise DimensionError(f"scores must be a 2-D grid, got {scores.shape}")
    total = scores.size
    if not 0 <= s_shared <= total:
        raise UsageError(f"S={s_shared} outside [0, {total}]")
    gw = scores.shape[1]
    # Stable argsort of the negated grid: equal scores keep raster order.
    order = np.argsort(-scores.ravel(), kind="stable")[:s_shared]
    grid = np.zeros(scores.shape, dtype=bool)
    grid.ravel()[order] = True
    ordered = [(int(i) // gw, int(i) % gw) for i in order]
    return SharingPolicy(grid, ordered)


def precision(policy: SharingPolicy, gt: np.ndarray) -> float:
    """Fraction of selected superpatches that are truly single-class."""
    gt = np.asarray(gt, dtype=bool)
    if gt.shape != policy.share_grid.shape:
        raise DimensionError(
            f"policy grid {policy.share_grid.shape} vs gt {gt.shape}"
        )
    if policy.s_shared == 0:
        raise UsageError("precision undefined for S=0")
    hits = sum(1 for r, c in policy.ordered_shared if gt[r, c])
    return hits / policy.s_shared


def random_scores(grid_hw, seed: int, index: int) -> np.ndarray:
    """Seeded per-image uniform scores for the random-sharing baseline."""
    rng = np.random.default_rng([seed, index])
    return rng.uniform(size=grid_hw)


def dynamic_select(scores: np.ndarray, tau: float, available_settings) -> int:
    """S* = count(scores > tau); pick the largest available S with S < S*."""
    settings = list(available_settings)
    if not settings:
        raise UsageError("available_settings must not be empty")
    if settings != sorted(settings) or settings[0] != 0:
        raise UsageError("available_settings must be ascending and contain 0")
    s_star = int((np.asarray(scores) > tau).sum())
    chosen = 0
    for s in settings:
        if s < s_star:
            chosen = s
    return chosen


# -------------------------------------------------------------- checkpoints


def save_policy(path, params: dict, config: PolicyNetConfig) -> None:
    from . import fileio

    arrays = {"meta.downsample": np.float64(config.downsample)}
    arrays.update({name: p.data for name, p in params.items()})
    fileio.write_checkpoint(path, arrays)


def load_policy(path):
    """Return (params, patch_size) from a policy checkpoint."""
    from . import fileio

    arrays = fileio.read_checkpoint(path)
    if "meta.downsample" not in arrays:
        raise ConfigError(f"{path} is not a policy checkpoint (no meta.downsample)")
    downsample = int(arrays.pop("meta.downsample"))
    params = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
    return params, downsample // 2


# ----------------------------------------------------------------- training


def train_policy(dataset, config: PolicyNetConfig, seed: int = 0,
                 log: list | None = None) -> dict:
    """Minimise per-superpatch two-class cross-entropy against gt_policy."""
    if not dataset:
        raise ConfigError("cannot train a policy on an empty dataset")
    patch_size = config.patch_size
    targets = [
        gt_policy(mask, patch_size).astype(np.int64).ravel()
        for _, mask in dataset
    ]
    params = init_policy(config, seed)
    opt = SGD(params, lr=config.lr, momentum=0.9,
              weight_decay=config.weight_decay)
    rng = np.random.default_rng([seed, 1])
    for _ in range(config.iterations):
        batch = rng.integers(0, len(dataset), size=config.batch_size)
        with Tape() as tape:
            total = None
            for i in batch:
                logits = policy_logits(dataset[i][0], params, patch_size)
                cells = logits.data.shape[1] * logits.data.shape[2]
                flat = reshape(transpose(logits, (1, 2, 0)), (cells, 2))
                loss = cross_entropy(flat, targets[i])
                total = loss if total is None else add(total, loss)
            total = scale(total, 1.0 / len(batch))
            tape.backward(total)
        opt.step()
        opt.zero_grad()
        if log is not None:
            log.append(float(total.data))
    return params
