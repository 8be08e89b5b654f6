"""Segmentation decoders and the two token-sharing integration paths.

Two ways to turn backbone tokens into per-pixel class scores:

* per-token path: linear-decode the M tokens to class scores, replicate
  shared predictions back to all N patch slots, arrange on the grid, and
  upsample by replicating each patch cell. Every pixel of a patch carries
  its token's scores, so all 4 patches of a shared superpatch agree.
* spatial path: replicate shared tokens back to N feature rows first,
  arrange them on the grid, run a small conv decoder, and bilinearly
  upsample the class scores to pixels.

Also home to whole-model init, prediction, and segmenter training.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .optim import SGD
from .policy import (SharingPolicy, gt_policy, policy_forward, random_scores,
                     select_top_s)
from .sharing import partition, share, to_spatial, unshare_predictions, unshare_tokens
from .tensor import (Tape, Tensor, add, add_bias, bilinear_resize, conv2d,
                     cross_entropy, gelu, matmul, repeat_pixels, scale,
                     transpose)
from .vit import ViTConfig, init_params, vit_forward

PATH_NAMES = ("eq1", "eq2")  # per-token path, spatial path


@dataclass(frozen=True)
class SegConfig:
    patch_size: int = 4
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: int = 2
    num_classes: int = 5
    spatial_width: int = 64

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")

    @property
    def vit(self) -> ViTConfig:
        return ViTConfig(self.depth, self.heads, self.embed_dim,
                         self.mlp_ratio, self.patch_size)


def init_model(config: SegConfig, num_patches: int, seed: int) -> dict:
    """Shared patch projection, positional table, backbone, both decoders."""
    rng = np.random.default_rng([seed, 2])
    e = config.embed_dim
    c = config.num_classes
    w = config.spatial_width
    d = 3 * config.patch_size * config.patch_size

    def normal(*shape):
        return Tensor(0.02 * rng.standard_normal(shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params = {
        "embed.proj": normal(d, e),
        "pos": normal(num_patches, e),
    }
    params.update(init_params(config.vit, seed))
    params["dec.w"] = normal(e, c)
    params["dec.b"] = zeros(c)
    params["spat1.w"] = normal(w, e, 3, 3)
    params["spat1.b"] = zeros(w)
    params["spat2.w"] = normal(w, w, 3, 3)
    params["spat2.b"] = zeros(w)
    params["spathead.w"] = normal(c, w, 1, 1)
    params["spathead.b"] = zeros(c)
    return params


def linear_decode(tokens: Tensor, head: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine per-token map [M, E] -> [M, C]."""
    if tokens.data.ndim != 2 or head.data.ndim != 2 \
            or tokens.data.shape[1] != head.data.shape[0]:
        raise DimensionError(
            f"linear_decode: tokens {tokens.data.shape} vs head {head.data.shape}"
        )
    out = matmul(tokens, head)
    if bias is not None:
        out = add_bias(out, bias)
    return out


def spatial_decode(features: Tensor, params: dict) -> Tensor:
    """Two padded 3x3 convs with gelu, then a 1x1 head; resolution kept."""
    if features.data.ndim != 3:
        raise DimensionError(f"expected [E, H, W] features, got {features.data.shape}")
    h = gelu(conv2d(features, params["spat1.w"], params["spat1.b"], padding=1))
    h = gelu(conv2d(h, params["spat2.w"], params["spat2.b"], padding=1))
    return conv2d(h, params["spathead.w"], params["spathead.b"])


def _resolve_policy(image, grid_hw, policy_params, s_shared, patch_size,
                    policy: SharingPolicy | None) -> SharingPolicy:
    if policy is not None:
        return policy
    gh, gw = grid_hw[0] // 2, grid_hw[1] // 2
    if s_shared == 0:
        return SharingPolicy.empty((gh, gw))
    if policy_params is None:
        raise UsageError("S > 0 needs either policy params or an explicit policy")
    scores = policy_forward(image, policy_params, patch_size)
    return select_top_s(scores, s_shared)


def pipeline_eq1(image, policy_params, seg_params: dict, s_shared: int,
                 config: SegConfig, policy: SharingPolicy | None = None) -> Tensor:
    """Per-token path: share -> encode -> decode -> unshare predictions."""
    p = config.patch_size
    grid = partition(image, p)
    policy = _resolve_policy(image, grid.grid_hw, policy_params, s_shared, p, policy)
    token_set = share(grid, seg_params["pos"], policy, seg_params["embed.proj"])
    encoded = vit_forward(token_set, seg_params, config.vit)
    token_scores = linear_decode(encoded, seg_params["dec.w"], seg_params["dec.b"])
    slot_scores = unshare_predictions(token_scores, token_set.index_map)
    plane = to_spatial(slot_scores, grid.grid_hw)
    return repeat_pixels(plane, p)


def pipeline_eq2(image, policy_params, seg_params: dict, s_shared: int,
                 config: SegConfig, policy: SharingPolicy | None = None) -> Tensor:
    """Spatial path: share -> encode -> unshare tokens -> conv decode."""
    p = config.patch_size
    grid = partition(image, p)
    policy = _resolve_policy(image, grid.grid_hw, policy_params, s_shared, p, policy)
    token_set = share(grid, seg_params["pos"], policy, seg_params["embed.proj"])
    encoded = vit_forward(token_set, seg_params, config.vit)
    slot_features = unshare_tokens(encoded, token_set.index_map)
    plane = spatial_decode(to_spatial(slot_features, grid.grid_hw), seg_params)
    h, w = image.shape[1], image.shape[2]
    return bilinear_resize(plane, (h, w))


_PIPELINES = {"eq1": pipeline_eq1, "eq2": pipeline_eq2}


def run_pipeline(path: str, image, policy_params, seg_params, s_shared,
                 config, policy=None) -> Tensor:
    if path not in _PIPELINES:
        raise UsageError(f"unknown path {path!r}, expected one of {PATH_NAMES}")
    return _PIPELINES[path](image, policy_params, seg_params, s_shared,
                            config, policy)


def predict(path: str, image, seg_params: dict, config: SegConfig,
            policy: SharingPolicy) -> np.ndarray:
    """Per-pixel argmax class map [H, W] for one image."""
    scores = run_pipeline(path, image, None, seg_params,
                          policy.s_shared, config, policy)
    return scores.data.argmax(axis=0)


# -------------------------------------------------------------- checkpoints

_META_FIELDS = ("patch_size", "depth", "heads", "embed_dim", "mlp_ratio",
                "num_classes", "spatial_width")


def save_model(path, params: dict, config: SegConfig, num_patches: int) -> None:
    from . import fileio

    arrays = {f"meta.{name}": np.float64(getattr(config, name))
              for name in _META_FIELDS}
    arrays["meta.num_patches"] = np.float64(num_patches)
    arrays.update({name: p.data for name, p in params.items()})
    fileio.write_checkpoint(path, arrays)


def load_model(path):
    """Return (params, SegConfig, num_patches) from a segmenter checkpoint."""
    from . import fileio

    arrays = fileio.read_checkpoint(path)
    missing = [name for name in _META_FIELDS if f"meta.{name}" not in arrays]
    if missing or "meta.num_patches" not in arrays:
        raise ConfigError(f"{path} is not a segmenter checkpoint")
    kwargs = {name: int(arrays.pop(f"meta.{name}")) for name in _META_FIELDS}
    num_patches = int(arrays.pop("meta.num_patches"))
    params = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
    return params, SegConfig(**kwargs), num_patches


# ----------------------------------------------------------------- training


def resolve_policy_source(source, dataset, s_shared: int, patch_size: int,
                          grid_hw) -> list:
    """Fix one SharingPolicy per image for a whole training/eval run.

    source: "oracle" (from ground-truth masks), ("random", seed), or
    ("net", policy_params)."""
    policies = []
    gh, gw = grid_hw
    for index, (image, mask) in enumerate(dataset):
        if s_shared == 0:
            policies.append(SharingPolicy.empty((gh, gw)))
        elif source == "oracle":
            scores = gt_policy(mask, patch_size).astype(np.float64)
            policies.append(select_top_s(scores, s_shared))
        elif isinstance(source, tuple) and source[0] == "random":
            scores = random_scores((gh, gw), source[1], index)
            policies.append(select_top_s(scores, s_shared))
        elif isinstance(source, tuple) and source[0] == "net":
            scores = policy_forward(image, source[1], patch_size)
            policies.append(select_top_s(scores, s_shared))
        else:
            raise UsageError(f"unknown policy source {source!r}")
    return policies


def train_segmenter(dataset, policy_source, s_shared: int, config: SegConfig,
                    lr: float = 0.05, iterations: int = 350, batch_size: int = 4,
                    seed: int = 0, path: str = "eq1",
                    log: list | None = None) -> dict:
    """Train on per-pixel cross-entropy with the given sharing policy."""
    if not dataset:
        raise ConfigError("cannot train a segmenter on an empty dataset")
    if path not in _PIPELINES:
        raise UsageError(f"unknown path {path!r}, expected one of {PATH_NAMES}")
    p = config.patch_size
    grid_hw = dataset[0][0].shape[1] // p, dataset[0][0].shape[2] // p
    sp_grid = grid_hw[0] // 2, grid_hw[1] // 2
    if s_shared > sp_grid[0] * sp_grid[1]:
        raise ConfigError(f"S={s_shared} exceeds {sp_grid[0] * sp_grid[1]} superpatches")

    policies = resolve_policy_source(policy_source, dataset, s_shared, p, sp_grid)
    params = init_model(config, grid_hw[0] * grid_hw[1], seed)
    opt = SGD(params, lr=lr, momentum=0.9)
    rng = np.random.default_rng([seed, 3])
    for _ in range(iterations):
        batch = rng.integers(0, len(dataset), size=batch_size)
        with Tape() as tape:
            total = None
            for i in batch:
                image, mask = dataset[i]
                scores = run_pipeline(path, image, None, params, s_shared,
                                      config, policies[i])
                loss = cross_entropy(transpose(scores, (1, 2, 0)), mask)
                total = loss if total is None else add(total, loss)
            total = scale(total, 1.0 / len(batch))
            tape.backward(total)
        opt.step()
        opt.zero_grad()
        if log is not None:
            log.append(float(total.data))
    return params
