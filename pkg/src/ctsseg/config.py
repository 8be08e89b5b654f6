"""Experiment configuration: plain `key=value` text files.

Lines are `key=value`; `#` starts a comment; blank lines are skipped.
Unknown keys are rejected so typos fail loudly. Every report embeds the
resolved config (`resolved_lines`), and a config written back out parses
to the identical object, which is what makes reruns reproducible.
"""

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .policy import DEFAULT_TAU, PolicyNetConfig


@dataclass
class ExperimentConfig:
    # dataset
    data_root: str = "data/desk"
    scene_count: int = 200
    train_count: int = 160
    height: int = 64
    width: int = 64
    num_classes: int = 5
    num_shapes: int = 6
    noise_amplitude: float = 0.02
    scene_seed_start: int = 100
    # model geometry
    patch_size: int = 4
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: int = 2
    spatial_width: int = 64
    # policy network
    policy_widths: tuple = (16, 32, 64, 64)
    policy_lr: float = 0.05
    policy_weight_decay: float = 1e-3
    policy_iterations: int = 400
    policy_batch_size: int = 8
    # segmenter training
    seg_lr: float = 0.05
    seg_iterations: int = 350
    seg_batch_size: int = 4
    # evaluation
    share_schedule: tuple = (0, 8, 10, 20, 26, 33, 39, 48, 56, 64)
    bench_batch: int = 4
    tau: float = DEFAULT_TAU
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        sp = 2 * self.patch_size
        if self.patch_size < 1 or self.height % sp or self.width % sp:
            raise ConfigError(
                f"image {self.height}x{self.width} must divide into "
                f"{sp}x{sp} superpatches"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by {self.heads} heads"
            )
        if not 0 < self.train_count <= self.scene_count:
            raise ConfigError(
                f"train_count {self.train_count} outside (0, {self.scene_count}]"
            )
        total = self.superpatch_count
        bad = [s for s in self.share_schedule if not 0 <= s <= total]
        if bad:
            raise ConfigError(f"schedule entries {bad} outside [0, {total}]")

    @property
    def superpatch_count(self) -> int:
        sp = 2 * self.patch_size
        return (self.height // sp) * (self.width // sp)

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    def policy_config(self) -> PolicyNetConfig:
        return PolicyNetConfig(
            widths=self.policy_widths,
            downsample=2 * self.patch_size,
            lr=self.policy_lr,
            weight_decay=self.policy_weight_decay,
            iterations=self.policy_iterations,
            batch_size=self.policy_batch_size,
        )

    def seg_config(self):
        from .decoders import SegConfig

        return SegConfig(
            patch_size=self.patch_size,
            depth=self.depth,
            heads=self.heads,
            embed_dim=self.embed_dim,
            mlp_ratio=self.mlp_ratio,
            num_classes=self.num_classes,
            spatial_width=self.spatial_width,
        )


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(name: str, text: str):
    kind = _FIELDS[name].type
    text = text.strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            if not text:
                return ()
            return tuple(int(part) for part in text.split(","))
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for config key {name!r}")


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, value)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"))


def resolved_lines(config: ExperimentConfig) -> list:
    """One `key=value` line per field, in declaration order; reparsable."""
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name}={value}")
    return lines
