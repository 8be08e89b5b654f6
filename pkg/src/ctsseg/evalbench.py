"""Metrics, cost model, benchmark harness, and combined dynamic evaluation.

mIoU comes from one confusion matrix accumulated over the whole dataset
(rows = ground truth, columns = prediction). The FLOP model counts
multiply-accumulates and reports flops = 2 * MACs; the convention is
printed in every report. The benchmark follows the warm-up protocol:
measured iterations start only after the warm-up iterations finish, and
the timing loop is strictly single-threaded.
"""

import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .policy import SharingPolicy, dynamic_select, policy_forward, select_top_s
from .decoders import SegConfig, predict

FLOPS_PER_MAC = 2
WARMUP_ITERS = 50
MEASURE_ITERS = 100


def worker_count() -> int:
    """Evaluation worker threads, capped by CTS_THREADS (default 1)."""
    raw = os.environ.get("CTS_THREADS", "1")
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"CTS_THREADS must be an integer, got {raw!r}")
    if count < 1:
        raise ConfigError(f"CTS_THREADS must be >= 1, got {count}")
    return count


def parallel_map(fn, items):
    """Map over items; uses a thread pool only when CTS_THREADS > 1."""
    workers = worker_count()
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------------ metrics


class ConfusionMatrix:
    """C x C counts; rows = ground truth class, columns = predicted class."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise UsageError(f"need at least 1 class, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, gt: np.ndarray, pred: np.ndarray):
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise UsageError(f"gt {gt.shape} and pred {pred.shape} differ")
        c = self.num_classes
        if gt.size and (gt.min() < 0 or gt.max() >= c or pred.min() < 0
                        or pred.max() >= c):
            raise UsageError(f"class id outside [0, {c}) encountered")
        flat = (gt.astype(np.int64) * c + pred.astype(np.int64)).ravel()
        self.counts += np.bincount(flat, minlength=c * c).reshape(c, c)

    def merge(self, other: "ConfusionMatrix"):
        if other.num_classes != self.num_classes:
            raise UsageError("cannot merge confusion matrices of different C")
        self.counts += other.counts

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; nan where the class is absent from gt and pred."""
        tp = np.diag(self.counts).astype(np.float64)
        gt_total = self.counts.sum(axis=1)
        pred_total = self.counts.sum(axis=0)
        union = gt_total + pred_total - np.diag(self.counts)
        out = np.full(self.num_classes, np.nan)
        present = union > 0
        out[present] = tp[present] / union[present]
        return out

    def miou(self) -> float:
        ious = self.per_class_iou()
        present = ~np.isnan(ious)
        if not present.any():
            raise UsageError("mIoU undefined: no pixels accumulated")
        return float(ious[present].mean())

    def pixel_accuracy(self) -> float:
        total = self.counts.sum()
        if total == 0:
            raise UsageError("accuracy undefined: no pixels accumulated")
        return float(np.diag(self.counts).sum() / total)


def miou(preds, gts, num_classes: int) -> float:
    """Dataset-level mIoU over paired prediction/ground-truth masks."""
    if len(preds) != len(gts):
        raise UsageError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    cm = ConfusionMatrix(num_classes)
    for pred, gt in zip(preds, gts):
        cm.update(gt, pred)
    return cm.miou()


def majority_vote(pred: np.ndarray, policy: SharingPolicy) -> np.ndarray:
    """Force each shared superpatch to its modal class (ties: lowest id)."""
    pred = np.asarray(pred)
    if pred.ndim != 2:
        raise DimensionError(f"expected a [H, W] class map, got {pred.shape}")
    gh, gw = policy.share_grid.shape
    h, w = pred.shape
    if h % gh or w % gw or (h // gh) != (w // gw):
        raise DimensionError(
            f"class map {h}x{w} does not tile into a {gh}x{gw} superpatch grid"
        )
    sp = h // gh
    out = pred.copy()
    for r, c in policy.ordered_shared:
        block = pred[r * sp:(r + 1) * sp, c * sp:(c + 1) * sp]
        modal = np.bincount(block.ravel()).argmax()  # argmax takes lowest tie
        out[r * sp:(r + 1) * sp, c * sp:(c + 1) * sp] = modal
    return out


# --------------------------------------------------------------- cost model


@dataclass
class CostReport:
    num_patches: int
    s_shared: int
    num_tokens: int
    token_reduction: float
    attention_flops: int
    attention_quadratic_flops: int
    mlp_flops: int
    projection_flops: int
    decoder_flops: int
    policy_flops: int
    total_flops: int
    images_per_sec: float | None = None
    miou: float | None = None


def conv_macs(cin: int, cout: int, kernel: int, out_hw) -> int:
    return cout * cin * kernel * kernel * out_hw[0] * out_hw[1]


def policy_macs(image_hw, widths, patch_size: int, in_channels: int = 3) -> int:
    """MACs of the policy conv stack from its geometry."""
    from .policy import _stride_schedule

    h, w = image_hw
    total = 0
    prev = in_channels
    for width, stride in zip(widths, _stride_schedule(len(widths), 2 * patch_size)):
        h, w = h // stride, w // stride
        total += conv_macs(prev, width, 3, (h, w))
        prev = width
    return total + conv_macs(prev, 2, 1, (h, w))


def flop_model(config: SegConfig, num_patches: int, s_shared: int,
               path: str = "eq1", image_hw=None, policy_widths=None) -> CostReport:
    """Analytic cost of one forward pass at sharing level S.

    All counts are flops under the 2-flops-per-MAC convention; attention
    splits into a linear term (projections) and the quadratic M^2 term."""
    n = num_patches
    if not 0 <= 3 * s_shared <= n:
        raise UsageError(f"S={s_shared} out of range for N={n}")
    m = n - 3 * s_shared
    e = config.embed_dim
    depth = config.depth
    attn_linear = depth * 4 * m * e * e
    attn_quadratic = depth * 2 * m * m * e
    mlp = depth * 2 * m * e * (config.mlp_ratio * e)
    projection = m * (3 * config.patch_size ** 2) * e
    if path == "eq1":
        decoder = m * e * config.num_classes
    elif path == "eq2":
        if image_hw is None:
            raise UsageError("spatial-path costs need the image size")
        w = config.spatial_width
        hl_wl = (image_hw[0] // config.patch_size,
                 image_hw[1] // config.patch_size)
        decoder = (conv_macs(e, w, 3, hl_wl) + conv_macs(w, w, 3, hl_wl)
                   + conv_macs(w, config.num_classes, 1, hl_wl))
    else:
        raise UsageError(f"unknown path {path!r}")
    policy = 0
    if policy_widths is not None and image_hw is not None:
        policy = policy_macs(image_hw, policy_widths, config.patch_size)
    macs = {
        "attention_flops": attn_linear + attn_quadratic,
        "attention_quadratic_flops": attn_quadratic,
        "mlp_flops": mlp,
        "projection_flops": projection,
        "decoder_flops": decoder,
        "policy_flops": policy,
    }
    flops = {key: FLOPS_PER_MAC * value for key, value in macs.items()}
    total = (flops["attention_flops"] + flops["mlp_flops"]
             + flops["projection_flops"] + flops["decoder_flops"]
             + flops["policy_flops"])
    return CostReport(
        num_patches=n,
        s_shared=s_shared,
        num_tokens=m,
        token_reduction=3 * s_shared / n,
        total_flops=total,
        **flops,
    )


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchResult:
    images_per_sec: float
    batch_size: int
    warmup: int
    iters: int
    hardware: str


def hardware_string() -> str:
    return f"{platform.machine()} {platform.system()} python-{platform.python_version()}"


def benchmark(pipeline_fn, images, warmup: int = WARMUP_ITERS,
              iters: int = MEASURE_ITERS) -> BenchResult:
    """Mean images/sec over `iters` timed iterations after `warmup` ones.

    One iteration = pipeline_fn over the whole image batch, single-threaded."""
    if not len(images):
        raise UsageError("benchmark needs at least one image")
    for _ in range(warmup):
        for image in images:
            pipeline_fn(image)
    rates = np.empty(iters)
    for i in range(iters):
        start = time.perf_counter()
        for image in images:
            pipeline_fn(image)
        elapsed = time.perf_counter() - start
        rates[i] = len(images) / elapsed
    return BenchResult(
        images_per_sec=float(rates.mean()),
        batch_size=len(images),
        warmup=warmup,
        iters=iters,
        hardware=hardware_string(),
    )


# ------------------------------------------------------------- dynamic eval


@dataclass
class DynamicResult:
    miou: float
    image_counts: dict  # S -> images routed to that model
    tau: float


def dynamic_eval(models: dict, policy_params, tau: float, dataset,
                 config: SegConfig, path: str = "eq1") -> DynamicResult:
    """Route each image to the largest model setting S with S < S*.

    models maps S -> trained segmenter params; must include S=0."""
    if 0 not in models:
        raise ConfigError("dynamic evaluation needs an S=0 fallback model")
    settings = sorted(models)
    cm = ConfusionMatrix(config.num_classes)
    counts = {s: 0 for s in settings}
    for image, mask in dataset:
        scores = policy_forward(image, policy_params, config.patch_size)
        chosen = dynamic_select(scores, tau, settings)
        counts[chosen] += 1
        policy = select_top_s(scores, chosen)
        pred = predict(path, image, models[chosen], config, policy)
        cm.update(mask, pred)
    return DynamicResult(miou=cm.miou(), image_counts=counts, tau=tau)


# ------------------------------------------------------------------ reports


def render_table(headers, rows) -> str:
    """Right-aligned plain-text table with a header rule."""
    cells = [[str(h) for h in headers]] + [[str(v) for v in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for r, row in enumerate(cells):
        lines.append("  ".join(v.rjust(w) for v, w in zip(row, widths)))
        if r == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cost_report_lines(report: CostReport) -> list:
    lines = [f"# flop convention: {FLOPS_PER_MAC} flops per multiply-accumulate"]
    for f in fields(CostReport):
        value = getattr(report, f.name)
        if value is None:
            continue
        if isinstance(value, float):
            value = format_float(value)
        lines.append(f"{f.name}={value}")
    return lines


def format_float(value: float) -> str:
    """Fixed-width deterministic float formatting for reports."""
    return f"{value:.6f}"
