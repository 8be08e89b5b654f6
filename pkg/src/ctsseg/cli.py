"""Command-line entry point wiring the modules into experiments.

Heavy imports happen inside handlers, after thread pinning: the BLAS
pools are capped at one thread before numpy loads, so timing and
byte-determinism contracts hold on any host. Every command prints its
report to stdout and writes the same bytes under <out_dir>/<name>/report.txt.
Wall-clock numbers only ever appear on lines prefixed `# timing`.
"""

import argparse
import os
import sys
from pathlib import Path

_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _pin_threads():
    for var in _BLAS_VARS:
        os.environ.setdefault(var, "1")


def main(argv=None) -> int:
    _pin_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import CtssegError

    try:
        return args.handler(args)
    except CtssegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctsseg",
        description="Token-sharing segmentation experiments at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override config out_dir")
        p.set_defaults(handler=handler)
        return p

    cmd("synth", cmd_synth, "generate the seeded scene dataset + manifest")

    p = cmd("stats", cmd_stats, "histogram of single-class superpatches per image")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--patch-size", type=int, default=None)

    cmd("train-policy", cmd_train_policy,
        "train the sharing policy network; writes checkpoint + precision report")

    p = cmd("train-seg", cmd_train_seg, "train a segmenter at one sharing level")
    p.add_argument("--policy", default="oracle",
                   help="oracle | net:<ckpt> | random:<seed>")
    p.add_argument("--share", type=int, required=True, help="shared superpatches S")
    p.add_argument("--path", choices=("eq1", "eq2"), default="eq1")

    p = cmd("eval", cmd_eval, "evaluate a segmenter checkpoint (mIoU + cost report)")
    p.add_argument("--seg", required=True, help="segmenter checkpoint")
    p.add_argument("--policy", default="oracle",
                   help="oracle | net:<ckpt> | random:<seed>")
    p.add_argument("--share", type=int, required=True)
    p.add_argument("--path", choices=("eq1", "eq2"), default="eq1")

    p = cmd("bench", cmd_bench, "throughput/FLOP report across sharing levels")
    p.add_argument("--seg", required=True, help="segmenter checkpoint")
    p.add_argument("--share-schedule", default=None, help="comma-separated S values")
    p.add_argument("--path", choices=("eq1", "eq2"), default="eq1")

    p = cmd("dynamic", cmd_dynamic, "dynamic routing evaluation across models")
    p.add_argument("--models", required=True, help="S1=ckpt1,S2=ckpt2,...")
    p.add_argument("--policy", required=True, help="policy checkpoint (net)")
    p.add_argument("--tau", default=None, help="threshold, or comma list to sweep")
    p.add_argument("--path", choices=("eq1", "eq2"), default="eq1")

    p = cmd("bench-kernels", cmd_bench_kernels,
            "compare the compiled and numpy convolution lanes")
    p.add_argument("--iters", type=int, default=30)

    return parser


# ----------------------------------------------------------------- plumbing


def _load_cfg(args):
    from .config import ExperimentConfig, load_config

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _report_header(command, cfg):
    from .config import resolved_lines

    return [f"# ctsseg {command} report", "[config]", *resolved_lines(cfg), "[result]"]


def _emit_report(cfg, name, lines) -> Path:
    text = "\n".join(lines) + "\n"
    out = Path(cfg.out_dir) / name
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return out


def _scene_specs(cfg):
    from .scenes import SceneSpec

    return [
        SceneSpec(
            seed=cfg.scene_seed_start + i,
            height=cfg.height,
            width=cfg.width,
            num_classes=cfg.num_classes,
            num_shapes=cfg.num_shapes,
            noise_amplitude=cfg.noise_amplitude,
        )
        for i in range(cfg.scene_count)
    ]


def _load_split(cfg):
    from .scenes import load_dataset

    pairs = load_dataset(cfg.data_root)
    return pairs[: cfg.train_count], pairs[cfg.train_count:]


def _parse_policy_source(text: str):
    from .errors import UsageError
    from .policy import load_policy

    if text == "oracle":
        return "oracle", "oracle"
    if text.startswith("random:"):
        seed = int(text.split(":", 1)[1])
        return ("random", seed), f"random{seed}"
    if text.startswith("net:"):
        params, _ = load_policy(text.split(":", 1)[1])
        return ("net", params), "net"
    raise UsageError(f"bad --policy value {text!r}")


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    from .scenes import write_dataset

    specs = _scene_specs(cfg)
    write_dataset(cfg.data_root, specs)
    lines = _report_header("synth", cfg)
    lines.append(f"scenes={len(specs)}")
    lines.append(f"root={cfg.data_root}")
    lines.append(f"seed_range={specs[0].seed}..{specs[-1].seed}")
    _emit_report(cfg, "synth", lines)
    return 0


def cmd_stats(args) -> int:
    cfg = _load_cfg(args)
    if args.data:
        cfg.data_root = args.data
    patch_size = args.patch_size or cfg.patch_size
    from .scenes import NUM_STAT_BINS, load_dataset, superpatch_stats

    masks = [mask for _, mask in load_dataset(cfg.data_root)]
    hist = superpatch_stats(masks, patch_size)
    from .evalbench import render_table

    rows = [
        (f"[{5 * b},{5 * b + 5}{']' if b == NUM_STAT_BINS - 1 else ')'}", int(n))
        for b, n in enumerate(hist)
    ]
    lines = _report_header("stats", cfg)
    lines.append(f"images={len(masks)}")
    lines.append(f"nonzero_bins={int((hist > 0).sum())}")
    lines.append(render_table(("single_class_pct", "images"), rows))
    _emit_report(cfg, f"stats-p{patch_size}", lines)
    return 0


def cmd_train_policy(args) -> int:
    cfg = _load_cfg(args)
    import numpy as np

    from .evalbench import format_float, render_table
    from .policy import (gt_policy, precision, random_scores, save_policy,
                         select_top_s, policy_forward, train_policy)

    train, val = _load_split(cfg)
    pcfg = cfg.policy_config()
    log = []
    params = train_policy(train, pcfg, seed=cfg.seed, log=log)

    ckpt = Path(cfg.out_dir) / f"policy-seed{cfg.seed}.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_policy(ckpt, params, pcfg)

    gts = [gt_policy(mask, cfg.patch_size) for _, mask in val]
    scores = [policy_forward(img, params, cfg.patch_size) for img, _ in val]
    base_rate = float(np.mean([gt.mean() for gt in gts]))
    rows = []
    for s in [s for s in cfg.share_schedule if s > 0]:
        trained = np.mean(
            [precision(select_top_s(sc, s), gt) for sc, gt in zip(scores, gts)]
        )
        rand = np.mean(
            [
                precision(select_top_s(random_scores(gt.shape, cfg.seed, i), s), gt)
                for i, gt in enumerate(gts)
            ]
        )
        rows.append((s, format_float(trained), format_float(rand)))

    lines = _report_header("train-policy", cfg)
    lines.append(f"checkpoint={ckpt}")
    lines.append(f"iterations={len(log)}")
    lines.append(f"initial_loss={format_float(log[0])}")
    lines.append(f"final_loss={format_float(log[-1])}")
    lines.append(f"val_base_rate={format_float(base_rate)}")
    lines.append(render_table(("S", "precision", "random_precision"), rows))
    _emit_report(cfg, f"train-policy-seed{cfg.seed}", lines)
    return 0


def cmd_train_seg(args) -> int:
    cfg = _load_cfg(args)
    from .decoders import save_model, train_segmenter
    from .evalbench import format_float

    source, tag = _parse_policy_source(args.policy)
    train, _ = _load_split(cfg)
    log = []
    params = train_segmenter(
        train, source, args.share, cfg.seg_config(),
        lr=cfg.seg_lr, iterations=cfg.seg_iterations,
        batch_size=cfg.seg_batch_size, seed=cfg.seed, path=args.path, log=log,
    )
    name = f"seg-{tag}-s{args.share}-{args.path}-seed{cfg.seed}"
    ckpt = Path(cfg.out_dir) / f"{name}.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_model(ckpt, params, cfg.seg_config(), cfg.num_patches)

    lines = _report_header("train-seg", cfg)
    lines.append(f"checkpoint={ckpt}")
    lines.append(f"policy_source={args.policy}")
    lines.append(f"share={args.share}")
    lines.append(f"path={args.path}")
    lines.append(f"iterations={len(log)}")
    lines.append(f"initial_loss={format_float(log[0])}")
    lines.append(f"final_loss={format_float(log[-1])}")
    _emit_report(cfg, f"train-{name}", lines)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    from . import fileio
    from .decoders import load_model, predict, resolve_policy_source
    from .evalbench import (ConfusionMatrix, cost_report_lines, flop_model,
                            format_float, parallel_map)

    params, seg_cfg, num_patches = load_model(args.seg)
    source, tag = _parse_policy_source(args.policy)
    _, val = _load_split(cfg)
    sp = 2 * seg_cfg.patch_size
    grid = (cfg.height // sp, cfg.width // sp)
    policies = resolve_policy_source(source, val, args.share,
                                     seg_cfg.patch_size, grid)

    preds = parallel_map(
        lambda pair: predict(args.path, pair[0][0], params, seg_cfg, pair[1]),
        list(zip(val, policies)),
    )
    cm = ConfusionMatrix(seg_cfg.num_classes)
    for (image, mask), pred in zip(val, preds):
        cm.update(mask, pred)

    name = f"eval-{tag}-s{args.share}-{args.path}-seed{cfg.seed}"
    out = Path(cfg.out_dir) / name / "preds"
    out.mkdir(parents=True, exist_ok=True)
    for i, pred in enumerate(preds):
        fileio.write_mask(out / f"pred_{cfg.train_count + i}.ctsm", pred)

    report = flop_model(
        seg_cfg, num_patches, args.share, path=args.path,
        image_hw=(cfg.height, cfg.width),
        policy_widths=cfg.policy_widths if tag == "net" else None,
    )
    lines = _report_header("eval", cfg)
    lines.append(f"images={len(val)}")
    lines.append(f"policy_source={args.policy}")
    lines.append(f"path={args.path}")
    lines.append(f"miou={format_float(cm.miou())}")
    lines.append(f"pixel_accuracy={format_float(cm.pixel_accuracy())}")
    lines.extend(cost_report_lines(report))
    _emit_report(cfg, name, lines)
    return 0


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    from .decoders import load_model, resolve_policy_source, run_pipeline
    from .errors import UsageError
    from .evalbench import (MEASURE_ITERS, WARMUP_ITERS, benchmark, flop_model,
                            format_float, hardware_string, render_table)

    params, seg_cfg, num_patches = load_model(args.seg)
    _, val = _load_split(cfg)
    batch = val[: cfg.bench_batch]
    if args.share_schedule:
        schedule = tuple(int(s) for s in args.share_schedule.split(","))
    else:
        schedule = cfg.share_schedule
    if not schedule:
        raise UsageError("bench needs a non-empty share schedule")
    sp = 2 * seg_cfg.patch_size
    grid = (cfg.height // sp, cfg.width // sp)

    rows = []
    timing_lines = [f"# timing hardware={hardware_string()}"]
    for s in schedule:
        policies = resolve_policy_source("oracle", batch, s,
                                         seg_cfg.patch_size, grid)
        items = [(image, policy) for (image, _), policy in zip(batch, policies)]

        def run(item):
            image, policy = item
            return run_pipeline(args.path, image, None, params, s, seg_cfg, policy)

        result = benchmark(run, items)
        cost = flop_model(seg_cfg, num_patches, s, path=args.path,
                          image_hw=(cfg.height, cfg.width))
        rows.append((
            s, cost.num_tokens, f"{100 * cost.token_reduction:.1f}%",
            cost.total_flops,
        ))
        timing_lines.append(
            f"# timing S={s} images_per_sec={format_float(result.images_per_sec)}"
            f" batch={result.batch_size} warmup={result.warmup} iters={result.iters}"
        )

    lines = _report_header("bench", cfg)
    lines.append(f"path={args.path}")
    lines.append(f"protocol=warmup:{WARMUP_ITERS},measured:{MEASURE_ITERS}")
    lines.append(render_table(("S", "M", "reduction", "flops"), rows))
    lines.extend(timing_lines)
    _emit_report(cfg, f"bench-{args.path}-seed{cfg.seed}", lines)
    return 0


def cmd_dynamic(args) -> int:
    cfg = _load_cfg(args)
    from .decoders import load_model
    from .errors import UsageError
    from .evalbench import dynamic_eval, format_float, render_table
    from .policy import load_policy

    models = {}
    seg_cfg = None
    for part in args.models.split(","):
        key, sep, path = part.partition("=")
        if not sep:
            raise UsageError(f"bad --models entry {part!r}")
        params, seg_cfg, _ = load_model(path)
        models[int(key)] = params
    policy_params, _ = load_policy(args.policy)
    _, val = _load_split(cfg)

    if args.tau is None:
        taus = [cfg.tau]
    else:
        taus = [float(t) for t in args.tau.split(",")]

    settings = sorted(models)
    rows = []
    for tau in taus:
        result = dynamic_eval(models, policy_params, tau, val, seg_cfg,
                              path=args.path)
        counts = [result.image_counts[s] for s in settings]
        rows.append((format_float(tau), *counts, format_float(result.miou)))

    headers = ("tau", *[f"S={s}" for s in settings], "combined_miou")
    lines = _report_header("dynamic", cfg)
    lines.append(f"images={len(val)}")
    lines.append(f"path={args.path}")
    lines.append(render_table(headers, rows))
    _emit_report(cfg, f"dynamic-{args.path}", lines)
    return 0


def cmd_bench_kernels(args) -> int:
    cfg = _load_cfg(args)
    import time

    import numpy as np

    from . import kernels
    from .evalbench import format_float, render_table

    rng = np.random.default_rng(cfg.seed)
    shapes = [
        ("stage0", (3, cfg.height, cfg.width), (16, 3, 3, 3), 2, 1),
        ("stage1", (16, cfg.height // 2, cfg.width // 2), (32, 16, 3, 3), 2, 1),
        ("stage3", (64, cfg.height // 8, cfg.width // 8), (64, 64, 3, 3), 1, 1),
        ("spatial", (cfg.embed_dim, cfg.height // cfg.patch_size,
                     cfg.width // cfg.patch_size),
         (cfg.spatial_width, cfg.embed_dim, 3, 3), 1, 1),
    ]
    workloads = [
        (name, rng.standard_normal(xs), rng.standard_normal(ws), stride, pad)
        for name, xs, ws, stride, pad in shapes
    ]

    parity = 0.0
    timing_lines = []
    rows = []
    for lane_name, lane in kernels.available_lanes():
        for name, x, w, stride, pad in workloads:
            y = lane.conv2d_forward(x, w, stride, pad)
            macs = w.size // w.shape[0] * y.size
            start = time.perf_counter()
            for _ in range(args.iters):
                lane.conv2d_forward(x, w, stride, pad)
            per_call = (time.perf_counter() - start) / args.iters
            rows.append((lane_name, name, f"{2 * macs}"))
            timing_lines.append(
                f"# timing lane={lane_name} op={name} "
                f"ms_per_call={format_float(1e3 * per_call)} "
                f"gflops={format_float(2 * macs / per_call / 1e9)}"
            )

    lanes = kernels.available_lanes()
    if len(lanes) == 2:
        (_, py_lane), (_, cy_lane) = lanes[0], lanes[1]
        for name, x, w, stride, pad in workloads:
            a = py_lane.conv2d_forward(x, w, stride, pad)
            b = cy_lane.conv2d_forward(x, w, stride, pad)
            parity = max(parity, float(np.abs(a - b).max()))

    lines = _report_header("bench-kernels", cfg)
    lines.append(f"active_lane={kernels.lane_name()}")
    lines.append(f"lanes={','.join(name for name, _ in lanes)}")
    lines.append(f"iters={args.iters}")
    lines.append(f"forward_parity_max_abs_diff={parity:.3e}")
    lines.append(render_table(("lane", "op", "flops_per_call"), rows))
    lines.extend(timing_lines)
    _emit_report(cfg, "bench-kernels", lines)
    return 0


if __name__ == "__main__":
    sys.exit(main())
