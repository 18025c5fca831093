"""Command-line surface: synth, build, train, eval, predict, and the checks.

Exit codes: 0 success, 1 usage (bad flags, missing files), 2 malformed data,
3 failed verification check.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .core import (
    Config,
    FrameFeatures,
    OneShotLabel,
    SeglocError,
    init_params,
    new_rng,
)
from .dataio import (
    SynthConfig,
    apply_config_overrides,
    format_loss_line,
    format_prediction_line,
    load_config,
    load_instances,
    load_manifest,
    read_params_file,
    synth_generate,
    write_params_file,
)
from .evaluate import (
    evaluate_predictions,
    format_report,
    oracle_build,
    trees_equal_topology,
    trees_feature_gap,
)
from .hypotheses import extract_hypotheses
from .learning import finite_diff_check, record_forward, train
from .tree import build_tree, trace_to_text

GRAD_TOLERANCE = 1e-4
ORACLE_FEATURE_TOLERANCE = 1e-9


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=100)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--segments", type=int, default=4)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("build", help="build trees and dump traces")
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--config")
    p.add_argument("--dump-trace")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("train", help="train parameters on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("eval", help="report the recall grid on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--config")
    p.add_argument("--n", default="1,5")
    p.add_argument("--iou", default="0.3,0.5,0.7")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("predict", help="emit one prediction line per video")
    p.add_argument("--manifest", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("check-grad", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=6)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--epsilon", type=float, default=1e-4)

    p = sub.add_parser("check-oracle", help="compare builder against the naive oracle")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--max-frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)

    return parser


def _load_cfg(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    return apply_config_overrides(cfg, getattr(args, "set", []))


def _ranked_spans(tree, q, params, depth: int):
    hyps = extract_hypotheses(tree, q, params)
    hyps.sort(key=lambda h: (-h.confidence, h.span[0]))
    return [(h.span, h.confidence) for h in hyps[:depth]]


def _cmd_synth(args) -> int:
    scfg = SynthConfig(
        n_videos=args.videos,
        n_frames=args.frames,
        dim=args.dim,
        n_segments_per_video=args.segments,
        noise_sigma=args.sigma,
        seed=args.seed,
    )
    manifest_path, entries = synth_generate(scfg, args.out)
    print(f"wrote {len(entries)} videos under {args.out} (manifest {manifest_path})")
    return 0


def _cmd_build(args) -> int:
    cfg = _load_cfg(args)
    params = read_params_file(args.params)
    instances = load_instances(load_manifest(args.manifest, fps=cfg.fps))
    dump_dir = Path(args.dump_trace) if args.dump_trace else None
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
    for inst in instances:
        tree = build_tree(inst.features, inst.query.data, params, cfg)
        hyps = extract_hypotheses(tree, inst.query.data, params)
        if dump_dir is not None:
            (dump_dir / f"{inst.features.video_id}.trace").write_text(
                trace_to_text(tree.trace)
            )
            lines = [
                f"{h.root_id}\t{h.span[0]}\t{h.span[1]}"
                f"\t{h.confidence:.6f}\t{h.linguistic_rel:.6f}"
                for h in hyps
            ]
            (dump_dir / f"{inst.features.video_id}.hyps").write_text(
                "\n".join(lines) + "\n"
            )
        print(f"{inst.features.video_id}: {len(hyps)} hypotheses, {len(tree.trace)} events")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    instances = load_instances(load_manifest(args.manifest, fps=cfg.fps))
    if not instances:
        print("error: manifest lists no videos", file=sys.stderr)
        return 2
    params = init_params(instances[0].features.dim, new_rng(cfg.seed))
    log_lines: list[str] = []

    def log_fn(epoch, report):
        log_lines.append(format_loss_line(epoch, report))

    if args.epochs > 0:
        params, _history = train(instances, params, cfg, args.epochs, log_fn=log_fn)
    write_params_file(args.out, params)
    if args.log:
        Path(args.log).write_text("\n".join(log_lines) + ("\n" if log_lines else ""))
    print(f"trained {len(instances)} videos for {args.epochs} epochs -> {args.out}")
    return 0


def _parse_grid_flags(args) -> tuple[tuple[int, ...], tuple[float, ...]] | None:
    try:
        ranks = tuple(int(x) for x in args.n.split(","))
        thresholds = tuple(float(x) for x in args.iou.split(","))
    except ValueError:
        return None
    if not ranks or not thresholds or min(ranks) < 1:
        return None
    if any(not 0.0 < m <= 1.0 for m in thresholds):
        return None
    return ranks, thresholds


def _cmd_eval(args) -> int:
    parsed = _parse_grid_flags(args)
    if parsed is None:
        print("error: --n needs positive integers, --iou values in (0, 1]", file=sys.stderr)
        return 1
    ranks, thresholds = parsed
    cfg = _load_cfg(args)
    params = read_params_file(args.params)
    instances = load_instances(load_manifest(args.manifest, fps=cfg.fps))
    preds: dict[str, list[tuple[int, int]]] = {}
    gts: dict[str, tuple[int, int]] = {}
    for inst in instances:
        tree = build_tree(inst.features, inst.query.data, params, cfg)
        spans = _ranked_spans(tree, inst.query.data, params, max(ranks))
        preds[inst.features.video_id] = [s for s, _ in spans]
        if inst.label.gt_span is not None:
            gts[inst.features.video_id] = inst.label.gt_span
    result = evaluate_predictions(preds, gts, ranks, thresholds)
    sys.stdout.write(format_report(result, ranks, thresholds))
    return 0


def _cmd_predict(args) -> int:
    cfg = _load_cfg(args)
    params = read_params_file(args.params)
    instances = load_instances(load_manifest(args.manifest, fps=cfg.fps))
    for inst in instances:
        tree = build_tree(inst.features, inst.query.data, params, cfg)
        (span, conf) = _ranked_spans(tree, inst.query.data, params, 1)[0]
        print(format_prediction_line(inst.features.video_id, span, conf))
    return 0


def _random_instance(rng: np.random.Generator, n_frames: int, d: int):
    feats = FrameFeatures("check", rng.standard_normal((n_frames, d)))
    q = rng.standard_normal(d)
    labeled = int(rng.integers(n_frames))
    fallback = FrameFeatures("fallback", rng.standard_normal((n_frames, d)))
    return feats, q, OneShotLabel("check", labeled), fallback


def _cmd_check_grad(args) -> int:
    rng = new_rng(args.seed)
    feats, q, label, fallback = _random_instance(rng, args.frames, args.dim)
    params = init_params(args.dim, rng)
    cfg = Config(seed=args.seed)
    q_wrong = rng.standard_normal(args.dim)
    record = record_forward(
        feats, q, q_wrong, label, params, cfg, rng, fallback_features=fallback
    )
    err = finite_diff_check(record, params, epsilon=args.epsilon)
    print(f"max relative error {err:.3e}")
    if err > GRAD_TOLERANCE:
        print(f"error: gradient check failed (> {GRAD_TOLERANCE:g})", file=sys.stderr)
        return 3
    return 0


def _cmd_check_oracle(args) -> int:
    worst = 0.0
    for t in range(args.trials):
        rng = np.random.default_rng([args.seed, t])
        n = int(rng.integers(2, args.max_frames + 1))
        d = int(rng.integers(4, 17))
        feats = FrameFeatures(f"t{t}", rng.standard_normal((n, d)))
        q = rng.standard_normal(d)
        params = init_params(d, rng)
        cfg = Config()
        fast = build_tree(feats, q, params, cfg)
        slow = oracle_build(feats, q, params, cfg)
        if not trees_equal_topology(fast, slow):
            print(f"error: topology mismatch on trial {t}", file=sys.stderr)
            return 3
        gap = trees_feature_gap(fast, slow)
        worst = max(worst, gap)
        if gap > ORACLE_FEATURE_TOLERANCE:
            print(
                f"error: feature gap {gap:.3e} on trial {t} "
                f"(> {ORACLE_FEATURE_TOLERANCE:g})",
                file=sys.stderr,
            )
            return 3
    print(f"{args.trials} trials ok, max feature gap {worst:.3e}")
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "build": _cmd_build,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "check-grad": _cmd_check_grad,
    "check-oracle": _cmd_check_oracle,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SeglocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
