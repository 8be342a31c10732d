"""Command-line entry point.

Subcommands: simulate, stats, sample-anchors, train-srn, refine, eval,
gradcheck. Every run takes a single --seed, writes machine-readable JSON
next to its outputs, and drops a manifest recording the resolved
configuration. Exit codes: 0 success, 1 validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, dataset, evaluate, hrpn, pyramid, refine, sim, srn

_EXIT_OK = 0
_EXIT_VALIDATION = 1


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def _manifest(out_dir: Path, subcommand: str, args: argparse.Namespace, started: float,
              inputs: list[str], outputs: list[str]) -> None:
    config = {
        k: (list(v) if isinstance(v, tuple) else v)
        for k, v in sorted(vars(args).items())
        if k != "func"
    }
    _write_json(
        out_dir / "manifest.json",
        {
            "subcommand": subcommand,
            "config": config,
            "seed": getattr(args, "seed", None),
            "inputs": sorted(inputs),
            "outputs": sorted(outputs),
            "version": __version__,
            "duration_s": time.monotonic() - started,
        },
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


_SPEC_KEYS = {f.name for f in dataclasses.fields(sim.VideoSpec)}


def load_video_spec(path, seed_override: int | None = None) -> sim.VideoSpec:
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    unknown = set(raw) - _SPEC_KEYS
    if unknown:
        raise ValueError(f"unknown spec keys {sorted(unknown)}")
    for key in ("image_size", "drone_velocity", "scale_weights", "bucket_weights",
                "building_size_range", "exposure_drift"):
        if key in raw and raw[key] is not None:
            raw[key] = tuple(raw[key])
    if seed_override is not None:
        raw["seed"] = seed_override
    return sim.VideoSpec(**raw)


def _frame_path(out_dir: Path, frame_index: int) -> Path:
    return out_dir / f"frame_{frame_index:04d}.msnt"


def _cmd_simulate(args) -> int:
    started = time.monotonic()
    spec = load_video_spec(args.spec, args.seed)
    ds, pyramids = sim.generate_video(spec)
    out = _out_dir(args)
    dataset.save_dataset(out / "dataset.json", ds)
    outputs = [str(out / "dataset.json")]
    for t, pyr in enumerate(pyramids):
        path = _frame_path(out, t)
        pyramid.save_pyramid(path, pyr)
        outputs.append(str(path))
    _manifest(out, "simulate", args, started, [str(args.spec)], outputs)
    n_damage = sum(1 for i in ds.instances if i.kind == "damage")
    print(
        f"wrote {len(ds.images)} frames, {len(ds.instances)} instances "
        f"({n_damage} damages) to {out}"
    )
    return _EXIT_OK


def _cmd_stats(args) -> int:
    started = time.monotonic()
    ds = dataset.load_dataset(args.data)
    stats = dataset.size_stats(ds)
    print(dataset.format_size_stats(stats))
    if args.out:
        out = _out_dir(args)
        _write_json(out / "stats.json", stats.to_dict())
        _manifest(out, "stats", args, started, [str(args.data)], [str(out / "stats.json")])
    return _EXIT_OK


def _parse_floats(text: str) -> tuple[float, ...]:
    values = tuple(float(v) for v in text.split(",") if v.strip())
    if not values:
        raise ValueError(f"empty number list {text!r}")
    return values


def _cmd_sample_anchors(args) -> int:
    started = time.monotonic()
    ds = dataset.load_dataset(args.data)
    image = ds.image_by_id(args.image if args.image is not None else ds.images[0].id)
    config = hrpn.AnchorConfig(_parse_floats(args.scales), _parse_floats(args.ratios))
    shapes = pyramid.level_shapes_for((image.width, image.height))
    anchors = hrpn.generate_anchors(shapes, config, image_size=(image.width, image.height))
    proposals = [
        inst.box for inst in ds.instances_of_image(image.id) if inst.kind == "building"
    ]
    retained, filtered = hrpn.filter_anchors(anchors, proposals, args.metric, args.threshold)
    out = _out_dir(args)
    records_path = out / "anchors.jsonl"
    with open(records_path, "w", encoding="utf-8") as f:
        for anchor in sorted(
            retained + filtered, key=lambda a: (a.level, a.cell, a.box.as_tuple())
        ):
            f.write(
                json.dumps(
                    {
                        "level": anchor.level,
                        "cell": list(anchor.cell),
                        "box": list(anchor.box.as_tuple()),
                        "score": anchor.sampling_score,
                        "retained": anchor.retained,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    _manifest(out, "sample-anchors", args, started, [str(args.data)], [str(records_path)])
    print(
        f"image {image.id}: {len(retained)} of {len(anchors)} anchors retained "
        f"({args.metric}, threshold {args.threshold if args.threshold is not None else hrpn.DEFAULT_THRESHOLDS[args.metric]})"
    )
    return _EXIT_OK


def load_video_dir(path) -> srn.VideoFeatures:
    """Read one simulate output directory into trainer form."""
    path = Path(path)
    ds = dataset.load_dataset(path / "dataset.json")
    if len(ds.videos) != 1:
        raise ValueError(f"{path}: expected a single-video dataset")
    video = ds.videos[0]
    pyramids = [
        pyramid.load_pyramid(_frame_path(path, t)) for t in range(video.num_frames)
    ]
    return srn.VideoFeatures(video=video, pyramids=pyramids)


def _cmd_train_srn(args) -> int:
    started = time.monotonic()
    clips = [load_video_dir(p) for p in args.video]
    config = srn.TrainConfig(
        n_pairs=args.pairs,
        n_neg=args.negatives,
        top_k=args.topk,
        lr=args.lr,
        margin=args.margin,
        steps=args.steps,
    )
    params, log = srn.train_srn(clips, config, args.seed)
    out = _out_dir(args)
    srn.save_encoder(out / "params.msnt", params)
    _write_json(out / "train_log.json", {"steps": log})
    _manifest(
        out, "train-srn", args, started,
        [str(p) for p in args.video],
        [str(out / "params.msnt"), str(out / "train_log.json")],
    )
    tail = [rec["loss"] for rec in log[-50:]]
    print(
        f"trained {config.steps} steps on {len(clips)} videos; "
        f"final-window mean loss {float(np.mean(tail)) if tail else float('nan'):.4f}"
    )
    return _EXIT_OK


def _cmd_refine(args) -> int:
    started = time.monotonic()
    params = srn.load_encoder(args.params)
    cfg = refine.RefineConfig(params=params, c0=args.c0, c1=args.c1)
    dets_p = dataset.load_detections(args.dets_p)
    dets_q = dataset.load_detections(args.dets_q)
    pyr_p = pyramid.load_pyramid(args.pyr_p)
    pyr_q = pyramid.load_pyramid(args.pyr_q)
    refined_p, refined_q, report = refine.refine_scores(dets_p, dets_q, pyr_p, pyr_q, cfg)
    out = _out_dir(args)
    dataset.save_detections(out / "refined_p.json", refined_p)
    dataset.save_detections(out / "refined_q.json", refined_q)
    _write_json(out / "match_report.json", report.to_dict())
    _manifest(
        out, "refine", args, started,
        [str(args.params), str(args.dets_p), str(args.dets_q), str(args.pyr_p), str(args.pyr_q)],
        [str(out / "refined_p.json"), str(out / "refined_q.json"), str(out / "match_report.json")],
    )
    changed = sum(
        1 for a, b in zip(dets_p + dets_q, refined_p + refined_q) if a.score != b.score
    )
    print(f"refined {changed} of {len(dets_p) + len(dets_q)} scores")
    return _EXIT_OK


def _cmd_eval(args) -> int:
    started = time.monotonic()
    ds = dataset.load_dataset(args.data)
    dets = dataset.load_detections(args.dets)
    mask_summary = box_summary = None
    if args.kind in ("mask", "both"):
        mask_summary = evaluate.compute_ap(dets, ds, "mask")
    if args.kind in ("box", "both"):
        box_summary = evaluate.compute_ap(dets, ds, "box")
    empty = evaluate.ApSummary("none", None, None, None, None, None, None, {})
    report = evaluate.ApReport(mask=mask_summary or empty, box=box_summary or empty)
    print(evaluate.format_ap_report(report))
    out = _out_dir(args)
    _write_json(out / "ap_report.json", report.to_dict())
    _manifest(out, "eval", args, started, [str(args.data), str(args.dets)],
              [str(out / "ap_report.json")])
    return _EXIT_OK


def _cmd_gradcheck(args) -> int:
    started = time.monotonic()
    worst = 0.0
    for i in range(args.configs):
        x, xp, xn, params, cfg = srn.random_check_config(
            int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
        )
        worst = max(worst, srn.gradient_check(x, xp, xn, params, cfg, step=args.step))
    passed = worst < args.tolerance
    print(f"max relative error {worst:.3e} over {args.configs} configurations: "
          f"{'ok' if passed else 'FAIL'}")
    if args.out:
        out = _out_dir(args)
        _write_json(
            out / "gradcheck.json",
            {"max_relative_error": worst, "configs": args.configs,
             "step": args.step, "tolerance": args.tolerance, "passed": passed},
        )
        _manifest(out, "gradcheck", args, started, [], [str(out / "gradcheck.json")])
    return _EXIT_OK if passed else _EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="damast",
        description="Aerial-video building damage toolkit: simulation, anchor "
        "sampling, similarity training, score refinement, and evaluation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic video dataset")
    p.add_argument("--spec", required=True, help="VideoSpec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("stats", help="damage size statistics for a dataset")
    p.add_argument("--data", required=True, help="dataset JSON file")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("sample-anchors", help="score anchors against building boxes")
    p.add_argument("--data", required=True, help="dataset JSON file")
    p.add_argument("--image", type=int, default=None, help="image id (default: first)")
    p.add_argument("--metric", choices=hrpn.METRICS, default="ii")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--scales", default="8,16,32")
    p.add_argument("--ratios", default="0.5,1.0,2.0")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_sample_anchors)

    p = sub.add_parser("train-srn", help="train the similarity encoder")
    p.add_argument("--video", action="append", required=True,
                   help="simulate output directory; repeat for each video")
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--topk", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_srn)

    p = sub.add_parser("refine", help="calibrate detection scores across two frames")
    p.add_argument("--params", required=True, help="encoder parameter bundle")
    p.add_argument("--dets-p", required=True)
    p.add_argument("--dets-q", required=True)
    p.add_argument("--pyr-p", required=True)
    p.add_argument("--pyr-q", required=True)
    p.add_argument("--c0", type=float, default=0.2)
    p.add_argument("--c1", type=float, default=0.7)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("eval", help="average-precision report")
    p.add_argument("--data", required=True, help="dataset JSON file")
    p.add_argument("--dets", required=True, help="detection JSON file")
    p.add_argument("--kind", choices=("box", "mask", "both"), default="both")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=50)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return _EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
