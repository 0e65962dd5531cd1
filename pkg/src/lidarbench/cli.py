"""Command-line interface.

Subcommands:
  gen      generate synthetic multi-agent frames (clouds + manifests)
  corrupt  apply a corruption suite and write corrupted clouds
  teacher  write the painted dense teacher clouds per agent
  losses   evaluate the loss table over frames and write losses.json
  eval     full robustness evaluation: report.json plus SVG chart
  report   merge reports from separate runs and re-derive CE/mCE

``gen`` output directories feed every other subcommand through their
``--data`` flag; frames are discovered as ``frame_*.yaml`` in sorted
order.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from typing import List

from .corruption import CorruptionConfig
from .pcio import (
    AgentEntry,
    FrameManifest,
    read_manifest,
    read_suite,
    write_cloud,
    write_manifest,
    write_suite,
)
from .pipeline import PipelineOptions, default_suite, run_pipeline
from .rng import derive_seed
from .metrics import RobustnessReport, write_chart
from .synth import SynthSpec, write_frames
from .teacher import make_teacher

__all__ = ["main"]


def _find_manifests(data_dir: str) -> List[str]:
    paths = sorted(glob.glob(os.path.join(data_dir, "frame_*.yaml")))
    if not paths:
        raise ValueError(f"no frame manifests (frame_*.yaml) found in {data_dir}")
    return paths


def _load_suite(args) -> List[CorruptionConfig]:
    if args.suite:
        return read_suite(args.suite)
    return default_suite(args.seed)


def _pipeline_options(args) -> PipelineOptions:
    extent = args.extent
    return PipelineOptions(
        seed=args.seed,
        comm_range=args.range,
        x_range=(-extent, extent),
        y_range=(-extent, extent),
        voxel_size=args.voxel,
        scales=args.scales,
        iou_thresholds=tuple(float(v) for v in args.iou.split(",")),
        nms_iou=args.nms_iou,
        conf_thr=args.conf,
        threads=args.threads,
        detector=args.detector,
        predictions_dir=args.predictions,
        teacher_mode="self" if args.no_teacher else "dense",
        with_losses=not args.no_losses,
    )


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="root seed")
    parser.add_argument("--range", type=float, default=70.0, help="communication range, m")
    parser.add_argument("--voxel", type=float, default=0.4, help="BEV cell size, m")
    parser.add_argument("--extent", type=float, default=40.0, help="grid half-extent, m")
    parser.add_argument("--scales", type=int, default=2, help="fusion scales")
    parser.add_argument("--iou", default="0.5,0.7", help="AP IoU thresholds, comma-separated")
    parser.add_argument("--nms-iou", type=float, default=0.15, help="NMS IoU threshold")
    parser.add_argument("--conf", type=float, default=0.25, help="confidence threshold")
    parser.add_argument("--threads", type=int, default=1, help="frame worker threads")
    parser.add_argument(
        "--detector",
        choices=("oracle", "head", "external"),
        default="oracle",
        help="detection source for AP",
    )
    parser.add_argument(
        "--predictions", default=None, help="prediction dir for --detector external"
    )
    parser.add_argument(
        "--no-teacher",
        action="store_true",
        help="use raw student clouds as the teacher branch",
    )
    parser.add_argument(
        "--no-losses", action="store_true", help="skip loss evaluation (AP only)"
    )


def _cmd_gen(args) -> int:
    spec = SynthSpec(
        n_agents=args.agents,
        n_objects=args.objects,
        n_beams=args.beams,
        points_per_beam=args.points_per_beam,
        seed=args.seed,
    )
    paths = write_frames(spec, args.frames, args.out)
    write_suite(default_suite(args.seed), os.path.join(args.out, "suite.yaml"))
    print(f"wrote {len(paths)} frames to {args.out}")
    return 0


def _cmd_corrupt(args) -> int:
    suite = read_suite(args.suite) if args.suite else default_suite(args.seed)
    manifests = _find_manifests(args.data)
    for config in suite:
        kind_dir = os.path.join(args.out, config.kind)
        os.makedirs(kind_dir, exist_ok=True)
        for path in manifests:
            manifest = read_manifest(path)
            base_dir = os.path.dirname(os.path.abspath(path))
            scene = manifest.load_scene(base_dir)
            entries = []
            for entry in manifest.agents:
                seed = derive_seed(
                    args.seed, config.seed, manifest.frame_id, entry.agent_id
                )
                cloud = config.build(seed=seed).transform(
                    scene.agents[entry.agent_id].cloud
                )
                name = f"cloud_{manifest.frame_id}_{entry.agent_id}.dspc"
                write_cloud(cloud, os.path.join(kind_dir, name))
                entries.append(
                    AgentEntry(entry.agent_id, entry.pose, name, entry.n_beams)
                )
            write_manifest(
                FrameManifest(
                    manifest.frame_id, manifest.ego_id, tuple(entries), manifest.gt_boxes
                ),
                os.path.join(kind_dir, f"frame_{manifest.frame_id}.yaml"),
            )
    print(f"wrote corrupted clouds for {len(suite)} kinds to {args.out}")
    return 0


def _cmd_teacher(args) -> int:
    manifests = _find_manifests(args.data)
    os.makedirs(args.out, exist_ok=True)
    for path in manifests:
        manifest = read_manifest(path)
        scene = manifest.load_scene(os.path.dirname(os.path.abspath(path)))
        teachers = make_teacher(scene)
        entries = []
        for entry in manifest.agents:
            name = f"teacher_{manifest.frame_id}_{entry.agent_id}.dspc"
            write_cloud(teachers[entry.agent_id], os.path.join(args.out, name))
            entries.append(AgentEntry(entry.agent_id, entry.pose, name, entry.n_beams))
        write_manifest(
            FrameManifest(
                manifest.frame_id, manifest.ego_id, tuple(entries), manifest.gt_boxes
            ),
            os.path.join(args.out, f"frame_{manifest.frame_id}.yaml"),
        )
    print(f"wrote teacher clouds for {len(manifests)} frames to {args.out}")
    return 0


def _write_losses(result, out_dir: str) -> str:
    rows = [
        {
            "frame_id": o.frame_id,
            "condition": o.condition,
            "n_decoded": o.n_decoded,
            **o.losses,
        }
        for o in result.outcomes
    ]
    payload = {"frames": rows, "means": result.loss_means}
    path = os.path.join(out_dir, "losses.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return path


def _cmd_losses(args) -> int:
    options = _pipeline_options(args)
    result = run_pipeline(_find_manifests(args.data), _load_suite(args), options)
    os.makedirs(args.out, exist_ok=True)
    path = _write_losses(result, args.out)
    for condition, means in sorted(result.loss_means.items()):
        kd = means.get("l_kd", float("nan"))
        rec = means.get("l_rec", float("nan"))
        print(f"{condition:>14s}  l_kd={kd:10.4f}  l_rec={rec:10.4f}")
    print(f"loss table written to {path}")
    return 0


def _print_report(result) -> None:
    report = result.report
    for thr in sorted(report.ap_clean):
        print(f"AP@{thr:g} clean: {report.ap_clean[thr]:.4f}")
        for kind in sorted(report.ap_per_corruption):
            ap = report.ap_per_corruption[kind][thr]
            ce = report.ce_per_corruption[kind][thr]
            print(f"AP@{thr:g} {kind}: {ap:.4f}  CE={ce:.4f}")
        if report.mce:
            print(f"mCE@{thr:g}: {report.mce[thr]:.4f}")
            ordering = ", ".join(
                f"{kind} ({ce:.3f})"
                for kind, ce in result.qualitative_ordering(thr)
            )
            print(f"degradation order@{thr:g}: {ordering}")


def _cmd_eval(args) -> int:
    options = _pipeline_options(args)
    result = run_pipeline(_find_manifests(args.data), _load_suite(args), options)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.json")
    with open(report_path, "w") as fh:
        fh.write(result.report.to_json())
    if options.with_losses:
        _write_losses(result, args.out)
    if not args.no_chart:
        write_chart(result.report, os.path.join(args.out, "chart.svg"))
    _print_report(result)
    print(f"report written to {report_path} ({result.elapsed_seconds:.1f} s)")
    return 0


def _cmd_report(args) -> int:
    reports = []
    for path in args.inputs:
        with open(path) as fh:
            reports.append(RobustnessReport.from_json(fh.read()))
    base = reports[0]
    merged_aps = dict(base.ap_per_corruption)
    for other in reports[1:]:
        for thr, ap in other.ap_clean.items():
            if abs(base.ap_clean.get(thr, float("nan")) - ap) > 1e-9:
                raise ValueError("reports disagree on clean AP; cannot merge")
        for kind, aps in other.ap_per_corruption.items():
            if kind in merged_aps:
                raise ValueError(f"corruption {kind!r} appears in multiple reports")
            merged_aps[kind] = aps
    merged = RobustnessReport.from_aps(base.ap_clean, merged_aps)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "report.json")
    with open(out_path, "w") as fh:
        fh.write(merged.to_json())
    write_chart(merged, os.path.join(args.out, "chart.svg"))
    print(f"merged {len(reports)} reports into {out_path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lidarbench",
        description="Multi-agent LiDAR corruption-robustness benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate synthetic frames")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--frames", type=int, default=10)
    p_gen.add_argument("--agents", type=int, default=3)
    p_gen.add_argument("--objects", type=int, default=4)
    p_gen.add_argument("--beams", type=int, default=64)
    p_gen.add_argument("--points-per-beam", type=int, default=256)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.set_defaults(func=_cmd_gen)

    p_cor = sub.add_parser("corrupt", help="apply a corruption suite")
    p_cor.add_argument("--data", required=True, help="directory with frame manifests")
    p_cor.add_argument("--suite", default=None, help="suite YAML (default: built-in)")
    p_cor.add_argument("--out", required=True)
    p_cor.add_argument("--seed", type=int, default=0)
    p_cor.set_defaults(func=_cmd_corrupt)

    p_tea = sub.add_parser("teacher", help="write painted teacher clouds")
    p_tea.add_argument("--data", required=True)
    p_tea.add_argument("--out", required=True)
    p_tea.set_defaults(func=_cmd_teacher)

    p_los = sub.add_parser("losses", help="evaluate the loss table")
    p_los.add_argument("--data", required=True)
    p_los.add_argument("--suite", default=None)
    p_los.add_argument("--out", required=True)
    _add_common(p_los)
    p_los.set_defaults(func=_cmd_losses)

    p_eval = sub.add_parser("eval", help="robustness report (AP/CE/mCE)")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--suite", default=None)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--no-chart", action="store_true")
    _add_common(p_eval)
    p_eval.set_defaults(func=_cmd_eval)

    p_rep = sub.add_parser("report", help="merge reports and draw the chart")
    p_rep.add_argument("--inputs", nargs="+", required=True)
    p_rep.add_argument("--out", required=True)
    p_rep.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
