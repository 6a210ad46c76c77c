"""Command-line interface.

Subcommands mirror the pipeline steps plus the full run and the ratio
sweep.  Every command accepts --config (JSON file over the built-in
defaults) and repeated --set key.path=value overrides.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from types import SimpleNamespace

from . import annotations as ann
from . import corpus as corpus_mod
from . import counter as counter_mod
from . import denoiser as denoiser_mod
from . import pipeline as pipeline_mod
from . import sample as sample_mod
from . import train as train_mod
from .errors import CountgenError, PipelineStepError
from .schedule import build_schedule


def _load_config(args) -> dict:
    cfg = pipeline_mod.smoke_config() if getattr(args, "smoke", False) else pipeline_mod.default_config()
    if args.config:
        cfg = pipeline_mod.merge_config(cfg, json.loads(Path(args.config).read_text()))
    for item in args.set or []:
        key, _, raw = item.partition("=")
        if not _:
            raise CountgenError(f"--set expects key.path=value, got '{item}'")
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return cfg


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run config (merged over defaults)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    p.add_argument("--smoke", action="store_true", help="start from the smoke-test defaults")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="countgen")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the procedural corpus")
    _add_common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-counter", help="train the frozen counter on a corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-diffusion", help="train the conditional diffusion model")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--counter", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--telemetry")

    p = sub.add_parser("sample", help="guided sampling from dot annotations")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--counter", required=True)
    p.add_argument("--annotations", required=True, help="directory of .dots files")
    p.add_argument("--per-image", type=int, default=3)
    p.add_argument("--s", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-counter-mixed", help="train a counter on a real/synthetic mix")
    _add_common(p)
    p.add_argument("--workdir", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="evaluate a counter checkpoint on a corpus split")
    _add_common(p)
    p.add_argument("--counter", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", help="run all steps and write the report")
    _add_common(p)
    p.add_argument("--out", required=True, help="working directory")
    p.add_argument("--fresh", action="store_true", help="ignore existing step checkpoints")

    p = sub.add_parser("ratio-sweep", help="re-train/evaluate the counter per mix ratio")
    _add_common(p)
    p.add_argument("--out", required=True, help="working directory")
    p.add_argument("--ratios", default="0,0.1,0.3,0.5", help="comma-separated ratios")

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except PipelineStepError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CountgenError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    cfg = _load_config(args)
    cmd = args.command

    if cmd == "gen-corpus":
        corpus_mod.generate_corpus(pipeline_mod._corpus_config(cfg), Path(args.out))
        print(f"corpus written to {args.out}")
        return 0

    if cmd == "train-counter":
        scenes = corpus_mod.load_split(Path(args.corpus), "train")
        params = counter_mod.train_counter(
            [(s.image, s.dmap) for s in scenes],
            pipeline_mod._counter_config(cfg, pipeline_mod.seeds_for(cfg)["counter"]),
        )
        Path(args.out).write_bytes(counter_mod.save_counter(params))
        print(f"counter checkpoint written to {args.out}")
        return 0

    if cmd == "train-diffusion":
        scenes = corpus_mod.load_split(Path(args.corpus), "train")
        frozen = counter_mod.load_counter(Path(args.counter).read_bytes())
        params, _ = train_mod.train_diffusion(
            scenes,
            frozen,
            pipeline_mod._train_config(cfg),
            build_schedule(**cfg["schedule"]),
            arch=pipeline_mod._arch(cfg),
            telemetry_path=Path(args.telemetry) if args.telemetry else None,
        )
        Path(args.out).write_bytes(denoiser_mod.save_params(params))
        print(f"diffusion checkpoint written to {args.out}")
        return 0

    if cmd == "sample":
        params = denoiser_mod.load_params(Path(args.checkpoint).read_bytes())
        frozen = counter_mod.load_counter(Path(args.counter).read_bytes())
        kernel_variance = float(cfg["corpus"]["kernel_variance"])
        scenes = []
        for dots_file in sorted(Path(args.annotations).glob("*.dots")):
            dots = ann.parse_dots(dots_file.read_text())
            scenes.append(
                SimpleNamespace(
                    scene_id=dots_file.stem,
                    dots=dots,
                    dmap=ann.render_density(dots, kernel_variance),
                )
            )
        gcfg = sample_mod.GuidanceConfig(s=args.s, steps=args.steps, seed=args.seed)
        manifest = sample_mod.batch_sample(
            params, frozen, scenes, args.per_image, gcfg,
            build_schedule(**cfg["schedule"]), Path(args.out),
        )
        print(f"{len(manifest)} samples written to {args.out}")
        return 0

    if cmd == "train-counter-mixed":
        work = Path(args.workdir)
        scenes = corpus_mod.load_split(work / "corpus", "train")
        params = pipeline_mod._train_mixed_counter(cfg, scenes, work / "synthetic", args.ratio)
        Path(args.out).write_bytes(counter_mod.save_counter(params))
        print(f"mixed counter checkpoint written to {args.out}")
        return 0

    if cmd == "evaluate":
        params = counter_mod.load_counter(Path(args.counter).read_bytes())
        scenes = corpus_mod.load_split(Path(args.corpus), args.split)
        metrics = counter_mod.evaluate(params, [(s.image, s.dots.count) for s in scenes])
        report = pipeline_mod.stratified_report(metrics)
        Path(args.out).write_text(json.dumps(metrics.to_dict() | report, indent=1) + "\n")
        print(json.dumps({"mae": metrics.mae, "mse": metrics.mse}))
        return 0

    if cmd == "pipeline":
        report = pipeline_mod.run_pipeline(cfg, Path(args.out), resume=not args.fresh)
        print(json.dumps({k: report[k] for k in ("mix_ratio", "improvement_mae")}))
        print(f"report written to {Path(args.out) / 'report.json'}")
        return 0

    if cmd == "ratio-sweep":
        ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
        sweep = pipeline_mod.ratio_sweep(cfg, ratios, Path(args.out))
        for row in sweep["rows"]:
            print(json.dumps(row))
        return 0

    raise CountgenError(f"unknown command '{cmd}'")


if __name__ == "__main__":
    raise SystemExit(main())
