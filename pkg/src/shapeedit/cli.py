"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .training import TrainConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("shapeedit")

SUBCOMMANDS = ("gen", "score", "filter", "train", "edit", "eval", "ablate", "bench", "export-distill")


class UsageError(Exception):
    pass


def _config_help() -> str:
    lines = ["config keys (TOML file or --key=value overrides):"]
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"  {f.name:<18} default {f.default!r}")
    lines.append("environment: SHAPEEDIT_SCORER_TOKEN is sent as a bearer token to external scorers")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="shapeedit", description=__doc__, epilog=_config_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    def add(name, help_):
        p = sub.add_parser(name, help=help_, epilog=_config_help(), formatter_class=fmt)
        p.add_argument("--config", type=Path, help="flat TOML config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output root (overrides out_dir)")
        p.add_argument("-v", "--verbose", action="count", default=0)
        return p

    add("gen", "generate specialist records")
    p = add("score", "score a generated dataset")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--endpoint", default="oracle", help="'oracle' or the URL of an external scorer")
    p.add_argument("--model", default="scorer")
    p.add_argument("--max-in-flight", type=int, default=4)
    p.add_argument("--backoff", type=float, default=1.0, help="retry backoff base in seconds")
    p.add_argument("--rescore", action="store_true")
    p = add("filter", "keep records whose weight is 1")
    p.add_argument("--annotated", type=Path)
    add("train", "pretrain the base if needed and train the editing model")
    p = add("edit", "edit one PPM image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--instruction", type=Path, required=True, help="JSON sidecar {task, args, surface_text}")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p = add("eval", "evaluate a checkpoint on a bench")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--bench", type=Path, required=True)
    p.add_argument("--scorer", default="oracle", help="'oracle' or the URL of an external scorer")
    p.add_argument("--report", type=Path)
    p.add_argument("--grid", type=Path, help="directory for per-entry PPM outputs")
    p = add("ablate", "train and compare several variants")
    p.add_argument("--kind", choices=("sampling", "architecture"), default="architecture")
    p.add_argument("--bench", type=Path)
    p.add_argument("--seeds", default="0,1,2")
    p = add("bench", "build the evaluation bench")
    p.add_argument("--n-scenes", type=int, default=62)
    p.add_argument("--output", type=Path)
    p = add("export-distill", "export stratified scorer-distillation samples")
    p.add_argument("--annotated", type=Path)
    p.add_argument("--n-per-task", type=int, default=10)
    p.add_argument("--output", type=Path)
    return parser


def load_config(path: Path | None, overrides: list[str], seed: int | None, out: str | None) -> TrainConfig:
    values: dict = {}
    if path is not None:
        with open(path, "rb") as f:
            values.update(tomllib.load(f))
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"unrecognized argument: {item}")
        key, _, value = item[2:].partition("=")
        values[key.replace("-", "_")] = value
    unknown = sorted(set(values) - set(TrainConfig.keys()))
    if unknown:
        raise UsageError(f"unknown config key: {unknown[0]}")
    if seed is not None:
        values["seed"] = seed
    if out is not None:
        values["out_dir"] = out
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config value: {exc}") from None


def _endpoint(spec: str, args):
    from .scoring import ScorerEndpoint

    if spec == "oracle":
        return ScorerEndpoint("oracle")
    return ScorerEndpoint("external", base_url=spec, model=getattr(args, "model", "scorer"),
                          max_in_flight=getattr(args, "max_in_flight", 4), backoff_base=getattr(args, "backoff", 1.0))


def _run(args, cfg: TrainConfig) -> int:
    root = Path(cfg.out_dir)
    cmd = args.command
    if cmd == "gen":
        from .training import run_pipeline

        res = run_pipeline(cfg, stages=("gen",))
        print(f"dataset: {res.dataset}")
        return 0
    if cmd == "score":
        from .scoring import score_dataset

        dataset = args.dataset or root / "data" / "records.jsonl"
        report = score_dataset(dataset, _endpoint(args.endpoint, args), cfg.threshold, rescore=args.rescore,
                               statistic=cfg.statistic)
        print(report.table())
        print(json.dumps({k: v for k, v in report.to_dict().items() if k != "per_task"}, sort_keys=True))
        if report.n_unscored:
            print(f"{report.n_unscored} record(s) left unscored", file=sys.stderr)
            return 1
        return 0
    if cmd == "filter":
        from .scoring import filter_dataset

        annotated = args.annotated or root / "data" / "annotated.jsonl"
        path, report = filter_dataset(annotated, None, cfg.threshold, cfg.statistic)
        print(report.table())
        print(f"filtered: {path}")
        return 0
    if cmd == "train":
        from .training import run_pipeline

        res = run_pipeline(cfg)
        print(f"checkpoint: {res.checkpoint}  (ran: {', '.join(res.ran) or 'nothing, all stages complete'})")
        return 0
    if cmd == "edit":
        return _edit(args, cfg)
    if cmd == "eval":
        from .evalbench import BenchSet, SamplerSettings, evaluate_checkpoint

        settings = SamplerSettings(steps=cfg.eval_steps, guidance_scale=cfg.guidance_scale, seed=cfg.seed,
                                   schedule=cfg.schedule, T=cfg.T)
        report = evaluate_checkpoint(args.checkpoint, BenchSet.load(args.bench), settings,
                                     _endpoint(args.scorer, args), args.grid)
        path = report.save(args.report or root / "report.json")
        print(json.dumps(report.avg, sort_keys=True))
        print(f"report: {path}")
        return 0
    if cmd == "ablate":
        from .evalbench import ARCHITECTURE_ARMS, SAMPLING_ARMS, BenchSet, ablate, build_bench

        bench = BenchSet.load(args.bench) if args.bench else build_bench(cfg.seed, cfg.bench_scenes)
        seeds = tuple(int(s) for s in args.seeds.split(","))
        arms = SAMPLING_ARMS if args.kind == "sampling" else ARCHITECTURE_ARMS
        report = ablate(arms, cfg, bench, seeds, root / f"ablate-{args.kind}")
        out = root / f"ablate-{args.kind}.json"
        out.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
        print(report.table())
        return 1 if any("error" in r for r in report.rows) else 0
    if cmd == "bench":
        from .evalbench import build_bench

        bench = build_bench(cfg.seed, args.n_scenes)
        path = bench.save(args.output or root / "bench.json")
        print(f"bench: {path} ({len(bench.entries)} entries)")
        return 0
    if cmd == "export-distill":
        from .scoring import export_distillation

        annotated = args.annotated or root / "data" / "annotated.jsonl"
        path, warnings = export_distillation(annotated, args.output or root / "distill.jsonl", args.n_per_task, cfg.seed)
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)
        print(f"distillation set: {path}")
        return 0
    raise UsageError(f"unknown subcommand {cmd}")


def _edit(args, cfg: TrainConfig) -> int:
    import numpy as np

    from .diffusion import make_schedule, sample
    from .editnet import model_fn
    from .microworld import BUCKETS, read_ppm, write_ppm
    from .specialists import Instruction, dispatch
    from .training import load_checkpoint
    from .vocab import tokenize

    instr = Instruction.from_dict(json.loads(args.instruction.read_text()))
    dispatch(instr)
    pixels = read_ppm(args.input)
    h, w, _ = pixels.shape
    if not any((b.height, b.width) == (h, w) for b in BUCKETS.values()):
        raise UsageError(f"--input is {w}x{h}, which matches no aspect bucket")
    model, _ = load_checkpoint(args.checkpoint)
    out = sample(model_fn(model), pixels[None].astype(model.config.dtype), tokenize(instr.surface_text)[None],
                 make_schedule(cfg.schedule, cfg.T), args.steps or cfg.eval_steps, "deterministic",
                 cfg.guidance_scale, cfg.seed, start="source")
    args.output.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(args.output, np.asarray(out[0]))
    print(f"edited: {args.output}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, rest, args.seed, args.out)
        return _run(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:
        log.debug("operation failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
