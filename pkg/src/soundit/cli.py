"""``soundit`` command line: train, sample, evaluate, pair, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("soundit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, required=True, help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="soundit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on a manifest")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--experts", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("sample", help="generate landscapes from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--audio", type=Path, help="soundscape wav (first clip is used)")
    src.add_argument("--manifest", type=Path, help="write <pair_id>.png for every pair")
    p.add_argument("--scene", help="scene prompt; omitted = null scene condition")
    p.add_argument("--guidance", type=float)

    p = sub.add_parser("evaluate", help="score generated images against a manifest")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("-k", "--k", type=int, nargs="+", default=[1, 5], choices=[1, 5])
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("pair", help="build a manifest from a media directory")
    _common(p)
    p.add_argument("--media", type=Path, required=True)

    p = sub.add_parser("ablate", help="train/evaluate component and expert-count variants")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--variants", nargs="*")
    p.add_argument("--experts", type=int, nargs="*")
    p.add_argument("--steps", type=int)
    return parser


def _config(args, **overrides):
    from .config import load_config
    ov = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "seed", None) is not None:
        ov["seed"] = args.seed
    try:
        return load_config(args.config, ov)
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


def cmd_train(args) -> int:
    from .datakit import read_manifest
    from .plotting import plot_loss_curve
    from .training import EncodedDataset, Encoders, Trainer, make_codec

    manifest = read_manifest(args.manifest)
    if args.resume:
        from .config import RunConfig
        from .training import load_checkpoint
        cfg = RunConfig.from_dict(load_checkpoint(args.resume)["config"])
    else:
        cfg = _config(args, **{"train.steps": args.steps})
        if args.experts is not None:
            cfg = _config(args, **{"train.steps": args.steps,
                                   "model": {**cfg.model.to_dict(), "num_experts": args.experts,
                                             "top_k": min(cfg.model.top_k, args.experts)}})
    data = EncodedDataset.from_manifest(manifest, make_codec(cfg), Encoders.from_config(cfg))
    if args.resume:
        trainer = Trainer.resume(args.resume, data)
        remaining = (args.steps or cfg.train.steps) - trainer.step
    else:
        trainer = Trainer(cfg, data)
        remaining = cfg.train.steps
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    trainer.train(max(0, remaining), out)
    with open(out / "train_log.csv", "w", newline="\n") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(trainer.losses, 1):
            fh.write(f"{i},{loss!r}\n")
    plot_loss_curve(trainer.losses, out / "loss.png")
    summary = {"config_hash": cfg.hash(), "steps": trainer.step,
               "initial_loss": trainer.losses[0] if trainer.losses else None,
               "final_loss": trainer.losses[-1] if trainer.losses else None}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_sample(args) -> int:
    from .datakit import read_manifest
    from .encoders import write_png
    from .training import (EncodedDataset, Encoders, chain_generators, generate,
                           generate_for_manifest, load_clip, load_model, make_codec)

    model, cfg, schedule = load_model(args.checkpoint)
    seed = cfg.seed if args.seed is None else args.seed
    guidance = cfg.sample.guidance if args.guidance is None else args.guidance
    codec, encoders = make_codec(cfg), Encoders.from_config(cfg)
    if args.manifest is not None:
        data = EncodedDataset.from_manifest(read_manifest(args.manifest), codec, encoders)
        paths = generate_for_manifest(model, data, schedule, codec, args.out, guidance, seed)
        print(f"wrote {len(paths)} images to {args.out}")
        return EXIT_OK
    try:
        wave, sr = load_clip(args.audio)
    except Exception as exc:  # noqa: BLE001
        raise RuntimeError(f"cannot decode audio {args.audio}: {exc}") from exc
    wave = wave[: int(round(cfg.pairing.clip_seconds * sr))]
    cond = encoders.conditions([wave], [sr], [args.scene])
    if args.scene and not bool(~cond.scene_null[0]):
        log.warning("scene prompt %r has no known words; using the null scene", args.scene)
    z = generate(model, cond, schedule, guidance, chain_generators(seed, ["sample"]))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_png(args.out, codec.decode(z[0]))
    np.save(args.out.with_suffix(".latent.npy"), z[0].numpy())
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .backends import load_backends
    from .metrics import evaluate_suite, write_report
    from .plotting import plot_metric_report

    cfg = _config(args)
    report = evaluate_suite(args.manifest, args.generated, load_backends(cfg.backends),
                            tuple(sorted(set(args.k))), workers=args.workers)
    write_report(report, args.out)
    plot_metric_report(report, args.out.with_suffix(".png"))
    print(json.dumps(report.summary(), sort_keys=True))
    if report.failures:
        for f in report.failures:
            print(f"FAILED {f['pair_id']}: {f['error']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_pair(args) -> int:
    from dataclasses import asdict

    from .datakit import PairingConfig, default_filter_backends, run_pairing

    cfg = _config(args)
    manifest, failures = run_pairing(args.media, args.out, default_filter_backends(cfg.backends.get("seed", 0)),
                                     PairingConfig(**asdict(cfg.pairing)))
    if not manifest.records:
        log.warning("no pairs produced from %s", args.media)
    print(f"{len(manifest)} pairs -> {args.out} ({len(failures)} failed files)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation
    from .training import ablation_csv, ablation_plan, run_ablation

    cfg = _config(args, **{"ablation.steps": args.steps})
    plan = ablation_plan(cfg, args.variants, args.experts)
    rows = run_ablation(cfg, args.manifest, args.out, plan)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.csv").write_text(ablation_csv(rows))
    (args.out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    plot_ablation(rows, args.out / "ablation.png")
    print(ablation_csv(rows), end="")
    return EXIT_RUNTIME if any(r["error"] for r in rows) else EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "evaluate": cmd_evaluate,
            "pair": cmd_pair, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"soundit: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"soundit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
