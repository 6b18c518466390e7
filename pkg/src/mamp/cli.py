"""Command-line entry point: ``mamp <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import yaml

from mamp.errors import ConfigError, DataError, NumericalError


def _load(path: str | None, cls):
    from mamp.config import load_config

    return load_config(Path(path), cls) if path else cls()


def _corpus(path: str):
    from mamp.data import load_corpus

    return load_corpus(Path(path))


def _checkpoint(path: str):
    from mamp.checkpoint import load_checkpoint

    try:
        return load_checkpoint(Path(path))
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such checkpoint") from exc
    except (RuntimeError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: unreadable checkpoint ({exc})") from exc


def cmd_pretrain(args) -> None:
    from mamp.config import PretrainConfig, dump_config
    from mamp.train import pretrain

    cfg = _load(args.config, PretrainConfig)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.corpus:
        cfg = dataclasses.replace(cfg, corpus=args.corpus)
    if not cfg.corpus:
        raise ConfigError("corpus: no corpus given (set it in the config or pass --corpus)")
    out = Path(args.out)
    _, record = pretrain(cfg, _corpus(cfg.corpus), out=out)
    dump_config(cfg, out / "config.yaml")
    print(f"final loss {record.values('loss')[-1]:.6f}; wrote {out / 'checkpoint.pt'}")


def _eval(args, mode: str) -> None:
    from mamp.config import EvalConfig
    from mamp.evaluate import finetune, linear_probe

    if args.config:
        cfg = _load(args.config, EvalConfig)
    else:
        cfg = EvalConfig.finetune() if mode == "finetune" else EvalConfig.linear()
    overrides = {"mode": mode}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "label_fraction", None) is not None:
        overrides["label_fraction"] = args.label_fraction
    try:
        cfg = dataclasses.replace(cfg, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ckpt = _checkpoint(args.ckpt)
    corpus = _corpus(args.corpus)
    try:
        run = linear_probe if mode == "linear" else finetune
        acc, record = run(ckpt, corpus, cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if args.out:
        record.write(Path(args.out), stem=mode)
    print(f"{mode} top-1 {acc:.2f}%")


def cmd_probe(args) -> None:
    _eval(args, "linear")


def cmd_finetune(args) -> None:
    _eval(args, "finetune")


def cmd_ablate(args) -> None:
    from mamp.ablation import AXES, ablation_csv, run_ablation_suite
    from mamp.config import AblationConfig

    if args.axis not in AXES:
        raise ConfigError(f"unknown ablation axis {args.axis!r}; expected one of {', '.join(AXES)}")
    cfg = _load(args.config, AblationConfig)
    if args.corpus:
        cfg = dataclasses.replace(cfg, pretrain=dataclasses.replace(cfg.pretrain, corpus=args.corpus))
    if args.seeds:
        cfg = dataclasses.replace(cfg, seeds=tuple(args.seeds))
    if not cfg.pretrain.corpus:
        raise ConfigError("pretrain.corpus: no corpus given (set it in the config or pass --corpus)")
    rows = run_ablation_suite(cfg, args.axis, _corpus(cfg.pretrain.corpus), out=Path(args.out))
    sys.stdout.write(ablation_csv(rows))


def cmd_gen_data(args) -> None:
    from mamp.config import from_dict
    from mamp.data import SyntheticCorpusConfig, generate_synthetic_corpus

    raw = {}
    if args.config:
        try:
            raw = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = from_dict(SyntheticCorpusConfig, raw)
    corpus = generate_synthetic_corpus(cfg, out=Path(args.out))
    print(f"wrote {len(corpus.sequences)} sequences to {args.out}")


def cmd_report(args) -> None:
    from mamp.reporting import ReportSpec, render_report

    try:
        request = ReportSpec(args.inputs, args.kind, Path(args.out), args.x_label or "", args.y_label or "")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    svg, txt = render_report(request)
    sys.stdout.write(txt.read_text(encoding="utf-8"))
    print(f"wrote {svg}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mamp", description="Masked motion prediction pre-training for skeletons.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="pre-train an encoder")
    s.add_argument("--config")
    s.add_argument("--corpus", help="manifest or corpus directory (overrides the config)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    for name, func in (("probe", cmd_probe), ("finetune", cmd_finetune)):
        s = sub.add_parser(name, help=f"{'linear probe' if name == 'probe' else 'fine-tune'} a checkpoint")
        s.add_argument("--ckpt", required=True)
        s.add_argument("--corpus", required=True)
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        if name == "finetune":
            s.add_argument("--label-fraction", type=float)
        s.set_defaults(func=func)

    s = sub.add_parser("ablate", help="run one ablation axis")
    s.add_argument("--axis", required=True)
    s.add_argument("--config")
    s.add_argument("--corpus")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gen-data", help="write a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="YAML with synthetic corpus fields")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("report", help="render plots and tables from CSVs")
    s.add_argument("--kind", required=True)
    s.add_argument("--in", dest="inputs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--x-label")
    s.add_argument("--y-label")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, DataError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
