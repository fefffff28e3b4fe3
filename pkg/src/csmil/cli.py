"""``csmil`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Failures print a single JSON line on stderr, for example::

    {"code": 3, "kind": "data", "message": "cannot read patch image ..."}
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .container import ContainerError
from .pgm import PGMError
from .toydata import SCALES, ManifestError, load_manifest
from .trainer import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    return pipeline.coerce_value("shared", text)


def _run_flags(p: argparse.ArgumentParser, out_root: bool = True) -> None:
    """Flags mirroring every RunConfig field; unset flags leave file values alone."""
    p.add_argument("--config", help="JSON config file; flags given here override it")
    p.add_argument("--dataset", "--kind", dest="dataset", choices=("micro", "macro"))
    p.add_argument("--regions", type=int, help="regions per class (split 3:1:2)")
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int, help="embedding length D")
    p.add_argument("--k", type=int, help="phenotype clusters per region")
    p.add_argument("--grid-step", type=int)
    p.add_argument("--bag-size", type=int)
    p.add_argument("--bags-per-group", type=int, help="training bags per region per epoch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--val-bags", type=int, help="validation bags per region")
    p.add_argument("--test-bags", type=int, help="test bags per region")
    p.add_argument("--mode", choices=("cs", "mean", "concat"))
    p.add_argument("--act", choices=("relu", "tanh"))
    p.add_argument("--shared", type=_bool, metavar="true|false")
    p.add_argument("--stratified", type=_bool, metavar="true|false",
                   help="cluster-stratified training bags (false = naive bagging)")
    p.add_argument("--hidden", type=int, help="encoder width L")
    p.add_argument("--attn-dim", type=int, help="attention width M")
    p.add_argument("--scales", help=f"comma-separated subset of {','.join(SCALES)}")
    if out_root:
        p.add_argument("--out", help="output root")


def _resolve(args) -> pipeline.RunConfig:
    names = [f.name for f in pipeline.dataclasses.fields(pipeline.RunConfig)]
    overrides = {n: getattr(args, n, None) for n in names}
    return pipeline.resolve_config(args.config, overrides)


def _echo(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_toy(args) -> None:
    cfg = pipeline.RunConfig(dataset=args.kind, regions=args.regions, seed=args.seed,
                             grid_step=args.grid_step)
    gen = pipeline.gen_micro if args.kind == "micro" else pipeline.gen_macro
    m = gen(cfg.regions, cfg.seed, args.out, grid_step=cfg.grid_step)
    _echo({"manifest": str(Path(args.out) / "manifest.jsonl"), "patches": len(m.records)})


def cmd_embed(args) -> None:
    fs = pipeline.stage_embed(args.manifest, args.seed, args.dim, args.out)
    _echo({"feats": args.out, "patches": len(fs), "dim": args.dim})


def cmd_cluster(args) -> None:
    pipeline.stage_cluster(args.feats, args.k, args.seed, args.out)
    _echo({"clusters": args.out, "k": args.k})


def cmd_bags(args) -> None:
    n = pipeline.stage_bags(args.feats, args.clusters, args.dump, args.split, args.bag_size,
                            args.n_bags, args.seed, not args.naive)
    _echo({"bags": n, "dump": args.dump})


def _check_manifest(manifest_path, feats_path) -> None:
    if manifest_path is None:
        return
    m = load_manifest(manifest_path, check_files=False)
    fs, _ = pipeline.load_inputs(feats_path)
    if len(m.records) != len(fs):
        raise ValueError(f"manifest {manifest_path} lists {len(m.records)} patches, "
                         f"feature cache has {len(fs)}")


def cmd_train(args) -> None:
    cfg = _resolve(args)
    _check_manifest(args.manifest, args.feats)
    ckpt = Path(args.ckpt_out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_json(ckpt.with_suffix(".config.json"), cfg.to_dict())
    info = pipeline.stage_train(cfg, args.feats, args.clusters, ckpt, args.log)
    _echo({"checkpoint": str(ckpt), **info})


def cmd_eval(args) -> None:
    _check_manifest(args.manifest, args.feats)
    res, scales = pipeline.stage_eval(args.ckpt, args.feats, args.bags, args.bag_size, args.seed,
                                      args.split)
    rec = pipeline.eval_record(res, scales, {"checkpoint": args.ckpt, "seed": args.seed})
    if args.out:
        pipeline.write_json(args.out, rec)
    _echo({k: rec[k] for k in ("auc", "ap", "accuracy", "n_groups", "n_bags")})


def cmd_attnmap(args) -> None:
    _check_manifest(args.manifest, args.feats)
    paths = pipeline.stage_attnmap(args.ckpt, args.feats, args.region, args.out, args.bag_size,
                                   args.bags, args.seed)
    _echo({"files": [str(p) for p in paths]})


def cmd_ablate(args) -> None:
    cfg = _resolve(args)
    if args.grid:
        try:
            cells = pipeline.expand_grid(json.loads(args.grid))
        except json.JSONDecodeError as exc:
            raise pipeline.ConfigError(f"--grid is not valid JSON: {exc.msg}") from None
        name = "custom"
    else:
        cells, name = pipeline.ABLATION_PRESETS[args.preset], args.preset
    print(json.dumps(cfg.to_dict(), sort_keys=True))
    rows = pipeline.ablate(cfg, cells)
    text, csv = pipeline.format_table(rows)
    stem = cfg.dataset_dir / f"ablation_{name}"
    stem.with_suffix(".txt").write_text(text, encoding="utf-8")
    stem.with_suffix(".csv").write_text(csv, encoding="utf-8")
    sys.stdout.write(text)


def cmd_run_all(args) -> None:
    cfg = _resolve(args)
    print(json.dumps(cfg.to_dict(), sort_keys=True))
    rec = pipeline.run_all(cfg, maps=not args.no_maps)
    _echo({k: rec[k] for k in ("variant", "auc", "ap", "accuracy")})


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="csmil", description="Cross-scale attention MIL on synthetic multi-scale data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-toy", help="generate a micro or macro toy dataset")
    s.add_argument("--kind", choices=("micro", "macro"), required=True)
    s.add_argument("--regions", type=int, default=120, help="regions per class")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid-step", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_toy)

    s = sub.add_parser("embed", help="embed every patch of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("cluster", help="per-region k-means on 20x embeddings")
    s.add_argument("--feats", required=True)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("bags", help="build bags and dump their composition")
    s.add_argument("--feats", required=True)
    s.add_argument("--clusters", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="train")
    s.add_argument("--bag-size", type=int, default=8)
    s.add_argument("--n-bags", type=int, default=32, help="bags per region")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--naive", action="store_true", help="ignore clusters when drawing")
    s.add_argument("--dump", required=True, help="output .jsonl")
    s.set_defaults(func=cmd_bags)

    s = sub.add_parser("train", help="train one model")
    _run_flags(s, out_root=False)
    s.add_argument("--manifest")
    s.add_argument("--feats", required=True)
    s.add_argument("--clusters", required=True)
    s.add_argument("--out", dest="ckpt_out", required=True, help="checkpoint path to write")
    s.add_argument("--log", help="line-delimited training log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on test bags")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest")
    s.add_argument("--feats", required=True)
    s.add_argument("--bags", type=int, default=100, help="bags per region")
    s.add_argument("--bag-size", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--out", help="metrics JSON path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("attnmap", help="export attention maps of one region")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest")
    s.add_argument("--feats", required=True)
    s.add_argument("--region", type=int, required=True)
    s.add_argument("--bag-size", type=int, default=8)
    s.add_argument("--bags", type=int, help="bags for the region (at least 10 visits per patch)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attnmap)

    s = sub.add_parser("ablate", help="train and evaluate a grid of variants")
    _run_flags(s)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--preset", choices=sorted(pipeline.ABLATION_PRESETS), default="fusion")
    g.add_argument("--grid", help='JSON object of value lists, e.g. {"mode": ["cs", "mean"]}')
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("run-all", help="generate, embed, cluster, train, evaluate and map")
    _run_flags(s)
    s.add_argument("--no-maps", action="store_true")
    s.set_defaults(func=cmd_run_all)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"code": code, "kind": kind, "message": " ".join(str(message).split())}) + "\n")
    return code


def _classify(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, pipeline.AblationError):
        return _classify(exc.cause)
    if isinstance(exc, (pipeline.ConfigError, UsageError)):
        return EXIT_CONFIG, "config"
    if isinstance(exc, (DivergenceError, FloatingPointError)):
        return EXIT_NUMERIC, "numerical"
    if isinstance(exc, (ContainerError, PGMError, ManifestError, OSError, ValueError, KeyError)):
        return EXIT_DATA, "data"
    return 1, "internal"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except (Exception,) as exc:  # noqa: BLE001 - every failure becomes one line
        code, kind = _classify(exc)
        if code == 1:
            raise
        return _fail(code, kind, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
