"""Command-line entry point: ``agreid <command> [flags]``.

Commands print ``key=value`` lines on stdout. When ``--out-dir`` is given they
also write ``results.csv`` (header ``metric,value``) and echo the effective
configuration to ``config.txt`` there.

Exit codes: 0 on success, 1 on usage errors, 2 on data or format errors.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import typing
from dataclasses import fields
from pathlib import Path

import numpy as np

from .binio import FormatError
from .encoders import ConfigurationError
from .experiments import ARMS, DataConfig, arm_spec, mean_over_seeds, run_grid
from .losses import THRESHOLD_STRATEGIES
from .pipeline import (STAGE_LR_RATIO, AGReIDModel, ModelConfig, TrainConfig, extract_features,
                       load_checkpoint, save_checkpoint, train_stage1, train_stage2)
from .prompts import CATALOG, PromptTemplate, build_vocabulary
from .retrieval import evaluate, read_features, write_features
from .synthdata import generate_dataset, read_dataset, write_dataset
from .tensor import ContractError, VocabularyError

log = logging.getLogger("agreid")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
OCCLUDED_P = 0.5
MODEL_KEYS = ("template", "template_file", "variant")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# --------------------------------------------------------------------------
# configuration: defaults < config file < flags
# --------------------------------------------------------------------------

_TRAIN_TYPES = typing.get_type_hints(TrainConfig)


def _convert(key: str, raw: str):
    kind = _TRAIN_TYPES.get(key, str)
    if kind is bool:
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise UsageError(f"{key}: expected a boolean, got {raw!r}")
        return low in ("1", "true", "yes", "on")
    if kind in (int, float, str):
        try:
            return kind(raw.strip())
        except ValueError as exc:
            raise UsageError(f"{key}: {exc}") from None
    try:  # tuple[float, float]
        return tuple(float(v) for v in raw.split(","))
    except ValueError as exc:
        raise UsageError(f"{key}: {exc}") from None


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seed":
            continue
        g.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())
    p.add_argument("--config", help="key = value file; flags take precedence")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--template", default=None, choices=sorted(CATALOG))
    p.add_argument("--template-file", dest="template_file", default=None)
    p.add_argument("--variant", default=None, choices=["SE", "ME"])


def _effective(args) -> dict:
    """Merge built-in defaults, the optional config file and explicit flags."""
    merged: dict = {"template": "attr_d", "template_file": None, "variant": "SE"}
    file_vals = read_config_file(args.config) if getattr(args, "config", None) else {}
    known = {f.name for f in fields(TrainConfig)} | set(MODEL_KEYS)
    unknown = sorted(set(file_vals) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    raw = dict(file_vals)
    for key in known:
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = str(val)
    for key, val in raw.items():
        merged[key] = val if key in MODEL_KEYS else _convert(key, val)
    return merged


def build_train_config(merged: dict, seed: int) -> TrainConfig:
    kw = {k: v for k, v in merged.items() if k not in MODEL_KEYS}
    kw["seed"] = seed
    if "stage2_lr" in kw and "stage1_lr" not in kw:
        kw["stage1_lr"] = kw["stage2_lr"] * STAGE_LR_RATIO
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _model_config(merged: dict, num_ids: int, schema_r: int | None = None) -> ModelConfig:
    tf = merged.get("template_file")
    if tf and not Path(tf).is_file():
        raise FileNotFoundError(f"template file {tf} does not exist")
    cfg = ModelConfig(num_ids=num_ids, template=merged["template"], variant=merged["variant"],
                      template_file=tf)
    if schema_r is not None and not tf and cfg.template.startswith("attr_"):
        r = PromptTemplate.from_catalog(cfg.template, build_vocabulary()).r
        if r != schema_r:
            raise UsageError(f"template {cfg.template} has {r} attribute slots but the "
                             f"dataset schema has {schema_r}")
    return cfg


def _echo_config(out_dir: Path | None, cfg: dict) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}"
             for k, v in cfg.items() if v is not None]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def _report(metrics: dict, out_dir: Path | None, name: str = "results.csv") -> None:
    for k, v in metrics.items():
        print(f"{k}={_fmt(v)}")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in metrics.items():
                w.writerow([k, _fmt(v)])


def _write_log(path: Path, history) -> None:
    keys = sorted({k for s in history.steps for k in s})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for s in history.steps:
            w.writerow({k: _fmt(v) for k, v in s.items()})


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file {path} does not exist")
    return p


def _out_dir(args) -> Path | None:
    return Path(args.out_dir) if getattr(args, "out_dir", None) else None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    p_occ = args.p_occ if args.p_occ is not None else (OCCLUDED_P if args.occluded else 0.0)
    ds = generate_dataset(num_ids=args.num_ids, images_per_id=args.images_per_id,
                          num_cams=args.num_cams, split=args.split, seed=args.seed, p_occ=p_occ)
    write_dataset(ds, args.out)
    _report({"path": args.out, "records": len(ds), "identities": ds.num_ids,
             "occluded": sum(r.occluded for r in ds.records), "p_occ": p_occ, "seed": args.seed}, None)
    return EXIT_OK


def _load_model(merged, ckpt: Path, num_ids: int | None = None) -> AGReIDModel:
    state = load_checkpoint(ckpt)
    v = state.get("pseudo_labels")
    if v is None:
        raise FormatError(f"checkpoint {ckpt}: no pseudo_labels tensor")
    model = AGReIDModel(_model_config(merged, num_ids or v.shape[0]))
    try:
        model.load_state(state)
    except ContractError as exc:
        raise FormatError(f"checkpoint {ckpt} does not fit the model configuration: {exc}") from None
    return model


def cmd_train_stage1(args) -> int:
    merged = _effective(args)
    cfg = build_train_config(merged, args.seed)
    out = _out_dir(args)
    ds = read_dataset(_require_file(args.data))
    model = AGReIDModel(_model_config(merged, ds.num_ids, ds.r), seed=args.seed)
    _echo_config(out, {**merged, **{f.name: getattr(cfg, f.name) for f in fields(cfg)}})
    hist = train_stage1(ds, cfg, model)
    metrics = {"stage": 1, "steps": len(hist.steps),
               **{f"final_{k}": float(hist.epoch_means(k)[-1]) for k in ("feat", "attrA", "align")}}
    if out is not None:
        save_checkpoint(model.state(), out / "stage1.agck")
        _write_log(out / "stage1_log.csv", hist)
        metrics["checkpoint"] = str(out / "stage1.agck")
    _report(metrics, out)
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    merged = _effective(args)
    cfg = build_train_config(merged, args.seed)
    out = _out_dir(args)
    ds = read_dataset(_require_file(args.data))
    model = _load_model(merged, _require_file(args.checkpoint))
    _echo_config(out, {**merged, **{f.name: getattr(cfg, f.name) for f in fields(cfg)}})
    hist = train_stage2(ds, cfg, model)
    metrics = {"stage": 2, "steps": len(hist.steps),
               **{f"final_{k}": float(hist.epoch_means(k)[-1])
                  for k in ("id", "tri", "ce", "attrG", "guide") if len(hist.series(k))}}
    if out is not None:
        save_checkpoint(model.state(), out / "stage2.agck")
        _write_log(out / "stage2_log.csv", hist)
        metrics["checkpoint"] = str(out / "stage2.agck")
    _report(metrics, out)
    return EXIT_OK


def cmd_export_features(args) -> int:
    merged = _effective(args)
    ds = read_dataset(_require_file(args.data))
    model = _load_model(merged, _require_file(args.checkpoint))
    feats = extract_features(model, ds)
    write_features(args.out, feats, ds.pids, ds.camids)
    _report({"path": args.out, "count": feats.shape[0], "dim": feats.shape[1]}, None)
    return EXIT_OK


def _rr_kwargs(args) -> dict:
    return {"k1": args.k1, "k2": args.k2, "lambda_value": args.lambda_rr}


def cmd_eval(args) -> int:
    feats, pids, camids = read_features(_require_file(args.features))
    try:
        metrics = evaluate(feats, pids, camids, rerank=args.rerank, per_id=args.queries_per_id,
                           **_rr_kwargs(args))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _report(metrics, _out_dir(args))
    return EXIT_OK


def cmd_rerank(args) -> int:
    args.rerank = True
    return cmd_eval(args)


def _split_list(text: str, allowed, what: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in items if t not in allowed]
    if bad or not items:
        raise UsageError(f"unknown {what}: {', '.join(bad) or '(empty)'}; choose from {', '.join(allowed)}")
    return items


def cmd_ablate(args) -> int:
    merged = _effective(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    cfg = build_train_config(merged, seeds[0])
    arms = _split_list(args.arms, list(ARMS), "arm")
    gammas = _split_list(args.gammas.lower(), THRESHOLD_STRATEGIES, "threshold strategy")
    variants = _split_list(args.variants, ["SE", "ME"], "variant")
    if args.threshold_table:
        gammas = ["p50", "p75", "p90", "otsu", "disabled"]
    p_occ = args.p_occ if args.p_occ is not None else (0.0 if args.holistic else OCCLUDED_P)
    data = DataConfig(args.num_ids, args.images_per_id, args.num_cams, p_occ)
    specs = [arm_spec(a, g, v) for a in arms for g in gammas for v in variants]
    out = _out_dir(args)
    _echo_config(out, {**{f.name: getattr(cfg, f.name) for f in fields(cfg)},
                       "arms": ",".join(arms), "gammas": ",".join(gammas),
                       "variants": ",".join(variants), "seeds": args.seeds, "p_occ": p_occ,
                       "num_ids": args.num_ids, "images_per_id": args.images_per_id})
    results = run_grid(specs, seeds, cfg, data, workers=args.workers)
    keys = ("mAP", "R1", "R5", "R10")
    means = {k: mean_over_seeds(results, k) for k in keys}
    rows = []
    for spec in specs:
        group = (spec.name, spec.gamma_strategy, spec.variant)
        rows.append({"arm": spec.name, "template": spec.template, "beta": spec.beta,
                     "gamma": spec.gamma_strategy, "variant": spec.variant, "seeds": len(seeds),
                     **{k: means[k][group] for k in keys}})
    metrics = {}
    for r in rows:
        label = r["arm"] + ("" if len(gammas) == 1 else f"/{r['gamma']}") + \
            ("" if len(variants) == 1 else f"/{r['variant']}")
        for k in keys:
            metrics[f"{label}/{k}"] = r[k]
    _report(metrics, out)
    header = ["arm", "template", "beta", "gamma", "variant", "seeds", *keys]
    print(",".join(header))
    for r in rows:
        print(",".join(_fmt(r[h]) for h in header))
    if out is not None:
        with open(out / "table.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=header)
            w.writeheader()
            for r in rows:
                w.writerow({h: _fmt(r[h]) for h in header})
        with open(out / "runs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arm", "gamma", "variant", "seed", *keys])
            for (name, gamma, variant, seed), m in sorted(results.items()):
                w.writerow([name, gamma, variant, seed, *(_fmt(m[k]) for k in keys)])
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agreid", description="Attribute-guided occluded person ReID at toy scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_dir=True):
        p.add_argument("--seed", type=int, default=0)
        if out_dir:
            p.add_argument("--out-dir", dest="out_dir", default=None)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    common(p, out_dir=False)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--occluded", action="store_true", help=f"p_occ={OCCLUDED_P} (default holistic)")
    p.add_argument("--p-occ", dest="p_occ", type=float, default=None)
    p.add_argument("--num-ids", dest="num_ids", type=int, default=32)
    p.add_argument("--images-per-id", dest="images_per_id", type=int, default=20)
    p.add_argument("--num-cams", dest="num_cams", type=int, default=2)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="learn pseudo-labels and the attribute encoder")
    common(p)
    p.add_argument("--data", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the image encoder from a stage-1 checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("export-features", help="dump image features of a dataset")
    common(p, out_dir=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_export_features)

    for name, func in (("eval", cmd_eval), ("rerank", cmd_rerank)):
        p = sub.add_parser(name, help="CMC/mAP of a feature file" if name == "eval"
                           else "k-reciprocal re-ranked CMC/mAP of a feature file")
        common(p)
        p.add_argument("--features", required=True)
        if name == "eval":
            p.add_argument("--rerank", action="store_true")
        p.add_argument("--k1", type=int, default=20)
        p.add_argument("--k2", type=int, default=6)
        p.add_argument("--lambda-rr", dest="lambda_rr", type=float, default=0.3)
        p.add_argument("--queries-per-id", dest="queries_per_id", type=int, default=2)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train and evaluate a grid of arms over seeds")
    common(p)
    p.add_argument("--arms", default="baseline,at,ap,both")
    p.add_argument("--gammas", default="otsu", help="comma list of " + ", ".join(THRESHOLD_STRATEGIES))
    p.add_argument("--threshold-table", dest="threshold_table", action="store_true",
                   help="run p50, p75, p90, otsu and disabled")
    p.add_argument("--variants", default="SE")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--holistic", action="store_true")
    p.add_argument("--p-occ", dest="p_occ", type=float, default=None)
    p.add_argument("--num-ids", dest="num_ids", type=int, default=32)
    p.add_argument("--images-per-id", dest="images_per_id", type=int, default=20)
    p.add_argument("--num-cams", dest="num_cams", type=int, default=2)
    p.add_argument("--workers", type=int, default=None, help="defaults to AGREID_THREADS or CPU count")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if hasattr(args, "seed"):
            np.random.seed(args.seed)  # nothing should read the global RNG; pinned for safety
        return args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, VocabularyError, ConfigurationError, ContractError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
