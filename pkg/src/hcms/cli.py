"""``hcms`` command: generate, train, eval, sweep, trace, verify.

Every numeric choice comes from the JSON run config; flags only name paths.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, DigestMismatch, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, model_digest
from .dataio import Dataset, DatasetFormatError, DatasetHeader, generate_synthetic, read_dataset, write_dataset
from .evaluation import budget_sweep, evaluate, sweep_table
from .ledger import CostModel, counts_cost, cumulative_costs
from .model import HcmsParams, params_from_arrays
from .training import TrainingDiverged, train

log = logging.getLogger("hcms")

EXIT_OK = 0
EXIT_FAILED = 1  # a verification check failed
EXIT_USAGE = 2  # argparse's own code
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_DIGEST = 5
EXIT_DIVERGED = 6
EXIT_DATA = 7

SPLITS = ("train", "val", "test")
# default sweep budgets, as fractions of the all-on cost of a default-length video
SWEEP_FRACTIONS = (0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.75, math.inf)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(EXIT_MISSING, f"{what} not found: {path}")
    return path


def _load_config(path) -> RunConfig:
    return RunConfig.load(_require(Path(path), "config"))


def _stamp(cfg: RunConfig) -> dict:
    return {"config_digest": cfg.digest(), "seed": cfg.train.seed}


def _split_path(data_dir, split: str) -> Path:
    return Path(data_dir) / f"{split}.hcms"


def _load_split(data_dir, split: str) -> Dataset:
    return read_dataset(_require(_split_path(data_dir, split), f"{split} split"))


def _load_params(cfg: RunConfig, path, dataset: Dataset) -> tuple[HcmsParams, dict]:
    mc = cfg.model_config(dataset.header.num_classes, dataset.header.dims)
    arrays, doc = load_checkpoint(_require(Path(path), "checkpoint"), expect_digest=model_digest(mc))
    return params_from_arrays(mc, arrays), doc


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_init_config(args) -> int:
    path = Path(args.path)
    if path.exists() and not args.force:
        raise CliError(EXIT_CONFIG, f"{path} exists; pass --force to overwrite")
    RunConfig().save(path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = generate_synthetic(cfg.synthetic)
    for name, ds in splits.items():
        h = ds.header
        extra = dict(h.extra, config_digest=cfg.digest(), seed=cfg.synthetic.seed)
        header = DatasetHeader(h.num_classes, h.dims, h.default_T, h.backbone_gflops, h.version, extra)
        write_dataset(Dataset(header, ds.videos), _split_path(out, name))
        print(f"{name}: {len(ds)} videos -> {_split_path(out, name)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    train_set = _load_split(args.data, "train")
    val_path = _split_path(args.data, "val")
    val_set = read_dataset(val_path) if val_path.exists() else None
    mc = cfg.model_config(train_set.header.num_classes, train_set.header.dims)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg)
    mdigest = model_digest(mc)
    last_path, best_path, curve_path = out / "last.ckpt", out / "best.ckpt", out / "curve.jsonl"

    init, start, opt_state = None, 0, None
    if args.resume:
        arrays, doc = load_checkpoint(_require(last_path, "checkpoint to resume"))
        if doc["meta"].get("config_digest") != stamp["config_digest"]:
            raise DigestMismatch(
                f"{last_path}: written under config {doc['meta'].get('config_digest', '?')[:12]}, "
                f"current config is {stamp['config_digest'][:12]}"
            )
        init = params_from_arrays(mc, {k: v for k, v in arrays.items() if not k.startswith("opt.")})
        opt_state = {k[4:]: v for k, v in arrays.items() if k.startswith("opt.")}
        start = int(doc["meta"]["epoch"]) + 1
        print(f"resuming at epoch {start}")
        if curve_path.exists():
            kept = [ln for ln in curve_path.read_text().splitlines() if ln and json.loads(ln)["epoch"] < start]
            curve_path.write_text("".join(k + "\n" for k in kept))
    elif curve_path.exists():
        curve_path.unlink()
    cfg.save(out / "config.json")

    def on_epoch(row, params, opt):
        with open(curve_path, "a") as f:
            f.write(json.dumps({**row, **stamp}) + "\n")
        tensors = {k: t.data for k, t in params.named().items()}
        tensors.update({f"opt.{k}": v for k, v in opt.state().items()})
        save_checkpoint(last_path, tensors, mdigest, {**stamp, "epoch": row["epoch"]})
        print(
            f"epoch {row['epoch']:3d}  loss {row['train_total']:.4f}  ce {row['train_ce']:.4f}  "
            f"use {row['train_use_mid']:.3f}/{row['train_use_top']:.3f}"
            + (f"  val mAP {row['val_map']:.4f}  acc {row['val_accuracy']:.4f}" if "val_map" in row else ""),
            flush=True,
        )

    result = train(cfg.train, mc, train_set, val_set, init, start, opt_state, on_epoch)
    best_row = next((r for r in result.curve if r["epoch"] == result.best_epoch), {})
    save_checkpoint(
        best_path,
        {k: t.data for k, t in result.params.named().items()},
        mdigest,
        {**stamp, "epoch": result.best_epoch, "val_map": best_row.get("val_map")},
    )
    print(f"best epoch {result.best_epoch} -> {best_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_split(args.data, args.split)
    params, doc = _load_params(cfg, args.checkpoint, ds)
    mode = "sample" if cfg.eval_sample else "eval"
    rng = np.random.default_rng(cfg.train.seed) if mode == "sample" else None
    m = evaluate(params, ds, mode, cfg.cost_model(params.config), rng=rng, workers=cfg.workers)
    doc = {
        **_stamp(cfg),
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "mode": mode,
        **m.to_dict(),
        "per_class_usage": m.per_class_usage(ds.header.num_classes).tolist(),
    }
    _write_json(args.out, doc)
    print(f"mAP {m.map:.4f}  accuracy {m.accuracy:.4f}  usage {m.usage_mid:.3f}/{m.usage_top:.3f}  GFLOPs {m.gflops:.2f}")
    return EXIT_OK


def default_budgets(cfg: RunConfig, params: HcmsParams, T: int) -> list[float]:
    full = counts_cost(cfg.cost_model(params.config), T, T, T)
    return [f * full for f in SWEEP_FRACTIONS]


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_split(args.data, args.split)
    params, _ = _load_params(cfg, args.checkpoint, ds)
    budgets = cfg.sweep_budgets or default_budgets(cfg, params, ds.header.default_T)
    rows = budget_sweep(params, ds, budgets, cfg.cost_model(params.config), cfg.reserve_audio)
    s = _stamp(cfg)
    text = f"# config_digest={s['config_digest']} seed={s['seed']}\n" + sweep_table(rows)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_split(args.data, args.split)
    params, _ = _load_params(cfg, args.checkpoint, ds)
    cm = cfg.cost_model(params.config)
    videos = ds.videos if args.limit is None else ds.videos[: args.limit]
    stamp = _stamp(cfg)
    with warnings.catch_warnings():
        # only the per-video records are used; a short prefix may leave classes without positives
        warnings.simplefilter("ignore")
        m = evaluate(params, Dataset(ds.header, videos), "eval", cm, workers=cfg.workers)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as f:
        for r in m.records:
            cum = cumulative_costs(cm, r.trace)
            for t in range(r.trace.steps):
                rec = {
                    "video_id": r.video_id,
                    "label": int(r.label),
                    "predicted": r.predicted,
                    "step": t,
                    "use_mid": int(r.trace.bits_mid[t]),
                    "use_top": int(r.trace.bits_top[t]),
                    "cumulative_gflops": cum[t],
                    **stamp,
                }
                f.write(json.dumps(rec) + "\n")
    print(f"{len(m.records)} videos, {sum(r.trace.steps for r in m.records)} step records -> {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    cost_model = None
    if args.config:
        c = _load_config(args.config).cost
        cost_model = CostModel(backbone={"audio": c.audio, "appearance": c.appearance, "motion": c.motion})
    failed = 0
    for c in run_all(cost_model, quick=args.quick):
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
        if args.verbose or c.name == "reported cost ledger":
            for line in c.lines:
                print(f"        {line}")
        failed += not c.passed
    return EXIT_FAILED if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcms", description="Gated multimodal sequence classifier with a GFLOPs ledger.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-config", help="write the default run config")
    s.add_argument("path")
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_init_config)

    s = sub.add_parser("generate", help="write the synthetic train/val/test splits")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="dataset directory")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("train", help="train and write checkpoints plus a curve log")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    s.set_defaults(fn=cmd_train)

    for name, fn, help_, out_help in (
        ("eval", cmd_eval, "evaluate a checkpoint", "metrics JSON"),
        ("sweep", cmd_sweep, "accuracy and cost across GFLOPs budgets", "sweep TSV"),
        ("trace", cmd_trace, "per-step gate decisions and cumulative GFLOPs", "trace JSONL"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True)
        s.add_argument("--data", required=True, help="dataset directory")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--split", default="test", choices=SPLITS)
        s.add_argument("--out", required=True, help=out_help)
        if name == "trace":
            s.add_argument("--limit", type=int, default=None, help="only the first N videos")
        s.set_defaults(fn=fn)

    s = sub.add_parser("verify", help="run the built-in verification suite")
    s.add_argument("--config", default=None, help="take backbone costs from this config")
    s.add_argument("--quick", action="store_true", help="fewer random points")
    s.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except CliError as e:
        msg, code = str(e), e.code
    except DigestMismatch as e:
        msg, code = f"digest mismatch: {e}", EXIT_DIGEST
    except ConfigError as e:
        msg, code = f"config error: {e}", EXIT_CONFIG
    except TrainingDiverged as e:
        msg, code = f"training diverged: {e}", EXIT_DIVERGED
    except (DatasetFormatError, CheckpointError) as e:
        msg, code = f"bad input file: {e}", EXIT_DATA
    except FileNotFoundError as e:
        msg, code = f"file not found: {e.filename}", EXIT_MISSING
    print(f"hcms: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
