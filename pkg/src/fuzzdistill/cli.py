"""``fuzzdistill`` command line: teacher training, student distillation, grid
search, evaluation and decision traces.

Every command that writes to ``--out`` also writes ``manifest.json``. A
manifest can be passed back through ``--config`` to repeat the run.
Option values resolve as: command-line flag, then config file, then the
built-in default.

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict

from . import __version__, data_ingest, distill
from . import pca as pca_mod
from . import teacher as teacher_mod
from .errors import ConfigError, FuzzDistillError, ValidationError
from .explain import FASHION_CLASSES, explain_sample, render_report
from .tsk import load_checkpoint, save_checkpoint

log = logging.getLogger("fuzzdistill")

DATA_ENV = "FUZZDISTILL_DATA"
MODE_FLAGS = {"no-kd": "no_kd", "baseline": "baseline_kd", "modified": "modified_kd"}

STUDENT_DEFAULTS = {
    "mode": "no-kd", "rules": 15, "pca-dims": 64, "alpha": None, "t1": 1.0, "t2": 1.0,
    "epochs": 100, "batch-size": 64, "lr": 0.01, "lr-halving": 25, "seed": 0,
    "select": "best", "soft-labels": None,
}
TEACHER_DEFAULTS = {"epochs": 20, "lr": 1e-3, "batch-size": 64, "seed": 0, "hidden": "256,128"}
GRID_DEFAULTS = dict(STUDENT_DEFAULTS, mode="modified", t="1,2.5,5,7.5", alpha="0.25,0.5,0.75,1", jobs=1)


class UsageError(Exception):
    pass


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    doc = doc.get("config", doc)  # a run manifest nests its options under "config"
    return {k.replace("_", "-"): v for k, v in doc.items()}


def resolve(args, defaults):
    """Merge flag values over the config file over ``defaults``."""
    config = load_config(args.config)
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key.replace("-", "_"), None)
        out[key] = flag if flag is not None else config.get(key, default)
    return out


def data_root(args):
    root = args.data or os.environ.get(DATA_ENV)
    if not root:
        raise UsageError(f"no dataset given: pass --data or set {DATA_ENV}")
    return root


def load(root, split):
    try:
        return data_ingest.load_split(root, split)
    except FileNotFoundError as exc:
        raise UsageError(f"missing dataset file: {exc.filename or exc}") from None


def config_hash(options):
    blob = json.dumps(options, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(out, command, options, data_paths, extra=None):
    manifest = {
        "command": command,
        "version": f"v{__version__}",
        "config": options,
        "data": data_paths,
        "out": os.fspath(out),
        "seed": options.get("seed"),
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def train_config(opts):
    mode = opts["mode"]
    if mode not in MODE_FLAGS:
        raise UsageError(f"--mode must be one of {sorted(MODE_FLAGS)}, got {mode!r}")
    mode = MODE_FLAGS[mode]
    alpha = opts["alpha"]
    if alpha is None:
        alpha = 0.0 if mode == "no_kd" else 0.5
    t1 = float(opts["t1"])
    t2 = t1 if mode == "baseline_kd" else float(opts["t2"])
    return distill.TrainConfig(
        rules=int(opts["rules"]), pca_dims=int(opts["pca-dims"]), alpha=float(alpha),
        temp_teacher=t1, temp_student=t2, epochs=int(opts["epochs"]),
        batch_size=int(opts["batch-size"]), lr=float(opts["lr"]),
        lr_halving_period=int(opts["lr-halving"]), seed=int(opts["seed"]), mode=mode,
        select=opts["select"],
    ).validate()


def read_soft(path, train):
    if path is None:
        return None
    try:
        soft = data_ingest.read_soft_labels(path)
    except FileNotFoundError:
        raise UsageError(f"soft-label file not found: {path}") from None
    soft.check_pairing(train)
    return soft


# -- commands -------------------------------------------------------------


def cmd_train_teacher(args):
    opts = resolve(args, TEACHER_DEFAULTS)
    root = data_root(args)
    train, val = load(root, "train"), load(root, "val")
    hidden = tuple(int(h) for h in _floats(opts["hidden"]))
    cfg = teacher_mod.TeacherConfig(
        hidden=hidden, epochs=int(opts["epochs"]), lr=float(opts["lr"]),
        batch_size=int(opts["batch-size"]), seed=int(opts["seed"]),
    )
    os.makedirs(args.out, exist_ok=True)
    teacher = teacher_mod.train_teacher(train, cfg, val)
    meta = {"seed": cfg.seed, "config_hash": config_hash(opts)}
    teacher_mod.save_teacher(os.path.join(args.out, "teacher.ckpt"), teacher, meta)
    for name, data in (("train", train), ("val", val)):
        soft = teacher_mod.export_logits(teacher, data, source_id=f"teacher:{name}")
        data_ingest.write_soft_labels(soft, os.path.join(args.out, f"{name}.slbl"))
    acc = teacher.accuracy(val)
    write_manifest(args.out, "train-teacher", opts, {"root": os.fspath(root)},
                   {"teacher_config": asdict(cfg), "val_acc": acc})
    print(f"teacher validation accuracy {acc:.4f}")
    return 0


def cmd_train_student(args):
    opts = resolve(args, STUDENT_DEFAULTS)
    cfg = train_config(opts)
    if cfg.alpha > 0 and opts["soft-labels"] is None:
        raise ConfigError("alpha > 0 needs --soft-labels")
    root = data_root(args)
    train, val = load(root, "train"), load(root, "val")
    soft = read_soft(opts["soft-labels"], train)
    os.makedirs(args.out, exist_ok=True)

    pca = pca_mod.fit(train.images, cfg.pca_dims)
    model, reports = distill.train_student(
        train, val, pca, soft if cfg.alpha > 0 else None, cfg,
        on_epoch=lambda r: print(
            f"epoch {r.epoch:3d} loss {r.loss:.4f} train {r.train_acc:.4f} "
            f"val {r.val_acc:.4f} lr {r.lr:g}", flush=True),
    )
    meta = {"seed": cfg.seed, "config_hash": config_hash(asdict(cfg)), "train_config": asdict(cfg)}
    save_checkpoint(os.path.join(args.out, "student.ckpt"), model, pca, meta)
    distill.write_reports(reports, os.path.join(args.out, "epochs.jsonl"))
    with open(os.path.join(args.out, "timing.jsonl"), "w") as f:
        for r in reports:
            f.write(json.dumps({"epoch": r.epoch, "seconds": r.seconds}) + "\n")
    write_manifest(args.out, "train-student", opts, {"root": os.fspath(root)},
                   {"train_config": asdict(cfg)})
    if reports:
        best = distill.best_epoch(reports)
        print(f"best validation accuracy {reports[best].val_acc:.4f} at epoch {best}")
    return 0


def cmd_grid(args):
    opts = resolve(args, GRID_DEFAULTS)
    if opts["mode"] == "no-kd":
        raise UsageError("grid needs --mode baseline or modified")
    if opts["soft-labels"] is None:
        raise UsageError("grid needs --soft-labels")
    t_grid, alpha_grid = _floats(opts["t"]), _floats(opts["alpha"])
    if not t_grid or not alpha_grid:
        raise UsageError("--t and --alpha must be non-empty")
    base = train_config(dict(opts, alpha=alpha_grid[0], t1=t_grid[0]))
    root = data_root(args)
    train, val = load(root, "train"), load(root, "val")
    soft = read_soft(opts["soft-labels"], train)
    os.makedirs(args.out, exist_ok=True)

    pca = pca_mod.fit(train.images, base.pca_dims)
    result = distill.grid_search(train, val, pca, soft, base, t_grid, alpha_grid, jobs=int(opts["jobs"]))
    result.write_csv(os.path.join(args.out, "grid.csv"))
    if result.errors:
        with open(os.path.join(args.out, "grid_errors.json"), "w") as f:
            json.dump(result.errors, f, indent=2)
    write_manifest(args.out, "grid", opts, {"root": os.fspath(root)})
    for row in result.rows:
        print(f"T={row['T']:g} alpha={row['alpha']:g} best_val_acc={row['best_val_acc']:.4f} "
              f"epoch={row['epoch_of_best']}")
    return 0 if result.rows else 1


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None


def cmd_eval(args):
    model, pca, _ = _checkpoint(args.ckpt)
    data = load(data_root(args), args.split)
    if pca is None:
        raise ValidationError("checkpoint carries no PCA transform")
    acc = distill.accuracy(model, pca.transform(data.images), data.labels)
    print(f"accuracy {acc:.4f}")
    return 0


def cmd_explain(args):
    model, pca, _ = _checkpoint(args.ckpt)
    data = load(data_root(args), args.split)
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index {args.index} out of range for {len(data)} samples")
    names = FASHION_CLASSES if args.class_names == "fashion" else None
    trace = explain_sample(model, pca, data.images[args.index], sample_id=args.index,
                           top_k=args.top_k, class_names=names)
    sys.stdout.write(render_report(trace, args.format))
    if args.format == "json":
        sys.stdout.write("\n")
    return 0


# -- parser ---------------------------------------------------------------


def _common(p, with_out=True):
    p.add_argument("--data", help=f"MNIST-style IDX directory (default: ${DATA_ENV})")
    p.add_argument("--config", help="flat JSON of option values, or a run manifest")
    if with_out:
        p.add_argument("--out", required=True, help="output directory")


def _student_flags(p):
    p.add_argument("--mode", choices=sorted(MODE_FLAGS))
    p.add_argument("--rules", type=int)
    p.add_argument("--pca-dims", type=int)
    p.add_argument("--t1", type=float, help="teacher temperature")
    p.add_argument("--t2", type=float, help="student temperature (modified mode)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-halving", type=int, help="epochs between learning-rate halvings")
    p.add_argument("--seed", type=int)
    p.add_argument("--select", choices=["best", "final"])
    p.add_argument("--soft-labels", help="SLBL file of teacher logits for the training split")


def build_parser():
    parser = argparse.ArgumentParser(prog="fuzzdistill", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"fuzzdistill {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train the MLP teacher and export logits")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden", help="hidden layer widths, e.g. 256,128")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="fit PCA + FCM init and train a TSK student")
    _common(p)
    _student_flags(p)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("grid", help="grid search over temperature and alpha")
    _common(p)
    _student_flags(p)
    p.add_argument("--t", help="comma-separated temperatures")
    p.add_argument("--alpha", help="comma-separated alpha values")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_grid)

    for name, func, help_text in (
        ("eval", cmd_eval, "accuracy of a student checkpoint"),
        ("explain", cmd_explain, "decision trace for one sample"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common(p, with_out=False)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--split", default="val", choices=["train", "val"])
        if name == "explain":
            p.add_argument("--index", type=int, required=True)
            p.add_argument("--format", choices=["json", "text"], default="json")
            p.add_argument("--top-k", type=int, default=3)
            p.add_argument("--class-names", choices=["digits", "fashion"], default="digits")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"fuzzdistill: error: {exc}", file=sys.stderr)
        return 2
    except (FuzzDistillError, OSError) as exc:
        print(f"fuzzdistill: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
