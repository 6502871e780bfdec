"""``atnlab`` command line: train-classifier, train-atn, attack, eval, rerun.

Configuration resolves as flags > ``--config`` JSON file > built-in defaults.
Every command writes ``<output>.manifest.json`` holding the fully resolved
config, so ``atnlab rerun <manifest>`` (or ``--config <manifest>``) repeats the
run exactly.

Exit codes: 0 ok, 2 usage error, 3 validation/data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, container, data, nets
from .attacks import AtnTrainConfig, AttackConfig, BASELINES, train_atn
from .budget import check_budget
from .errors import AtnLabError, UsageError, ValidationError
from .evaluation import AttackSpec, DefenseSpec, FoolingReport, GeneratorBank, epsilon_sweep, transfer_matrix
from .losses import LossConfig
from .robust import RobustConfig, pretrain_filter

log = logging.getLogger("atnlab")

ROBUST_MODES = {
    "none": "none",
    "noise": "random_noise",
    "pretrained-filter": "pretrained_filter",
    "training-filter": "training_filter",
}

DATA_DEFAULTS = {
    "data": "synth",
    "data_seed": 0,
    "count": 1500,
    "num_classes": 10,
    "side": 32,
    "train_fraction": 0.8,
    "split_seed": 0,
}

DEFAULTS = {
    "train-classifier": {**DATA_DEFAULTS, "arch": "cnn-a", "seed": 1, "epochs": 12, "lr": 2e-3,
                         "batch_size": 32, "out": None},
    "train-atn": {**DATA_DEFAULTS, "targets": None, "loss": "prediction", "robust": "noise", "beta": 6.0,
                  "eps": 16.0, "gamma": -0.9, "seed": 0, "epochs": 5, "lr": 1e-3, "optimizer": "adam",
                  "batch_size": 32, "filter": None, "filter_prob": 0.5, "filter_lr": None, "out": None},
    "attack": {**DATA_DEFAULTS, "method": None, "model": None, "generators": None, "eps": None, "steps": 10,
               "alpha": None, "mu": 1.0, "split": "eval", "limit": None, "out": None, "ppm_dir": None},
    "eval": {**DATA_DEFAULTS, "models": None, "archives": [], "attacks": [], "eps": 16.0, "steps": 10,
             "alpha": None, "mu": 1.0, "defense": "none", "sweep_eps": None, "split": "eval", "limit": None,
             "seed": 0, "out_csv": None, "out_json": None},
}


# --- argument parsing ----------------------------------------------------------------


def _add_data_flags(p):
    S = argparse.SUPPRESS
    p.add_argument("--data", default=S, help="synth | idx:IMAGES,LABELS | path to a cached dataset file")
    p.add_argument("--data-seed", type=int, default=S)
    p.add_argument("--count", type=int, default=S)
    p.add_argument("--num-classes", type=int, default=S)
    p.add_argument("--side", type=int, default=S)
    p.add_argument("--train-fraction", type=float, default=S)
    p.add_argument("--split-seed", type=int, default=S)


def build_parser():
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="atnlab", description="Train, attack and evaluate ATN generators.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-classifier", help="train a zoo classifier")
    p.add_argument("--config", default=None)
    _add_data_flags(p)
    p.add_argument("--arch", default=S, help="cnn-a | cnn-b | cnn-c")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--out", default=S)

    p = sub.add_parser("train-atn", help="train an ATN generator against target classifiers")
    p.add_argument("--config", default=None)
    _add_data_flags(p)
    p.add_argument("--targets", default=S, help="comma list of CKPT[:WEIGHT]")
    p.add_argument("--loss", default=S, choices=["feature", "prediction"])
    p.add_argument("--robust", default=S, choices=sorted(ROBUST_MODES))
    p.add_argument("--beta", type=float, default=S)
    p.add_argument("--eps", type=float, default=S)
    p.add_argument("--gamma", type=float, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--optimizer", default=S, choices=["sgd", "adam"])
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--filter", default=S, help="pretrained filter checkpoint")
    p.add_argument("--filter-prob", type=float, default=S)
    p.add_argument("--filter-lr", type=float, default=S)
    p.add_argument("--out", default=S)

    p = sub.add_parser("attack", help="write an adversarial image archive")
    p.add_argument("--config", default=None)
    _add_data_flags(p)
    p.add_argument("--method", default=S, choices=["fgsm", "pgd", "mifgsm", "atn"])
    p.add_argument("--model", default=S, help="white-box classifier checkpoint")
    p.add_argument("--generators", "--generator", dest="generators", default=S,
                   help="comma list of generator checkpoints (method atn)")
    p.add_argument("--eps", type=float, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--alpha", type=float, default=S)
    p.add_argument("--mu", type=float, default=S)
    p.add_argument("--split", default=S, choices=["train", "eval", "all"])
    p.add_argument("--limit", type=int, default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--ppm-dir", default=S)

    p = sub.add_parser("eval", help="fooling-rate reports")
    p.add_argument("--config", default=None)
    _add_data_flags(p)
    p.add_argument("--models", default=S, help="comma list of classifier checkpoints")
    p.add_argument("--archive", dest="archives", action="append", default=S)
    p.add_argument("--attack", dest="attacks", action="append", default=S,
                   help="METHOD:CKPT[,CKPT...] generated on the fly")
    p.add_argument("--eps", type=float, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--alpha", type=float, default=S)
    p.add_argument("--mu", type=float, default=S)
    p.add_argument("--defense", default=S, help="none | resize | noise:<beta>")
    p.add_argument("--sweep-eps", default=S, help="comma list of budgets")
    p.add_argument("--split", default=S, choices=["train", "eval", "all"])
    p.add_argument("--limit", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out-csv", default=S)
    p.add_argument("--out-json", default=S)

    p = sub.add_parser("rerun", help="repeat the run recorded in a manifest")
    p.add_argument("manifest")
    return parser


def resolve(command, flags, config_path=None):
    """Merge defaults < config file < flags into one plain dict."""
    cfg = dict(DEFAULTS[command])
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        if "config" in loaded and "command" in loaded:
            loaded = loaded["config"]
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    return cfg


# --- shared helpers ----------------------------------------------------------------


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, "", []):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _check_writable(path):
    parent = Path(path).resolve().parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise UsageError(f"output path {path} is not writable")


def _load_data(cfg):
    spec = cfg["data"]
    if spec == "synth":
        ds = data.synth_dataset(cfg["data_seed"], cfg["count"], cfg["num_classes"], cfg["side"])
    elif spec.startswith("idx:"):
        try:
            img, lab = spec[4:].split(",")
        except ValueError:
            raise UsageError("--data idx: needs IMAGES,LABELS") from None
        ds = data.load_idx(img, lab)
    else:
        ds = data.load_dataset(spec)
    return ds


def _splits(cfg):
    ds = _load_data(cfg)
    train, ev = data.split(ds, cfg["train_fraction"], cfg["split_seed"])
    return ds, train, ev


def _pick_split(cfg):
    ds, train, ev = _splits(cfg)
    chosen = {"train": train, "eval": ev, "all": ds}[cfg.get("split", "eval")]
    if cfg.get("limit"):
        chosen = chosen.subset(np.arange(min(cfg["limit"], len(chosen))))
    return chosen


def _model_id(path):
    return Path(path).stem


def _load(path, family=None):
    if not Path(path).is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    return nets.load_checkpoint(path, arch=family)


def _write_manifest(out_path, command, cfg, started, dataset_id=None, checkpoints=(), outputs=None):
    manifest = {
        "command": command,
        "config": cfg,
        "seeds": {k: v for k, v in cfg.items() if k.endswith("seed")},
        "dataset_id": dataset_id,
        "checkpoint_hashes": {str(p): container.file_hash(p) for p in checkpoints},
        "outputs": outputs or {},
        "artifact_version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    path = f"{out_path}.manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def parse_targets(spec):
    """``a.ckpt:1.0,b.ckpt:0.5`` -> [("a.ckpt", 1.0), ("b.ckpt", 0.5)]."""
    out = []
    for item in str(spec).split(","):
        item = item.strip()
        if not item:
            continue
        path, sep, weight = item.rpartition(":")
        if not sep:
            path, weight = item, "1.0"
        try:
            w = float(weight)
        except ValueError:
            path, w = item, 1.0
        out.append((path, w))
    if not out:
        raise UsageError("--targets is empty")
    return out


def parse_defense(spec, seed=0):
    if spec in (None, "none"):
        return DefenseSpec()
    if spec == "resize":
        return DefenseSpec("resize_chain")
    if spec.startswith("noise:"):
        try:
            beta = float(spec.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad noise defense {spec!r}") from None
        return DefenseSpec("random_noise", beta=beta, seed=seed)
    raise UsageError(f"unknown defense {spec!r}; use none, resize or noise:<beta>")


def _eps_list(spec):
    if spec is None:
        return None
    if isinstance(spec, (list, tuple)):
        return [float(e) for e in spec]
    try:
        return [float(e) for e in str(spec).split(",") if e.strip()]
    except ValueError:
        raise UsageError(f"bad --sweep-eps {spec!r}") from None


# --- commands ------------------------------------------------------------------------


def cmd_train_classifier(cfg):
    _require(cfg, "out", "arch")
    _check_writable(cfg["out"])
    started = time.time()
    ds, train, _ = _splits(cfg)
    model = nets.build_classifier(cfg["arch"], ds.num_classes, ds.image_shape, seed=cfg["seed"])
    history = nets.train_classifier(model, train.images, train.labels, epochs=cfg["epochs"], lr=cfg["lr"],
                                    batch_size=cfg["batch_size"], seed=cfg["seed"])
    acc = history[-1][1]
    log.warning("trained %s: train accuracy %.4f", cfg["arch"], acc)
    nets.save_checkpoint(model, cfg["out"], {"seed": cfg["seed"], "epochs": cfg["epochs"],
                                             "dataset_id": ds.dataset_id, "train_accuracy": acc})
    _write_manifest(cfg["out"], "train-classifier", cfg, started, ds.dataset_id, [cfg["out"]],
                    {"checkpoint": cfg["out"], "train_accuracy": acc})
    return 0


def cmd_train_atn(cfg):
    _require(cfg, "out", "targets")
    _check_writable(cfg["out"])
    if cfg["gamma"] is not None and not -1.0 <= cfg["gamma"] <= 0.0:
        raise UsageError(f"--gamma must lie in [-1, 0], got {cfg['gamma']}")
    if cfg["robust"] not in ROBUST_MODES:
        raise UsageError(f"--robust must be one of {sorted(ROBUST_MODES)}")
    started = time.time()
    pairs = parse_targets(cfg["targets"])
    targets = [_load(p, "classifier") for p, _ in pairs]
    ds, train, _ = _splits(cfg)
    mode = ROBUST_MODES[cfg["robust"]]
    filt = None
    if mode in ("pretrained_filter", "training_filter"):
        if cfg["filter"]:
            filt = _load(cfg["filter"], "filter")
        else:
            filt = nets.build_filter(ds.image_shape, seed=cfg["seed"])
            pretrain_filter(filt, train.images, beta=cfg["beta"], seed=cfg["seed"])
    robust = RobustConfig(mode, beta=cfg["beta"], filter=filt, seed=cfg["seed"],
                          filter_choice_prob=cfg["filter_prob"])
    loss = LossConfig(cfg["loss"], gamma=cfg["gamma"], weights=[w for _, w in pairs])
    gen = nets.build_generator(ds.image_shape, cfg["eps"], seed=cfg["seed"])
    tcfg = AtnTrainConfig(targets, loss, robust, cfg["eps"], lr=cfg["lr"], epochs=cfg["epochs"],
                          batch_size=cfg["batch_size"], seed=cfg["seed"], filter_lr=cfg["filter_lr"],
                          optimizer=cfg["optimizer"])
    gen, history = train_atn(gen, tcfg, train)
    gen.metadata.update({"dataset_id": ds.dataset_id, "targets": [str(p) for p, _ in pairs]})
    nets.save_checkpoint(gen, cfg["out"])
    _write_manifest(cfg["out"], "train-atn", cfg, started, ds.dataset_id,
                    [cfg["out"]] + [p for p, _ in pairs], {"checkpoint": cfg["out"], "log": history.epochs})
    return 0


def _gradient_attack(method, model, cfg, eps):
    acfg = AttackConfig(eps, steps=cfg["steps"], alpha=cfg["alpha"], mu=cfg["mu"])
    fn = BASELINES[method]
    return lambda images: fn(model, images, acfg)


def _bank(paths):
    gens = [_load(p, "generator") for p in paths]
    return GeneratorBank({g.epsilon_train: g for g in gens})


def _split_paths(spec):
    if isinstance(spec, (list, tuple)):
        return [str(s) for s in spec]
    return [s for s in str(spec).split(",") if s]


def write_ppm(path, image):
    """Binary PPM (P6) of a [C,H,W] image on [0, 255]; grayscale is replicated."""
    arr = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    h, w = arr.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def cmd_attack(cfg):
    _require(cfg, "method", "out")
    if cfg.get("eps") is None:
        raise UsageError("--eps (the L-inf budget) is required")
    _check_writable(cfg["out"])
    started = time.time()
    split = _pick_split(cfg)
    method, eps = cfg["method"], float(cfg["eps"])
    checkpoints = []
    if method == "atn":
        _require(cfg, "generators")
        paths = _split_paths(cfg["generators"])
        bank = _bank(paths)
        served = bank.select(eps)
        adv = bank.generate(split.images, eps)
        targets = sorted({t for g in bank.generators.values() for t in g.metadata.get("targets", [])})
        extra = {"served_by_epsilon": served}
        checkpoints += paths
    else:
        _require(cfg, "model")
        model = _load(cfg["model"], "classifier")
        adv = _gradient_attack(method, model, cfg, eps)(split.images)
        targets = [cfg["model"]]
        extra = {}
        checkpoints.append(cfg["model"])
    save_archive(cfg["out"], split.images, adv, np.full(len(adv), eps, dtype=np.float32),
                 {"method": method, "targets": [_model_id(t) for t in targets], "dataset_id": split.dataset_id,
                  **extra})
    if cfg.get("ppm_dir"):
        os.makedirs(cfg["ppm_dir"], exist_ok=True)
        for i, img in enumerate(adv):
            write_ppm(os.path.join(cfg["ppm_dir"], f"adv_{i:05d}.ppm"), img)
    _write_manifest(cfg["out"], "attack", cfg, started, split.dataset_id, checkpoints + [cfg["out"]],
                    {"archive": cfg["out"], **extra})
    return 0


def save_archive(path, clean, adv, eps, metadata):
    return container.save(path, "archive", {"clean": clean, "adversarial": adv, "epsilon": eps},
                          metadata=metadata)


def load_archive(path):
    """Load an archive and re-validate every image against its budget."""
    header, t = container.load(path)
    if header.get("kind") != "archive":
        raise ValidationError(f"{path} is not an adversarial archive")
    for i, e in enumerate(t["epsilon"]):
        check_budget(t["adversarial"][i], t["clean"][i], float(e))
    return header["metadata"], t["clean"], t["adversarial"], t["epsilon"]


def _attack_specs(cfg, eps):
    specs = []
    for item in cfg["attacks"] or []:
        method, _, paths = item.partition(":")
        if method not in ("fgsm", "pgd", "mifgsm", "atn") or not paths:
            raise UsageError(f"bad --attack {item!r}; use METHOD:CKPT[,CKPT...]")
        if method == "atn":
            bank = _bank(_split_paths(paths))
            targets = tuple(sorted({_model_id(t) for g in bank.generators.values()
                                    for t in g.metadata.get("targets", [])}))
            specs.append(AttackSpec("p-atn", targets, eps, lambda x, b=bank, e=eps: b.generate(x, e)))
        else:
            model = _load(paths, "classifier")
            specs.append(AttackSpec(method, (_model_id(paths),), eps, _gradient_attack(method, model, cfg, eps)))
    return specs


def cmd_eval(cfg):
    _require(cfg, "models")
    if not cfg.get("out_csv") and not cfg.get("out_json"):
        raise UsageError("--out-csv or --out-json is required")
    for p in (cfg.get("out_csv"), cfg.get("out_json")):
        if p:
            _check_writable(p)
    if not cfg["archives"] and not cfg["attacks"]:
        raise UsageError("give at least one --archive or --attack")
    started = time.time()
    model_paths = _split_paths(cfg["models"])
    models = {_model_id(p): _load(p, "classifier") for p in model_paths}
    defense = parse_defense(cfg["defense"], cfg["seed"])
    report = FoolingReport()
    checkpoints = list(model_paths)
    dataset_id = None
    for path in cfg["archives"] or []:
        meta, clean, adv, eps = load_archive(path)
        if len(set(eps.tolist())) != 1:
            raise ValidationError(f"{path}: mixed budgets in one archive are not supported by eval")
        spec = AttackSpec(meta.get("method", _model_id(path)), tuple(meta.get("targets", [])), float(eps[0]),
                          lambda x, a=adv: a)
        part = transfer_matrix([spec], models, clean, defense, cfg["seed"])
        report.rows.extend(part.rows)
        report.metadata = part.metadata
        dataset_id = meta.get("dataset_id")
        checkpoints.append(path)
    if cfg["attacks"]:
        split = _pick_split(cfg)
        dataset_id = split.dataset_id
        sweep = _eps_list(cfg.get("sweep_eps"))
        if sweep:
            for i in range(len(_attack_specs(cfg, sweep[0]))):
                part = epsilon_sweep(lambda e, i=i: _attack_specs(cfg, e)[i], models, split, sweep, defense,
                                     cfg["seed"])
                report.rows.extend(part.rows)
                report.metadata = part.metadata
        else:
            part = transfer_matrix(_attack_specs(cfg, float(cfg["eps"])), models, split, defense, cfg["seed"])
            report.rows.extend(part.rows)
            report.metadata = part.metadata
    report.metadata["dataset_id"] = dataset_id
    report.write(cfg.get("out_csv"), cfg.get("out_json"))
    out = cfg.get("out_csv") or cfg.get("out_json")
    _write_manifest(out, "eval", cfg, started, dataset_id, checkpoints,
                    {"csv": cfg.get("out_csv"), "json": cfg.get("out_json")})
    return 0


COMMANDS = {
    "train-classifier": cmd_train_classifier,
    "train-atn": cmd_train_atn,
    "attack": cmd_attack,
    "eval": cmd_eval,
}


def _limit_threads():
    n = os.environ.get("ATNLAB_THREADS")
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(int(n))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    ns = vars(args)
    try:
        _limit_threads()
        if args.command == "rerun":
            try:
                with open(args.manifest, encoding="utf-8") as fh:
                    manifest = json.load(fh)
                command, cfg = manifest["command"], manifest["config"]
            except (OSError, json.JSONDecodeError, KeyError) as exc:
                raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from None
            return COMMANDS[command](resolve(command, cfg))
        flags = {k: v for k, v in ns.items() if k not in ("command", "config", "log_level")}
        cfg = resolve(args.command, flags, ns.get("config"))
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"atnlab: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except AtnLabError as exc:
        print(f"atnlab: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"atnlab: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
