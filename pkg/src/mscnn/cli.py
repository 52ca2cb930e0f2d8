"""Experiment driver: ``mscnn train | evaluate | extract-features | svm-fit | ablate``.

Experiments are described by a flat ``key = value`` file (see README for the
schema); command-line flags override file keys.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_container, save_checkpoint, save_container
from .data import AUGMENTATIONS, DatasetManifest, SampleSet, load_idx, load_image_dir, preprocess_set, split_train_val
from .model import VARIANTS, ConfigError, Network, NetworkConfig, build_network
from .svm import DEFAULT_C_GRID, DEFAULT_GAMMA_GRID, save_svm, svm_fit, svm_predict, tune
from .training import (
    TrainConfig,
    epoch_replay_fit,
    kfold_split,
    predict_logits,
    train,
    train_columns_separately,
    write_metrics_csv,
)

logger = logging.getLogger(__name__)

CV_MODES = ("random-val", "5-fold", "10-fold")
TRAINING_MODES = ("simultaneous", "separate")


@dataclass
class ExperimentConfig:
    dataset: str = "idx"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_dir: str = ""
    test_dir: str = ""
    manifest: str = ""
    limit_train: int = 0
    limit_test: int = 0
    variant: str = "proposed"
    width_divisor: int = 1
    channel_divisor: int = 1
    dtype: str = "float64"
    training: str = "simultaneous"
    cv: str = "random-val"
    val_size: float = 0.0
    augment: str = "none"
    initial_lr: float = 0.001
    decay: float = 0.993
    lr_floor: float = 0.00003
    dropout: float = 0.5
    batch_size: int = 500
    max_epochs: int = 500
    beta: float = 0.9
    eps: float = 1e-8
    converge_tol: float = 1e-5
    converge_patience: int = 20
    svm: bool = True
    svm_c_grid: tuple = DEFAULT_C_GRID
    svm_gamma_grid: tuple = DEFAULT_GAMMA_GRID
    svm_folds: int = 3
    repeats: int = 1
    seed: int = 0
    out: str = "runs/experiment"

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        cfg = cls()
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(getattr(cls(), key), raw))
        return cfg

    @classmethod
    def read(cls, path) -> "ExperimentConfig":
        values = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: malformed line {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls.from_mapping(values)

    def validate(self) -> None:
        if self.dataset not in ("idx", "imagedir"):
            raise ConfigError(f"dataset must be 'idx' or 'imagedir', got {self.dataset!r}")
        paths = (
            [self.train_images, self.train_labels] if self.dataset == "idx" else [self.train_dir]
        )
        if self.dataset == "idx" and (self.test_images or self.test_labels):
            paths += [self.test_images, self.test_labels]
        if self.dataset == "imagedir" and self.test_dir:
            paths.append(self.test_dir)
        if self.manifest:
            paths.append(self.manifest)
        for p in paths:
            if not p or not Path(p).exists():
                raise ConfigError(f"path does not exist: {p!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.cv not in CV_MODES:
            raise ConfigError(f"cv must be one of {CV_MODES}")
        if self.training not in TRAINING_MODES:
            raise ConfigError(f"training must be one of {TRAINING_MODES}")
        if self.training == "separate" and (self.variant != "proposed" or self.cv != "random-val"):
            raise ConfigError("separate training needs variant=proposed and cv=random-val")
        if self.augment not in AUGMENTATIONS:
            raise ConfigError(f"augment must be one of {AUGMENTATIONS}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        self.train_config().validate()

    def train_config(self, seed: int | None = None) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        kw = {k: v for k, v in asdict(self).items() if k in names}
        kw["seed"] = self.seed if seed is None else seed
        return TrainConfig(**kw)

    def network_config(self, num_classes: int, variant: str | None = None) -> NetworkConfig:
        return NetworkConfig.paper(
            variant or self.variant,
            num_classes,
            width_divisor=self.width_divisor,
            channel_divisor=self.channel_divisor,
            dropout=self.dropout,
            dtype=self.dtype,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(default, raw):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(eval_fraction(x)) for x in raw.split(",") if x.strip())
    return raw


def eval_fraction(text: str) -> float:
    """Parse ``0.01`` or ``1/2048``."""
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


# -- data ----------------------------------------------------------------------


def load_datasets(cfg: ExperimentConfig) -> tuple[SampleSet, SampleSet | None]:
    if cfg.dataset == "idx":
        train_raw = load_idx(cfg.train_images, cfg.train_labels)
        test_raw = load_idx(cfg.test_images, cfg.test_labels) if cfg.test_images else None
    else:
        train_raw = load_image_dir(cfg.train_dir)
        test_raw = load_image_dir(cfg.test_dir) if cfg.test_dir else None
    if cfg.manifest:
        manifest = DatasetManifest.read(cfg.manifest)
        manifest.verify("train", train_raw)
        if test_raw is not None:
            manifest.verify("test", test_raw)
    if cfg.limit_train:
        train_raw = train_raw.subset(np.arange(min(cfg.limit_train, len(train_raw))))
    if test_raw is not None and cfg.limit_test:
        test_raw = test_raw.subset(np.arange(min(cfg.limit_test, len(test_raw))))
    train_set = preprocess_set(train_raw)
    test_set = preprocess_set(test_raw) if test_raw is not None else None
    return train_set, test_set


def dataset_from_args(args, cfg: ExperimentConfig | None) -> SampleSet:
    if getattr(args, "images", None):
        return preprocess_set(load_idx(args.images, args.labels))
    if getattr(args, "image_dir", None):
        return preprocess_set(load_image_dir(args.image_dir))
    if cfg is None:
        raise ConfigError("give --config or an explicit dataset")
    train_set, test_set = load_datasets(cfg)
    split = getattr(args, "split", "test")
    if split == "test":
        if test_set is None:
            raise ConfigError("config has no test set")
        return test_set
    return train_set


# -- operations ------------------------------------------------------------------


def confusion_matrix(labels: np.ndarray, pred: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


def _net_predict(net: Network, images: np.ndarray) -> np.ndarray:
    return predict_logits(lambda t: net.forward(t, False).logits, images, dtype=np.dtype(net.cfg.dtype)).argmax(1)


def descriptors(net: Network, samples: SampleSet, batch_size: int = 500) -> np.ndarray:
    images = np.asarray(samples.images, dtype=np.float64)
    return predict_logits(lambda t: net.forward(t, False).descriptor, images, batch_size, np.dtype(net.cfg.dtype))


def evaluate(checkpoint, dataset: SampleSet) -> tuple[float, np.ndarray]:
    """Softmax-head accuracy and confusion matrix (rows: true class)."""
    net = checkpoint if isinstance(checkpoint, Network) else load_checkpoint(checkpoint)[0]
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    k = net.cfg.num_classes
    if dataset.num_classes > k:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, network {k}")
    pred = _net_predict(net, np.asarray(dataset.images, dtype=np.float64))
    cm = confusion_matrix(dataset.labels, pred, k)
    return float(np.trace(cm)) / len(dataset), cm


def extract_features(checkpoint, dataset: SampleSet, out_path) -> np.ndarray:
    """Write an N x D descriptor matrix and labels as a ``descriptors`` container."""
    net = checkpoint if isinstance(checkpoint, Network) else load_checkpoint(checkpoint)[0]
    desc = descriptors(net, dataset)
    save_container(
        out_path,
        "descriptors",
        {"count": len(dataset), "width": int(desc.shape[1]), "num_classes": net.cfg.num_classes},
        {"descriptors": desc, "labels": dataset.labels},
    )
    return desc


def load_descriptors(path) -> tuple[np.ndarray, np.ndarray, dict]:
    meta, arrays = load_container(path, "descriptors")
    return arrays["descriptors"], arrays["labels"], meta


def svm_readout(cfg: ExperimentConfig, train_desc, train_labels, test_desc, test_labels, k: int, seed: int) -> dict:
    C, gamma, _ = tune(train_desc, train_labels, cfg.svm_c_grid, cfg.svm_gamma_grid, cfg.svm_folds, seed)
    model = svm_fit(train_desc, train_labels, C, gamma, n_classes=k)
    pred = svm_predict(model, test_desc)
    cm = confusion_matrix(test_labels, pred, k)
    return {"C": C, "gamma": gamma, "accuracy": float(np.trace(cm)) / len(test_labels), "confusion": cm, "model": model}


def _run_trial(cfg: ExperimentConfig, train_set: SampleSet, test_set: SampleSet | None, trial: int, out: Path) -> dict:
    seed = cfg.seed + trial
    tcfg = cfg.train_config(seed)
    k = max(train_set.num_classes, test_set.num_classes if test_set is not None else 0)
    net_cfg = cfg.network_config(k)
    out.mkdir(parents=True, exist_ok=True)

    def factory() -> Network:
        return build_network(net_cfg, seed)

    result: dict = {"trial": trial, "seed": seed}
    if cfg.cv != "random-val":
        folds = kfold_split(len(train_set), int(cfg.cv.split("-")[0]), seed)
        accs = []
        for f, (tr, va) in enumerate(folds):
            net = factory()
            res = train(net, train_set.subset(tr), tcfg, val_set=train_set.subset(va),
                        metrics_path=out / f"metrics_fold{f + 1}.csv")
            acc, _ = evaluate(net, train_set.subset(va))
            accs.append(acc)
            logger.info("fold %d accuracy %.4f (best epoch %s)", f + 1, acc, res.best_epoch)
        result["fold_accuracies"] = accs
        result["fold_mean"] = float(np.mean(accs))
        result["accuracy"] = result["fold_mean"]
        return result

    if cfg.val_size:
        val_size = int(cfg.val_size) if cfg.val_size >= 1 else cfg.val_size
    elif test_set is not None and len(test_set) < len(train_set):
        val_size = len(test_set)
    else:
        val_size = 0.2
    if cfg.training == "simultaneous":
        rep = epoch_replay_fit(factory, train_set, val_size, tcfg)
        net = rep.net
        write_metrics_csv(out / "metrics_search.csv", rep.search.history)
        write_metrics_csv(out / "metrics.csv", rep.replay.history)
        result["best_epoch"] = rep.best_epoch
        epoch = rep.best_epoch
    else:
        part, val = split_train_val(train_set, val_size, seed)
        net = factory()
        sep = train_columns_separately(net, part, tcfg, val_set=val)
        write_metrics_csv(out / "metrics.csv", sep.fusion_result.history)
        result["best_epoch"] = sep.fusion_result.best_epoch
        epoch = len(sep.fusion_result.history)
    save_checkpoint(out / "model.ckpt", net, epoch=epoch)
    if test_set is not None:
        acc, cm = evaluate(net, test_set)
        result["softmax_accuracy"] = acc
        result["softmax_confusion"] = cm.tolist()
        result["accuracy"] = acc
        if cfg.svm:
            sv = svm_readout(cfg, descriptors(net, train_set), train_set.labels, descriptors(net, test_set),
                             test_set.labels, k, seed)
            save_svm(out / "model.svm", sv.pop("model"))
            result["svm_accuracy"] = sv["accuracy"]
            result["svm_C"], result["svm_gamma"] = sv["C"], sv["gamma"]
            result["svm_confusion"] = sv["confusion"].tolist()
            result["accuracy"] = sv["accuracy"]
    return result


def _summary(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"best": float(arr.max()), "mean": float(arr.mean()), "std": float(arr.std())}


def run(cfg: ExperimentConfig) -> dict:
    """Run ``cfg.repeats`` trials and write ``report.json``/``report.txt`` under ``cfg.out``."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = load_datasets(cfg)
    trials = [_run_trial(cfg, train_set, test_set, r, out / f"trial{r + 1}") for r in range(cfg.repeats)]
    report = {"config": _config_echo(cfg), "trials": trials}
    for key in ("accuracy", "softmax_accuracy", "svm_accuracy", "fold_mean"):
        vals = [t[key] for t in trials if key in t]
        if vals:
            report[f"{key}_summary"] = _summary(vals)
    _write_report(out, report)
    return report


def ablate(cfg: ExperimentConfig) -> dict:
    """Train every variant with the same data, seed and budget; softmax test accuracy per variant."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = load_datasets(cfg)
    if test_set is None:
        raise ConfigError("ablation needs a test set")
    k = max(train_set.num_classes, test_set.num_classes)
    rows = {}
    for variant in VARIANTS:
        net = build_network(cfg.network_config(k, variant), cfg.seed)
        res = train(net, train_set, cfg.train_config(), metrics_path=out / f"metrics_{variant}.csv")
        acc, _ = evaluate(net, test_set)
        rows[variant] = {"accuracy": acc, "epochs": len(res.history), "final_loss": res.history[-1].train_loss}
    report = {"config": _config_echo(cfg), "ablation": rows}
    _write_report(out, report)
    return report


def _config_echo(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["svm_c_grid"] = list(cfg.svm_c_grid)
    d["svm_gamma_grid"] = list(cfg.svm_gamma_grid)
    return d


def _write_report(out: Path, report: dict) -> None:
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    lines = ["# resolved configuration"]
    lines += ExperimentConfig.from_mapping(report["config"]).to_text().splitlines()
    lines.append("")
    for t in report.get("trials", []):
        parts = [f"trial {t['trial'] + 1} (seed {t['seed']})"]
        for key in ("best_epoch", "softmax_accuracy", "svm_accuracy", "fold_mean"):
            if key in t:
                v = t[key]
                parts.append(f"{key}={v:.4f}" if isinstance(v, float) else f"{key}={v}")
        if "fold_accuracies" in t:
            parts.append("folds=" + ",".join(f"{a:.4f}" for a in t["fold_accuracies"]))
        lines.append("  ".join(parts))
    for key in sorted(k for k in report if k.endswith("_summary")):
        s = report[key]
        lines.append(f"{key[:-8]}: best {s['best']:.4f}  mean {s['mean']:.4f} +/- {s['std']:.4f}")
    for variant, row in report.get("ablation", {}).items():
        lines.append(f"{variant:<11} accuracy {row['accuracy']:.4f}  epochs {row['epochs']}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")


# -- argument parsing ------------------------------------------------------------


def _experiment(args) -> ExperimentConfig:
    cfg = ExperimentConfig.read(args.config) if args.config else ExperimentConfig()
    overrides = {
        "seed": args.seed,
        "variant": args.variant,
        "cv": args.cv,
        "augment": args.augment,
        "repeats": args.repeats,
        "out": args.out,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    for item in args.set or []:
        key, _, value = item.partition("=")
        cfg = ExperimentConfig.from_mapping({**_config_echo(cfg), key.strip(): value.strip()})
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mscnn", description="Train and evaluate the multi-column digit network.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p):
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--cv", choices=CV_MODES)
        p.add_argument("--augment", choices=AUGMENTATIONS)
        p.add_argument("--repeats", type=int)
        p.add_argument("--out")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    experiment_flags(sub.add_parser("train", help="run an experiment"))
    experiment_flags(sub.add_parser("ablate", help="compare all network variants"))

    for name in ("evaluate", "extract-features"):
        p = sub.add_parser(name)
        p.add_argument("checkpoint")
        p.add_argument("--config")
        p.add_argument("--split", choices=("train", "test"), default="test")
        p.add_argument("--images", help="IDX image file (instead of --config)")
        p.add_argument("--labels", help="IDX label file")
        p.add_argument("--image-dir", help="class-per-folder image directory")
        if name == "extract-features":
            p.add_argument("--out", required=True)

    p = sub.add_parser("svm-fit", help="fit the SVM readout on a descriptor file")
    p.add_argument("descriptors")
    p.add_argument("--test", help="descriptor file to score")
    p.add_argument("--out", required=True)
    p.add_argument("--c-grid", default=",".join(map(str, DEFAULT_C_GRID)))
    p.add_argument("--gamma-grid", default=",".join(map(str, DEFAULT_GAMMA_GRID)))
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command in ("train", "ablate"):
            cfg = _experiment(args)
            run(cfg) if args.command == "train" else ablate(cfg)
            print((Path(cfg.out) / "report.txt").read_text(), end="")
        elif args.command in ("evaluate", "extract-features"):
            cfg = ExperimentConfig.read(args.config) if args.config else None
            dataset = dataset_from_args(args, cfg)
            if args.command == "evaluate":
                acc, cm = evaluate(args.checkpoint, dataset)
                print(f"accuracy {acc:.4f} ({int(np.trace(cm))}/{len(dataset)})")
                for row in cm:
                    print(" ".join(f"{v:5d}" for v in row))
            else:
                desc = extract_features(args.checkpoint, dataset, args.out)
                print(f"wrote {desc.shape[0]} x {desc.shape[1]} descriptors to {args.out}")
        else:
            X, y, meta = load_descriptors(args.descriptors)
            cgrid = tuple(eval_fraction(v) for v in args.c_grid.split(","))
            ggrid = tuple(eval_fraction(v) for v in args.gamma_grid.split(","))
            C, gamma, _ = tune(X, y, cgrid, ggrid, args.folds, args.seed)
            model = svm_fit(X, y, C, gamma, n_classes=meta.get("num_classes"))
            save_svm(args.out, model)
            print(f"C={C:g} gamma={gamma:g} support vectors {len(model.support_vectors)}")
            if args.test:
                Xt, yt, _ = load_descriptors(args.test)
                acc = float((svm_predict(model, Xt) == yt).mean())
                print(f"test accuracy {acc:.4f}")
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
