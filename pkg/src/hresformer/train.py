"""Training loop, LR schedule, evaluation and the flat ``key = value`` config format."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore, save_checkpoint, snapshot
from .config import ModelConfig
from .losses import deep_supervised_loss, dsc_metric
from .model import HResFormer, infer, infer_2d
from .nn import SGD
from .phantom import PhantomSpec, augment, load_volume, normalize, read_manifest

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    base_lr: float = 0.01
    momentum: float = 0.9
    poly_power: float = 0.9
    lr_per_iteration: bool = False
    seed: int = 0
    ds_weights: tuple = ()
    augment: bool = True
    aug_noise: float = 0.1
    n_train: int = 20
    n_val: int = 5
    n_test: int = 5
    data_dir: str = "data"
    out_dir: str = "run"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def poly_lr(epoch: int, max_epochs: int, base_lr: float, power: float = 0.9) -> float:
    if not 0 <= epoch < max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs})")
    return base_lr * (1.0 - epoch / max_epochs) ** power


# -- config files --------------------------------------------------------------
@dataclass
class Settings:
    model: ModelConfig
    train: TrainConfig
    phantom: PhantomSpec


_PHANTOM_KEYS = {"volume_shape": "shape", "organs_per_class": "organs_per_class",
                 "semi_axes_min": "semi_axes_min", "semi_axes_max": "semi_axes_max",
                 "class_means": "class_means", "noise_sigma": "noise_sigma"}


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        if not text:
            return ()
        items = [t.strip() for t in text.strip("()[]").split(",") if t.strip()]
        return tuple(float(t) if any(c in t for c in ".eE") else int(t) for t in items)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config(text: str, seed: int | None = None) -> Settings:
    """Parse ``key = value`` lines (``#`` comments). Unknown keys are errors."""
    mdef, tdef, pdef = ModelConfig(), TrainConfig(), PhantomSpec()
    mvals, tvals, pvals = {}, {}, {}
    mnames = {f.name for f in fields(ModelConfig)}
    tnames = {f.name for f in fields(TrainConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        matched = False
        if key == "seed":
            seed = int(value) if seed is None else seed
            continue
        if key in mnames:
            mvals[key] = _parse_value(value, getattr(mdef, key))
            matched = True
        if key in tnames:
            tvals[key] = _parse_value(value, getattr(tdef, key))
            matched = True
        if key in _PHANTOM_KEYS:
            pvals[_PHANTOM_KEYS[key]] = _parse_value(value, getattr(pdef, _PHANTOM_KEYS[key]))
            matched = True
        if not matched:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if seed is not None:
        mvals["seed"] = tvals["seed"] = pvals["seed"] = seed
    if "num_classes" in mvals:
        pvals["num_classes"] = mvals["num_classes"]
    try:
        model = ModelConfig(**mvals)
        train = TrainConfig(**tvals)
        phantom = PhantomSpec(**pvals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return Settings(model, train, phantom)


def load_config(path, seed: int | None = None) -> Settings:
    return parse_config(Path(path).read_text(encoding="utf-8"), seed)


# -- data --------------------------------------------------------------------
@dataclass
class Case:
    case_id: str
    image: np.ndarray  # (1, D, H, W) normalised float32
    labels: np.ndarray  # (D, H, W) uint8
    num_classes: int = 0


def load_cases(entries) -> list:
    out = []
    for case_id, path in entries:
        vol = load_volume(path)
        out.append(Case(case_id, normalize(vol.intensity), vol.labels, vol.num_classes))
    return out


def _rng(*keys) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(keys))))


# -- training ------------------------------------------------------------------
def steps_per_epoch(n_cases: int, batch_size: int) -> int:
    return -(-n_cases // batch_size)


def step_lrs(epoch: int, n_steps: int, cfg: TrainConfig) -> list:
    """Learning rate for each optimiser step of an epoch (poly decay per epoch or per step)."""
    if not cfg.lr_per_iteration:
        return [poly_lr(epoch, cfg.epochs, cfg.base_lr, cfg.poly_power)] * n_steps
    total = cfg.epochs * n_steps
    return [poly_lr(epoch * n_steps + k, total, cfg.base_lr, cfg.poly_power) for k in range(n_steps)]


def train_epoch(model, opt, cases, epoch: int, lr, cfg: TrainConfig, weights=None) -> float:
    """One shuffled pass; ``lr`` is a float or one value per optimiser step."""
    n_steps = steps_per_epoch(len(cases), cfg.batch_size)
    lrs = [lr] * n_steps if np.isscalar(lr) else list(lr)
    rng = _rng(cfg.seed, epoch, 1)
    order = rng.permutation(len(cases))
    losses = []
    opt.zero_grad()
    for i, idx in enumerate(order):
        case = cases[int(idx)]
        x, y = case.image, case.labels
        if cfg.augment:
            x, y = augment(x, y, rng, cfg.aug_noise)
        report = deep_supervised_loss(model(x), y, weights)
        value = report.total.item()
        lr_now = lrs[i // cfg.batch_size]
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {i}, lr {lr_now}")
        loss = report.total * (1.0 / cfg.batch_size) if cfg.batch_size > 1 else report.total
        loss.backward()
        losses.append(value)
        if (i + 1) % cfg.batch_size == 0 or i + 1 == len(order):
            opt.step(lr_now)
            opt.zero_grad()
    return float(np.mean(losses))


def mean_dsc(model, cases, num_classes: int, two_d: bool = False) -> float:
    if not cases:
        return float("nan")
    fn = infer_2d if two_d else infer
    return float(np.mean([dsc_metric(fn(model, c.image), c.labels, num_classes)[1] for c in cases]))


def train(settings: Settings, manifest, out_dir, resume=None, stop_after: int | None = None):
    """Train, writing ``metrics.csv``, ``last.ckpt`` and ``best.ckpt`` to ``out_dir``.

    ``stop_after`` ends the run after that many epochs of this invocation
    (the schedule still spans ``epochs``). Returns (model, metric rows).
    """
    mcfg, tcfg = settings.model, settings.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = read_manifest(manifest)
    train_cases = load_cases(splits.get("train", []))
    val_cases = load_cases(splits.get("val", []))
    if not train_cases:
        raise TrainingError("manifest has no training cases")
    check_classes(train_cases + val_cases, mcfg.num_classes)
    model = HResFormer(mcfg)
    opt = SGD(model.params(), tcfg.base_lr, tcfg.momentum)
    weights = tcfg.ds_weights or None
    start, step, best = 0, 0, -1.0
    metrics_path = out_dir / "metrics.csv"
    rows = []
    if resume is not None:
        ckpt = load_checkpoint(resume)
        restore(model, ckpt, opt)
        start, step, best = ckpt.epoch, ckpt.step, ckpt.best_val
        if metrics_path.exists():
            rows = list(csv.reader(io.StringIO(metrics_path.read_text())))[1:]
    end = tcfg.epochs if stop_after is None else min(tcfg.epochs, start + stop_after)
    n_steps = steps_per_epoch(len(train_cases), tcfg.batch_size)
    for epoch in range(start, end):
        lrs = step_lrs(epoch, n_steps, tcfg)
        lr = lrs[0]
        loss = train_epoch(model, opt, train_cases, epoch, lrs, tcfg, weights)
        step += n_steps
        val = mean_dsc(model, val_cases, mcfg.num_classes)
        rows.append([str(epoch), repr(lr), repr(loss), repr(val)])
        log.info("epoch %d lr %.5f loss %.4f val_dsc %.4f", epoch, lr, loss, val)
        improved = val > best
        best = max(best, val) if math.isfinite(val) else best
        ckpt = snapshot(model, opt, epoch + 1, step, best)
        save_checkpoint(out_dir / "last.ckpt", ckpt)
        if improved:
            save_checkpoint(out_dir / "best.ckpt", ckpt)
        _write_metrics(metrics_path, rows)
    return model, rows


def _write_metrics(path: Path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", "train_loss", "val_mean_dsc"])
    w.writerows(rows)
    path.write_text(buf.getvalue())


# -- evaluation ------------------------------------------------------------------
def evaluate_predictions(preds, cases, num_classes: int) -> list:
    """Rows of [case_id, dsc_1..dsc_{K-1}, mean] plus a final column-mean row."""
    rows = []
    for pred, case in zip(preds, cases):
        per, m = dsc_metric(pred, case.labels, num_classes)
        rows.append([case.case_id] + per + [m])
    if rows:
        cols = np.asarray([r[1:] for r in rows], dtype=float)
        rows.append(["mean"] + [float(v) for v in cols.mean(axis=0)])
    return rows


def check_classes(cases, num_classes: int) -> None:
    for c in cases:
        if c.num_classes and c.num_classes != num_classes:
            raise TrainingError(f"{c.case_id} has {c.num_classes} classes, model has {num_classes}")


def evaluate(model, cases, num_classes: int, two_d: bool = False) -> list:
    check_classes(cases, num_classes)
    fn = infer_2d if two_d else infer
    return evaluate_predictions([fn(model, c.image) for c in cases], cases, num_classes)


def format_dsc_csv(rows, num_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case_id"] + [f"dsc_class{c}" for c in range(1, num_classes)] + ["mean_dsc"])
    for r in rows:
        w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    return buf.getvalue()


def write_dsc_csv(path, rows, num_classes: int) -> None:
    Path(path).write_text(format_dsc_csv(rows, num_classes))
