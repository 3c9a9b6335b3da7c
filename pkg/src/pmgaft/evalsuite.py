"""Zero-shot clean and robust evaluation with strength-sweep and interpolation curves."""
import copy
import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .attack import AttackConfig, PGDAttack
from .errors import ValidationError
from .losses import one_hot
from .snapshot import ParameterSnapshot, interpolate, load_snapshot, relative_drift  # noqa: F401
from .trainer import derive_seed

DEFAULT_EPSILONS = (1 / 255, 2 / 255, 4 / 255)
DEFAULT_LAMBDAS = tuple(i / 10 for i in range(11))
CSV_COLUMNS = ("lambda_or_epsilon", "method", "clean_acc", "robust_acc")


def _batches(split, batch_size):
    n = len(split)
    if n == 0:
        raise ValidationError("dataset split is empty")
    for b, lo in enumerate(range(0, n, batch_size)):
        yield b, split.images[lo:lo + batch_size], split.labels[lo:lo + batch_size]


def _dtype(model):
    return next(model.image_encoder.parameters()).dtype


def predict(model, dataset, batch_size=256):
    T = model.build_text_matrix(dataset.class_names, dataset.prompt_template)
    out = []
    with torch.no_grad():
        for _, X, _ in _batches(dataset.test, batch_size):
            out.append(model.logits(X.to(_dtype(model)), T).argmax(1))
    return torch.cat(out)


def evaluate_clean(model, dataset, batch_size=256) -> float:
    preds = predict(model, dataset, batch_size)
    return (preds == dataset.test.labels).sum().item() / len(dataset.test)


def predict_robust(model, dataset, attack, seed=0, batch_size=256):
    T = model.build_text_matrix(dataset.class_names, dataset.prompt_template)
    c = T.num_classes
    dtype = _dtype(model)
    out = []
    for b, X, labels in _batches(dataset.test, batch_size):
        X = X.to(dtype)
        Y = one_hot(labels, c, dtype)
        if getattr(attack, "accepts_seed", False):
            X_a = attack.attack(model, T, X, Y, seed=derive_seed(seed, dataset.id, b), batch_index=b)
        else:
            X_a = attack.attack(model, T, X, Y)
        with torch.no_grad():
            out.append(model.logits(X_a.detach(), T).argmax(1))
    return torch.cat(out)


def evaluate_robust(model, dataset, attack, seed=0, batch_size=256) -> float:
    if isinstance(attack, AttackConfig):
        attack = PGDAttack(attack)
    preds = predict_robust(model, dataset, attack, seed, batch_size)
    return (preds == dataset.test.labels).sum().item() / len(dataset.test)


@dataclass
class EvalRow:
    dataset_id: str
    clean_accuracy: float
    robust_accuracy: float
    attack: dict
    samples: int
    zero_shot: bool = True


@dataclass
class EvalReport:
    rows: list
    mean_clean: float
    mean_robust: float
    zero_shot_mean_clean: float = None
    zero_shot_mean_robust: float = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        for row in d["rows"]:
            row["clean_accuracy"] = round(row["clean_accuracy"], 4)
            row["robust_accuracy"] = round(row["robust_accuracy"], 4)
        for k in ("mean_clean", "mean_robust", "zero_shot_mean_clean", "zero_shot_mean_robust"):
            if d[k] is not None:
                d[k] = round(d[k], 4)
        return d

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary(self) -> str:
        lines = [f"{'dataset':<24}{'clean':>9}{'robust':>9}{'n':>7}"]
        for r in self.rows:
            tag = "" if r.zero_shot else " *"
            lines.append(f"{r.dataset_id + tag:<24}{r.clean_accuracy:>9.4f}{r.robust_accuracy:>9.4f}{r.samples:>7d}")
        lines.append(f"{'average':<24}{self.mean_clean:>9.4f}{self.mean_robust:>9.4f}")
        return "\n".join(lines)


def zero_shot_suite(model, datasets, attack_cfg: AttackConfig, seed=0, model_tag="", batch_size=256,
                    attack=None) -> EvalReport:
    ids = [d.id for d in datasets]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate dataset ids in {ids}")
    if not datasets:
        raise ValidationError("no datasets to evaluate")
    attack = attack or PGDAttack(attack_cfg)
    rows = []
    for ds in datasets:
        rows.append(EvalRow(
            dataset_id=ds.id,
            clean_accuracy=evaluate_clean(model, ds, batch_size),
            robust_accuracy=evaluate_robust(model, ds, attack, seed, batch_size),
            attack=attack_cfg.to_dict() if attack_cfg is not None else {},
            samples=len(ds.test),
            zero_shot=ds.zero_shot,
        ))
    zs = [r for r in rows if r.zero_shot]
    return EvalReport(
        rows=rows,
        mean_clean=sum(r.clean_accuracy for r in rows) / len(rows),
        mean_robust=sum(r.robust_accuracy for r in rows) / len(rows),
        zero_shot_mean_clean=sum(r.clean_accuracy for r in zs) / len(zs) if zs else None,
        zero_shot_mean_robust=sum(r.robust_accuracy for r in zs) / len(zs) if zs else None,
        provenance={"model": model_tag, "seed": seed, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")},
    )


@dataclass
class CurveRow:
    lambda_or_epsilon: float
    method: str
    clean_acc: float
    robust_acc: float


def tradeoff_curve(model, theta0: ParameterSnapshot, theta_ft: ParameterSnapshot, lambdas=DEFAULT_LAMBDAS,
                   datasets=(), attack_cfg=None, seed=0, method="", batch_size=256):
    """Average clean/robust accuracy of (1 - lam) * theta0 + lam * theta_ft for each lam."""
    clone = copy.deepcopy(model)
    rows = []
    for lam in lambdas:
        load_snapshot(clone, interpolate(theta0, theta_ft, lam))
        report = zero_shot_suite(clone, list(datasets), attack_cfg, seed, f"{method}@{lam}", batch_size)
        rows.append(CurveRow(lam, method, report.mean_clean, report.mean_robust))
    return rows


def strength_sweep(train_fn, eval_fn, epsilons=DEFAULT_EPSILONS, methods=("pmg_aft",)):
    """For each method and epsilon, train at epsilon then evaluate at the same epsilon.

    ``train_fn(method, epsilon) -> model`` and ``eval_fn(model, epsilon) -> (clean, robust)``.
    """
    rows = []
    for method in methods:
        for eps in epsilons:
            clean, robust = eval_fn(train_fn(method, eps), eps)
            rows.append(CurveRow(eps, method, clean, robust))
    return rows


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([repr(float(r.lambda_or_epsilon)), r.method, f"{r.clean_acc:.4f}", f"{r.robust_acc:.4f}"])


def read_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [CurveRow(float(d["lambda_or_epsilon"]), d["method"], float(d["clean_acc"]), float(d["robust_acc"]))
                for d in reader]


def rows_to_json(rows):
    return [{"lambda_or_epsilon": float(r.lambda_or_epsilon), "method": r.method,
             "clean_acc": round(r.clean_acc, 4), "robust_acc": round(r.robust_acc, 4)} for r in rows]
