"""Config-driven experiment runner.

    python -m pmgaft train --config run.json --out runs/pmg
    python -m pmgaft eval --config run.json --checkpoint runs/pmg/model.pmga
    python -m pmgaft sweep --config run.json --jobs 4
    python -m pmgaft tradeoff --config run.json --plot
    python -m pmgaft synthesize --config run.json

Exit codes: 0 success, 1 runtime failure, 2 config or usage error.
"""
import argparse
import copy
import csv
import hashlib
import json
import logging
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema
import torch

from .attack import AttackConfig
from .datasets import SyntheticSpec, load_dataset, save_dataset, synthesize
from .errors import PMGAFTError, ValidationError
from .evalsuite import (DEFAULT_EPSILONS, DEFAULT_LAMBDAS, CurveRow, evaluate_clean, evaluate_robust,
                        rows_to_json, tradeoff_curve, write_csv, zero_shot_suite)
from .losses import LossSpec
from .snapshot import load_checkpoint, load_snapshot, save_checkpoint, snapshot_parameters
from .toy import ToyModelConfig, fresh_model, pretrained_model
from .trainer import METHODS, TrainConfig, VisualPrompt, finetune, frozen_copy

logger = logging.getLogger("pmgaft")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
COMMANDS = ("train", "eval", "sweep", "tradeoff", "synthesize")

_NUM = {"type": "number"}
_INT = {"type": "integer", "minimum": 0}


def _obj(props):
    return {"type": "object", "properties": props, "additionalProperties": False}


ATTACK_SCHEMA = _obj({
    "epsilon": _NUM,
    "step_size": {"type": ["number", "null"]},
    "steps": _INT,
    "init_mode": {"enum": ["zero", "uniform_symmetric", "uniform_nonneg"]},
    "pixel_bounds": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
    "signed": {"type": "boolean"},
})

CONFIG_SCHEMA = _obj({
    "seed": _INT,
    "out": {"type": "string"},
    "data": _obj({
        "num_classes": _INT, "samples_per_class": _INT, "test_per_class": _INT,
        "image_shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "signal": _NUM, "noise": _NUM,
        "held_out_classes": {"type": "array", "items": _INT},
        "heldout_group_size": {"type": ["integer", "null"], "minimum": 2},
        "world_seed": _INT, "text_dim": {"type": "integer", "minimum": 1}, "text_seed": _INT,
        "prompt_template": {"type": "string"}, "dataset_id": {"type": "string"},
        "class_names": {"type": ["array", "null"], "items": {"type": "string"}},
    }),
    "model": _obj({
        "encoder": {"enum": ["linear", "mlp", "patch"]},
        "hidden": _INT, "width": _INT, "patch": _INT,
        "logit_scale": _NUM, "normalize_embeddings": {"type": "boolean"},
        "pretrain_classes": _INT, "pretrain_per_class": _INT, "pretrain_epochs": _INT,
        "pretrain_lr": _NUM, "pretrain_batch_size": _INT,
    }),
    "train": _obj({
        "method": {"enum": list(METHODS)},
        "adaptation": {"enum": ["full_finetune", "visual_prompt"]},
        "epochs": {"type": "integer", "minimum": 1},
        "learning_rate": {"type": ["number", "null"]},
        "momentum": _NUM,
        "batch_size": {"type": "integer", "minimum": 1},
        "snapshot_every": _INT, "snapshot_cap": _INT, "token_prompt_params": _INT,
        "attack": ATTACK_SCHEMA,
        "loss": _obj({
            "alpha": _NUM, "beta": _NUM,
            "general_layer": {"enum": ["output", "penultimate"]},
            "general_metric": {"enum": ["kl", "l2", "cosine"]},
            "prob_floor": _NUM, "detach_clean": {"type": "boolean"},
        }),
    }),
    "eval": _obj({"attack": ATTACK_SCHEMA, "batch_size": {"type": "integer", "minimum": 1}}),
    "datasets": {"type": "array", "items": {"type": "string"}},
    "sweep": _obj({"epsilons": {"type": "array", "items": _NUM, "minItems": 1},
                   "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1}}),
    "tradeoff": _obj({"lambdas": {"type": "array", "items": _NUM, "minItems": 1},
                      "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1}}),
})


class UsageError(PMGAFTError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = None
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_attack: AttackConfig = field(default_factory=AttackConfig)
    eval_batch_size: int = 256
    datasets: list = field(default_factory=list)
    sweep_epsilons: tuple = DEFAULT_EPSILONS
    sweep_methods: tuple = ("ft_tecoa", "pmg_aft")
    tradeoff_lambdas: tuple = DEFAULT_LAMBDAS
    tradeoff_methods: tuple = ("ft_tecoa", "pmg_aft")
    document: dict = field(default_factory=dict)


def read_config(path) -> dict:
    """Parse and schema-check a run config; any problem is a usage error."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON: {exc}") from None
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    problems = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if problems:
        lines = [f"  {'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in problems]
        raise UsageError(f"{path}: invalid config\n" + "\n".join(lines))
    return doc


def build_run_config(doc: dict, seed=None, epsilon=None, steps=None) -> RunConfig:
    seed = doc.get("seed", 0) if seed is None else seed
    train_doc = dict(doc.get("train", {}))
    train_attack = dict(train_doc.pop("attack", {}))
    eval_attack = dict(doc.get("eval", {}).get("attack", {}))
    for attack_doc in (train_attack, eval_attack):
        if epsilon is not None:
            attack_doc["epsilon"] = epsilon
        if steps is not None:
            attack_doc["steps"] = steps
        attack_doc["seed"] = seed
    train_attack.setdefault("epsilon", 1 / 255)
    train_attack.setdefault("steps", 2)
    loss = LossSpec(**train_doc.pop("loss", {}))
    sweep = doc.get("sweep", {})
    tradeoff = doc.get("tradeoff", {})
    return RunConfig(
        seed=seed,
        out=doc.get("out"),
        data=SyntheticSpec(**{**doc.get("data", {}), "seed": seed}),
        model=ToyModelConfig(**doc.get("model", {})),
        train=TrainConfig(**train_doc, attack=AttackConfig(**train_attack), loss=loss, seed=seed),
        eval_attack=AttackConfig(**eval_attack),
        eval_batch_size=doc.get("eval", {}).get("batch_size", 256),
        datasets=list(doc.get("datasets", [])),
        sweep_epsilons=tuple([epsilon] if epsilon is not None else sweep.get("epsilons", DEFAULT_EPSILONS)),
        sweep_methods=tuple(sweep.get("methods", ("ft_tecoa", "pmg_aft"))),
        tradeoff_lambdas=tuple(tradeoff.get("lambdas", DEFAULT_LAMBDAS)),
        tradeoff_methods=tuple(tradeoff.get("methods", ("ft_tecoa", "pmg_aft"))),
        document=doc,
    )


def output_dir(command, args, rc: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    if rc.out:
        return Path(rc.out)
    return Path(os.environ.get("PMGAFT_OUT", "runs")) / command


def claim_outputs(out: Path, names, overwrite: bool):
    taken = [n for n in names if (out / n).exists()]
    if taken and not overwrite:
        raise UsageError(f"refusing to overwrite {', '.join(taken)} in {out}; pass --overwrite")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run_metadata(out: Path, command, rc: RunConfig, datasets, outputs):
    write_json(out / "run.json", {
        "command": command,
        "seed": rc.seed,
        "config": rc.document,
        "effective": {
            "data": asdict(rc.data),
            "model": asdict(rc.model),
            "train": rc.train.to_dict(),
            "eval_attack": rc.eval_attack.to_dict(),
        },
        "dataset_hashes": {d.id: d.content_hash() for d in datasets},
        "outputs": {n: sha256_file(out / n) for n in outputs},
        "torch": torch.__version__,
    })


# ---- shared pipeline -------------------------------------------------------

@dataclass
class World:
    train: object
    heldout: list
    extra: list
    pretrained: object

    @property
    def eval_datasets(self):
        return [self.train, *self.heldout, *self.extra]


def build_world(rc: RunConfig, need_pretrained=True) -> World:
    train, heldout = synthesize(rc.data)
    if train is None:
        raise ValidationError("synthetic spec leaves no training classes")
    extra = [load_dataset(p) for p in rc.datasets]
    pre = pretrained_model(rc.model, rc.data, rc.seed) if need_pretrained else None
    return World(train, heldout, extra, pre)


def train_method(world: World, rc: RunConfig, method, epsilon=None):
    cfg = replace(rc.train, method=method)
    if epsilon is not None:
        cfg = replace(cfg, attack=replace(cfg.attack, epsilon=epsilon))
    model = copy.deepcopy(world.pretrained)
    model, history = finetune(model, frozen_copy(world.pretrained), world.train, cfg)
    return model, history


def _sweep_cell(world, rc, method, eps):
    model, _ = train_method(world, rc, method, eps)
    attack = replace(rc.eval_attack, epsilon=eps)
    ds = world.eval_datasets
    clean = sum(evaluate_clean(model, d, rc.eval_batch_size) for d in ds) / len(ds)
    robust = sum(evaluate_robust(model, d, attack, rc.seed, rc.eval_batch_size) for d in ds) / len(ds)
    return CurveRow(eps, method, clean, robust)


def _tradeoff_cell(world, rc, method):
    model, _ = train_method(world, rc, method)
    theta0 = snapshot_parameters(world.pretrained, "pretrained")
    theta_ft = snapshot_parameters(model, method)
    return tradeoff_curve(world.pretrained, theta0, theta_ft, rc.tradeoff_lambdas, world.eval_datasets,
                          rc.eval_attack, rc.seed, method, rc.eval_batch_size)


def run_cells(fn, cells, jobs):
    if jobs <= 1 or len(cells) <= 1:
        return [fn(*c) for c in cells]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
        return list(pool.map(fn, *zip(*cells)))


def plot_curve(rows, path, xlabel):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for method in dict.fromkeys(r.method for r in rows):
        pts = [r for r in rows if r.method == method]
        if xlabel == "lambda":
            ax.plot([r.clean_acc for r in pts], [r.robust_acc for r in pts], "o-", label=method)
            ax.set_xlabel("clean accuracy")
        else:
            ax.plot([r.lambda_or_epsilon * 255 for r in pts], [r.robust_acc for r in pts], "o-", label=method)
            ax.set_xlabel("epsilon (x/255)")
    ax.set_ylabel("robust accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---- commands --------------------------------------------------------------

def cmd_train(args, rc: RunConfig):
    out = output_dir("train", args, rc)
    names = ["model.pmga", "history.json", "run.json"]
    if rc.train.adaptation == "visual_prompt":
        names.append("prompt.pmga")
    claim_outputs(out, names, args.overwrite)
    world = build_world(rc)
    model, history = train_method(world, rc, rc.train.method)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.pmga", snapshot_parameters(model, rc.train.method))
    if model.prompt is not None:
        save_checkpoint(out / "prompt.pmga", snapshot_parameters(model.prompt, "prompt"))
    history.to_json(out / "history.json")
    write_run_metadata(out, "train", rc, [world.train], names[:1] + names[3:])
    last = history.records[-1]
    print(f"trained {rc.train.method} for {len(history.records)} epochs: "
          f"loss {last.total:.4f}, train robust acc {last.train_accuracy:.4f}, drift {last.drift:.4f}")
    print(f"outputs in {out}")


def cmd_eval(args, rc: RunConfig):
    out = output_dir("eval", args, rc)
    names = ["report.json", "report.csv", "run.json"]
    claim_outputs(out, names, args.overwrite)
    if args.checkpoint:
        world = build_world(rc, need_pretrained=False)
        model = fresh_model(rc.model, rc.data, rc.seed)
        load_snapshot(model, load_checkpoint(args.checkpoint))
        tag = str(args.checkpoint)
    else:
        world = build_world(rc)
        model = world.pretrained
        tag = "pretrained"
    if args.prompt:
        snap = load_checkpoint(args.prompt)
        shapes = dict(snap.layout())
        token = shapes.get("token_prompt")
        prompt = VisualPrompt(model.image_encoder.input_shape, *(token or (0, None)),
                              pixel_bounds=rc.eval_attack.pixel_bounds)
        model.prompt = load_snapshot(prompt, snap)
    report = zero_shot_suite(model, world.eval_datasets, rc.eval_attack, rc.seed, tag, rc.eval_batch_size)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset_id", "zero_shot", "samples", "clean_acc", "robust_acc"])
        for r in report.rows:
            w.writerow([r.dataset_id, int(r.zero_shot), r.samples, f"{r.clean_accuracy:.4f}",
                        f"{r.robust_accuracy:.4f}"])
    write_run_metadata(out, "eval", rc, world.eval_datasets, names[:2])
    print(report.summary())


def cmd_sweep(args, rc: RunConfig):
    out = output_dir("sweep", args, rc)
    names = ["sweep.csv", "sweep.json", "run.json"] + (["sweep.png"] if args.plot else [])
    claim_outputs(out, names, args.overwrite)
    world = build_world(rc)
    cells = [(world, rc, m, eps) for m in rc.sweep_methods for eps in rc.sweep_epsilons]
    rows = run_cells(_sweep_cell, cells, args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out / "sweep.csv")
    write_json(out / "sweep.json", rows_to_json(rows))
    if args.plot:
        plot_curve(rows, out / "sweep.png", "epsilon")
    write_run_metadata(out, "sweep", rc, world.eval_datasets, names[:2])
    for r in rows:
        print(f"{r.method:<12} eps={r.lambda_or_epsilon * 255:.1f}/255 clean={r.clean_acc:.4f} robust={r.robust_acc:.4f}")


def cmd_tradeoff(args, rc: RunConfig):
    out = output_dir("tradeoff", args, rc)
    names = ["tradeoff.csv", "tradeoff.json", "run.json"] + (["tradeoff.png"] if args.plot else [])
    claim_outputs(out, names, args.overwrite)
    for lam in rc.tradeoff_lambdas:
        if not 0 <= lam <= 1:
            raise UsageError(f"lambda {lam} outside [0, 1]")
    world = build_world(rc)
    per_method = run_cells(_tradeoff_cell, [(world, rc, m) for m in rc.tradeoff_methods], args.jobs)
    rows = [r for rs in per_method for r in rs]
    out.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out / "tradeoff.csv")
    write_json(out / "tradeoff.json", rows_to_json(rows))
    if args.plot:
        plot_curve(rows, out / "tradeoff.png", "lambda")
    write_run_metadata(out, "tradeoff", rc, world.eval_datasets, names[:2])
    for r in rows:
        print(f"{r.method:<12} lambda={r.lambda_or_epsilon:.2f} clean={r.clean_acc:.4f} robust={r.robust_acc:.4f}")


def cmd_synthesize(args, rc: RunConfig):
    out = output_dir("synthesize", args, rc)
    train, heldout = synthesize(rc.data)
    datasets = [d for d in (train, *heldout) if d is not None]
    names = [f"{d.id}.json" for d in datasets] + [f"{d.id}-{s}.pmgt" for d in datasets for s in d.splits()]
    claim_outputs(out, names + ["run.json"], args.overwrite)
    out.mkdir(parents=True, exist_ok=True)
    for d in datasets:
        path = save_dataset(d, out)
        print(f"{d.id}: {len(d.class_names)} classes -> {path}")
    write_run_metadata(out, "synthesize", rc, datasets, names)


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "tradeoff": cmd_tradeoff,
            "synthesize": cmd_synthesize}


def build_parser():
    parser = argparse.ArgumentParser(prog="pmgaft", description="Adversarial fine-tuning experiments on a toy "
                                     "two-tower model.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--out", help="output directory (default $PMGAFT_OUT/<command> or runs/<command>)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--epsilon", type=float, help="attack radius in pixel units, e.g. 0.0157 for 4/255")
        p.add_argument("--steps", type=int, help="PGD iterations")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        p.add_argument("--plot", action="store_true", help="also write a PNG plot (sweep, tradeoff)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--checkpoint", help="image-tower checkpoint; defaults to the pre-trained model")
            p.add_argument("--prompt", help="visual-prompt checkpoint to apply")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads() // max(args.jobs, 1)))

    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be >= 0")
        rc = build_run_config(read_config(args.config), args.seed, args.epsilon, args.steps)
    except (UsageError, ValidationError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        HANDLERS[args.command](args, rc)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PMGAFTError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
