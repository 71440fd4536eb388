"""Command line entry point: ``dua {train,merge,adapt,eval,corr,experiment}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..continual import ExpertSet, Provenance, train_expert_sequence
from ..datasets import LabeledSet
from ..errors import DuaError
from ..importance import ImportanceVector, estimate_fim, estimate_mas
from ..local_adapt import adabn, adabn_s
from ..merge import MergeSpec, mode_imm_merge
from ..nnkit import TrainConfig, accuracy, load_model, mlp_layout, save_model
from ..protocol import decode_msg
from .data import NUMBERS_CLASSES, load_idx, make_numbers_tasks, synth_digits
from .experiment import ExperimentConfig, run_experiment
from .study import importance_correlation_study, write_corr_csv
from .transforms import KINDS, apply_transform


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--images", help="IDX image file (default: synthetic digits)")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic digits")
    p.add_argument("--n-per-class", type=int, default=2000)


def _data(args, name="data") -> LabeledSet:
    if args.images or args.labels:
        if not (args.images and args.labels):
            raise DuaError("--images and --labels go together")
        return load_idx(args.images, args.labels, name)
    return synth_digits(args.data_seed, args.n_per_class, name)


def _load_experts(directory) -> tuple[ExpertSet, dict]:
    directory = Path(directory)
    meta = json.loads((directory / "experts.json").read_text())
    experts = ExpertSet()
    for entry in meta["experts"]:
        model = load_model(directory / entry["file"])
        experts.append(model, Provenance(entry["expert_id"], entry["task_id"], entry["parent"],
                                         entry["init_digest"], entry["final_digest"]))
    return experts, meta


def cmd_train(args) -> int:
    data = _data(args, "server")
    seq = make_numbers_tasks(data, args.split_seed)
    cfg = TrainConfig(seed=args.seed, max_epochs=args.epochs)
    experts = train_expert_sequence(seq, cfg, mlp_layout(batchnorm=args.batchnorm))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for model, prov, task in zip(experts.models, experts.provenance, seq.tasks):
        fname = f"{prov.expert_id}.npz"
        save_model(out / fname, model)
        acc = accuracy(model, task.val, task.classes)
        entries.append({"file": fname, "expert_id": prov.expert_id, "task_id": prov.task_id,
                        "classes": list(task.classes), "parent": prov.parent, "init_digest": prov.init_digest,
                        "final_digest": prov.final_digest, "val_acc": acc})
        print(f"{prov.expert_id}\tclasses={task.classes}\tval_acc={acc:.4f}")
    (out / "experts.json").write_text(json.dumps({"split_seed": args.split_seed, "experts": entries}, indent=1))
    return 0


def cmd_merge(args) -> int:
    experts, meta = _load_experts(args.experts)
    if args.prior:
        msg = decode_msg(Path(args.prior).read_bytes())
        by_task = {e.task_id: e for e in msg.entries}
        importances = [ImportanceVector(by_task[t].values, "prior", by_task[t].sample_count)
                       for t in experts.task_ids]
    else:
        data = _data(args, "server")
        seq = make_numbers_tasks(data, meta["split_seed"])
        val = {t.task_id: t.val for t in seq.tasks}
        importances = []
        for model, t in zip(experts.models, experts.task_ids):
            if args.importance == "MAS":
                importances.append(estimate_mas(model, val[t].strip_labels()))
            else:
                importances.append(estimate_fim(model, val[t]))
    merged = mode_imm_merge(experts.models, importances, MergeSpec.uniform(len(experts)), experts.ids)
    save_model(args.out, merged.to_model())
    print(f"merged {len(experts)} experts -> {args.out}")
    return 0


def _user_data(args) -> LabeledSet:
    data = _data(args, "user")
    if args.transform:
        data = LabeledSet(apply_transform(data.images, args.transform, args.severity, args.seed),
                          data.labels, data.ids, name="user")
    return data


def cmd_adapt(args) -> int:
    model = load_model(args.model)
    data = _user_data(args)
    if args.mode == "AdaBN":
        out = adabn(model, data.strip_labels())
    else:
        out = adabn_s(model, data, TrainConfig(seed=args.seed))
    save_model(args.out, out)
    print(f"{args.mode} on {len(data)} samples -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    data = _user_data(args)
    labels = data.labels
    accs = []
    for t, classes in enumerate(NUMBERS_CLASSES, start=1):
        part = data.subset(np.flatnonzero(np.isin(labels, classes)))
        a = accuracy(model, part, classes)
        accs.append(a)
        print(f"task {t}\tclasses={classes}\tacc={a:.4f}")
    print(f"mean\t{np.mean(accs):.4f}")
    return 0


def cmd_corr(args) -> int:
    experts, meta = _load_experts(args.experts)
    data = _data(args, "server")
    seq = make_numbers_tasks(data, meta["split_seed"])
    a, b = args.tasks
    pos = {t: k for k, t in enumerate(experts.task_ids)}
    val = {t.task_id: t.val for t in seq.tasks}
    rows = importance_correlation_study(experts.models[pos[a]], experts.models[pos[b]], val[a], val[b],
                                        names=(f"M{a}", f"M{b}", f"D{a}", f"D{b}"))
    write_corr_csv(args.out, rows)
    for r in rows:
        print(f"{r.model}\t{r.data_a}\t{r.data_b}\t{r.rho_weights:.4f}\t{r.rho_biases:.4f}")
    return 0


def cmd_experiment(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    if args.output:
        cfg = ExperimentConfig(**{**cfg.__dict__, "output": args.output})
    result = run_experiment(cfg)
    print(f"{len(result.cells)} cells -> {result.csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dua", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the expert sequence on the Numbers tasks")
    _add_data_args(p)
    p.add_argument("--out", required=True, help="output directory for experts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batchnorm", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="merge experts with server or user importances")
    _add_data_args(p)
    p.add_argument("--experts", required=True)
    p.add_argument("--importance", choices=("MAS", "FIM"), default="MAS")
    p.add_argument("--prior", help="encoded user prior message; overrides --importance")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    for name, func, helptext in (("adapt", cmd_adapt, "adapt BN statistics to user data"),
                                 ("eval", cmd_eval, "per-task accuracy on user data")):
        p = sub.add_parser(name, help=helptext)
        _add_data_args(p)
        p.add_argument("--model", required=True)
        p.add_argument("--transform", choices=KINDS)
        p.add_argument("--severity", type=int, default=3)
        p.add_argument("--seed", type=int, default=0)
        if name == "adapt":
            p.add_argument("--mode", choices=("AdaBN", "AdaBN-S"), default="AdaBN")
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("corr", help="importance correlation study on two tasks")
    _add_data_args(p)
    p.add_argument("--experts", required=True)
    p.add_argument("--tasks", type=int, nargs=2, default=(1, 2))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corr)

    p = sub.add_parser("experiment", help="run a full experiment from a JSON config")
    p.add_argument("config")
    p.add_argument("--output", help="override the report path")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DuaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
