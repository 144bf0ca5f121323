import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from errors import ContractViolation, LabError, RegimeError, UsageError
from models import DepthContrastConfig, InitProfileConfig, RunConfig, SweepConfig, StationarityConditionsReport
from services import bounds
from services.backprop import backward, finite_difference_gradients, gradients, grad_check
from services.constructions import (
    constant_gradient_gnn,
    mlp_counterexample,
    rademacher_labels,
    spurious_stationary_gnn,
)
from services.graph import (
    CsbmSample,
    PropagationMatrix,
    build_propagation,
    csbm_generate,
    largest_component,
    ring_with_chords,
)
from services.loss import LabelSet
from services.metrics import profile, stationarity
from services.model import build_model, forward
from services.rng import stream
from services.trainer import (
    Trainer,
    contrast_model,
    experiment_bound_sweep,
    experiment_depth_contrast,
    experiment_init_profile,
    init_profile_instance,
    with_constant_feature,
)
from storage import (
    RunStore,
    bound_records_frame,
    dump_json,
    frame_to_csv,
    input_hash,
    profile_frame,
    read_edge_list,
    read_features_csv,
    read_labels_csv,
    write_csv,
    write_edge_list,
    write_features_csv,
    write_labels_csv,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DEFAULT_LOG_LEVEL = os.environ.get("OVERSMOOTH_LOG_LEVEL", "INFO")

# 1 - lambda reported for the largest components of the two citation graphs
REFERENCE_GAPS = {"cora": 8.81e-5, "citeseer": 6.58e-5}

# short names accepted for the constructions
CONSTRUCTION_ALIASES = {
    "prop32": "constant-gradient",
    "cor42": "spurious-stationary",
    "prop42": "mlp-contrast",
}
CONSTRUCTIONS = ["constant-gradient", "spurious-stationary", "mlp-contrast"]

# RunConfig fields settable from the command line: flag -> (field, type)
CONFIG_FLAGS = {
    "--n": ("n", int),
    "--p-in": ("p_in", float),
    "--p-out": ("p_out", float),
    "--d": ("d", int),
    "--mu": ("mu", float),
    "--depth": ("depth", int),
    "--width": ("width", int),
    "--activation": ("activation", str),
    "--init-scheme": ("init_scheme", str),
    "--std-scale": ("std_scale", float),
    "--target-spectral-norm": ("target_spectral_norm", float),
    "--task": ("task", str),
    "--divisor-slack": ("divisor_slack", float),
    "--epochs": ("epochs", int),
    "--learning-rate": ("learning_rate", float),
    "--data-dir": ("data_dir", str),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--config", help="flat JSON RunConfig; explicit flags override it")
    common.add_argument("--format", choices=["json", "csv"], default="json", help="report format")
    common.add_argument("--log-level", default=DEFAULT_LOG_LEVEL)
    common.add_argument("--out", help="output file (reports) or directory (runs, data)")
    for flag, (_, kind) in CONFIG_FLAGS.items():
        common.add_argument(flag, type=kind)
    common.add_argument("--snapshot-epochs", type=int, nargs="+")
    common.add_argument("--mlp", action="store_true")
    common.add_argument("--normalize-by-labeled", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = _Parser(prog="oversmooth", description="Forward and backward oversmoothing lab for vanilla GNNs")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    gen = sub.add_parser("gen", parents=[common], help="generate a CSBM dataset or ingest an edge list")
    gen.add_argument("--edge-list", help="edge-list file to restrict to its largest component")

    train = sub.add_parser("train", parents=[common], help="train with full-batch gradient descent")
    train.add_argument("--experiment", choices=["depth-contrast", "init-profile"], help="run a canned experiment instead")
    train.add_argument("--workers", type=int, default=1)

    prof = sub.add_parser("profile", parents=[common], help="per-layer energies and gradients")
    prof.add_argument("--checkpoint", help="checkpoint written by train (default: fresh initialisation)")

    bnd = sub.add_parser("bounds", parents=[common], help="evaluate the oversmoothing bounds")
    bnd.add_argument("--sweep", action="store_true", help="run the depth/alpha/task sweep")
    bnd.add_argument("--depths", type=int, nargs="+", default=[5, 10, 20, 40])
    bnd.add_argument("--alphas", type=float, nargs="+", default=[0.0, 0.1])
    bnd.add_argument("--beta", type=float, default=0.5)
    bnd.add_argument("--c", type=float, default=None, help="stationarity constant (default: calibrated)")
    bnd.add_argument("--case", default="lower-bounded-output",
                     choices=["lower-bounded-output", "balanced-regression", "balanced-classification"])
    bnd.add_argument("--delta", type=float, default=0.1)
    bnd.add_argument("--delta-bar", type=float, default=1e-3)
    bnd.add_argument("--d-f", type=float, default=None)
    bnd.add_argument("--nu", type=float, default=0.05)

    ce = sub.add_parser("counterexample", parents=[common], help="exact constructions")
    ce.add_argument("which", choices=CONSTRUCTIONS + list(CONSTRUCTION_ALIASES))
    ce.add_argument("--k-zero", type=int, default=None)
    ce.add_argument("--graph", choices=["csbm", "ring"], default="csbm",
                    help="constant-gradient: seeded CSBM graph (needs even n) or the seedless ring")
    ce.add_argument("--with-graph", action="store_true", help="mlp-contrast: also run the weights with a graph")

    gc = sub.add_parser("gradcheck", parents=[common], help="backprop against finite differences")
    gc.add_argument("--step", type=float, default=1e-5)
    gc.add_argument("--dump-grads", help="CSV file for per-entry gradients")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    data = {}
    path = getattr(args, "config", None)
    if path is not None:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}")
    for flag, (field, _) in CONFIG_FLAGS.items():
        dest = flag[2:].replace("-", "_")
        if hasattr(args, dest):
            data[field] = getattr(args, dest)
    for field in ("seed", "snapshot_epochs", "mlp", "normalize_by_labeled"):
        if hasattr(args, field):
            data[field] = getattr(args, field)
    if getattr(args, "experiment", None) is not None:
        data["experiment"] = args.experiment
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise UsageError(f"invalid configuration: {e}")


# --- data ----------------------------------------------------------------------

def load_dataset(config: RunConfig) -> Tuple[CsbmSample, PropagationMatrix]:
    """The run's data: a CSBM draw or the files written by ``gen``."""
    if config.data_dir is None:
        sample = csbm_generate(config.csbm(), config.seed)
    else:
        root = Path(config.data_dir)
        graph = read_edge_list(root / "edges.txt")
        features = read_features_csv(root / "features.csv")
        labels = read_labels_csv(root / "labels.csv")
        if features.shape[0] != graph.n:
            raise UsageError(f"{root}: features cover {features.shape[0]} nodes, graph has {graph.n}")
        classes = labels.classes if labels.kind == "classification" else np.zeros(graph.n, dtype=np.int64)
        sample = CsbmSample(graph=graph, features=features, labels=classes,
                            kept_nodes=np.arange(graph.n), n_drawn=graph.n)
    return sample, build_propagation(sample.graph, config.divisor_slack)


def task_labels(config: RunConfig, sample: CsbmSample) -> LabelSet:
    if config.task == "classification":
        return LabelSet.classification(sample.labels, num_classes=max(2, int(sample.labels.max()) + 1),
                                       normalize_by_labeled=config.normalize_by_labeled)
    if config.data_dir is not None:
        return read_labels_csv(Path(config.data_dir) / "labels.csv",
                               normalize_by_labeled=config.normalize_by_labeled)
    return rademacher_labels(sample.graph.n, config.seed, balanced=True)


def small_instance(config: RunConfig):
    """Ring-with-chords graph with Gaussian features, sized for the gradient oracle."""
    graph = ring_with_chords(config.n)
    prop = build_propagation(graph, config.divisor_slack)
    x0 = stream(config.seed, "csbm-features").standard_normal((config.n, config.d))
    if config.task == "classification":
        labels = LabelSet.classification(np.arange(config.n) % 2, num_classes=2)
    else:
        labels = rademacher_labels(config.n, config.seed, balanced=True)
    return prop, x0, labels


def _model_for(config: RunConfig, d_in: int, labels: LabelSet, prop: Optional[PropagationMatrix]):
    return build_model(d_in, config.width, config.depth, labels.d_out, None if config.mlp else prop,
                       activation=config.activation, scheme=config.init_scheme, std_scale=config.std_scale,
                       target_spectral_norm=config.target_spectral_norm, seed=config.seed)


# --- output --------------------------------------------------------------------

def emit(args, text: str) -> None:
    out = getattr(args, "out", None)
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


# --- commands ------------------------------------------------------------------

def cmd_gen(args, config: RunConfig) -> int:
    out = Path(getattr(args, "out", None) or Path(RunStore().root) / "data")
    if getattr(args, "edge_list", None):
        graph = read_edge_list(args.edge_list)
        component = largest_component(graph)
        prop = build_propagation(component, config.divisor_slack)
        summary = {"n": component.n, "n_input": graph.n, "edges": len(component.edges),
                   "lambda": prop.lam, "gap": prop.gap}
        name = Path(args.edge_list).name.lower()
        for dataset, reference in REFERENCE_GAPS.items():
            if dataset in name:
                logger.info("%s: gap %.3e vs reported %.3e (divisor slack %.3g)",
                            dataset, prop.gap, reference, config.divisor_slack)
        write_edge_list(component, out / "edges.txt")
    else:
        sample = csbm_generate(config.csbm(), config.seed)
        prop = build_propagation(sample.graph, config.divisor_slack)
        write_edge_list(sample.graph, out / "edges.txt")
        write_features_csv(sample.features, out / "features.csv")
        write_labels_csv(LabelSet.classification(sample.labels, num_classes=2), out / "labels.csv")
        summary = {"n": sample.graph.n, "n_drawn": sample.n_drawn, "edges": len(sample.graph.edges),
                   "lambda": prop.lam, "gap": prop.gap}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    return 0


def _with_input_hash(config: RunConfig, sample: CsbmSample, prop: PropagationMatrix) -> RunConfig:
    digest = input_hash(None if config.mlp else prop, sample.features, sample.labels)
    if config.input_hash is not None and config.input_hash != digest:
        raise ContractViolation(f"inputs changed since the run was recorded: hash {digest}, "
                                f"config says {config.input_hash}")
    return config.model_copy(update={"input_hash": digest})


def _write_bounds(store: RunStore, run_dir: Path, model, x0: np.ndarray, labels: LabelSet) -> Path:
    try:
        records = bounds.instance_bound_records(model, x0, labels)
    except RegimeError as e:
        logger.info("No bound records for %s: %s", run_dir.name, e)
        records = []
    return store.write_bounds(run_dir, records)


def cmd_train(args, config: RunConfig) -> int:
    store = RunStore(getattr(args, "out", None))
    sample, prop = load_dataset(config)
    config = _with_input_hash(config, sample, prop)
    run_dir = store.create_run(config)

    if config.experiment == "depth-contrast":
        contrast = DepthContrastConfig(csbm=config.csbm(), seed=config.seed, epochs=config.epochs,
                                       learning_rate=config.learning_rate, workers=args.workers)
        logs, summary = experiment_depth_contrast(contrast, sample, prop)
        for name, log in logs.items():
            store.write_log(run_dir, log, name=f"log_{name}.csv")
            store.write_profiles(run_dir, log, prefix=f"{name}_")
        store.write_json(run_dir, "summary.json", summary)
        labels = LabelSet.classification(sample.labels, num_classes=2)
        x0 = with_constant_feature(sample.features, contrast.constant_feature)
        deep = contrast_model(contrast, x0.shape[1], labels.d_out, contrast.deep_depth, prop)
        _write_bounds(store, run_dir, deep, x0, labels)
    elif config.experiment == "init-profile":
        init = InitProfileConfig(csbm=config.csbm(), seed=config.seed, depth=config.depth, width=config.width,
                                 activation=config.activation, task=config.task,
                                 target_spectral_norm=config.target_spectral_norm or 1.0)
        report = experiment_init_profile(init, sample, prop)
        store.write_profile(run_dir, "init", report)
        store.write_json(run_dir, "profile.json", report)
        _write_bounds(store, run_dir, *init_profile_instance(init, sample, prop))
    else:
        labels = task_labels(config, sample)
        model = _model_for(config, sample.features.shape[1], labels, prop)
        log = Trainer().train(model, sample.features, labels, config.train_config())
        store.write_log(run_dir, log)
        store.write_profiles(run_dir, log)
        store.save_checkpoint(model, run_dir / "checkpoint.json")
        _write_bounds(store, run_dir, model, sample.features, labels)
    sys.stdout.write(f"{run_dir}\n")
    return 0


def cmd_profile(args, config: RunConfig) -> int:
    sample, prop = load_dataset(config)
    labels = task_labels(config, sample)
    if getattr(args, "checkpoint", None):
        model = RunStore().load_checkpoint(args.checkpoint, None if config.mlp else prop)
    else:
        model = _model_for(config, sample.features.shape[1], labels, prop)
    trace = forward(model, sample.features)
    report = profile(model, trace, backward(model, trace, labels), labels)
    emit(args, frame_to_csv(profile_frame(report)) if args.format == "csv" else dump_json(report))
    return 0


def cmd_bounds(args, config: RunConfig) -> int:
    if args.sweep:
        sweep = SweepConfig(csbm=config.csbm(), seed=config.seed, depths=args.depths, alphas=args.alphas,
                            width=config.width, activation=config.activation, beta=args.beta,
                            stationarity_constant=args.c)
        sample, prop = load_dataset(config)
        report = experiment_bound_sweep(sweep, sample, prop)
        emit(args, frame_to_csv(bound_records_frame(report.records)) if args.format == "csv" else dump_json(report))
        return 0

    sample, prop = load_dataset(config)
    labels = task_labels(config, sample)
    model = _model_for(config, sample.features.shape[1], labels, prop)
    x0 = sample.features
    records = bounds.instance_bound_records(model, x0, labels, args.c)
    if args.format == "csv":
        emit(args, frame_to_csv(bound_records_frame(records)))
        return 0

    inputs = bounds.BoundInputs.from_instance(model, x0, labels)
    trace = forward(model, x0)
    d_f = args.d_f if args.d_f is not None else float(np.linalg.norm(trace.f[-1]) / np.sqrt(x0.shape[0]))
    conditions: StationarityConditionsReport = bounds.stationarity_conditions_report(
        inputs, args.case, args.delta, args.delta_bar, d_f=d_f, nu=args.nu, constant=args.c or 1.0)
    payload = {
        "inputs": inputs.as_dict(),
        "records": json.loads(dump_json(records)),
        "exponents": bounds.middle_layer_exponents(inputs, args.beta).model_dump(),
        "stationarity_conditions": conditions.model_dump(),
        "stationarity": stationarity(backward(model, trace, labels), args.delta).model_dump(),
    }
    emit(args, json.dumps(payload, indent=2) + "\n")
    return 0


def cmd_counterexample(args, config: RunConfig) -> int:
    seed = config.seed
    which = CONSTRUCTION_ALIASES.get(args.which, args.which)
    if which == "constant-gradient":
        construction = constant_gradient_gnn(config.n, config.depth, seed=seed if args.graph == "csbm" else None)
    elif which == "mlp-contrast":
        k_zero = args.k_zero if args.k_zero is not None else config.depth - 1
        prop = build_propagation(ring_with_chords(config.n)) if args.with_graph else None
        construction = mlp_counterexample(config.n, config.depth, k_zero, seed, propagation=prop)
    else:
        sample, prop = load_dataset(config)
        labels = rademacher_labels(sample.graph.n, seed, balanced=True)
        model = build_model(sample.features.shape[1], config.width, config.depth, 1, prop,
                            activation=config.activation, scheme=config.init_scheme,
                            target_spectral_norm=config.target_spectral_norm, seed=seed)
        construction = spurious_stationary_gnn(model, sample.features, labels)
    emit(args, dump_json(construction.report))
    return 0


def cmd_gradcheck(args, config: RunConfig) -> int:
    prop, x0, labels = small_instance(config)
    model = _model_for(config, x0.shape[1], labels, prop)
    report = grad_check(model, x0, labels, step=args.step)
    if getattr(args, "dump_grads", None):
        exact = gradients(model, x0, labels).grads
        approx = finite_difference_gradients(model, x0, labels, step=args.step)
        rows = [{"layer": k, "row": i, "col": j, "backprop": a[i, j], "finite_difference": b[i, j]}
                for k, (a, b) in enumerate(zip(exact, approx)) for i, j in np.ndindex(*a.shape)]
        write_csv(pd.DataFrame(rows, columns=["layer", "row", "col", "backprop", "finite_difference"]),
                  args.dump_grads)
    emit(args, dump_json(report))
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "profile": cmd_profile,
    "bounds": cmd_bounds,
    "counterexample": cmd_counterexample,
    "gradcheck": cmd_gradcheck,
}


def run(argv: Optional[List[str]] = None) -> int:
    """CLI entry point; returns 0 on success, 1 on a lab error, 2 on a usage error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(args, "log_level", DEFAULT_LOG_LEVEL).upper(), format=LOG_FORMAT)
        config = load_config(args)
        return COMMANDS[args.command](args, config)
    except UsageError as e:
        sys.stderr.write(f"usage error: {e}\n")
        return 2
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except ValidationError as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except LabError as e:
        logger.error("%s", e)
        sys.stderr.write(f"error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(run())
