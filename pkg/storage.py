import base64
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, TypeAdapter

from errors import ContractViolation
from models import BoundRecord, ProfileReport, RunConfig, TrainLog
from services.graph import Graph, PropagationMatrix, from_edge_list, to_edge_list
from services.loss import LabelSet
from services.model import Activation, GnnModel

logger = logging.getLogger(__name__)

RUNS_DIR = os.environ.get("OVERSMOOTH_RUNS_DIR", "runs")
FLOAT_FORMAT = "%.17g"
CHECKPOINT_LAYOUT = "layer-major"

PathLike = Union[str, Path]


# --- tables ------------------------------------------------------------------

def write_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    """Write a frame with full float precision and fixed line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(frame_to_csv(frame), encoding="utf-8")
    return path


def frame_to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def train_log_frame(log: TrainLog) -> pd.DataFrame:
    layers = len(log.records[0].grad_norms) if log.records else 0
    rows = []
    for r in log.records:
        row = {"epoch": r.epoch, "loss": r.loss, "epsilon_n": r.epsilon_n}
        row.update({f"grad_norm_{k}": g for k, g in enumerate(r.grad_norms)})
        row.update({f"s_{k}": s for k, s in enumerate(r.spectral_norms)})
        rows.append(row)
    columns = ["epoch", "loss", "epsilon_n"] + [f"grad_norm_{k}" for k in range(layers)] + [f"s_{k}" for k in range(layers)]
    return pd.DataFrame(rows, columns=columns)


def profile_frame(report: ProfileReport) -> pd.DataFrame:
    return pd.DataFrame({
        "k": range(report.depth + 1),
        "forward_energy": report.forward_energy,
        "backward_energy": report.backward_energy,
        "grad_norm": report.grad_norms,
        "spectral_norm": report.spectral_norms,
    })


_RECORDS = TypeAdapter(List[BoundRecord])


def dump_json(value: Union[BaseModel, Sequence[BoundRecord]]) -> str:
    if isinstance(value, BaseModel):
        return value.model_dump_json(indent=2) + "\n"
    return _RECORDS.dump_json(list(value), indent=2).decode("utf-8") + "\n"


def bound_records_frame(records: Sequence[BoundRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"check": r.check, "task": r.task, "alpha": r.alpha, "depth": r.depth, "k": r.k,
          "bound": r.bound, "measured": r.measured, "satisfied": r.satisfied} for r in records],
        columns=["check", "task", "alpha", "depth", "k", "bound", "measured", "satisfied"],
    )


# --- dataset files -------------------------------------------------------------

def read_edge_list(path: PathLike) -> Graph:
    return from_edge_list(Path(path).read_text(encoding="utf-8"))


def write_edge_list(graph: Graph, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_edge_list(graph), encoding="utf-8")
    return path


def write_features_csv(features: np.ndarray, path: PathLike) -> Path:
    frame = pd.DataFrame(features, columns=[f"x_{j}" for j in range(features.shape[1])])
    frame.insert(0, "node_id", range(features.shape[0]))
    return write_csv(frame, path)


def read_features_csv(path: PathLike) -> np.ndarray:
    frame = pd.read_csv(path, float_precision="round_trip").sort_values("node_id")
    _check_node_ids(frame, path)
    return frame.drop(columns=["node_id"]).to_numpy(dtype=np.float64)


def write_labels_csv(labels: LabelSet, path: PathLike) -> Path:
    if labels.kind == "classification":
        frame = pd.DataFrame({"node_id": range(labels.n), "label": labels.classes})
    else:
        frame = pd.DataFrame(labels.targets, columns=[f"y_{j}" for j in range(labels.d_out)])
        frame.insert(0, "node_id", range(labels.n))
    if labels.mask is not None:
        frame["mask"] = labels.mask.astype(int)
    return write_csv(frame, path)


def read_labels_csv(path: PathLike, num_classes: Optional[int] = None,
                    normalize_by_labeled: bool = False) -> LabelSet:
    """node_id,label for classes or node_id,y_0..y_{d-1} for regression; optional mask column."""
    frame = pd.read_csv(path, float_precision="round_trip").sort_values("node_id")
    _check_node_ids(frame, path)
    mask = frame["mask"].to_numpy().astype(bool) if "mask" in frame.columns else None
    if "label" in frame.columns:
        return LabelSet.classification(frame["label"].to_numpy(dtype=np.int64), num_classes, mask=mask,
                                       normalize_by_labeled=normalize_by_labeled)
    targets = [c for c in frame.columns if c.startswith("y_")]
    if not targets:
        raise ContractViolation(f"{path}: labels file needs a 'label' column or y_0.. columns")
    return LabelSet.regression(frame[targets].to_numpy(dtype=np.float64), mask=mask,
                               normalize_by_labeled=normalize_by_labeled)


def _check_node_ids(frame: pd.DataFrame, path) -> None:
    if "node_id" not in frame.columns:
        raise ContractViolation(f"{path}: missing node_id column")
    if not np.array_equal(frame["node_id"].to_numpy(), np.arange(len(frame))):
        raise ContractViolation(f"{path}: node ids must be exactly 0..{len(frame) - 1}")


# --- checkpoints ---------------------------------------------------------------

def checkpoint_payload(model: GnnModel) -> dict:
    blob = b"".join(np.ascontiguousarray(w, dtype="<f8").tobytes() for w in model.weights)
    return {
        "dims": model.dims,
        "activation": model.activation.kind,
        "seed": model.seed,
        "propagation": "identity" if model.is_mlp else model.propagation.content_hash(),
        "layout": CHECKPOINT_LAYOUT,
        "weights": base64.b64encode(blob).decode("ascii"),
    }


def model_from_payload(payload: dict, propagation: Optional[PropagationMatrix] = None) -> GnnModel:
    if payload.get("layout") != CHECKPOINT_LAYOUT:
        raise ContractViolation(f"unsupported checkpoint layout {payload.get('layout')!r}")
    expected = payload["propagation"]
    if expected == "identity":
        propagation = None
    elif propagation is None:
        raise ContractViolation("checkpoint was saved with a propagation matrix; supply the same graph")
    elif propagation.content_hash() != expected:
        raise ContractViolation("propagation matrix does not match the checkpoint hash")

    dims = payload["dims"]
    flat = np.frombuffer(base64.b64decode(payload["weights"]), dtype="<f8")
    sizes = [a * b for a, b in zip(dims[:-1], dims[1:])]
    if flat.size != sum(sizes):
        raise ContractViolation(f"checkpoint holds {flat.size} weights, dims {dims} need {sum(sizes)}")
    weights, offset = [], 0
    for (a, b), size in zip(zip(dims[:-1], dims[1:]), sizes):
        weights.append(flat[offset:offset + size].reshape(a, b).astype(np.float64))
        offset += size
    return GnnModel(weights=weights, activation=Activation(payload["activation"]),
                    propagation=propagation, seed=payload.get("seed"))


# --- run directories -----------------------------------------------------------

def input_hash(propagation: Optional[PropagationMatrix], features: np.ndarray, labels: np.ndarray) -> str:
    """SHA-256 over P, the features and the labels as little-endian bytes."""
    digest = hashlib.sha256()
    digest.update((propagation.content_hash() if propagation is not None else "identity").encode("ascii"))
    digest.update(np.ascontiguousarray(features, dtype="<f8").tobytes())
    digest.update(np.ascontiguousarray(labels, dtype="<f8").tobytes())
    return digest.hexdigest()[:16]


class RunStore:
    """One directory per run, named by the content hash of its configuration."""

    def __init__(self, root: Optional[PathLike] = None):
        self.root = Path(root if root is not None else RUNS_DIR)

    @staticmethod
    def content_hash(config: RunConfig) -> str:
        return hashlib.sha256(config.model_dump_json().encode("utf-8")).hexdigest()[:16]

    def run_dir(self, config: RunConfig) -> Path:
        return self.root / self.content_hash(config)

    def create_run(self, config: RunConfig) -> Path:
        """Create the run directory and write its config sidecar."""
        run_dir = self.run_dir(config)
        (run_dir / "profiles").mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")
        logger.info("Run directory %s", run_dir)
        return run_dir

    def write_log(self, run_dir: Path, log: TrainLog, name: str = "log.csv") -> Path:
        return write_csv(train_log_frame(log), run_dir / name)

    def write_profile(self, run_dir: Path, label: Union[int, str], report: ProfileReport) -> Path:
        name = f"epoch_{label:05d}.csv" if isinstance(label, int) else f"{label}.csv"
        return write_csv(profile_frame(report), run_dir / "profiles" / name)

    def write_profiles(self, run_dir: Path, log: TrainLog, prefix: str = "") -> List[Path]:
        paths = []
        for epoch in sorted(log.snapshots):
            label = f"{prefix}epoch_{epoch:05d}" if prefix else epoch
            paths.append(self.write_profile(run_dir, label, log.snapshots[epoch]))
        return paths

    def write_bounds(self, run_dir: Path, records: Sequence[BoundRecord]) -> Path:
        path = run_dir / "bounds.json"
        path.write_text(dump_json(list(records)), encoding="utf-8")
        return path

    def write_json(self, run_dir: Path, name: str, value: BaseModel) -> Path:
        path = run_dir / name
        path.write_text(dump_json(value), encoding="utf-8")
        return path

    def save_checkpoint(self, model: GnnModel, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(checkpoint_payload(model), indent=2) + "\n", encoding="utf-8")
        return path

    def load_checkpoint(self, path: PathLike, propagation: Optional[PropagationMatrix] = None) -> GnnModel:
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ContractViolation(f"{path}: not a checkpoint file ({e})")
        return model_from_payload(payload, propagation)
