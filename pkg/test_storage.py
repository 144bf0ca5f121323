import io
import json

import numpy as np
import pandas as pd
import pytest

from errors import ContractViolation
from models import BoundRecord, EpochRecord, ProfileReport, RunConfig, TrainLog
from services.graph import Graph, build_propagation, ring_with_chords
from services.loss import LabelSet
from services.model import build_model, forward
from storage import (
    RunStore,
    bound_records_frame,
    dump_json,
    frame_to_csv,
    read_edge_list,
    read_features_csv,
    read_labels_csv,
    train_log_frame,
    write_edge_list,
    write_features_csv,
    write_labels_csv,
)


def _log():
    records = [EpochRecord(epoch=e, loss=1.0 / (e + 1), epsilon_n=0.0, grad_norms=[0.5, 0.25],
                           spectral_norms=[1.0, 1.0]) for e in range(3)]
    return TrainLog(records=records)


class TestTables:
    def test_train_log_columns(self):
        frame = train_log_frame(_log())
        assert list(frame.columns) == ["epoch", "loss", "epsilon_n", "grad_norm_0", "grad_norm_1", "s_0", "s_1"]
        assert frame["loss"].tolist() == [1.0, 0.5, 1.0 / 3.0]

    def test_floats_keep_full_precision(self):
        text = frame_to_csv(train_log_frame(_log()))
        assert "0.33333333333333331" in text
        assert "\r" not in text
        assert pd.read_csv(io.StringIO(text))["loss"].iloc[2] == 1.0 / 3.0

    def test_bound_records(self):
        records = [BoundRecord(check="forward", k=2, depth=5, bound=1.0, measured=0.5, satisfied=True)]
        frame = bound_records_frame(records)
        assert frame.loc[0, "check"] == "forward"
        assert bool(frame.loc[0, "satisfied"]) is True
        assert json.loads(dump_json(records))[0]["k"] == 2

    def test_dump_json_of_a_model(self):
        report = ProfileReport(forward_energy=[1.0], backward_energy=[0.0], grad_norms=[0.0], spectral_norms=[1.0],
                               epsilon_n=0.0, loss=0.0)
        text = dump_json(report)
        assert text.endswith("\n")
        assert ProfileReport.model_validate_json(text) == report


class TestDatasetFiles:
    def test_edge_list(self, tmp_path, triangle):
        path = write_edge_list(triangle, tmp_path / "data" / "graph.txt")
        assert path.read_text().splitlines()[0] == "# n=3 edges=3"
        assert read_edge_list(path) == triangle

    def test_features(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((5, 2))
        path = write_features_csv(x, tmp_path / "features.csv")
        assert path.read_text().splitlines()[0] == "node_id,x_0,x_1"
        np.testing.assert_array_equal(read_features_csv(path), x)

    def test_every_float_reads_back_exactly(self, tmp_path):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((200, 3)) * np.exp(rng.uniform(-30, 30, (200, 3)))
        np.testing.assert_array_equal(read_features_csv(write_features_csv(x, tmp_path / "f.csv")), x)
        y = rng.standard_normal((200, 2))
        back = read_labels_csv(write_labels_csv(LabelSet.regression(y), tmp_path / "y.csv"))
        np.testing.assert_array_equal(back.targets, y)

    def test_features_need_every_node(self, tmp_path):
        path = tmp_path / "features.csv"
        path.write_text("node_id,x_0\n0,1.0\n2,3.0\n")
        with pytest.raises(ContractViolation, match="node ids"):
            read_features_csv(path)

    def test_class_labels_with_mask(self, tmp_path):
        labels = LabelSet.classification(np.array([0, 1, 2, 1]), num_classes=3, mask=[True, False, True, True])
        path = write_labels_csv(labels, tmp_path / "labels.csv")
        assert path.read_text().splitlines()[0] == "node_id,label,mask"
        back = read_labels_csv(path, num_classes=3)
        assert back.kind == "classification"
        np.testing.assert_array_equal(back.classes, labels.classes)
        np.testing.assert_array_equal(back.mask, labels.mask)

    def test_regression_labels(self, tmp_path):
        y = np.array([[0.5, -0.5], [0.0, 1.0], [-0.25, 0.25]])
        path = write_labels_csv(LabelSet.regression(y), tmp_path / "labels.csv")
        back = read_labels_csv(path)
        assert back.kind == "regression"
        np.testing.assert_array_equal(back.targets, y)
        assert back.mask is None

    def test_labels_need_values(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("node_id,other\n0,1\n")
        with pytest.raises(ContractViolation, match="'label' column"):
            read_labels_csv(path)


class TestCheckpoints:
    def test_round_trip(self, tmp_path, ring12):
        model = build_model(3, 4, 3, 2, ring12, activation="tanh", seed=5)
        store = RunStore(tmp_path)
        path = store.save_checkpoint(model, tmp_path / "ckpt" / "model.json")
        loaded = store.load_checkpoint(path, ring12)
        assert loaded.dims == model.dims
        assert loaded.activation.kind == "tanh"
        x0 = np.random.default_rng(0).standard_normal((12, 3))
        np.testing.assert_array_equal(forward(loaded, x0).output, forward(model, x0).output)

    def test_mlp_checkpoint_needs_no_graph(self, tmp_path):
        model = build_model(2, 3, 2, 1, None, seed=1)
        store = RunStore(tmp_path)
        loaded = store.load_checkpoint(store.save_checkpoint(model, tmp_path / "mlp.json"))
        assert loaded.is_mlp

    def test_propagation_must_match(self, tmp_path, ring12):
        store = RunStore(tmp_path)
        path = store.save_checkpoint(build_model(3, 4, 2, 1, ring12, seed=0), tmp_path / "model.json")
        with pytest.raises(ContractViolation, match="supply the same graph"):
            store.load_checkpoint(path)
        other = build_propagation(ring_with_chords(12, chord_step=5))
        with pytest.raises(ContractViolation, match="does not match"):
            store.load_checkpoint(path, other)

    def test_corrupt_files(self, tmp_path):
        store = RunStore(tmp_path)
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ContractViolation, match="not a checkpoint"):
            store.load_checkpoint(bad)
        bad.write_text(json.dumps({"layout": "column-major"}))
        with pytest.raises(ContractViolation, match="layout"):
            store.load_checkpoint(bad)


class TestRunStore:
    def test_hash_is_deterministic(self):
        assert RunStore.content_hash(RunConfig(seed=3)) == RunStore.content_hash(RunConfig(seed=3))
        assert RunStore.content_hash(RunConfig(seed=3)) != RunStore.content_hash(RunConfig(seed=4))

    def test_run_layout(self, tmp_path):
        store = RunStore(tmp_path)
        config = RunConfig(depth=2, epochs=3)
        run_dir = store.create_run(config)
        assert run_dir == tmp_path / RunStore.content_hash(config)
        assert RunConfig.model_validate_json((run_dir / "config.json").read_text()) == config

        log = _log()
        log.snapshots[0] = ProfileReport(forward_energy=[1.0, 0.5], backward_energy=[0.1, 0.2],
                                         grad_norms=[0.3, 0.4], spectral_norms=[1.0, 1.0], epsilon_n=0.0, loss=0.7)
        store.write_log(run_dir, log)
        paths = store.write_profiles(run_dir, log)
        assert [p.name for p in paths] == ["epoch_00000.csv"]
        assert pd.read_csv(paths[0])["k"].tolist() == [0, 1]
        assert pd.read_csv(run_dir / "log.csv")["epoch"].tolist() == [0, 1, 2]

        prefixed = store.write_profiles(run_dir, log, prefix="gnn_deep_")
        assert prefixed[0].name == "gnn_deep_epoch_00000.csv"

    def test_graph_equality_survives_files(self, tmp_path):
        g = Graph.from_pairs(4, [(2, 3), (0, 1), (1, 2)])
        assert read_edge_list(write_edge_list(g, tmp_path / "g.txt")).sorted_edges() == [(0, 1), (1, 2), (2, 3)]
