import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from meanfield_tools.core_model import DataDistribution, ParticleEnsemble, RunConfig
from meanfield_tools.exceptions import IntegrityError, InvalidInputError
from meanfield_tools.persistence import (
    canonical_json,
    digest_files,
    file_digest,
    load_config,
    load_dataset,
    load_matrices,
    payload_digest,
    plot_frame,
    read_frame,
    read_json,
    save_config,
    save_dataset,
    save_matrices,
    snapshot_frame,
    snapshots_from_frame,
    verify_files,
    write_frame,
)


class TestJson:
    def test_canonical_form_ignores_key_order(self):
        assert canonical_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'
        assert payload_digest({"b": 1, "a": 2}) == payload_digest({"a": 2, "b": 1})
        assert payload_digest({"a": 1}) != payload_digest({"a": 2})

    def test_read_errors(self, tmp_path: Path):
        with pytest.raises(InvalidInputError, match="not found"):
            read_json(tmp_path / "missing.json")
        broken = tmp_path / "broken.json"
        broken.write_text("{not json")
        with pytest.raises(InvalidInputError, match="Invalid JSON"):
            read_json(broken)

    def test_dataset_round_trip(self, tmp_path: Path):
        dist = DataDistribution.from_points([[0.2, 0.1], [-0.4, 0.3]], weights=[0.3, 0.7])
        path = save_dataset(tmp_path / "data.json", dist)
        restored = load_dataset(path)
        np.testing.assert_array_equal(restored.weights, dist.weights)
        np.testing.assert_array_equal(restored.x, dist.x)

    def test_config_round_trip(self, tmp_path: Path):
        config = RunConfig(width=128, alpha=0.25, seed=99)
        path = save_config(tmp_path / "nested" / "config.json", config)
        assert load_config(path).to_dict() == config.to_dict()

    def test_config_must_be_object(self, tmp_path: Path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps([1, 2, 3]))
        with pytest.raises(InvalidInputError, match="JSON object"):
            load_config(path)


class TestFrames:
    def test_floats_survive_round_trip(self, tmp_path: Path):
        values = np.array([1.0 / 3.0, np.pi * 1e-12, -2.5e7])
        path = write_frame(tmp_path / "values.csv", pd.DataFrame({"v": values}))
        np.testing.assert_array_equal(read_frame(path)["v"].to_numpy(), values)

    def test_read_missing_frame(self, tmp_path: Path):
        with pytest.raises(InvalidInputError):
            read_frame(tmp_path / "nothing.csv")

    def test_snapshot_round_trip(self, tmp_path: Path):
        first = ParticleEnsemble(np.array([0.1, 0.2]), np.array([[0.3, 0.4], [0.5, 0.6]]))
        second = ParticleEnsemble(np.array([-0.1, -0.2]), np.array([[0.0, 0.1], [0.2, 0.3]]))
        frame = snapshot_frame([0.0, 0.5], [first, second])
        assert list(frame.columns) == ["t", "i", "c", "w1", "w2"]
        path = write_frame(tmp_path / "snapshots.csv", frame)
        restored = snapshots_from_frame(read_frame(path))
        assert sorted(restored) == [0.0, 0.5]
        assert restored[0.5].same_particles(second)

    def test_snapshot_frame_validation(self):
        ens = ParticleEnsemble(np.zeros(2), np.zeros((2, 1)))
        with pytest.raises(InvalidInputError):
            snapshot_frame([0.0, 1.0], [ens])
        with pytest.raises(InvalidInputError):
            snapshots_from_frame(pd.DataFrame({"t": [0.0], "c": [1.0]}))

    def test_plot_frame_columns(self):
        frame = plot_frame([("lln", 100.0, 0.1, 0.01)])
        assert list(frame.columns) == ["series", "x", "y", "err"]


class TestMatricesAndDigests:
    def test_matrices_round_trip(self, tmp_path: Path):
        path = save_matrices(
            tmp_path / "system.npz",
            {"G": np.eye(2), "indices": np.array([[1, 1], [1, 2]])},
            {"modes": 2, "box": 4.5},
        )
        arrays, metadata = load_matrices(path)
        np.testing.assert_array_equal(arrays["G"], np.eye(2))
        assert metadata == {"modes": 2, "box": 4.5}

    def test_digests_detect_tampering(self, tmp_path: Path):
        (tmp_path / "a.csv").write_text("x\n1\n")
        (tmp_path / "b.csv").write_text("x\n2\n")
        digests = digest_files(tmp_path, ["b.csv", "a.csv"])
        assert list(digests) == ["a.csv", "b.csv"]
        assert digests["a.csv"] == file_digest(tmp_path / "a.csv")
        verify_files(tmp_path, digests)

        (tmp_path / "a.csv").write_text("x\n3\n")
        with pytest.raises(IntegrityError, match="Digest mismatch"):
            verify_files(tmp_path, digests)

        (tmp_path / "b.csv").unlink()
        with pytest.raises(IntegrityError, match="Missing data file"):
            verify_files(tmp_path, {"b.csv": digests["b.csv"]})
