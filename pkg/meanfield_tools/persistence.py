"""File formats: JSON configs, columnar CSV via pandas, npz matrix archives
and SHA-256 digests for manifests.
"""

import hashlib
import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .constants import CSV_FLOAT_FORMAT
from .core_model import DataDistribution, ParticleEnsemble, RunConfig
from .exceptions import IntegrityError, InvalidInputError

logger = logging.getLogger(__name__)


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def payload_digest(payload: Any) -> str:
    """SHA-256 of the canonical JSON form of ``payload``."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidInputError(f"File not found: {path}") from None
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"Invalid JSON in {path}: {e}") from e


def load_dataset(path: Path) -> DataDistribution:
    payload = read_json(path)
    if not isinstance(payload, dict):
        raise InvalidInputError(f"Dataset file {path} must hold a JSON object")
    return DataDistribution.from_dict(payload)  # type: ignore[arg-type]


def save_dataset(path: Path, dist: DataDistribution) -> Path:
    return write_json(path, dist.to_dict())


def load_config(path: Path) -> RunConfig:
    payload = read_json(path)
    if not isinstance(payload, dict):
        raise InvalidInputError(f"Config file {path} must hold a JSON object")
    return RunConfig.from_dict(payload)  # type: ignore[arg-type]


def save_config(path: Path, config: RunConfig) -> Path:
    return write_json(path, config.to_dict())


def write_frame(path: Path, frame: pd.DataFrame) -> Path:
    """CSV with round-trip float precision and a fixed row order."""
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return path


def read_frame(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise InvalidInputError(f"File not found: {path}")
    return pd.read_csv(path, float_precision="round_trip")


def snapshot_frame(times: Sequence[float], snapshots: Sequence[ParticleEnsemble]) -> pd.DataFrame:
    """Columns t, i, c, w1..wd; one row per particle per snapshot."""
    if len(times) != len(snapshots):
        raise InvalidInputError("Need one snapshot per time")
    frames: list[pd.DataFrame] = []
    for t, ens in zip(times, snapshots):
        columns: dict[str, Any] = {
            "t": np.full(ens.size, float(t)),
            "i": np.arange(ens.size),
            "c": ens.c,
        }
        for j in range(ens.input_dim):
            columns[f"w{j + 1}"] = ens.w[:, j]
        frames.append(pd.DataFrame(columns))
    return pd.concat(frames, ignore_index=True)


def snapshots_from_frame(frame: pd.DataFrame) -> dict[float, ParticleEnsemble]:
    w_columns = sorted(
        (name for name in frame.columns if str(name).startswith("w")),
        key=lambda name: int(str(name)[1:]),
    )
    if "c" not in frame.columns or not w_columns:
        raise InvalidInputError("Snapshot file needs columns t, i, c, w1..wd")
    result: dict[float, ParticleEnsemble] = {}
    for t, group in frame.groupby("t", sort=True):
        ordered = group.sort_values("i")
        result[float(t)] = ParticleEnsemble(  # type: ignore[arg-type]
            ordered["c"].to_numpy(dtype=np.float64),
            ordered[w_columns].to_numpy(dtype=np.float64),
        )
    return result


def plot_frame(rows: Iterable[tuple[str, float, float, float]]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=["series", "x", "y", "err"])


def save_matrices(path: Path, arrays: Mapping[str, Any], metadata: Mapping[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {name: np.asarray(value) for name, value in arrays.items()}
    payload["metadata"] = np.array(canonical_json(dict(metadata)))
    with open(path, "wb") as handle:
        np.savez(handle, **payload)  # type: ignore[arg-type]
    return path


def load_matrices(path: Path) -> tuple[dict[str, Any], dict[str, Any]]:
    if not path.exists():
        raise InvalidInputError(f"File not found: {path}")
    with np.load(path) as archive:
        arrays = {name: archive[name] for name in archive.files if name != "metadata"}
        metadata = json.loads(str(archive["metadata"])) if "metadata" in archive.files else {}
    return arrays, metadata


def digest_files(root: Path, relative: Iterable[str]) -> dict[str, str]:
    return {name: file_digest(root / name) for name in sorted(relative)}


def verify_files(root: Path, expected: Mapping[str, str]) -> None:
    """Raise IntegrityError on any missing file or digest mismatch."""
    for name, digest in sorted(expected.items()):
        path = root / name
        if not path.exists():
            raise IntegrityError(f"Missing data file: {name}")
        actual = file_digest(path)
        if actual != digest:
            raise IntegrityError(f"Digest mismatch for {name}: expected {digest[:12]}, got {actual[:12]}")
    logger.debug("Verified %d files under %s", len(expected), root)
