"""
On-disk bundles: a directory holding ``bundle.json`` plus one ``.rana`` tensor
file per weight, calibration set or adapter factor.

A *model* bundle lists layers to compress, each with its weights and the
inputs observed at that layer (stored i x k, one sample per column). An
*adapted* bundle, written by ``compress``, holds the adapter factors and points
back at the model bundle it came from; masker thresholds live in the plan.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, Field

from . import __version__
from .adapters import DenseLinear, DenseMlp, RanaMlp, RankAdaptedLinear
from .allocation import AllocationPlan, LayerAllocation, MlpAllocation, realize_down
from .decomposition import CalibrationSet
from .errors import BundleNotFoundError, ConfigError
from .maskers import SigmoidMlpMasker
from .tensor_io import atomic_write_bytes, read_tensor, write_tensor

BUNDLE_FILE = "bundle.json"
PLAN_FILE = "plan.json"
SEARCH_LOG_FILE = "search_log.json"

LayerKind = Literal["linear", "swiglu", "gelu", "relu"]


class LayerEntry(BaseModel):
    name: str
    kind: LayerKind
    tensors: Dict[str, str] = Field(default_factory=dict)  # role -> file name
    calibration: Optional[str] = None
    params: Dict[str, float] = Field(default_factory=dict)


class BundleManifest(BaseModel):
    schema_version: int = 1
    toolkit_version: str = __version__
    kind: Literal["model", "adapted"] = "model"
    seed: int = 0
    source: Optional[str] = None  # model bundle an adapted bundle was built from
    config_hash: Optional[str] = None
    layers: List[LayerEntry] = Field(default_factory=list)

    def layer(self, name: str) -> LayerEntry:
        for entry in self.layers:
            if entry.name == name:
                return entry
        raise KeyError(name)


@dataclass(frozen=True)
class BundleLayer:
    entry: LayerEntry
    target: Union[DenseLinear, DenseMlp]
    calibration: CalibrationSet


def write_json(path: Union[str, Path], data) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    text = json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def load_manifest(directory: Union[str, Path]) -> BundleManifest:
    path = Path(directory) / BUNDLE_FILE
    if not path.is_file():
        raise BundleNotFoundError(f"no bundle found at {directory} (missing {BUNDLE_FILE})")
    try:
        return BundleManifest(**json.loads(path.read_text(encoding="utf-8")))
    except Exception as e:
        raise ConfigError(f"Error loading or validating bundle manifest {path}: {e}") from e


def _tensor(directory: Path, entry: LayerEntry, role: str) -> np.ndarray:
    if role not in entry.tensors:
        raise ConfigError(f"layer '{entry.name}' has no '{role}' tensor")
    return read_tensor(directory / entry.tensors[role])


def load_model_bundle(directory: Union[str, Path]) -> tuple[BundleManifest, List[BundleLayer]]:
    directory = Path(directory)
    manifest = load_manifest(directory)
    layers = []
    for entry in manifest.layers:
        if entry.kind == "linear":
            target = DenseLinear(_tensor(directory, entry, "weight"))
        else:
            target = DenseMlp(
                up=_tensor(directory, entry, "up"),
                down=_tensor(directory, entry, "down"),
                gate=_tensor(directory, entry, "gate") if entry.kind == "swiglu" else None,
                kind=entry.kind,
            )
        if entry.calibration is None:
            raise ConfigError(f"layer '{entry.name}' has no calibration tensor")
        calib = CalibrationSet(read_tensor(directory / entry.calibration))
        layers.append(BundleLayer(entry=entry, target=target, calibration=calib))
    return manifest, layers


def write_model_bundle(
    directory: Union[str, Path],
    layers: Dict[str, tuple[Union[DenseLinear, DenseMlp], np.ndarray]],
    seed: int = 0,
) -> BundleManifest:
    """``layers`` maps a layer name to its dense target and calibration inputs (i x k)."""
    directory = Path(directory)
    entries = []
    for name, (target, calib) in layers.items():
        tensors = {}
        if isinstance(target, DenseLinear):
            kind = "linear"
            parts = {"weight": target.weight}
        else:
            kind = target.kind
            parts = {"up": target.up, "down": target.down}
            if target.gate is not None:
                parts["gate"] = target.gate
        for role, array in parts.items():
            tensors[role] = f"{name}.{role}.rana"
            write_tensor(directory / tensors[role], array)
        calibration = f"{name}.calib.rana"
        write_tensor(directory / calibration, calib)
        entries.append(LayerEntry(name=name, kind=kind, tensors=tensors, calibration=calibration))
    manifest = BundleManifest(kind="model", seed=seed, layers=entries)
    write_json(directory / BUNDLE_FILE, manifest)
    return manifest


# --- Adapted bundles ---


def _save_linear(directory: Path, prefix: str, layer, entry: LayerEntry):
    if isinstance(layer, DenseLinear):
        return
    entry.tensors[f"{prefix}.a"] = f"{entry.name}.{prefix}.a.rana"
    entry.tensors[f"{prefix}.b"] = f"{entry.name}.{prefix}.b.rana"
    write_tensor(directory / entry.tensors[f"{prefix}.a"], layer.a)
    write_tensor(directory / entry.tensors[f"{prefix}.b"], layer.b)
    if isinstance(layer.masker, SigmoidMlpMasker):
        for role, array in (("c", layer.masker.c), ("d", layer.masker.d)):
            key = f"{prefix}.{role}"
            entry.tensors[key] = f"{entry.name}.{key}.rana"
            write_tensor(directory / entry.tensors[key], array)
        entry.params[f"{prefix}.decision_cutoff"] = float(layer.masker.decision_cutoff)


def save_adapted_layer(
    directory: Union[str, Path], name: str, kind: LayerKind, adapted: Union[RankAdaptedLinear, DenseLinear, RanaMlp]
) -> LayerEntry:
    directory = Path(directory)
    entry = LayerEntry(name=name, kind=kind)
    if isinstance(adapted, RanaMlp):
        _save_linear(directory, "up", adapted.up, entry)
        if adapted.gate is not None:
            _save_linear(directory, "gate", adapted.gate, entry)
    else:
        _save_linear(directory, "layer", adapted, entry)
    return entry


def _load_linear(
    directory: Path,
    entry: LayerEntry,
    prefix: str,
    allocation: LayerAllocation,
    weight: np.ndarray,
) -> Union[RankAdaptedLinear, DenseLinear]:
    if allocation.masker_kind == "dense":
        return DenseLinear(weight)
    a = _tensor(directory, entry, f"{prefix}.a")
    b = _tensor(directory, entry, f"{prefix}.b")
    if f"{prefix}.c" in entry.tensors:
        masker = SigmoidMlpMasker(
            c=_tensor(directory, entry, f"{prefix}.c"),
            d=_tensor(directory, entry, f"{prefix}.d"),
            decision_cutoff=entry.params.get(f"{prefix}.decision_cutoff", 0.5),
        )
    else:
        masker = allocation.b_masker()
    return RankAdaptedLinear(a=a, b=b, masker=masker, original_shape=weight.shape)


def load_adapted_layer(
    directory: Union[str, Path],
    entry: LayerEntry,
    plan: AllocationPlan,
    target: Union[DenseLinear, DenseMlp],
) -> Union[RankAdaptedLinear, DenseLinear, RanaMlp]:
    directory = Path(directory)
    if isinstance(target, DenseLinear):
        return _load_linear(directory, entry, "layer", plan.layers[entry.name], target.weight)
    allocation: MlpAllocation = plan.mlps[entry.name]
    gate = None
    if allocation.gate is not None:
        gate = _load_linear(directory, entry, "gate", allocation.gate, target.gate)
    return RanaMlp(
        up=_load_linear(directory, entry, "up", allocation.up, target.up),
        down_weights=target.down,
        down_masker=realize_down(target.down, allocation.down),
        gate=gate,
        kind=target.kind,
    )


def load_plan(directory: Union[str, Path]) -> AllocationPlan:
    path = Path(directory) / PLAN_FILE
    if not path.is_file():
        raise BundleNotFoundError(f"no adapted bundle found at {directory} (missing {PLAN_FILE})")
    try:
        return AllocationPlan(**json.loads(path.read_text(encoding="utf-8")))
    except Exception as e:
        raise ConfigError(f"Error loading or validating plan {path}: {e}") from e


def split_search_logs(plan: AllocationPlan) -> tuple[dict, dict]:
    """Plan JSON without search logs, and the logs keyed by layer/component."""
    data = plan.model_dump(mode="json")
    logs: Dict[str, list] = {}

    def strip(node, path: str):
        if isinstance(node, dict):
            if "search_log" in node:
                entries = node.pop("search_log")
                if entries:
                    logs[path] = entries
            for key, value in node.items():
                strip(value, f"{path}.{key}" if path else key)

    for section in ("layers", "mlps"):
        for name, allocation in data[section].items():
            strip(allocation, name)
    return data, logs
