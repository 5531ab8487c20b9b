from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..io import CKPT_FORMAT, read_container, write_container
from . import tape


@dataclass
class ModelParams:
    """Named float64 tensors plus the architecture descriptor that shaped them."""

    arch: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ValueError(f"parameter {name} has non-finite entries")

    @property
    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(dict(self.arch), {k: v.copy() for k, v in self.tensors.items()})

    def as_vars(self, trainable: bool = False, prefix: str = "") -> dict[str, tape.Var]:
        if trainable:
            return {k: tape.parameter(v, name=prefix + k) for k, v in self.tensors.items()}
        return {k: tape.constant(v) for k, v in self.tensors.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in sorted(self.tensors)])


def save_checkpoint(path, params: ModelParams | dict[str, ModelParams], metadata: dict | None = None):
    """Write one model, or several models keyed by role, to a checkpoint file."""
    models = params if isinstance(params, dict) else {"model": params}
    arrays, archs = {}, {}
    for role, p in models.items():
        archs[role] = p.arch
        for name, t in p.tensors.items():
            arrays[f"{role}/{name}"] = t
    header = {"format": CKPT_FORMAT, "models": archs, "metadata": metadata or {}}
    write_container(path, header, arrays)


def load_checkpoint(path):
    """Return ``(models, metadata)`` with ``models`` a dict role -> ModelParams."""
    manifest, arrays = read_container(path, expect_format=CKPT_FORMAT)
    models = {role: ModelParams(arch, {}) for role, arch in manifest["models"].items()}
    for key, arr in arrays.items():
        role, name = key.split("/", 1)
        models[role].tensors[name] = arr
    return models, manifest.get("metadata", {})
