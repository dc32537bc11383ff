"""Checkpoints: config echo, schedule, named float32 parameter blobs, optimizer
and RNG state. Save, load and save again gives identical bytes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import blobio

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    modules: dict[str, dict[str, np.ndarray]]
    meta: dict = field(default_factory=dict)
    optimizer: dict | None = None
    rng: dict[str, np.ndarray] = field(default_factory=dict)


def module_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {name: t.detach().cpu().contiguous().numpy().copy() for name, t in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(np.array(a)) for name, a in arrays.items()}
    module.load_state_dict(state, strict=True)


def _optimizer_split(opt_state: dict) -> tuple[dict, dict[str, np.ndarray]]:
    """Separate optimizer tensors (blobs) from its scalar settings (header)."""
    arrays, per_param = {}, {}
    # sorted so a decoded state splits into the same blob order
    for idx, st in sorted(opt_state["state"].items()):
        entry = {}
        for key, val in sorted(st.items()):
            if torch.is_tensor(val):
                name = f"{idx}/{key}"
                arrays[name] = val.detach().cpu().numpy().copy()
                entry[key] = {"blob": name}
            else:
                entry[key] = val
        per_param[str(idx)] = entry
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in opt_state["param_groups"]]
    return {"state": per_param, "param_groups": groups}, arrays


def _optimizer_join(header: dict, arrays: dict[str, np.ndarray]) -> dict:
    state = {}
    for idx, entry in header["state"].items():
        st = {}
        for key, val in entry.items():
            st[key] = torch.from_numpy(np.array(arrays[val["blob"]])) if isinstance(val, dict) and "blob" in val else val
        state[int(idx)] = st
    groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in header["param_groups"]]
    return {"state": state, "param_groups": groups}


def generator_state(gen: torch.Generator) -> np.ndarray:
    return gen.get_state().numpy().copy()


def set_generator_state(gen: torch.Generator, state: np.ndarray) -> None:
    gen.set_state(torch.from_numpy(np.array(state, dtype=np.uint8)))


def encode(ckpt: Checkpoint) -> bytes:
    arrays: dict[str, np.ndarray] = {}
    for mod_name in sorted(ckpt.modules):
        for name, arr in ckpt.modules[mod_name].items():
            arrays[f"module/{mod_name}/{name}"] = arr
    opt_header = None
    if ckpt.optimizer is not None:
        opt_header, opt_arrays = _optimizer_split(ckpt.optimizer)
        arrays.update({f"optim/{k}": v for k, v in opt_arrays.items()})
    for name in sorted(ckpt.rng):
        arrays[f"rng/{name}"] = np.asarray(ckpt.rng[name], dtype=np.uint8)
    meta = {
        "format": FORMAT_VERSION,
        "kind": ckpt.kind,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "optimizer": opt_header,
        "modules": sorted(ckpt.modules),
    }
    return blobio.encode(meta, arrays)


def decode(raw: bytes) -> Checkpoint:
    meta, arrays = blobio.decode(raw)
    if meta.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')}")
    modules: dict[str, dict[str, np.ndarray]] = {m: {} for m in meta["modules"]}
    opt_arrays, rng = {}, {}
    for name, arr in arrays.items():
        head, _, rest = name.partition("/")
        if head == "module":
            mod, _, pname = rest.partition("/")
            modules[mod][pname] = arr
        elif head == "optim":
            opt_arrays[rest] = arr
        elif head == "rng":
            rng[rest] = arr
    optimizer = _optimizer_join(meta["optimizer"], opt_arrays) if meta["optimizer"] is not None else None
    return Checkpoint(meta["kind"], meta["config"], modules, meta["meta"], optimizer, rng)


def save(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)
    return path


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
