"""Saving and restoring the denoiser, schedule, affinity head and optimizer state."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, weights
from .chemdata import ATOM_VOCAB, BOND_VOCAB
from .egnn import DTYPE, EGNNDenoiser
from .schedule import NoiseSchedule, build_schedule


class VocabMismatchError(ValueError):
    def __init__(self, kind: str, stored: list, expected: list):
        self.kind, self.stored, self.expected = kind, stored, expected
        super().__init__(f"{kind} vocabulary mismatch: weights have {stored}, config has {expected}")


@dataclass
class Bundle:
    model: EGNNDenoiser
    schedule: NoiseSchedule
    head: "torch.nn.Module | None" = None
    optimizer_state: dict | None = None
    meta: dict = field(default_factory=dict)
    vocab: dict = field(default_factory=dict)


def _module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().astype(np.float64) for k, v in module.state_dict().items()}


def _load_module(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    missing = set(state) - set(arrays)
    extra = set(arrays) - set(state)
    if missing or extra:
        raise weights.WeightsFormatError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    module.load_state_dict({k: torch.as_tensor(arrays[k], dtype=DTYPE) for k in state})


def _optim_to_arrays(state: dict) -> tuple[dict, dict[str, np.ndarray]]:
    arrays = {}
    slots = {}
    for idx, st in state["state"].items():
        names = []
        for key, val in st.items():
            arrays[f"optim.{idx}.{key}"] = torch.as_tensor(val, dtype=DTYPE).detach().numpy()
            names.append(key)
        slots[str(idx)] = names
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in state["param_groups"]]
    return {"param_groups": groups, "slots": slots}, arrays


def _optim_from_arrays(header: dict, wf: weights.WeightsFile) -> dict:
    state = {}
    for idx, names in sorted(header["slots"].items(), key=lambda kv: int(kv[0])):
        entry = {}
        for key in names:
            a = torch.as_tensor(wf.arrays[f"optim.{idx}.{key}"], dtype=DTYPE)
            entry[key] = a.to(torch.float32) if key == "step" else a
        state[int(idx)] = entry
    groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in header["param_groups"]]
    return {"state": state, "param_groups": groups}


def to_weights(model: EGNNDenoiser, schedule: NoiseSchedule, head=None, optimizer=None,
               meta: dict | None = None) -> weights.WeightsFile:
    header = {
        "tool_version": __version__,
        "vocab": {"atoms": list(ATOM_VOCAB.symbols), "bonds": list(BOND_VOCAB.names)},
        "model": dict(model.config),
        "schedule": schedule.header(),
        "meta": meta or {},
    }
    arrays = _module_arrays("model", model)
    if head is not None:
        header["affinity"] = dict(head.config)
        arrays.update(_module_arrays("affinity", head))
    if optimizer is not None:
        header["optimizer"], opt_arrays = _optim_to_arrays(optimizer.state_dict())
        arrays.update(opt_arrays)
    return weights.WeightsFile(header, arrays)


def from_weights(wf: weights.WeightsFile) -> Bundle:
    from .affinity import AffinityHead  # local: affinity depends on this module indirectly

    h = wf.header
    model = EGNNDenoiser(**h["model"])
    _load_module(model, wf.section("model"))
    model.eval()
    sch = h["schedule"]
    schedule = build_schedule(sch["kind"], int(sch["T"]), float(sch["power"]))
    head = None
    if "affinity" in h:
        head = AffinityHead(**h["affinity"])
        _load_module(head, wf.section("affinity"))
        head.eval()
    opt = _optim_from_arrays(h["optimizer"], wf) if "optimizer" in h else None
    return Bundle(model, schedule, head, opt, dict(h.get("meta", {})), dict(h.get("vocab", {})))


def save_bundle(path: str | Path, model, schedule, head=None, optimizer=None, meta=None) -> str:
    return weights.save(path, to_weights(model, schedule, head, optimizer, meta))


def load_bundle(path: str | Path) -> Bundle:
    return from_weights(weights.load(path))


def check_vocab(bundle: Bundle, atoms: list[str] | None = None, bonds: list[str] | None = None) -> None:
    atoms = list(ATOM_VOCAB.symbols) if atoms is None else list(atoms)
    bonds = list(BOND_VOCAB.names) if bonds is None else list(bonds)
    stored = bundle.vocab
    if stored.get("atoms") != atoms:
        raise VocabMismatchError("atom", stored.get("atoms"), atoms)
    if stored.get("bonds") != bonds:
        raise VocabMismatchError("bond", stored.get("bonds"), bonds)


def verify_file(path: str | Path) -> bool:
    """Load, rebuild every module, re-serialize and compare bytes."""
    data = Path(path).read_bytes()
    wf = weights.from_bytes(data)
    b = from_weights(wf)
    rebuilt = to_weights(b.model, b.schedule, b.head, None, b.meta)
    if "optimizer" in wf.header:
        rebuilt.header["optimizer"] = wf.header["optimizer"]
        rebuilt.arrays.update({k: v for k, v in wf.arrays.items() if k.startswith("optim.")})
    rebuilt.header["tool_version"] = wf.header.get("tool_version")
    return weights.to_bytes(rebuilt) == data
