"""Command-line entry point: ``leop <command> --config run.json``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__, store, weights
from .affinity import AffinityError, AffinityHead, AffinityTrainConfig, GuidanceConfig, train_affinity
from .chemdata import ATOM_VOCAB, BOND_VOCAB, ChemDataError, ToyDatasetSpec, generate_dataset, load_dataset
from .chemdata import write_dataset
from .diffusion import DiffusionError
from .egnn import EGNNDenoiser, NumericError
from .metrics import evaluate_run
from .sampler import SampleRunConfig, SamplerError, generate, scaffold_hop, write_run
from .schedule import ScheduleError, build_schedule
from .training import TrainConfig, TrainingError, train, write_loss_csv

logger = logging.getLogger("leop")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2
TASKS = ("scaffold_decoration", "linker_design", "scaffold_hopping")
WEIGHTS_NAME = "weights.leop"


class ConfigError(ValueError):
    pass


def _strict(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown key")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class ScheduleBlock:
    kind: str = "polynomial"
    T: int = 500
    power: float = 2.0


@dataclass
class ModelBlock:
    hidden: int = 64
    edge_hidden: int = 32
    n_layers: int = 4
    k: int = 16
    time_dim: int = 16
    n_rbf: int = 16
    label_dim: int = 8
    norm: float = 10.0


@dataclass
class AffinityBlock(AffinityTrainConfig):
    width: int = 64


@dataclass
class SampleBlock:
    n_samples: int = 100
    targets: list = field(default_factory=lambda: [0])
    n_max_policy: str = "reference"
    n_max: int | None = None
    pad_mean: float = 2.0
    pad_cap: int = 8
    batch_size: int = 32
    t_hop: int | None = None


@dataclass
class DataBlock:
    dataset: str | None = None  # directory holding manifest.json
    n_train: int | None = None  # use the first n_train complexes for training (default: all)


@dataclass
class VocabBlock:
    atoms: list = field(default_factory=lambda: list(ATOM_VOCAB.symbols))
    bonds: list = field(default_factory=lambda: list(BOND_VOCAB.names))


@dataclass
class RunConfig:
    task: str = "scaffold_decoration"
    seed: int = 0
    data: DataBlock = field(default_factory=DataBlock)
    schedule: ScheduleBlock = field(default_factory=ScheduleBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainConfig = field(default_factory=TrainConfig)
    affinity: AffinityBlock = field(default_factory=AffinityBlock)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sample: SampleBlock = field(default_factory=SampleBlock)
    vocab: VocabBlock = field(default_factory=VocabBlock)
    weights: str | None = None
    resume: str | None = None
    output: str = "runs/out"

    BLOCKS = {"data": DataBlock, "schedule": ScheduleBlock, "model": ModelBlock, "train": TrainConfig,
              "affinity": AffinityBlock, "guidance": GuidanceConfig, "sample": SampleBlock, "vocab": VocabBlock}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown key")
        kw = {}
        for k, v in data.items():
            kw[k] = _strict(cls.BLOCKS[k], v, k) if k in cls.BLOCKS else v
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task: must be one of {list(TASKS)}")
        if not isinstance(self.seed, int):
            raise ConfigError("seed: must be an integer")
        if self.sample.n_samples < 1:
            raise ConfigError("sample.n_samples: must be >= 1")
        if self.schedule.T < 2:
            raise ConfigError("schedule.T: must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(data)


def resolve_seed(cfg_seed: int, flag: int | None) -> int:
    """Config seed, overridden by LEOP_SEED, overridden by --seed."""
    seed = cfg_seed
    env = os.environ.get("LEOP_SEED")
    if env not in (None, ""):
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"LEOP_SEED: not an integer: {env!r}") from None
    return flag if flag is not None else seed


def _write_json(path: Path, obj) -> None:
    weights.atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _record_run(out: Path, cfg: RunConfig | dict, weights_path: Path | None = None, **extra) -> None:
    info = {"tool_version": __version__, "config": cfg.to_dict() if isinstance(cfg, RunConfig) else cfg}
    if weights_path is not None:
        info["weights"] = str(weights_path)
        info["weights_sha256"] = weights.file_sha256(weights_path)
    info.update(extra)
    _write_json(out / "resolved_config.json", info)


def _dataset(cfg: RunConfig):
    if not cfg.data.dataset:
        raise ConfigError("data.dataset: required for this command")
    path = Path(cfg.data.dataset)
    manifest = path / "manifest.json" if path.is_dir() else path
    if not manifest.exists():
        raise ConfigError(f"data.dataset: path not found: {path}")
    return load_dataset(manifest)


def _weights(cfg: RunConfig) -> tuple[Path, store.Bundle]:
    if not cfg.weights:
        raise ConfigError("weights: required for this command")
    path = Path(cfg.weights)
    if not path.exists():
        raise ConfigError(f"weights: file not found: {path}")
    bundle = store.load_bundle(path)
    store.check_vocab(bundle, cfg.vocab.atoms, cfg.vocab.bonds)
    return path, bundle


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    data = json.loads(path.read_text())
    if args.seed is not None or os.environ.get("LEOP_SEED"):
        data["random_seed"] = resolve_seed(data.get("random_seed", 0), args.seed)
    try:
        spec = ToyDatasetSpec.from_dict(data)
    except ChemDataError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.output or "toy_data")
    records = generate_dataset(spec)
    try:
        write_dataset(records, out)
    except OSError as exc:
        raise ConfigError(f"cannot write dataset to {out}: {exc}") from None
    _write_json(out / "spec.json", asdict(spec))
    print(f"wrote {len(records)} complexes to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    records = _dataset(cfg)
    n_train = cfg.data.n_train or len(records)
    dataset = [r.masked() for r in records[:n_train]]
    s = build_schedule(cfg.schedule.kind, cfg.schedule.T, cfg.schedule.power)
    model = EGNNDenoiser(**asdict(cfg.model), seed=cfg.seed)
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": cfg.seed})
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / WEIGHTS_NAME
    res = train(model, dataset, s, tcfg, checkpoint=ckpt, resume=cfg.resume, loss_csv=out / "loss.csv")
    if not ckpt.exists():  # zero epochs requested: still leave a usable weights file
        store.save_bundle(ckpt, model, s, meta={"epoch": 0, "trace": []})
    if not store.verify_file(ckpt):
        raise TrainingError("weights file failed the load-and-verify self-check")
    _record_run(out, cfg, ckpt)
    last = res.trace[-1].total if res.trace else float("nan")
    print(f"trained {len(res.trace)} epochs on {len(dataset)} complexes; final loss {last:.4f}; weights {ckpt}")
    return EXIT_OK


def cmd_train_affinity(cfg: RunConfig, out: Path) -> int:
    wpath, bundle = _weights(cfg)
    records = _dataset(cfg)
    n_train = cfg.data.n_train or len(records)
    dataset = [r.masked() for r in records[:n_train]]
    targets = [r.oracle for r in records[:n_train]]
    acfg = asdict(cfg.affinity)
    width = acfg.pop("width")
    acfg["seed"] = cfg.seed
    head = AffinityHead.for_model(bundle.model, width=width, seed=cfg.seed)
    res = train_affinity(bundle.model, head, dataset, targets, bundle.schedule, AffinityTrainConfig(**acfg))
    out.mkdir(parents=True, exist_ok=True)
    dest = out / WEIGHTS_NAME
    meta = dict(bundle.meta)
    meta["affinity_val_rmse"] = res.val_rmse
    store.save_bundle(dest, bundle.model, bundle.schedule, head=head, meta=meta)
    if not store.verify_file(dest):
        raise TrainingError("weights file failed the load-and-verify self-check")
    _record_run(out, cfg, wpath, output_weights=str(dest))
    rmse = "n/a" if res.val_rmse is None else f"{res.val_rmse:.4f}"
    print(f"affinity head trained; validation RMSE {rmse}; weights {dest}")
    return EXIT_OK


def _sample_config(cfg: RunConfig, guidance: GuidanceConfig) -> SampleRunConfig:
    sb = cfg.sample
    return SampleRunConfig(n_samples=sb.n_samples, seed=cfg.seed, guidance=guidance, T=cfg.schedule.T,
                           n_max_policy=sb.n_max_policy, n_max=sb.n_max, pad_mean=sb.pad_mean,
                           pad_cap=sb.pad_cap, batch_size=sb.batch_size)


def _targets(cfg: RunConfig, records):
    for idx in cfg.sample.targets:
        if not 0 <= int(idx) < len(records):
            raise ConfigError(f"sample.targets: index {idx} outside dataset of {len(records)}")
    return [int(i) for i in cfg.sample.targets]


def _summary(results) -> str:
    from .metrics import valence_validity

    mols = [m for r in results for m in r.molecules if m is not None]
    n_total = sum(len(r.molecules) for r in results)
    valid = sum(valence_validity(m) for m in mols)
    aff = [rec["oracle_affinity"] for r in results for rec in r.records if rec.get("oracle_affinity") is not None]
    vpct = 100.0 * valid / len(mols) if mols else 0.0
    mean_aff = float(np.mean(aff)) if aff else float("nan")
    return f"emitted {len(mols)}/{n_total}; validity {vpct:.1f}%; mean affinity {mean_aff:.3f}"


def _cmd_generate(cfg: RunConfig, out: Path, no_guidance: bool, hop: bool) -> int:
    wpath, bundle = _weights(cfg)
    if bundle.schedule.T != cfg.schedule.T:
        raise ConfigError(f"schedule.T={cfg.schedule.T} does not match the weights (T={bundle.schedule.T})")
    records = _dataset(cfg)
    guidance = GuidanceConfig(**{**asdict(cfg.guidance), "enabled": cfg.guidance.enabled and not no_guidance})
    if guidance.active and bundle.head is None:
        raise ConfigError("guidance is enabled but the weights file has no affinity head (use --no-guidance)")
    scfg = _sample_config(cfg, guidance)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for idx in _targets(cfg, records):
        rec = records[idx]
        if hop:
            t_hop = cfg.sample.t_hop
            if t_hop is None:
                raise ConfigError("sample.t_hop: required for hop")
            res = scaffold_hop(bundle.model, bundle.head, bundle.schedule, rec.pocket, rec.ligand,
                               rec.mask_indices, int(t_hop), scfg)
        else:
            res = generate(bundle.model, bundle.head, bundle.schedule, rec.masked(), scfg)
        run_dir = out / f"target_{idx:04d}"
        write_run(run_dir, res, extra={"target": rec.key, "reference_affinity": 14.0 * rec.oracle,
                                        "mode": "hop" if hop else "generate"})
        _record_run(run_dir, cfg, wpath, no_guidance=no_guidance, target_index=idx)
        results.append(res)
    print(_summary(results))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    runs = sorted(p.parent for p in out.glob("target_*/manifest.json"))
    if (out / "manifest.json").exists():
        runs.insert(0, out)
    if not runs:
        raise ConfigError(f"output: no run manifests found under {out}")
    n_em = n_tot = 0
    valid_w = aff_w = 0.0
    n_aff = 0
    for run in runs:
        rep = evaluate_run(run)
        n_em += rep.n_emitted
        n_tot += rep.n_samples
        if rep.validity_pct is not None:
            valid_w += rep.validity_pct * rep.n_emitted / 100.0
        if rep.mean_affinity is not None:
            aff_w += rep.mean_affinity * rep.n_emitted
            n_aff += rep.n_emitted
    vpct = 100.0 * valid_w / n_em if n_em else 0.0
    mean_aff = aff_w / n_aff if n_aff else float("nan")
    print(f"evaluated {len(runs)} runs; emitted {n_em}/{n_tot}; validity {vpct:.1f}%; mean affinity {mean_aff:.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leop", description="Pocket-conditioned ligand elaboration toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "train-affinity", "sample", "hop", "evaluate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config (a toy dataset spec for gen-data)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
        p.add_argument("--no-guidance", action="store_true", help="disable affinity guidance")
        p.add_argument("--output", default=None, help="output directory (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        torch.set_num_threads(args.threads)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        cfg = load_config(args.config)
        cfg.seed = resolve_seed(cfg.seed, args.seed)
        if args.output:
            cfg.output = args.output
        out = Path(cfg.output)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "train-affinity":
            return cmd_train_affinity(cfg, out)
        if args.command == "sample":
            return _cmd_generate(cfg, out, args.no_guidance, hop=False)
        if args.command == "hop":
            return _cmd_generate(cfg, out, args.no_guidance, hop=True)
        return cmd_evaluate(cfg, out)
    except store.VocabMismatchError as exc:
        print(f"error: refusing to run: {exc}", file=sys.stderr)
        print(f"  weights {exc.kind}s: {exc.stored}\n  config {exc.kind}s:  {exc.expected}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, TrainingError, AffinityError, DiffusionError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, SamplerError, ScheduleError, ChemDataError, weights.WeightsFormatError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
