import json
from pathlib import Path

import pytest

from leop import cli, store, weights
from leop.chemdata import ATOM_VOCAB


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj))
    return path


TINY_MODEL = {"hidden": 8, "edge_hidden": 4, "n_layers": 1, "k": 6, "time_dim": 4, "n_rbf": 4, "label_dim": 2}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> train -> train-affinity on a handful of complexes."""
    root = tmp_path_factory.mktemp("cli")
    spec = write_json(root / "spec.json", {"n_complexes": 6, "pocket_size_range": [8, 10],
                                           "ligand_size_range": [5, 6], "random_seed": 4})
    assert cli.main(["gen-data", "--config", str(spec), "--output", str(root / "data")]) == 0
    base = {"seed": 1, "data": {"dataset": str(root / "data")}, "schedule": {"T": 6}, "model": TINY_MODEL,
            "train": {"epochs": 2, "batch_size": 3},
            "affinity": {"epochs": 3, "views": 1, "batch_size": 4, "width": 8},
            "sample": {"n_samples": 3, "targets": [0, 1], "batch_size": 2, "t_hop": 3}}
    cfg = write_json(root / "train.json", base)
    assert cli.main(["train", "--config", str(cfg), "--output", str(root / "train")]) == 0
    acfg = write_json(root / "aff.json", {**base, "weights": str(root / "train" / "weights.leop")})
    assert cli.main(["train-affinity", "--config", str(acfg), "--output", str(root / "aff")]) == 0
    sample_cfg = write_json(root / "sample.json", {**base, "weights": str(root / "aff" / "weights.leop")})
    return {"root": root, "base": base, "sample_cfg": sample_cfg}


def test_gen_data_writes_pairs_and_is_deterministic(pipeline, tmp_path):
    root = pipeline["root"]
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert len(manifest) == 6
    assert len(list((root / "data").rglob("*.pdb"))) == 6 and len(list((root / "data").rglob("*.sdf"))) == 6
    spec = root / "spec.json"
    assert cli.main(["gen-data", "--config", str(spec), "--output", str(tmp_path / "again")]) == 0
    for f in sorted((root / "data").rglob("*")):
        if f.is_file():
            assert (tmp_path / "again" / f.relative_to(root / "data")).read_bytes() == f.read_bytes()


def test_gen_data_bad_field(tmp_path, capsys):
    spec = write_json(tmp_path / "s.json", {"n_complexes": 0})
    assert cli.main(["gen-data", "--config", str(spec), "--output", str(tmp_path / "d")]) == 2
    assert "n_complexes" in capsys.readouterr().err


def test_train_outputs(pipeline):
    out = pipeline["root"] / "train"
    assert store.verify_file(out / "weights.leop")
    lines = (out / "loss.csv").read_text().strip().splitlines()
    assert len(lines) == 3  # header + two epochs
    info = json.loads((out / "resolved_config.json").read_text())
    assert info["weights_sha256"] == weights.file_sha256(out / "weights.leop")
    assert info["config"]["seed"] == 1 and "tool_version" in info


def test_sample_hop_evaluate(pipeline, tmp_path, capsys):
    cfg = str(pipeline["sample_cfg"])
    out = tmp_path / "s"
    assert cli.main(["sample", "--config", cfg, "--output", str(out)]) == 0
    summary = capsys.readouterr().out
    assert "emitted" in summary and "validity" in summary and "mean affinity" in summary
    for idx in (0, 1):
        rows = json.loads((out / f"target_{idx:04d}" / "manifest.json").read_text())["samples"]
        assert len(rows) == 3  # one row per sample, empties included
    assert cli.main(["evaluate", "--config", cfg, "--output", str(out)]) == 0
    assert "evaluated 2 runs" in capsys.readouterr().out
    assert cli.main(["hop", "--config", cfg, "--output", str(tmp_path / "h")]) == 0
    hop = json.loads((tmp_path / "h" / "target_0000" / "manifest.json").read_text())
    assert hop["mode"] == "hop"


def test_sample_is_reproducible(pipeline, tmp_path):
    cfg = str(pipeline["sample_cfg"])
    for name in ("a", "b"):
        assert cli.main(["sample", "--config", cfg, "--output", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "target_0000" / "manifest.json").read_bytes()
    assert a == (tmp_path / "b" / "target_0000" / "manifest.json").read_bytes()


def test_no_guidance_matches_disabled_config(pipeline, tmp_path):
    root, base = pipeline["root"], pipeline["base"]
    off = write_json(tmp_path / "off.json", {**base, "weights": str(root / "aff" / "weights.leop"),
                                             "guidance": {"enabled": False}})
    assert cli.main(["sample", "--config", str(pipeline["sample_cfg"]), "--no-guidance",
                     "--output", str(tmp_path / "flag")]) == 0
    assert cli.main(["sample", "--config", str(off), "--output", str(tmp_path / "cfg")]) == 0
    for f in (tmp_path / "cfg" / "target_0000").rglob("*.sdf"):
        assert (tmp_path / "flag" / "target_0000" / f.relative_to(tmp_path / "cfg" / "target_0000")).read_bytes() \
            == f.read_bytes()
    m_flag = json.loads((tmp_path / "flag" / "target_0000" / "manifest.json").read_text())
    m_cfg = json.loads((tmp_path / "cfg" / "target_0000" / "manifest.json").read_text())
    assert m_flag["samples"] == m_cfg["samples"]


def test_guidance_without_head_is_refused(pipeline, tmp_path, capsys):
    root, base = pipeline["root"], pipeline["base"]
    cfg = write_json(tmp_path / "c.json", {**base, "weights": str(root / "train" / "weights.leop")})
    assert cli.main(["sample", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2
    assert "affinity head" in capsys.readouterr().err
    assert cli.main(["sample", "--config", str(cfg), "--no-guidance", "--output", str(tmp_path / "o")]) == 0


def test_vocab_mismatch_prints_both_lists(pipeline, tmp_path, capsys):
    root, base = pipeline["root"], pipeline["base"]
    atoms = list(ATOM_VOCAB.symbols)
    atoms[1] = "P"
    cfg = write_json(tmp_path / "c.json", {**base, "weights": str(root / "aff" / "weights.leop"),
                                           "vocab": {"atoms": atoms}})
    assert cli.main(["sample", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "'P'" in err and "'N'" in err


def test_unknown_keys_rejected(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"model": {"hiden": 3}})
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "model.hiden: unknown key" in capsys.readouterr().err
    cfg = write_json(tmp_path / "d.json", {"modle": {}})
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert "modle: unknown key" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert cli.main(["train"]) == 2  # --config is required
    cfg = write_json(tmp_path / "c.json", {"data": {"dataset": str(tmp_path / "nowhere")}})
    assert cli.main(["train", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2
    assert "nowhere" in capsys.readouterr().err
    cfg = write_json(tmp_path / "t.json", {"task": "docking"})
    assert cli.main(["train", "--config", str(cfg)]) == 2
    assert cli.main(["evaluate", "--config", str(write_json(tmp_path / "e.json", {})),
                     "--output", str(tmp_path / "empty")]) == 2


def test_hop_requires_t_hop(pipeline, tmp_path, capsys):
    base = {**pipeline["base"], "weights": str(pipeline["root"] / "aff" / "weights.leop")}
    base["sample"] = {k: v for k, v in base["sample"].items() if k != "t_hop"}
    cfg = write_json(tmp_path / "c.json", base)
    assert cli.main(["hop", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2
    assert "t_hop" in capsys.readouterr().err


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv("LEOP_SEED", raising=False)
    assert cli.resolve_seed(3, None) == 3
    monkeypatch.setenv("LEOP_SEED", "7")
    assert cli.resolve_seed(3, None) == 7
    assert cli.resolve_seed(3, 11) == 11
    monkeypatch.setenv("LEOP_SEED", "x")
    with pytest.raises(cli.ConfigError):
        cli.resolve_seed(3, None)


def test_resume_continues_epochs(pipeline, tmp_path):
    root, base = pipeline["root"], pipeline["base"]
    full = write_json(tmp_path / "full.json", {**base, "train": {"epochs": 2, "batch_size": 3}})
    assert cli.main(["train", "--config", str(full), "--output", str(tmp_path / "full")]) == 0
    one = write_json(tmp_path / "one.json", {**base, "train": {"epochs": 1, "batch_size": 3}})
    assert cli.main(["train", "--config", str(one), "--output", str(tmp_path / "one")]) == 0
    res = write_json(tmp_path / "res.json", {**base, "resume": str(tmp_path / "one" / "weights.leop")})
    assert cli.main(["train", "--config", str(res), "--output", str(tmp_path / "res")]) == 0
    full_rows = (tmp_path / "full" / "loss.csv").read_text().splitlines()
    res_rows = (tmp_path / "res" / "loss.csv").read_text().splitlines()
    assert res_rows[-1] == full_rows[-1]
    assert (tmp_path / "res" / "weights.leop").read_bytes() == (tmp_path / "full" / "weights.leop").read_bytes()


def test_inputs_not_mutated(pipeline, tmp_path):
    w = pipeline["root"] / "aff" / "weights.leop"
    before = w.read_bytes()
    assert cli.main(["sample", "--config", str(pipeline["sample_cfg"]), "--output", str(tmp_path / "o")]) == 0
    assert w.read_bytes() == before
