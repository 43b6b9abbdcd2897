import json

import pytest

import stainforge.compare as cmp
from stainforge.compare import RunConfig, compare, run_seed
from stainforge.errors import ValidationError
from stainforge.synth import SynthConfig, build_dataset, default_synth_config, write_dataset

TINY_TRAIN = {"conv_channels": [8, 8, 8], "hidden": 16, "batch_size": 16, "max_epochs": 1}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    base = default_synth_config(per_class=5, patch_size=32, seed=0, skew=False)
    cfg = SynthConfig(base.centers, base.classes, 5, 32, (2, 3), seed=0)
    out = tmp_path_factory.mktemp("data")
    write_dataset(build_dataset(cfg), out, cfg)
    return out


def run_cfg(data_dir, modes, reps=3, **kw):
    return RunConfig.from_json({"data": str(data_dir), "modes": modes, "repetitions": reps,
                                "probe": False, "train": TINY_TRAIN, **kw})


def test_seed_derivation():
    assert run_seed(0, "none", 1) == run_seed(0, "none", 1)
    assert run_seed(0, "none", 1) != run_seed(0, "he_adv", 1)
    assert run_seed(0, "none", 1) != run_seed(1, "none", 1)
    assert 0 <= run_seed(5, "he_adv", 9) < 2**32


def test_schema_validation(data_dir):
    with pytest.raises(ValidationError):
        RunConfig.from_json({"data": str(data_dir), "modes": ["none", "he_adv"], "bogus": 1})
    with pytest.raises(ValidationError):
        RunConfig.from_json({"data": str(data_dir), "modes": ["none", "staingan"]})
    with pytest.raises(ValidationError):
        RunConfig.from_json({"data": str(data_dir), "modes": ["none", "he_adv"], "repetitions": 0})
    with pytest.raises(ValidationError):
        RunConfig.from_json({"data": str(data_dir), "modes": ["none", "he_adv"], "train": {"max_epochs": 0}})


def test_single_mode_rejected(data_dir):
    with pytest.raises(ValidationError):
        run_cfg(data_dir, ["he_adv"])


def test_report_shape_and_reproducibility(data_dir, tmp_path):
    cfg = run_cfg(data_dir, ["none", "he_adv"])
    first = compare(cfg, tmp_path / "a")
    compare(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "report.txt").read_bytes() == (tmp_path / "b" / "report.txt").read_bytes()
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    lines = first["text"].splitlines()
    assert lines[0].split()[:5] == ["mode", "n", "internal", "external", "cumulative"]
    body = lines[1:3]
    assert [line.split()[0] for line in body] == ["none", "he_adv"]
    for line in body:
        assert line.count("±") == 4 or "n/a" in line
    assert len(list((tmp_path / "a" / "runs").glob("*.json"))) == 6


def test_identical_modes_are_not_significant(data_dir, tmp_path):
    out = compare(run_cfg(data_dir, ["none", "none"], proposed="none"), tmp_path)
    for split in cmp.SPLITS:
        p = out["rows"][0][split + "_p"]
        assert p is None or p >= 0.05
        assert not out["rows"][0][split + "_star"]
    assert "*" not in "".join(out["text"].splitlines()[1:3])


def test_resume_skips_completed_runs(data_dir, tmp_path, monkeypatch):
    cfg = run_cfg(data_dir, ["none", "hsv_aug"], reps=2)
    compare(cfg, tmp_path)
    before = (tmp_path / "report.txt").read_bytes()

    def boom(*a, **kw):
        raise AssertionError("completed run was retrained")

    monkeypatch.setattr(cmp, "train", boom)
    compare(cfg, tmp_path)
    assert (tmp_path / "report.txt").read_bytes() == before


def test_changed_config_invalidates_runs(data_dir, tmp_path):
    compare(run_cfg(data_dir, ["none", "hsv_aug"], reps=1), tmp_path)
    doc = json.loads((tmp_path / "runs" / "none_00.json").read_text())
    cfg2 = run_cfg(data_dir, ["none", "hsv_aug"], reps=1, master_seed=9)
    compare(cfg2, tmp_path)
    doc2 = json.loads((tmp_path / "runs" / "none_00.json").read_text())
    assert doc["config_hash"] != doc2["config_hash"]
    assert doc2["seed"] == run_seed(9, "none", 0)


def test_adding_a_mode_keeps_other_runs(data_dir, tmp_path):
    a = compare(run_cfg(data_dir, ["none", "hsv_aug"], reps=1), tmp_path / "a")
    b = compare(run_cfg(data_dir, ["none", "hsv_aug", "stain_aug"], reps=1), tmp_path / "b")
    assert a["runs"]["none"][0].kappa == b["runs"]["none"][0].kappa


def test_missing_dataset(tmp_path):
    cfg = RunConfig.from_json({"data": str(tmp_path / "nope"), "modes": ["none", "he_adv"]})
    with pytest.raises(ValidationError):
        compare(cfg, tmp_path / "out")
