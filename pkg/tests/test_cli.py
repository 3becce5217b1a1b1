import json

import numpy as np
import pytest

from adaprune.cli import main
from adaprune.io import MANIFEST_NAME, load_dump, read_tensor


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    assert main(["gen-synth", str(root), "--per-class", "1", "--seed", "4"]) == 0
    return root


def test_gen_synth_dumps_validate(dataset):
    dirs = sorted(p for p in dataset.iterdir() if (p / MANIFEST_NAME).exists())
    assert len(dirs) == 9
    for d in dirs:
        dump = load_dump(d)
        assert dump.num_tokens == 576 and dump.evidence is not None


def test_route(capsys):
    assert main(["route", "Who wrote this book?"]) == 0
    assert capsys.readouterr().out.split("\t")[0] == "2"
    assert main(["route", ""]) == 0
    assert capsys.readouterr().out.startswith("8\t")


def test_prune_schedule_300_200_110(dataset, tmp_path):
    out = tmp_path / "r.json"
    assert main(["prune", str(dataset / "c0_s0"), "--schedule", "300,200,110", "--out", str(out)]) == 0
    rec = json.loads(out.read_text())
    assert [s["budget"] for s in rec["stages"]] == [300, 200, 110] and len(rec["final_retained"]) == 110
    assert rec["category"] == 0


def test_prune_aggressive_schedule(dataset, tmp_path):
    out = tmp_path / "r.json"
    assert main(["prune", str(dataset / "c0_s0"), "--budget", "64", "--schedule", "66,30,17", "--out", str(out)]) == 0
    rec = json.loads(out.read_text())
    assert [s["budget"] for s in rec["stages"]] == [66, 30, 17] and rec["config"]["budget_label"] == 64


def test_prune_to_stdout_and_category_precedence(dataset, capsys):
    assert main(["prune", str(dataset / "c3_s0"), "--budget", "128"]) == 0
    assert json.loads(capsys.readouterr().out)["category"] == 3  # manifest label
    assert main(["prune", str(dataset / "c3_s0"), "--budget", "128", "--category", "7"]) == 0
    assert json.loads(capsys.readouterr().out)["category"] == 7  # flag beats manifest


def test_prune_routes_unlabelled_dump(dataset, tmp_path, capsys):
    dump = load_dump(dataset / "c5_s0")
    dump.category = None
    dump.save(tmp_path / "d")
    assert main(["prune", str(tmp_path / "d"), "--budget", "64"]) == 0
    assert json.loads(capsys.readouterr().out)["category"] == 5  # "How many ..." via the router


def test_prune_deterministic_bytes(dataset, tmp_path):
    args = ["prune", str(dataset / "c1_s0"), "--budget", "192"]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert main(args + ["--out", str(tmp_path / "c.json"), "--timestamp"]) == 0
    c = json.loads((tmp_path / "c.json").read_text())
    c.pop("metadata")
    assert c == json.loads((tmp_path / "a.json").read_text())


def test_prune_directory_with_workers(dataset, tmp_path):
    assert main(["prune", str(dataset), "--budget", "64", "--workers", "3", "--out", str(tmp_path / "o")]) == 0
    single = tmp_path / "single.json"
    main(["prune", str(dataset / "c2_s0"), "--budget", "64", "--out", str(single)])
    assert (tmp_path / "o" / "c2_s0.json").read_bytes() == single.read_bytes()
    assert len(list((tmp_path / "o").iterdir())) == 9


def test_fuse_writes_tensor(dataset, tmp_path, capsys):
    assert main(["fuse", str(dataset / "c0_s0"), "--out", str(tmp_path / "f.f32"), "--profile", "llava"]) == 0
    meta = json.loads(capsys.readouterr().out)
    fused = read_tensor(tmp_path / "f.f32", meta["rows"], meta["cols"])
    dump = load_dump(dataset / "c0_s0")
    s = dump.stack
    expected = sum(w * s.layers[s.index_of(l)].data.astype(np.float64) for l, w in {5: 0.2, 15: 0.3, 22: 0.5}.items())
    np.testing.assert_allclose(fused, expected, atol=1e-5)


def test_calibrate_builtin(dataset, tmp_path, capsys):
    space = tmp_path / "space.json"
    space.write_text(json.dumps({"layer_sets": [[5, 22], [3, 12, 18]], "ratio_grid": [0.2, 0.8]}))
    out = tmp_path / "cal"
    assert main(["calibrate", str(dataset), "--space", str(space), "--out", str(out), "--budget", "64"]) == 0
    report = json.loads((out / "report.json").read_text())
    profiles = json.loads((out / "profiles.json").read_text())
    assert len(report["classes"]) == 9 and len(profiles["profiles"]) == 9
    assert all(len(c["grid"]) == 4 for c in report["classes"])
    assert "class 8" in capsys.readouterr().out


def test_verify_quick(tmp_path):
    assert main(["verify", "--quick", "--report", str(tmp_path / "v.json")]) == 0
    assert json.loads((tmp_path / "v.json").read_text())["passed"]


def test_bench_counters(dataset, capsys):
    assert main(["bench", str(dataset / "c0_s0"), "--repeat", "1", "--budget", "64"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["counters_match"] and doc["stages"] == [66, 30, 17]


def test_exit_codes(dataset, tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["prune"])
    assert err.value.code == 2
    assert main(["prune", str(dataset / "c0_s0"), "--budget", "77"]) == 2
    assert main(["prune", str(dataset / "c0_s0"), "--schedule", "10,20"]) == 2
    assert main(["prune", str(tmp_path / "missing")]) == 3
    broken = tmp_path / "broken"
    load_dump(dataset / "c0_s0").save(broken)
    f = broken / "layer_03.f32"
    f.write_bytes(f.read_bytes()[:-4])
    assert main(["prune", str(broken)]) == 3
    assert main(["prune", str(dataset / "c0_s0"), "--schedule", "600"]) == 3
    assert main(["gen-synth", str(tmp_path / "g"), "--grid", "abc"]) == 2
    assert main(["calibrate", str(dataset), "--space", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 3
