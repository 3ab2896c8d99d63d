import json

import pytest

from expdiag.cli import main

SPECS = {
    "cool": {"kind": "CoolOffBug", "seed": 1, "n_users": 20000},
    "clean": {"kind": "Clean", "seed": 2, "n_users": 4000},
    "trig": {"kind": "TriggerDay", "seed": 3, "n_users": 20000},
    "dep": {"kind": "DependentExperiments", "seed": 4, "n_users": 20000},
    "corpus": {"kind": "Corpus", "seed": 5, "n_experiments": 120},
}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for name, spec in SPECS.items():
        path = root / f"{name}.json"
        path.write_text(json.dumps(spec))
        assert main(["simulate", str(path), "--out-dir", str(root / name),
                     "--out", str(root / f"{name}.sim.json")]) == 0
    return root


def run(argv, out):
    code = main(argv + ["--out", str(out)])
    return code, out.read_bytes()


def commands(d):
    cool, trig, dep = d / "cool", d / "trig", d / "dep"
    return {
        "analyze": ["analyze", str(cool / "events.jsonl"), "--config", str(cool / "config.json")],
        "diagnose": ["diagnose", str(cool / "events.jsonl"), "--config", str(cool / "config.json"),
                     "--plot-data", str(d / "series.tsv")],
        "diagnose_sibling": ["diagnose", str(dep / "events.jsonl"), "--config",
                             str(dep / "config.json"), "--sibling",
                             f"{dep / 'sibling_parent-4.jsonl'}:{dep / 'sibling_parent-4.config.json'}"],
        "temporal": ["temporal", str(trig / "events.jsonl"), "--config", str(trig / "config.json"),
                     "--metric", "sessions"],
        "meta": ["meta", str(d / "corpus"), "--pair", "x,y", "--min-days", "21"],
        "simulate": ["simulate", str(d / "clean.json"), "--out-dir", str(d / "clean_again")],
    }


@pytest.mark.parametrize("name", ["analyze", "diagnose", "diagnose_sibling", "temporal", "meta",
                                  "simulate"])
def test_reports_are_byte_identical(data, tmp_path, name):
    argv = commands(data)[name]
    code_a, a = run(argv, tmp_path / "a.json")
    code_b, b = run(argv, tmp_path / "b.json")
    assert code_a == code_b and a == b
    report = json.loads(a)
    assert set(report) == {"schema_version", "manifest", "result"}
    assert report["manifest"]["command"] == argv[0]
    assert report["manifest"]["timestamp"] is None


def test_simulate_outputs_match(data):
    same = json.loads((data / "clean.sim.json").read_text())["result"]["outputs"]
    assert main(["simulate", str(data / "clean.json"), "--out-dir", str(data / "clean2"),
                 "--out", str(data / "clean2.json")]) == 0
    again = json.loads((data / "clean2.json").read_text())["result"]["outputs"]
    assert same == again


def test_exit_codes(data, tmp_path):
    c = commands(data)
    assert main(c["diagnose"] + ["--out", str(tmp_path / "r.json")]) == 1
    clean = data / "clean"
    assert main(["diagnose", str(clean / "events.jsonl"), "--config", str(clean / "config.json"),
                 "--out", str(tmp_path / "r.json")]) == 0
    assert main(c["temporal"] + ["--out", str(tmp_path / "t.json")]) == 1
    report = json.loads((tmp_path / "t.json").read_text())
    assert report["result"]["trigger_day"]["flag"] is True


def test_diagnose_names_root_cause(data, tmp_path):
    run(commands(data)["diagnose_sibling"], tmp_path / "r.json")
    result = json.loads((tmp_path / "r.json").read_text())["result"]
    assert result["hypotheses"][0]["label"] == "DependentExperiments"
    truth = json.loads((data / "dep" / "truth.json").read_text())
    assert truth["label"] == "DependentExperiments"


def test_plot_data_written(data, tmp_path):
    run(commands(data)["diagnose"], tmp_path / "r.json")
    lines = (data / "series.tsv").read_text().splitlines()
    assert lines[0].split("\t")[0] == "day" and len(lines) > 2


def test_missing_input_is_json_error(tmp_path, capsys):
    code = main(["analyze", str(tmp_path / "nope.jsonl"), "--config", str(tmp_path / "c.json")])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"]["type"] == "FileNotFoundError"
    assert "config not found" in err["error"]["message"]


def test_sibling_with_other_hash_is_error(data, tmp_path, capsys):
    cool, clean = data / "cool", data / "clean"
    code = main(["diagnose", str(cool / "events.jsonl"), "--config", str(cool / "config.json"),
                 "--sibling", f"{clean / 'events.jsonl'}:{clean / 'config.json'}"])
    assert code == 2
    assert "hash_id" in json.loads(capsys.readouterr().err)["error"]["message"]


def test_missing_seed(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("EXPDIAG_SEED", raising=False)
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"kind": "Clean", "n_users": 100}))
    assert main(["simulate", str(spec), "--out-dir", str(tmp_path / "o")]) == 2
    assert "seed missing" in capsys.readouterr().err
    monkeypatch.setenv("EXPDIAG_SEED", "9")
    assert main(["simulate", str(spec), "--out-dir", str(tmp_path / "o"),
                 "--out", str(tmp_path / "r.json")]) == 0
    assert json.loads((tmp_path / "r.json").read_text())["manifest"]["seeds"] == {"seed": 9}


def test_bad_range(data, capsys):
    cool = data / "cool"
    assert main(["analyze", str(cool / "events.jsonl"), "--config", str(cool / "config.json"),
                 "--range", "a-b"]) == 2
    assert "range" in capsys.readouterr().err
