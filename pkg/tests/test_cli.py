import json

import pytest

from shapeedit.cli import build_parser, load_config, main
from shapeedit.microworld import write_ppm
from shapeedit.specialists import read_dataset
from shapeedit.training import TrainConfig

TINY = ["--n_records=14", "--layers=1", "--hidden=16", "--heads=2", "--steps=2", "--base_steps=2", "--batch_size=4",
        "--train_records=0", "--eval_steps=2", "--checkpoint_every=0"]


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    out = capsys.readouterr().out
    for key in TrainConfig.keys():
        assert key in out
    assert "SHAPEEDIT_SCORER_TOKEN" in out


def test_unknown_key_is_a_usage_error(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "--learning_rate=3"]) == 2
    assert "unknown config key: learning_rate" in capsys.readouterr().err
    assert main(["gen", "--out", str(tmp_path), "--steps=lots"]) == 2


def test_config_file_and_overrides(tmp_path):
    cfg_file = tmp_path / "c.toml"
    cfg_file.write_text('steps = 9\nvariant = "controlnet"\nlr = 0.002\n')
    cfg = load_config(cfg_file, ["--steps=11"], seed=4, out="o")
    assert (cfg.steps, cfg.variant, cfg.lr, cfg.seed, cfg.out_dir) == (11, "controlnet", 0.002, 4, "o")
    cfg_file.write_text("stepz = 9\n")
    with pytest.raises(Exception, match="stepz"):
        load_config(cfg_file, [], None, None)


def test_gen_is_byte_identical_across_runs(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--out", str(tmp_path / name), "--seed", "3", *TINY]) == 0
    a = (tmp_path / "a" / "data" / "records.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "data" / "records.jsonl").read_bytes()


def test_score_filter_export(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["gen", "--out", out, *TINY]) == 0
    assert main(["score", "--out", out, *TINY]) == 0
    assert main(["filter", "--out", out, *TINY]) == 0
    kept = read_dataset(tmp_path / "data" / "filtered.jsonl")
    assert all(r.weight == 1 for r in kept)
    assert main(["export-distill", "--out", out, "--n-per-task", "1", *TINY]) == 0
    assert len((tmp_path / "distill.jsonl").read_text().splitlines()) == 7


def test_score_reports_unscored_records(tmp_path, stub_scorer, capsys):
    out = str(tmp_path)
    assert main(["gen", "--out", out, *TINY]) == 0
    stub_scorer.reply = lambda body, n: (200, "no json here")
    assert main(["score", "--out", out, "--endpoint", stub_scorer.url, "--backoff", "0", *TINY]) == 1
    assert "left unscored" in capsys.readouterr().err


def test_train_eval_edit(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["train", "--out", out, *TINY]) == 0
    assert main(["train", "--out", out, *TINY]) == 0
    assert "all stages complete" in capsys.readouterr().out
    assert main(["bench", "--out", out, "--n-scenes", "1"]) == 0
    assert main(["eval", "--out", out, "--checkpoint", str(tmp_path / "model.oemc"),
                 "--bench", str(tmp_path / "bench.json"), *TINY]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["rows"]) == 7 and not any(r["failed"] for r in report["rows"])

    rec = read_dataset(tmp_path / "data" / "records.jsonl")[0]
    src = tmp_path / "in.ppm"
    write_ppm(src, rec.src.pixels)
    sidecar = tmp_path / "instr.json"
    sidecar.write_text(json.dumps(rec.instruction.to_dict()))
    args = ["edit", "--out", out, "--checkpoint", str(tmp_path / "model.oemc"), "--input", str(src),
            "--instruction", str(sidecar), *TINY]
    assert main([*args, "--output", str(tmp_path / "e1.ppm")]) == 0
    assert main([*args, "--output", str(tmp_path / "e2.ppm")]) == 0
    assert (tmp_path / "e1.ppm").read_bytes() == (tmp_path / "e2.ppm").read_bytes()

    odd = tmp_path / "odd.ppm"
    write_ppm(odd, rec.src.pixels[:10, :10])
    bad = ["edit", "--out", out, "--checkpoint", str(tmp_path / "model.oemc"), "--input", str(odd),
           "--instruction", str(sidecar), "--output", str(tmp_path / "x.ppm")]
    assert main(bad) == 2
    sidecar.write_text(json.dumps({"task": "recolor", "args": {}, "surface_text": "recolor it"}))
    assert main([*args, "--output", str(tmp_path / "x.ppm")]) == 1


def test_missing_checkpoint_is_an_error(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "none.oemc"),
                 "--bench", str(tmp_path / "none.json")]) == 1
    assert capsys.readouterr().err.startswith("error:")
