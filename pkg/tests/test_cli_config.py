import json

import numpy as np
import pytest

from helpers import random_image
from xplan.annotate import read_records
from xplan.backends import HttpEditor, HttpPlanner, MockEditor, MockPlanner, MockServer, load_image, save_image
from xplan.cli import build_parser, run_cli
from xplan.config import Config, ConfigError
from xplan.masks import load_mask


def test_defaults_hold_rule_constants():
    cfg = Config.load(environ={})
    assert cfg.data["refine"] == {"dilation": 0.20, "min_box_area": 0.05}
    p = cfg.policy()
    assert (p.enabled, p.threshold, p.max_retries) == (False, 3, 1)
    assert [w for _, w in cfg.data["sources"]["weights"]] == [1, 3, 3, 3, 1, 3, 3, 9, 9, 9]
    assert cfg.simple_fractions["instructpix2pix_gcg"] == 0.40
    assert isinstance(cfg.planner(), MockPlanner)
    assert all(isinstance(e, MockEditor) for e in cfg.editors().values())


def test_precedence(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("seed: 5\nverify: {threshold: 2}\nendpoints: {planner: http://file}\n")
    cfg = Config.load(f, {"seed": 9, "verify.max_retries": 4, "endpoints.planner": "http://flag"},
                      environ={"XPLAN_PLANNER_URL": "http://env"})
    assert cfg.data["seed"] == 9
    assert (cfg.policy().threshold, cfg.policy().max_retries) == (2, 4)
    assert cfg.data["endpoints"]["planner"] == "http://env"
    assert isinstance(cfg.planner(), HttpPlanner)
    assert Config.load(f, environ={}).data["seed"] == 5


@pytest.mark.parametrize(
    "flags",
    [
        {"refine.dilation": 1.5},
        {"refine.min_box_area": 0},
        {"verify.threshold": 7},
        {"routing.profile": "nope"},
        {"sources.simple_fractions": {"x": 2}},
        {"jobs": 0},
    ],
)
def test_invalid_values(flags):
    with pytest.raises(ConfigError):
        Config.load(flags=flags, environ={})


def test_bad_file(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        Config.load(f, environ={})
    with pytest.raises(ConfigError):
        Config.load(tmp_path / "missing.yaml", environ={})


def test_fingerprint_tracks_content():
    a = Config.load(environ={}).fingerprint()
    assert a == Config.load(environ={}).fingerprint()
    assert a != Config.load(flags={"seed": 1}, environ={}).fingerprint()


def test_help_lists_flags(capsys):
    assert run_cli(["edit", "--help"]) == 0
    out = capsys.readouterr().out
    for flag in ("--routing", "--verify", "--max-retries", "--threshold", "--dilation", "--min-box-area",
                 "--seed", "--jobs", "--config"):
        assert flag in out


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    for k in ("PLANNER", "EDITOR", "SEGMENTER", "VERIFIER", "EMBEDDER"):
        monkeypatch.delenv(f"XPLAN_{k}_URL", raising=False)
    img = random_image(np.random.default_rng(0), 32, 24)
    save_image(img, tmp_path / "cat.png")
    return tmp_path


def test_plan_file_ok_and_invalid(workspace, capsys):
    good = workspace / "good.txt"
    good.write_text("local texture: Make <tree> to be in cyberpunk\n")
    assert run_cli(["plan", "--plan-file", str(good)]) == 0
    assert capsys.readouterr().out == "[local texture] Make <tree> to be in cyberpunk\n"
    bad = workspace / "bad.txt"
    bad.write_text("\n".join(["[remove] Remove the <cup>"] * 6) + "\n[replace] Replace the <cat>\n")
    assert run_cli(["plan", "--plan-file", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "7 sub-instructions" in err and "replace needs 2" in err


def test_plan_via_planner(workspace, capsys):
    assert run_cli(["plan", "--image", str(workspace / "cat.png"), "--instruction", "Make it 1950's"]) == 0
    assert capsys.readouterr().out == "[style] Make it 1950's\n"
    assert run_cli(["plan"]) == 2


def test_usage_error_exit_code():
    assert run_cli(["frobnicate"]) == 2


def test_edit_with_verification(workspace, capsys):
    plan = workspace / "plan.txt"
    plan.write_text("[remove] Remove the <cup>\n[style] Make image 1950's style\n")
    argv = ["edit", "--image", str(workspace / "cat.png"), "--plan-file", str(plan),
            "--routing", "bag-of-models", "--verify", "--max-retries", "4",
            "--output", str(workspace / "out.png"), "--trace", str(workspace / "trace.json")]
    assert run_cli(argv) == 0
    summary = json.loads(capsys.readouterr().out)
    trace = json.loads((workspace / "trace.json").read_text())
    assert trace["schema"] == "trace_v1" and trace["complete"]
    assert trace["policy"] == {"enabled": True, "threshold": 3, "max_retries": 4}
    assert [s["backend_id"] for s in trace["steps"]] == ["inpaint", "global"]
    assert load_image(workspace / "out.png").digest() == summary["final_image_digest"]
    # same fingerprint, same bits
    assert run_cli(argv) == 0
    assert json.loads(capsys.readouterr().out)["final_image_digest"] == summary["final_image_digest"]


def test_edit_over_http(workspace, monkeypatch, capsys):
    plan = workspace / "plan.txt"
    plan.write_text("[remove] Remove the <cup>\n")
    out_local = workspace / "local.png"
    base = ["edit", "--image", str(workspace / "cat.png"), "--plan-file", str(plan), "--trace",
            str(workspace / "t.json")]
    assert run_cli(base + ["--output", str(out_local)]) == 0
    with MockServer() as srv:
        for k in ("PLANNER", "EDITOR", "SEGMENTER", "VERIFIER", "EMBEDDER"):
            monkeypatch.setenv(f"XPLAN_{k}_URL", srv.url)
        assert isinstance(Config.load().editors()["default"], HttpEditor)
        assert run_cli(base + ["--output", str(workspace / "remote.png")]) == 0
    assert load_image(workspace / "remote.png") == load_image(out_local)


def test_edit_missing_mask_exit_1(workspace, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("refine: {dilation: 0.2}\n")
    plan = workspace / "plan.txt"
    plan.write_text("[insertion] Add a <hat>\n")
    rc = run_cli(["edit", "--image", str(workspace / "cat.png"), "--plan-file", str(plan),
                  "--config", str(cfg), "--output", str(workspace / "o.png"),
                  "--trace", str(workspace / "t.json")])
    assert rc == 1


def test_refine_writes_regions(workspace, capsys):
    plan = workspace / "plan.txt"
    plan.write_text("[remove] Remove the <cup>\n[style] Make image old\n")
    assert run_cli(["refine", "--image", str(workspace / "cat.png"), "--plan-file", str(plan),
                    "--out", str(workspace / "regions")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert [s["edit_type"] for s in doc["steps"]] == ["remove", "style"]
    assert load_mask(workspace / "regions" / "region_1.png").area == 32 * 24


def test_annotate_stats_eval(workspace, capsys):
    corpus = workspace / "corpus.jsonl"
    corpus.write_text(
        json.dumps({"source_tag": "seedx_gcg", "image_ref": "cat.png", "caption": "a cat"}) + "\n"
        + json.dumps({"source_tag": "instructpix2pix_gcg", "image_ref": "cat.png",
                      "response": "Complex: c\nDecomposition:\n[replace] Replace the <cat>"}) + "\n"
    )
    out = workspace / "ds"
    assert run_cli(["annotate", "--input", str(corpus), "--out", str(out), "--level", "all"]) == 1
    summary = json.loads(capsys.readouterr().out)
    assert summary["written"] == 4 and summary["rejected_pairs"] == 1
    records = list(read_records(out / "records.jsonl"))
    assert all(r.level == 3 for r in records)
    # resumable: nothing new on a second pass
    run_cli(["annotate", "--input", str(corpus), "--out", str(out), "--level", "all"])
    assert json.loads(capsys.readouterr().out)["written"] == 0

    assert run_cli(["stats", str(out / "records.jsonl"), "--json", str(workspace / "s.json")]) == 0
    text = capsys.readouterr().out
    assert "edit type" in text and "insertion" in text
    assert json.loads((workspace / "s.json").read_text())["n_records"] == 4

    rc = run_cli(["eval", str(out / "records.jsonl"), "--images-root", str(workspace),
                  "--report-json", str(workspace / "r.json")])
    assert rc == 0
    assert "CLIP_im" in capsys.readouterr().out
    assert json.loads((workspace / "r.json").read_text())["n_rows"] == 4


def test_annotate_level1_only(workspace, capsys):
    corpus = workspace / "corpus.jsonl"
    corpus.write_text(json.dumps({"source_tag": "seedx_gcg", "image_ref": "cat.png"}) + "\n")
    assert run_cli(["annotate", "--input", str(corpus), "--out", str(workspace / "l1"), "--level", "1"]) == 0
    recs = list(read_records(workspace / "l1" / "records.jsonl"))
    assert len(recs) == 4 and all(r.level == 1 for r in recs)
    capsys.readouterr()
    assert run_cli(["annotate", "--input", str(workspace / "l1" / "records.jsonl"),
                    "--out", str(workspace / "l2"), "--level", "2", "--images-root", str(workspace)]) == 0
    assert all(r.level == 2 for r in read_records(workspace / "l2" / "records.jsonl"))


def test_parser_has_every_subcommand():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"plan", "refine", "edit", "annotate", "eval", "stats", "mock-serve"}
