import csv
import io
import json

import pytest

from himix import checkpoint
from himix.cli import EXIT_OK, EXIT_TOLERANCE, EXIT_VALIDATION, main
from himix.costmodel import REPORT_COLUMNS


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# --- flops ---------------------------------------------------------------------------

def test_flops_single_model(capsys):
    code, out, err = run(capsys, "flops", "--model", "llama3.2-1b", "--vl", "728:64")
    assert code == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["variant"] for r in rows] == ["vanilla", "himix-dedicated"]
    ratio = int(rows[1]["total"]) / int(rows[0]["total"])
    assert 0.07 <= ratio <= 0.12
    assert "himix-dedicated/vanilla = 9." in err


def test_flops_full_grid_json(capsys):
    code, out, _ = run(capsys, "flops", "--all", "--ratios", "paper", "--format", "json")
    assert code == EXIT_OK
    rows = json.loads(out)
    assert len(rows) == 40
    assert all(list(r) == list(REPORT_COLUMNS) for r in rows)
    assert all(r["total"] == r["F_Attn"] + r["F_FFN"] + r["head"] for r in rows)


def test_flops_is_deterministic(capsys):
    a = run(capsys, "flops", "--all", "--vl", "728:200")[1]
    b = run(capsys, "flops", "--all", "--vl", "728:200")[1]
    assert a == b


def test_flops_unknown_model_lists_registry(capsys):
    code, _, err = run(capsys, "flops", "--model", "gpt-5")
    assert code == EXIT_VALIDATION
    assert "gpt-5" in err and "llama3.2-1b" in err and "qwen2-0.5b" in err


@pytest.mark.parametrize("argv", [
    ["flops"],
    ["flops", "--model", "llama3.2-1b", "--variants", "vanilla,odd"],
    ["flops", "--model", "llama3.2-1b", "--vl", "728-64"],
    ["flops", "--model", "llama3.2-1b", "--registry", "/no/such.toml"],
    ["flops", "--model", "llama3.2-1b", "--out", "/no/such/dir/x.csv"],
    ["equiv", "--n-vision", "250", "--n-language", "10"],
    ["bogus"],
])
def test_validation_errors_exit_one(capsys, argv):
    with pytest.raises(SystemExit) as exc:
        code = main(argv)
        raise SystemExit(code)
    assert exc.value.code == EXIT_VALIDATION


def test_out_dir_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("HIMIX_OUT_DIR", str(tmp_path))
    code, out, _ = run(capsys, "flops", "--model", "qwen2-0.5b", "--format", "json")
    assert code == EXIT_OK and out == ""
    assert len(json.loads((tmp_path / "flops.json").read_text())) == 2


def test_explicit_out_wins(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("HIMIX_OUT_DIR", str(tmp_path / "unused"))
    target = tmp_path / "grid.csv"
    assert run(capsys, "flops", "--model", "qwen2-0.5b", "--out", str(target))[0] == EXIT_OK
    assert target.read_text().startswith("model,variant")


# --- equiv / check-grad ----------------------------------------------------------------

def test_equiv_default_passes(capsys):
    code, out, _ = run(capsys, "equiv")
    res = json.loads(out)
    assert code == EXIT_OK and res["status"] == "pass" and res["max_abs_diff"] < 1e-9


def test_equiv_single_layer(capsys):
    code, out, _ = run(capsys, "equiv", "--layers", "1")
    res = json.loads(out)
    assert code == EXIT_OK and res["tol"] == 1e-10 and res["max_abs_diff"] < 1e-10


def test_equiv_with_pe_is_expected_failure(capsys):
    code, out, _ = run(capsys, "equiv", "--pe", "on")
    assert code == EXIT_OK
    assert json.loads(out)["status"] == "xfail"


def test_equiv_tolerance_failure(capsys):
    code, out, _ = run(capsys, "equiv", "--layers", "2", "--tol", "0")
    assert code == EXIT_TOLERANCE and json.loads(out)["status"] == "fail"


def test_check_grad(capsys):
    code, out, _ = run(capsys, "check-grad", "--variant", "himix-dedicated")
    res = json.loads(out)
    assert code == EXIT_OK and res["max_rel_err"] < 1e-4
    assert any(k.endswith("w_vk") for k in res["per_param"])


def test_check_grad_tolerance_exit(capsys):
    assert run(capsys, "check-grad", "--tol", "0")[0] == EXIT_TOLERANCE


# --- train / probe ---------------------------------------------------------------------

def test_train_writes_report_and_checkpoint(capsys, tmp_path):
    ck = tmp_path / "m.ckpt"
    code, _, err = run(capsys, "train", "--samples", "64", "--heldout", "32", "--epochs", "1",
                       "--min-acc", "0", "--out", str(tmp_path / "r.json"), "--checkpoint", str(ck))
    assert code == EXIT_OK and "held-out accuracy" in err
    rep = json.loads((tmp_path / "r.json").read_text())
    assert len(rep["losses"]) == 1 and 0 <= rep["final_accuracy"] <= 1
    assert "vision_zeroed_accuracy" in rep["extra"]
    assert checkpoint.load(ck).cfg.variant == "himix-dedicated"


def test_train_below_min_accuracy(capsys, tmp_path):
    code, _, _ = run(capsys, "train", "--samples", "32", "--heldout", "32", "--epochs", "1",
                     "--min-acc", "1.01", "--out", str(tmp_path / "r.json"))
    assert code == EXIT_TOLERANCE


def test_train_missing_checkpoint_dir(capsys):
    code, _, _ = run(capsys, "train", "--checkpoint", "/no/such/dir/m.ckpt")
    assert code == EXIT_VALIDATION


@pytest.mark.parametrize("variant,modalities", [("vanilla", {"language", "vision"}),
                                                ("himix-dedicated", {"language"})])
def test_probe_csv(capsys, variant, modalities):
    code, out, _ = run(capsys, "probe", "--variant", variant, "--seed", "7", "--layers", "3")
    assert code == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(out)))
    assert {r["modality"] for r in rows} == modalities
    for m in modalities:
        assert [int(r["layer"]) for r in rows if r["modality"] == m] == [1, 2, 3]
    assert out == run(capsys, "probe", "--variant", variant, "--seed", "7", "--layers", "3")[1]


def test_probe_from_checkpoint(capsys, tmp_path):
    ck = tmp_path / "m.ckpt"
    run(capsys, "train", "--samples", "32", "--heldout", "8", "--epochs", "1", "--min-acc", "0",
        "--out", str(tmp_path / "r.json"), "--checkpoint", str(ck))
    code, out, _ = run(capsys, "probe", "--checkpoint", str(ck))
    assert code == EXIT_OK and out.count("\nlanguage") == 0 and out.count(",language,") == 2


def test_probe_bad_inputs(capsys, tmp_path):
    assert run(capsys, "probe", "--checkpoint", str(tmp_path / "none"))[0] == EXIT_VALIDATION
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert run(capsys, "probe", "--checkpoint", str(bad))[0] == EXIT_VALIDATION
    assert run(capsys, "probe", "--variant", "vanilla", "--vision-ref", "pre")[0] == EXIT_VALIDATION
