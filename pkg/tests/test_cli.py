import numpy as np
import pytest

from nntc import fileio
from nntc.cli import main


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _values(out):
    return dict(line.split(" ", 1) for line in out.splitlines() if " " in line)


def test_pipeline(tmp_path, capsys):
    truth, mask, est = tmp_path / "t.nntc", tmp_path / "m.nntc", tmp_path / "w.nntc"
    code, out, _ = _run(capsys, "synth", "--shape", "6,5,4", "--rank", "2,2,2", "--seed", 1,
                        "--output", truth, "--fraction", 0.5, "--mask", mask)
    assert code == 0 and truth.exists() and mask.exists()
    code, out, _ = _run(capsys, "complete", "--input", truth, "--mask", mask, "--truth", truth,
                        "--rank", "2,2,2", "--max-iters", 10, "--output", est,
                        "--model-out", tmp_path / "model.json", "--report", tmp_path / "r.csv",
                        "--slices-out", tmp_path / "slices")
    assert code == 0
    vals = _values(out)
    assert vals["status"] in ("converged", "stagnated", "max_iters", "line_search_failed")
    assert float(vals["heldout_rmse"]) >= 0
    assert len(fileio.read_report(tmp_path / "r.csv")) == int(vals["iterations"])
    assert len(list((tmp_path / "slices").glob("*.pgm"))) == 4 * 4
    code, out, _ = _run(capsys, "eval", est, truth, "--mask", mask)
    assert code == 0
    assert float(_values(out)["heldout_rmse"]) == pytest.approx(float(vals["heldout_rmse"]))


def test_eval_identical_is_zero(tmp_path, capsys):
    p = tmp_path / "a.nntc"
    fileio.write_tensor(np.arange(1.0, 9.0).reshape(2, 2, 2), p)
    code, out, _ = _run(capsys, "eval", p, p)
    assert code == 0
    vals = _values(out)
    assert float(vals["rmse"]) == 0.0 and float(vals["negative_fraction"]) == 0.0


def test_mask_command(tmp_path, capsys):
    out_path = tmp_path / "m.nntc"
    code, out, _ = _run(capsys, "mask", "--shape", "4,5", "--fraction", 0.25, "--output", out_path)
    assert code == 0 and "(5 entries)" in out
    assert len(fileio.read_mask(out_path)) == 5


def test_default_paths_pipeline(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert _run(capsys, "synth", "--shape", "10,10,10", "--rank", "2,2,2", "--seed", 7)[0] == 0
    assert _run(capsys, "mask", "--fraction", 0.4, "--seed", 7)[0] == 0
    code, out, _ = _run(capsys, "complete", "--rank", "3,3,3", "--max-iters", 5)
    assert code == 0 and (tmp_path / "completion.nntc").exists()
    code, out, _ = _run(capsys, "eval", "completion.nntc", "truth.nntc", "--mask", "mask.nntc")
    assert code == 0 and float(_values(out)["heldout_relative_rmse"]) < 1.0


def test_default_rank_for_order_3(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    _run(capsys, "synth", "--shape", "12,11,6", "--rank", "2,2,2", "--fraction", 0.5)
    code, _, _ = _run(capsys, "complete", "--max-iters", 2, "--model-out", "m.json")
    assert code == 0
    assert [u.shape[1] for u in fileio.read_model(tmp_path / "m.json").u] == [10, 10, 5]
    fileio.write_tensor(np.ones((3, 3)), tmp_path / "two.nntc")
    assert _run(capsys, "complete", "--input", "two.nntc", "--fraction", 0.5)[0] == 1


def test_complete_with_fraction_and_sparse_input(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    t = tmp_path / "t.nntc"
    _run(capsys, "synth", "--shape", "4,4,3", "--rank", "1,1,1", "--output", t)
    code, out, _ = _run(capsys, "complete", "--input", t, "--fraction", 0.5, "--rank", "1,1,1",
                        "--max-iters", 3)
    assert code == 0 and "status" in out
    sparse = tmp_path / "s.nntc"
    dense = fileio.read_tensor(t)
    dense[0] = 0.0
    fileio.write_tensor(dense, sparse, "sparse")
    code, _, _ = _run(capsys, "complete", "--input", sparse, "--rank", "1,1,1", "--max-iters", 2)
    assert code == 0


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["complete", "--rank", "1,1"],
    ["complete", "--input", "x.nntc", "--rank", "a,b"],
    ["mask", "--shape", "3,3", "--fraction", "1.5"],
    ["eval", "missing1.nntc", "missing2.nntc"],
    ["gradcheck", "--instances", "0"],
])
def test_usage_errors_exit_1(tmp_path, capsys, argv, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = _run(capsys, *argv)
    assert code == 1 and err


def test_malformed_and_mismatched_inputs_exit_1(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    bad = tmp_path / "bad.nntc"
    bad.write_text("NNTC 1\nsparse\n2 2 2\n2\n1 1 1\n1 1 1\n")
    code, _, err = _run(capsys, "complete", "--input", bad, "--rank", "1,1")
    assert code == 1 and "bad.nntc:6" in err and "duplicate" in err
    good = tmp_path / "g.nntc"
    fileio.write_tensor(np.ones((2, 3)), good)
    other = tmp_path / "o.nntc"
    fileio.write_tensor(np.ones((3, 2)), other)
    assert _run(capsys, "eval", good, other)[0] == 1
    empty = tmp_path / "e.nntc"
    empty.write_text("NNTC 1\nsparse\n2 2 3\n0\n")
    code, _, err = _run(capsys, "complete", "--input", good, "--mask", empty, "--rank", "1,1")
    assert code == 1 and "empty" in err
    assert _run(capsys, "complete", "--input", good, "--fraction", 0.5, "--rank", "3,1")[0] == 1


def test_runtime_failure_exit_2(tmp_path, capsys):
    good = tmp_path / "g.nntc"
    fileio.write_tensor(np.ones((2, 3)), good)
    code, _, err = _run(capsys, "complete", "--input", good, "--fraction", 0.5, "--rank", "1,1",
                        "--output", tmp_path / "no" / "such" / "dir" / "w.nntc")
    assert code == 2 and "failed" in err


def test_diagnostic_commands(capsys):
    code, out, _ = _run(capsys, "gradcheck", "--instances", 1, "--directions", 2)
    assert code == 0 and float(_values(out)["max_relative_error"]) < 1e-4
    code, out, _ = _run(capsys, "oracle", "--suite", "lemma1")
    assert code == 0 and out.startswith("lemma1 instances 100")
