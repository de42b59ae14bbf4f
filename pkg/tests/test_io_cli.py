import json

import numpy as np
import pytest

from stslab import cli, io, model, verify
from stslab.encoding import PosEncoding, RADEMACHER, rademacher_matrix
from stslab.model import ModelParams
from stslab.numerics import RngStream
from stslab.task import TaskConfig, sample_batch
from stslab.trainer import TrainConfig, train

TINY = ["--override", "steps=40", "--override", "log_every=10", "--override", "batch=32",
        "--override", "eval.n_eval=128"]


def small_config(tmp_path, **extra):
    raw = {"task": {"T": 10, "q": 2, "d": 2}, "pe": {"d_e": 30, "threshold": 0.7},
           "pe_policy": "resample", "steps": 40, "batch": 32, "log_every": 10,
           "eval": {"n_eval": 128, "T_max": 14}}
    raw.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


# --- readers and writers -------------------------------------------------------------

def test_pe_csv_roundtrip(tmp_path):
    pe = PosEncoding(RADEMACHER, rademacher_matrix(RngStream(0, "pe"), 7, 5), 0.1)
    io.write_pe_csv(tmp_path / "pe.csv", pe)
    back = io.read_pe_csv(tmp_path / "pe.csv")
    assert np.array_equal(back.E, pe.E) and (back.kind, back.delta) == (pe.kind, pe.delta)


def test_batch_csv_roundtrip(tmp_path):
    b = sample_batch(RngStream(1, "data"), TaskConfig(6, 3, 2), 9)
    io.write_batch_csv(tmp_path / "b.csv", b)
    back = io.read_batch_csv(tmp_path / "b.csv")
    assert np.array_equal(back.X, b.X) and np.array_equal(back.Y, b.Y)
    assert np.array_equal(back.target, b.target)


def test_checkpoint_roundtrip(tmp_path):
    rng = RngStream(2, "init")
    P = ModelParams(rng.normal((7, 7)) * 1e-7, rng.normal((2, 7)) * 1e9)
    io.save_checkpoint(tmp_path / "ck", P, RADEMACHER, 12)
    Q, meta = io.load_checkpoint(tmp_path / "ck")
    assert np.array_equal(P.W, Q.W) and np.array_equal(P.V, Q.V)
    assert meta == {"d": 2, "d_e": 5, "pe_kind": RADEMACHER, "step": 12}


def test_trace_csv_roundtrip(tmp_path):
    cfg = TrainConfig.from_dict(json.loads(small_config(tmp_path).read_text()))
    _, tr = train(cfg)
    io.write_trace_csv(tmp_path / "t.csv", tr)
    back = io.read_trace_csv(tmp_path / "t.csv")
    assert back.columns == tr.columns and back.rows == tr.rows


def test_fmt_is_lossless():
    for v in [0.1, 1 / 3, 1e-300, -2.5e17, np.pi]:
        assert float(io.fmt(v)) == v
    assert io.fmt(np.int64(7)) == "7" and io.fmt(True) == "1"


# --- commands ----------------------------------------------------------------------

def test_train_outputs_and_row_count(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(small_config(tmp_path)), "--out", str(out)]) == 0
    for f in ["manifest.json", "completed.json", "trace.csv", "loss.svg", "inv_loss.svg",
              "cosine.svg", "checkpoint/W.csv", "checkpoint/V.csv", "checkpoint/header.json"]:
        assert (out / f).exists(), f
    cols, rows = io.read_table_csv(out / "trace.csv")
    assert len(rows) == 40 // 10 + 1
    assert cols[:3] == ("step", "loss", "inv_loss")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["steps"] == 40
    assert (out / "loss.svg").read_text().startswith("<?xml")


def test_train_rerun_is_byte_identical(tmp_path):
    cfg = str(small_config(tmp_path))
    for name in ("a", "b"):
        assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / name),
                         "--seed", "5"]) == 0
    for f in ("trace.csv", "checkpoint/W.csv", "checkpoint/V.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_fixed_policy_writes_encoding(tmp_path):
    out = tmp_path / "run"
    cfg = str(small_config(tmp_path, pe_policy="fixed"))
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    assert io.read_pe_csv(out / "pe.csv").T == 10


@pytest.mark.parametrize("argv,code", [
    (["train", "--config", "/nonexistent.json"], 1),
    (["train", "--override", "eta=-1"], 1),
    (["train", "--override", "nonsense=1"], 1),
    (["train", "--override", "pe.threshold=0.01", "--override", "pe.max_attempts=2"], 2),
    (["train", "--override", "eta=1e7", "--override", "init.kind=\"gaussian\""] + TINY, 3),
    (["lengthgen", "--override", "eval.T2_list=[]"], 1),
    (["verify", "nosuchsuite"], 1),
    (["ode", "--T", "5", "--q", "7"], 1),
    (["bogus"], 1),
])
def test_exit_codes(tmp_path, argv, code, capsys):
    argv = argv[:1] + ["--out", str(tmp_path / "o")] + argv[1:] if argv[0] != "bogus" else argv
    assert cli.main(argv) == code
    if code:
        assert capsys.readouterr().err


def test_divergence_writes_partial_trace(tmp_path):
    out = tmp_path / "o"
    argv = ["train", "--out", str(out), "--override", "eta=1e7", "--override",
            "init.kind=\"gaussian\""] + TINY
    assert cli.main(argv) == 3
    assert (out / "manifest.json").exists()


def test_ode_command(tmp_path):
    out = tmp_path / "ode"
    assert cli.main(["ode", "--out", str(out), "--steps", "0"]) == 0
    _, rows = io.read_table_csv(out / "trajectory.csv")
    assert rows == [(0.0, 0.0, 0.0, 0.05, 4 / (2 * 2))]
    out2 = tmp_path / "ode2"
    assert cli.main(["ode", "--out", str(out2), "--T", "20", "--q", "2", "--d", "4",
                     "--eta", "0.05", "--steps", "10000"]) == 0
    cols, rows = io.read_table_csv(out2 / "trajectory.csv")
    alpha = np.array([r[2] for r in rows])
    assert alpha.max() <= max_alpha_star(20, 2)
    rep = json.loads((out2 / "report.json").read_text())
    assert rep["t_bound_onehot"] == pytest.approx(3.2e6)


def max_alpha_star(T, q):
    from stslab.reduced import alpha_star
    return alpha_star(1 / np.sqrt(T * q), T, q)


@pytest.mark.xfail(strict=True, reason="alpha tracks its stationary value, whose peak is "
                   "about 2.08 here, so a 1.7 ceiling cannot hold")
def test_ode_alpha_below_fixed_ceiling(tmp_path):
    cli.main(["ode", "--out", str(tmp_path), "--T", "20", "--q", "2", "--d", "4",
              "--eta", "0.05", "--steps", "10000"])
    _, rows = io.read_table_csv(tmp_path / "trajectory.csv")
    assert max(r[2] for r in rows) <= 1.7


def test_ode_long_run_reaches_fixed_point(tmp_path):
    out = tmp_path / "ode"
    # s_plus approaches 1/q only like t^{-1/2}, so "long" means a few 1e5 steps
    assert cli.main(["ode", "--out", str(out), "--T", "5", "--q", "2", "--d", "8",
                     "--eta", "1", "--steps", "300000"]) == 0
    _, rows = io.read_table_csv(out / "trajectory.csv")
    assert abs(rows[-1][3] - 0.5) <= 1e-3


def test_ode_rerun_byte_identical(tmp_path):
    for n in ("a", "b"):
        cli.main(["ode", "--out", str(tmp_path / n), "--steps", "500"])
    assert (tmp_path / "a/trajectory.csv").read_bytes() == (tmp_path / "b/trajectory.csv").read_bytes()


def test_lengthgen_small(tmp_path):
    cfg = small_config(tmp_path, eval={"n_eval": 128, "T2_list": [12, 14], "T_max": 14})
    out = tmp_path / "lg"
    assert cli.main(["lengthgen", "--config", str(cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [r["T2"] for r in summary["ood"]] == [12, 14]
    assert (out / "ood_T14_q2.svg").exists() and (out / "trace_fixed.csv").exists()
    assert io.read_pe_csv(out / "pe_fixed.csv").T == 14


def test_fcn_command_small(tmp_path):
    cfg = small_config(tmp_path, task={"T": 4, "q": 2, "d": 2},
                       fcn={"widths": [3, 7, 12], "steps": 200, "n_eval": 2000})
    out = tmp_path / "fcn"
    assert cli.main(["fcn", "--config", str(cfg), "--out", str(out)]) == 0
    cols, rows = io._read_rows(out / "fcn.csv")[0], io._read_rows(out / "fcn.csv")[1:]
    assert cols == ["width", "mc_loss", "std_err", "bound", "applicable", "adversarial"]
    adv = {int(r[0]): r[5] for r in rows}
    assert adv == {3: "pass", 7: "n/a", 12: "n/a"}
    assert {int(r[0]): int(r[4]) for r in rows} == {3: 1, 7: 1, 12: 0}
    assert "lower bound" in (out / "fcn.svg").read_text()


def test_fcn_requires_widths(tmp_path):
    cfg = small_config(tmp_path, fcn={"widths": []})
    assert cli.main(["fcn", "--config", str(cfg), "--out", str(tmp_path / "f")]) == 1


def test_heatmap_small(tmp_path):
    cfg = small_config(tmp_path, x_query="gaussian", init={"kind": "gaussian"},
                       heatmap_steps=[0, 20])
    out = tmp_path / "hm"
    assert cli.main(["heatmap", "--config", str(cfg), "--out", str(out)]) == 0
    for t in (0, 20, 40):
        assert (out / f"W_step{t}.svg").exists() and (out / f"V_step{t}.svg").exists()


def test_heatmap_preset_settles_on_identity_blocks():
    cfg = TrainConfig.from_json(cli.preset_path("desk_heatmap"))
    trace = train(cfg, snapshots=[cfg.steps])[1]
    assert trace.last("offblock_ratio") <= 0.05
    assert trace.last("cos_v") >= 0.95
    W = trace.snapshots[cfg.steps].W
    d = cfg.task.d
    pos = W[d:, d:]
    off = pos[~np.eye(len(pos), dtype=bool)]
    assert np.abs(np.diag(pos)).min() > 5 * np.abs(off).max()


def test_step_zero_heatmap_matches_init_statistics():
    cfg = TrainConfig.from_dict({"task": {"T": 10, "q": 2, "d": 20}, "pe": {"d_e": 20},
                                 "init": {"kind": "gaussian", "sigma": 0.2236}})
    from stslab.trainer import initial_params
    P = initial_params(cfg)
    n = P.W.size
    assert abs(P.W.mean()) <= 4 * 0.2236 / np.sqrt(n)
    assert P.W.std() == pytest.approx(0.2236, rel=0.1)


# --- verification command ------------------------------------------------------------

def test_verify_gradients_passes(capsys):
    assert cli.main(["verify", "gradients"]) == 0
    out = capsys.readouterr().out
    assert "ok 1 - gradients" in out and "not ok" not in out


def test_verify_detects_corrupted_gradient(monkeypatch, capsys):
    real = model.fixed_gradients

    def broken(params, batch, pe, x_query=None, E=None):
        g, losses = real(params, batch, pe, x_query, E)
        g.dV[0, 0] += 1e-3
        return g, losses

    monkeypatch.setattr(model, "fixed_gradients", broken)
    assert cli.main(["verify", "gradients"]) == 4
    assert "not ok" in capsys.readouterr().out


def test_verify_run_api_reports():
    res = verify.run(["encoding", "reduced"], seed=1, emit=lambda s: None)
    assert res.failed == 0 and res.lines and all(l.startswith("ok") for l in res.lines)
