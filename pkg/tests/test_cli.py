import csv

import numpy as np
import pytest

from constraint_aware import cli
from constraint_aware import scenarios as S
from constraint_aware.baseline import BaselineGains

SMOKE = "[train]\ntotal_steps = 20000\nseed = 11\n"


@pytest.fixture(scope="module")
def smoke_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cfg = root / "smoke.toml"
    cfg.write_text(SMOKE)
    out = root / "run"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return root


def test_train_outputs(smoke_dir):
    out = smoke_dir / "run"
    assert {p.name for p in out.iterdir()} == {"policy.capw", "policy.capw.meta.json", "learning_curve.csv"}


def test_train_same_seed_identical(smoke_dir):
    out2 = smoke_dir / "run2"
    assert cli.main(["train", "--config", str(smoke_dir / "smoke.toml"), "--out", str(out2)]) == 0
    for name in ("policy.capw", "policy.capw.meta.json", "learning_curve.csv"):
        assert (smoke_dir / "run" / name).read_bytes() == (out2 / name).read_bytes()


def test_train_require_convergence_on_short_run(smoke_dir, capsys):
    code = cli.main(["train", "--config", str(smoke_dir / "smoke.toml"), "--out", str(smoke_dir / "run3"),
                     "--require-convergence"])
    assert code == 1
    assert "converged False" in capsys.readouterr().out


def test_train_bad_config(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path)]) == 64
    assert "not found" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nwat = 3\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 64


def test_train_nonfinite_loss_exit_2(tmp_path, monkeypatch):
    from constraint_aware import ppo

    def boom(cfg, progress=None):
        raise ppo.NonFiniteLoss("non-finite PPO loss", {"adam_t": 3})

    monkeypatch.setattr(ppo, "train", boom)
    assert cli.main(["train", "--out", str(tmp_path)]) == 2
    assert (tmp_path / "nonfinite_diagnostics.json").exists()


def test_usage_error_is_64():
    assert cli.main(["frobnicate"]) == 64
    assert cli.main([]) == 64


def test_eval_exit_codes(smoke_dir, tmp_path, capsys):
    w = str(smoke_dir / "run" / "policy.capw")
    assert cli.main(["eval", "--weights", w, "--scenario", "fridge", "--out", str(tmp_path)]) == 64
    assert "drawer" in capsys.readouterr().err
    assert cli.main(["eval", "--weights", str(tmp_path / "none.capw"), "--scenario", "drawer",
                     "--out", str(tmp_path)]) == 66
    assert cli.main(["eval", "--scenario", "drawer", "--out", str(tmp_path)]) == 66
    code = cli.main(["eval", "--weights", w, "--scenario", "handle", "--no-additional-policy",
                     "--seeds", "3", "--out", str(tmp_path / "h")])
    assert code == 1
    rows = list(csv.DictReader(open(tmp_path / "h" / "summary_handle.csv")))
    assert len(rows) == 3 and all(r["outcome"] == "Slip" for r in rows)


def test_eval_is_idempotent(smoke_dir, tmp_path):
    w = str(smoke_dir / "run" / "policy.capw")
    args = ["eval", "--weights", w, "--scenario", "plate", "--seeds", "2", "--offset-deg=-30,30"]
    cli.main(args + ["--out", str(tmp_path / "a")])
    cli.main(args + ["--out", str(tmp_path / "b")])
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 5
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_output_dir_from_environment(smoke_dir, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    cli.main(["eval", "--weights", str(smoke_dir / "run" / "policy.capw"), "--scenario", "drawer",
              "--seeds", "1", "--no-traces"])
    assert (tmp_path / "envout" / "summary_drawer.csv").exists()


def test_baseline_tune_picks_grid_oracle(tmp_path):
    out = tmp_path / "gains.toml"
    assert cli.main(["baseline-tune", "--out", str(out)]) == 0
    chosen = BaselineGains.load(out)
    _, rows = cli.tune_baseline(S.builtin("drawer"), cli._parse_grid(cli.DEFAULT_GRID), [-30.0, 30.0], range(5))
    ok = [r for r in rows if r["success_rate"] == 1.0 and r["qualified"]]
    best = min(ok, key=lambda r: r["mean_abs_err_deg"])
    assert chosen.k_f == pytest.approx(best["k_f"], rel=1e-12)
    # the chosen gain round-trips through eval
    assert cli.main(["eval", "--baseline", str(out), "--scenario", "drawer", "--offset-deg=-30,30",
                     "--seeds", "3", "--out", str(tmp_path / "ev")]) == 0
    assert cli.main(["eval", "--baseline", str(out), "--scenario", "pole", "--offset-deg=-30,30",
                     "--seeds", "3", "--out", str(tmp_path / "ev")]) == 1


def test_baseline_tune_absurd_grid(tmp_path):
    assert cli.main(["baseline-tune", "--grid", "1e-6,50,100", "--seeds", "2", "--out", str(tmp_path / "g.toml")]) == 1
    assert not (tmp_path / "g.toml").exists()
    assert cli.main(["baseline-tune", "--grid", "-1,0.1", "--out", str(tmp_path / "g.toml")]) == 64


def make_traces(tmp_path, n):
    class Opt:
        def action(self, obs):
            return -np.dot(obs[3:], obs[:3]) * obs[:3]

    res = S.sweep(S.builtin("drawer"), S.PolicyController(Opt()), [30.0], range(n))
    return [S.write_trace(tmp_path / S.trace_filename(t), t) for t in res.traces], res


def test_export_plots_single(tmp_path):
    (path,), res = make_traces(tmp_path, 1)
    out = tmp_path / "plots.csv"
    assert cli.main(["export-plots", "--trace", str(path), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert {r["series"] for r in rows} == {"angle_err_deg", "force_norm", "fingertip_pos"}
    assert len(rows) == 3 * res.traces[0].ticks
    pos = [float(r["value"]) for r in rows if r["series"] == "fingertip_pos"]
    assert pos[0] == 0.0 and pos[-1] > 0.2


def test_export_plots_multiple(tmp_path):
    paths, res = make_traces(tmp_path, 2)
    out = tmp_path / "plots.csv"
    assert cli.main(["export-plots", "--trace", *map(str, paths), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 3 * sum(t.ticks for t in res.traces)
    assert {r["series"].split(":")[0] for r in rows} == {p.stem for p in paths}


def test_export_plots_malformed(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert cli.main(["export-plots", "--trace", str(bad), "--out", str(tmp_path / "o.csv")]) == 65
    (path,), _ = make_traces(tmp_path, 1)
    text = path.read_text().splitlines()
    text[2] = text[2].replace(text[2].split(",")[5], "oops", 1)
    path.write_text("\n".join(text) + "\n")
    assert cli.main(["export-plots", "--trace", str(path), "--out", str(tmp_path / "o.csv")]) == 65
    assert cli.main(["export-plots", "--trace", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o.csv")]) == 65


def test_validate_config(tmp_path, capsys):
    p = tmp_path / "t.toml"
    p.write_text("[train]\nseed = 4\n")
    assert cli.main(["validate-config", str(p)]) == 0
    out = capsys.readouterr().out
    assert "seed = 4" in out and "batch_size = 6000" in out
    s = tmp_path / "s.toml"
    s.write_text('base = "door"\n')
    assert cli.main(["validate-config", str(s)]) == 0
    assert "radius = 0.4" in capsys.readouterr().out
    bad = tmp_path / "b.toml"
    bad.write_text("[train]\ngamma = 2.0\n")
    assert cli.main(["validate-config", str(bad)]) == 64


def test_sweep_command(smoke_dir, tmp_path, capsys):
    gains = BaselineGains(0.1).save(tmp_path / "g.toml")
    code = cli.main(["sweep", "--weights", str(smoke_dir / "run" / "policy.capw"), "--baseline", str(gains),
                     "--scenarios", "drawer,pole", "--seeds", "2", "--out", str(tmp_path / "sw")])
    assert code in (0, 1)
    names = {p.name for p in (tmp_path / "sw").iterdir()}
    assert names == {"summary_drawer_policy.csv", "summary_drawer_baseline.csv",
                     "summary_pole_policy.csv", "summary_pole_baseline.csv"}
