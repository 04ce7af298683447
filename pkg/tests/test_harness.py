import json
import shutil
from pathlib import Path

import pytest

from ehdetect import cli
from ehdetect.errors import ConfigError, InfeasibleError, NumericalError
from ehdetect.harness import (CSV_HEADER, SweepSpec, apply_variable, cmd_optimize, cmd_sweep,
                              rows_to_csv, run_sweep)
from ehdetect.model import load_config

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
GOLDEN = Path(__file__).parent / "golden"

SMALL = """
priors: [0.5, 0.5]
power_budget_P0: 0.002
levels_L: 2
energy: {rho: 2, capacity_K: 5, b_u: 0.01, T_s: 10}
sensors:
  - {gamma_g: 2, sigma_w2: 0.001, sigma_v2: 1, snr_s_db: 3, target_pd: 0.9, repeat: 2}
solver: {n_c: 5, n_mu: 6}
"""


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def test_csv_header_golden():
    golden = (GOLDEN / "sweep_header.csv").read_text()
    assert ",".join(CSV_HEADER) + "\n" == golden
    assert rows_to_csv([]) == golden


def test_sweep_spec_validation():
    with pytest.raises(ConfigError):
        SweepSpec("P0", (1e-3, 5e-4, 2e-3))
    with pytest.raises(ConfigError):
        SweepSpec("temperature", (1, 2))
    with pytest.raises(ConfigError):
        SweepSpec("P0", ())
    with pytest.raises(ConfigError):
        SweepSpec("P0", (1e-3,), methods=("anneal",))


def test_apply_variable(small_cfg):
    net = load_config(small_cfg)
    assert apply_variable(net, "N", 5).n_sensors == 5
    assert apply_variable(net, "K", 9).energy.capacity_K == 9
    assert apply_variable(net, "rho", 4).energy.rho == 4
    assert apply_variable(net, "L", 3).levels_L == 3
    from ehdetect.model import snr_s
    assert snr_s(apply_variable(net, "snr_s", 7).sensors[0]) == pytest.approx(7)


def test_sweep_rows_ordered_and_errors_recorded(small_cfg):
    net = load_config(small_cfg)
    spec = SweepSpec("K", (0, 2, 4), ("rrs", "hybrid-moe"), replications=2)
    rows = run_sweep(net, spec, seed=3, n_slots=2000)
    assert [(r.value, r.method, r.seed) for r in rows] == [
        (v, m, 3 + s) for v in (0, 2, 4) for m in ("rrs", "hybrid-moe") for s in range(2)]
    assert all(r.error.startswith("ConfigError") for r in rows[:4])
    for r in rows[4:]:
        assert r.error == ""
        assert 0 <= r.analytic_pe <= 1 and 0 <= r.empirical_pe <= 1
        assert r.avg_power_watts <= 0.002 + 1e-12


def test_sweep_from_config_section(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text(SMALL + "sweep: {variable: P0, values: [0.001, 0.002], methods: [grid]}\n")
    rows, text = cmd_sweep(p, n_slots=1000)
    assert len(rows) == 2 and text.count("\n") == 3


def test_optimize_beats_silent_baseline():
    record, _ = cmd_optimize(CONFIGS / "power_sweep.yaml", "grid", n_slots=100_000)
    assert record["empirical_pe"] + record["ci_half_width"] < record["baseline_empirical_pe"]
    assert record["avg_power_watts"] <= 0.002 + 1e-12


def test_optimize_dump_chain(tmp_path, small_cfg):
    cmd_optimize(small_cfg, "rrs", n_slots=0, dump_chain=tmp_path / "chains")
    assert sorted(p.name for p in (tmp_path / "chains").iterdir()) == [
        "sensor0_phi.csv", "sensor0_psi.csv", "sensor1_phi.csv", "sensor1_psi.csv"]


def test_hybrid_single_level_matches_rrs(tmp_path):
    p = tmp_path / "l1.yaml"
    p.write_text(SMALL.replace("levels_L: 2", "levels_L: 1"))
    a, _ = cmd_optimize(p, "hybrid-moe", seed=5, n_slots=0)
    b, _ = cmd_optimize(p, "rrs", seed=5, n_slots=0)
    assert a["sensors"][0]["policy"] == b["sensors"][0]["policy"]


def test_cli_exit_codes(tmp_path, small_cfg, monkeypatch, capsys):
    assert cli.main(["optimize", "--config", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(SMALL.replace("target_pd: 0.9", "target_pd: 1.9"))
    assert cli.main(["optimize", "--config", str(bad)]) == 2
    assert "sensors[0].target_pd" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["optimize"])
    assert exc.value.code == 2

    def infeasible(*a, **k):
        raise InfeasibleError("nothing fits", 0.004)

    def numerical(*a, **k):
        raise NumericalError("boom")

    monkeypatch.setattr("ehdetect.harness.solve_p1", infeasible)
    assert cli.main(["optimize", "--config", str(small_cfg)]) == 3
    monkeypatch.setattr("ehdetect.harness.solve_p1", numerical)
    assert cli.main(["optimize", "--config", str(small_cfg)]) == 4


def test_validate_passes_and_fault_fails(tmp_path):
    cfg = CONFIGS / "worked_example.yaml"
    out = tmp_path / "v.json"
    assert cli.main(["validate", "--config", str(cfg), "--slots", "100000",
                     "--out", str(out)]) == 0
    assert json.loads(out.read_text())["passed"] is True
    assert cli.main(["validate", "--config", str(cfg), "--slots", "100000", "--out", str(out),
                     "--inject-fault"]) == 5
    failed = [c for c in json.loads(out.read_text())["checks"] if not c["passed"]]
    assert any(c["invariant"] == "row_sums" and c["module"] == "battery" for c in failed)


def test_simulate_cli_with_trace(tmp_path):
    cfg = tmp_path / "w.yaml"
    shutil.copy(CONFIGS / "worked_example.yaml", cfg)
    out, trace = tmp_path / "sim.json", tmp_path / "trace.csv"
    assert cli.main(["simulate", "--config", str(cfg), "--slots", "4000", "--out", str(out),
                     "--trace", str(trace)]) == 0
    rec = json.loads(out.read_text())
    assert rec["n_slots"] == 4000 and sum(rec["occupancy"][0]) == 4000
    assert trace.read_text().startswith("slot,hypothesis,observation_0,")


def test_timing_flag_only_adds_wall_time(tmp_path, small_cfg):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    base = ["sweep", "--config", str(small_cfg), "--variable", "P0", "--values", "0.001",
            "--methods", "rrs", "--slots", "500"]
    cli.main(base + ["--out", str(a)])
    cli.main(base + ["--out", str(b), "--timing"])
    ra, rb = a.read_text().splitlines()[1].split(","), b.read_text().splitlines()[1].split(",")
    assert ra[9] == "" and float(rb[9]) > 0
    assert ra[:9] == rb[:9]
