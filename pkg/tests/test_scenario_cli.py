import json
import textwrap

import pytest

from delaybsde.cli import main
from delaybsde.errors import ConfigurationError
from delaybsde.scenario import load_scenario

HEAT = textwrap.dedent("""\
    mode: verify
    forward: {preset: constant, params: {sigma: 1.0}, x0: 0.0}
    generator: {preset: zero}
    terminal: {preset: square}
    numerics: {T: 1.0, dt: 0.05, n_paths: 100000, seed: 7, degree: 3, path_stats: false}
    verify:
      probes: [[0.5, 0.5], [0.9, 0.0]]
      analytic: heat
    """)

FULL = textwrap.dedent("""\
    mode: solve
    model: {atoms: [[0.1, 1.0], [-0.1, 1.0]]}
    forward: {preset: merton, params: {mu: 0.05, sigma: 0.2}, x0: 1.0}
    generator: {preset: linear, params: {rho: 0.05, kappa: 0.001}, delta: 0.1}
    terminal: {preset: call, params: {strike: 1.0}}
    numerics: {T: 1.0, dt: 0.02, n_paths: 3000, seed: 3}
    output: {export_paths: 10}
    """)

CERT = textwrap.dedent("""\
    mode: certify
    generator: {preset: linear, params: {rho: 0.1, kappa: 0.0}, delta: 0.2}
    numerics: {T: 1.0, dt: 0.05, n_paths: 1000}
    """)


def write(tmp_path, text, name="sc.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_scenario_uses_defaults():
    sc = load_scenario("forward: {preset: constant, params: {sigma: 1.0}}\nterminal: {preset: square}\n")
    assert sc.mode == "solve"
    assert sc.generator.preset == "zero"
    assert sc.numerics.n_paths > 0 and sc.numerics.seed == 0


def test_delta_off_grid_is_rejected_with_both_values():
    text = "generator: {preset: delay, params: {kappa: 0.1}, delta: 0.03}\nnumerics: {dt: 0.02}\n"
    with pytest.raises(ConfigurationError, match=r"line 1: .*delta=0\.03.*dt=0\.02"):
        load_scenario(text)


def test_unknown_key_reports_its_line():
    text = "mode: solve\nnumerics:\n  dt: 0.01\n  n_path: 5\n"
    with pytest.raises(ConfigurationError, match=r"line 4: .*n_path"):
        load_scenario(text)


def test_unknown_section_and_bad_mode():
    with pytest.raises(ConfigurationError, match="line 2"):
        load_scenario("mode: solve\nextras: 1\n")
    with pytest.raises(ConfigurationError, match="mode"):
        load_scenario("mode: dance\n")


def test_too_few_paths_for_basis():
    with pytest.raises(ConfigurationError, match="basis"):
        load_scenario("mode: solve\nnumerics: {n_paths: 5}\n")


def test_round_trip():
    sc = load_scenario(FULL)
    again = load_scenario(sc.serialize())
    assert again == sc
    assert again.digest() == sc.digest()


def test_certify_without_delay_weight(tmp_path, capsys):
    rc = main(["--scenario", str(write(tmp_path, CERT)), "--out", str(tmp_path / "o")])
    assert rc == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["certified"] is True
    assert json.loads((tmp_path / "o" / "certificate.json").read_text())["certified"] is True


def test_verify_heat_rows_pass(tmp_path):
    rc = main(["--scenario", str(write(tmp_path, HEAT)), "--out", str(tmp_path / "o")])
    assert rc == 0
    lines = (tmp_path / "o" / "residuals.csv").read_text().splitlines()
    assert lines[0] == "case,t,x,residual,std_err,tolerance,pass"
    rows = [r.split(",") for r in lines[1:]]
    assert {r[0] for r in rows} == {"pide-mc", "pide-analytic", "mild-mc"}
    assert all(r[-1] == "true" for r in rows)


def test_solve_is_byte_identical_across_runs(tmp_path):
    sc = write(tmp_path, FULL)
    for out in ("a", "b"):
        assert main(["--scenario", str(sc), "--out", str(tmp_path / out)]) == 0
    for name in ("solution.csv", "picard.csv", "summary.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert main(["--scenario", str(sc), "--out", str(tmp_path / "c"), "--seed", "4"]) == 0
    assert (tmp_path / "a" / "solution.csv").read_bytes() != (tmp_path / "c" / "solution.csv").read_bytes()


def test_manifest_lists_every_output(tmp_path):
    sc = write(tmp_path, FULL)
    main(["--scenario", str(sc), "--out", str(tmp_path / "o")])
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"solution.csv", "picard.csv", "summary.json", "scenario.yaml"}
    assert manifest["seed"] == 3 and manifest["mode"] == "solve"
    assert {"delaybsde", "python", "numpy", "scipy"} <= set(manifest["versions"])
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["picard_history"][-1] < 1e-4


def test_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, "numerics: {dt: 0.03}\n", "bad.yaml")
    assert main(["--scenario", str(bad), "--out", str(tmp_path / "o1")]) == 2
    assert "line 1" in capsys.readouterr().err
    stuck = FULL.replace("seed: 3}", "seed: 3, max_iter: 1}").replace("kappa: 0.001", "kappa: 0.5")
    assert main(["--scenario", str(write(tmp_path, stuck, "stuck.yaml")), "--out", str(tmp_path / "o2")]) == 4
    assert main(["--scenario", str(tmp_path / "missing.yaml")]) == 2


def test_simulate_and_hedge_modes(tmp_path):
    sim = "mode: simulate\nforward: {preset: geometric, params: {mu: 0.1, sigma: 0.2}, x0: 1.0}\n" \
          "numerics: {T: 1.0, dt: 0.05, n_paths: 200, seed: 1}\noutput: {export_paths: 3}\n"
    assert main(["--scenario", str(write(tmp_path, sim, "s.yaml")), "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "paths.csv").exists()
    hedge = "mode: hedge\nterminal: {preset: call, params: {strike: 1.0}}\n" \
            "market: {r: 0.03, mu: 0.08, sigma: 0.2, s0: 1.0}\nnumerics: {T: 0.5, dt: 0.05, n_paths: 4000, seed: 1}\n"
    assert main(["--scenario", str(write(tmp_path, hedge, "h.yaml")), "--out", str(tmp_path / "h")]) == 0
    summary = json.loads((tmp_path / "h" / "summary.json").read_text())
    assert 0.04 < summary["price"] < 0.08
    assert (tmp_path / "h" / "strategy.csv").read_text().startswith("t,pi_mean")
