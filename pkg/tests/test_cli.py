import hashlib

import numpy as np
import pytest
import scipy.sparse as sp

from lram import cli, numerics
from lram.errors import ConfigParseError, ConfigRangeError, UnknownKeyError


def run(argv):
    return cli.main(argv)


def digest_all(out_dir, names):
    return {n: hashlib.sha256((out_dir / n).read_bytes()).hexdigest() for n in names}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_empty_config_gives_documented_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("# nothing here\n\n")
    cfg = cli.parse_config(cli.schema_spde(), path=path)
    assert cfg["h"] == 0.1
    assert cfg["samples"] == 100
    assert cfg["tau"] == 0.88
    assert cfg["epsilon"] == 0.2
    assert cfg["distribution"] == "normal"
    assert cfg["method"] == "smw"
    assert cfg["seed"] == 1234
    assert cfg["out_dir"] == "out"


def test_flag_overrides_file_overrides_default(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("tau = 0.6\nsamples = 7\n")
    cfg = cli.parse_config(cli.schema_spde(), path=path, overrides={"tau": "0.88"})
    assert cfg["tau"] == 0.88   # flag wins
    assert cfg["samples"] == 7  # file wins over default


def test_out_of_range_value_rejected():
    with pytest.raises(ConfigRangeError):
        cli.parse_config(cli.schema_spde(), overrides={"tau": "1.5"})


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("taus = 0.5\n")
    with pytest.raises(UnknownKeyError):
        cli.parse_config(cli.schema_spde(), path=path)


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("tau = 0.5\nnot a pair\n")
    with pytest.raises(ConfigParseError) as err:
        cli.parse_config(cli.schema_spde(), path=path)
    assert "line 2" in str(err.value)


def test_bad_value_type_reports_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("samples = many\n")
    with pytest.raises(ConfigParseError) as err:
        cli.parse_config(cli.schema_spde(), path=path)
    assert "samples" in str(err.value)


# ---------------------------------------------------------------------------
# spde subcommand
# ---------------------------------------------------------------------------


def test_spde_zero_epsilon_matches_deterministic(tmp_path):
    out = tmp_path / "run"
    code = run(["spde", "--h", "0.25", "--samples", "4", "--tau", "1.0",
                "--epsilon", "0", "--out-dir", str(out)])
    assert code == 0
    lines = (out / "qoi.csv").read_text().splitlines()
    assert lines[0] == "node,unperturbed,qoi"
    for line in lines[1:]:
        _, ubar, qoi = line.split(",")
        assert float(ubar) == float(qoi)
    report = (out / "report.csv").read_text().splitlines()
    header = report[0].split(",")
    row = report[1].split(",")
    assert float(row[header.index("err_l2")]) <= 1e-12


def test_spde_tau_scan_monotone_error_column(tmp_path):
    out = tmp_path / "scan"
    code = run(["spde", "--h", "0.25", "--samples", "8", "--seed", "5",
                "--tau-scan", "0.4,0.6,0.8,1.0", "--out-dir", str(out)])
    assert code == 0
    lines = (out / "errors_vs_tau.csv").read_text().splitlines()
    assert lines[0] == "tau,rank,err_l2,rmsre"
    errs = [float(line.split(",")[2]) for line in lines[1:]]
    for a, b in zip(errs, errs[1:]):
        assert b <= a * 1.05 + 1e-9


def test_spde_determinism_byte_identical(tmp_path):
    args = ["spde", "--h", "0.25", "--samples", "4", "--seed", "9"]
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run(args + ["--out-dir", str(out1)]) == 0
    assert run(args + ["--out-dir", str(out2)]) == 0
    names = ["report.csv", "qoi.csv", "energy.csv"]
    assert digest_all(out1, names) == digest_all(out2, names)


def test_spde_numerical_failure_exit_2(tmp_path):
    out = tmp_path / "diverge"
    code = run(["spde", "--h", "0.25", "--samples", "2", "--epsilon", "5.0",
                "--method", "neumann", "--out-dir", str(out)])
    assert code == 2
    manifest = (out / "manifest.txt").read_text()
    assert "error = DivergenceRiskError" in manifest


def test_spde_export_samples_columns(tmp_path):
    out = tmp_path / "exp"
    code = run(["spde", "--h", "0.5", "--samples", "2", "--export-samples",
                "--out-dir", str(out)])
    assert code == 0
    header = (out / "qoi.csv").read_text().splitlines()[0]
    assert header == "node,unperturbed,qoi,sample_0000,sample_0001"


def test_spde_manifest_contents(tmp_path):
    out = tmp_path / "m"
    assert run(["spde", "--h", "0.25", "--samples", "3", "--out-dir", str(out)]) == 0
    manifest = (out / "manifest.txt").read_text().splitlines()
    keys = {line.split(" = ")[0] for line in manifest}
    assert {"tool_version", "subcommand", "h", "samples", "seed",
            "sha256.report.csv", "sha256.qoi.csv"} <= keys


def test_usage_error_exit_1(tmp_path):
    assert run(["spde", "--tau", "1.5", "--out-dir", str(tmp_path / "x")]) == 1
    assert run(["frobnicate"]) == 1


# ---------------------------------------------------------------------------
# socp subcommand
# ---------------------------------------------------------------------------


def test_socp_newton_single_iteration_history(tmp_path):
    out = tmp_path / "newton"
    code = run(["socp", "--h", "0.25", "--samples", "4", "--method", "newton",
                "--grad-tol", "1e-8", "--out-dir", str(out)])
    assert code == 0
    lines = (out / "socp_history.csv").read_text().splitlines()
    assert lines[0] == "iteration,objective,grad_norm,step"
    assert len(lines) == 2  # one outer iteration
    assert (out / "control.csv").read_text().splitlines()[0] == "node,value"
    assert (out / "state_mean.csv").read_text().splitlines()[0] == "node,value"


def test_socp_compare_methods_table(tmp_path):
    out = tmp_path / "cmp"
    code = run(["socp", "--h", "0.25", "--samples", "4", "--compare-methods",
                "--out-dir", str(out)])
    assert code == 0
    lines = (out / "methods.csv").read_text().splitlines()
    assert lines[0] == ("method,iterations,converged,objective_initial,"
                        "objective_final,ratio,error,grad_norm_final")
    assert len(lines) == 1 + 5
    assert [line.split(",")[0] for line in lines[1:]] == list(cli.socp.METHODS)
    timing_lines = (out / "methods_timing.txt").read_text().splitlines()
    assert len(timing_lines) == 5


def test_socp_invalid_method_usage_error(tmp_path):
    assert run(["socp", "--method", "annealing", "--out-dir", str(tmp_path)]) == 1


def test_socp_determinism(tmp_path):
    args = ["socp", "--h", "0.25", "--samples", "3", "--method", "sgd", "--seed", "4"]
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run(args + ["--out-dir", str(out1)]) == 0
    assert run(args + ["--out-dir", str(out2)]) == 0
    names = ["socp_history.csv", "control.csv", "state_mean.csv"]
    assert digest_all(out1, names) == digest_all(out2, names)


# ---------------------------------------------------------------------------
# compress / diagnose subcommands
# ---------------------------------------------------------------------------


def write_rank_one_ensemble(directory, n=5, m=3):
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(m):
        a = np.zeros((n, n))
        a[0, 0] = float(i + 1)
        numerics.save_matrix_market(directory / f"member_{i}.mtx", sp.csr_array(a))
    return str(directory / "member_*.mtx")


def test_compress_from_matrix_market(tmp_path):
    pattern = write_rank_one_ensemble(tmp_path / "mm")
    out = tmp_path / "out"
    code = run(["compress", "--input", pattern, "--tau", "0.2",
                "--export-mm", "--out-dir", str(out)])
    assert code == 0
    from lram import lowrank

    factors = lowrank.load_factors(out / "factors.bin")
    assert factors.rank == 1
    assert factors.num_samples == 3
    lines = (out / "factors.csv").read_text().splitlines()
    header = lines[0].split(",")
    row = lines[1].split(",")
    assert float(row[header.index("rmsre")]) <= 1e-12
    assert (out / "factors_mm" / "basis.mtx").exists()


def test_compress_from_fem_pipeline(tmp_path):
    out = tmp_path / "fem"
    code = run(["compress", "--h", "0.25", "--samples", "4", "--tau", "1.0",
                "--out-dir", str(out)])
    assert code == 0
    assert (out / "factors.bin").exists()


def test_diagnose_rank_one_ensemble(tmp_path):
    pattern = write_rank_one_ensemble(tmp_path / "mm")
    out = tmp_path / "diag"
    code = run(["diagnose", "--input", pattern, "--out-dir", str(out)])
    assert code == 0
    lines = (out / "diagnose.csv").read_text().splitlines()
    header = lines[0].split(",")
    row = lines[1].split(",")
    assert int(row[header.index("k_star")]) == 1
    energy = (out / "energy.csv").read_text().splitlines()
    values = [float(line.split(",")[1]) for line in energy[1:]]
    assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0
    eigen = (out / "eigenvalues.csv").read_text().splitlines()
    assert len(eigen) - 1 == 5  # dim 5 < 20 eigenvalues listed


def test_diagnose_fem_rank_bound(tmp_path):
    out = tmp_path / "diagfem"
    code = run(["diagnose", "--h", "0.25", "--samples", "30", "--out-dir", str(out)])
    assert code == 0
    lines = (out / "diagnose.csv").read_text().splitlines()
    header = lines[0].split(",")
    row = lines[1].split(",")
    # 25 nodes, 16 on the boundary
    assert int(row[header.index("k_star")]) <= 25 - 16
    assert float(row[header.index("cond_base")]) > 1.0
    eigen = (out / "eigenvalues.csv").read_text().splitlines()
    assert len(eigen) - 1 == 20


def test_config_file_through_cli(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("h = 0.25\nsamples = 3\ntau = 1.0\nepsilon = 0\n")
    out = tmp_path / "out"
    code = run(["spde", "--config", str(cfg), "--out-dir", str(out)])
    assert code == 0
    manifest = (out / "manifest.txt").read_text()
    assert "samples = 3" in manifest
