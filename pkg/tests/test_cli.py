import json

import numpy as np
import pytest
import yaml

from bsdelab import catalog
from bsdelab.cli import main
from bsdelab.errors import UsageError
from bsdelab.expressions import compile_expression, expression_process
from bsdelab.harness import (emit_report, render_records, run_catalog_entry,
                             run_scenario, to_csv, RunReport)


def write_config(tmp_path, config, name="scenario.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(config))
    return str(path)


def linear_config(**overrides):
    config = {
        "id": "linear-check",
        "kind": "linear",
        "seed": 77,
        "grid": {"horizon": 1.0, "n_steps": 32},
        "batch": 4000,
        "mu": "0.5",
        "nu": "0.3",
        "terminal": "x",
        "expects": [{"name": "y0", "value": 0.4946163812, "rel_tol": 0.05}],
    }
    config.update(overrides)
    return config


# --- expression language ---------------------------------------------------------


def test_expression_language():
    fn = compile_expression("exp(-t) * max(x, 0) + ind(x > 1) + min(abs(x), 2)")
    out = fn(1.0, np.array([-3.0, 0.5, 2.0]))
    np.testing.assert_allclose(out, [0.0 + 0 + 2.0,
                                     np.exp(-1) * 0.5 + 0 + 0.5,
                                     np.exp(-1) * 2 + 1 + 2.0])


@pytest.mark.parametrize("bad", [
    "__import__('os')", "x.attr", "lambda: 1", "f(x)", "x if t else 1",
    "[1,2]", "min(x)", "x @ x",
])
def test_expression_rejects_non_arithmetic(bad):
    with pytest.raises(UsageError):
        compile_expression(bad)


def test_expression_process_shapes(bm_batch_small):
    proc = expression_process("t + abs(x)")
    vals = proc(0.5, bm_batch_small.states[:, 3])
    assert vals.shape == (bm_batch_small.n_paths,)


# --- run / exit codes --------------------------------------------------------------


def test_run_linear_scenario(tmp_path):
    code = main(["run", write_config(tmp_path, linear_config()),
                 "--out", str(tmp_path / "out")])
    assert code == 0
    records = json.loads((tmp_path / "out" / "linear-check.json").read_text())
    names = [c["name"] for c in records["checks"]]
    assert "y0" in names
    verdict = next(c for c in records["checks"] if c["name"] == "y0")
    assert verdict["status"] == "pass"
    assert abs(float(verdict["value"]) - 0.4946) < 0.05


def test_missing_seed_is_usage_error(tmp_path):
    config = linear_config()
    del config["seed"]
    code = main(["run", write_config(tmp_path, config), "--out", str(tmp_path / "o")])
    assert code == 64


def test_unknown_kind_is_usage_error(tmp_path):
    code = main(["run", write_config(tmp_path, linear_config(kind="mystery")),
                 "--out", str(tmp_path / "o")])
    assert code == 64


def test_failed_expectation_exits_2(tmp_path):
    config = linear_config(expects=[{"name": "y0", "value": 10.0, "abs_tol": 0.001}])
    code = main(["run", write_config(tmp_path, config), "--out", str(tmp_path / "o")])
    assert code == 2


def test_missing_config_file(tmp_path):
    assert main(["run", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 64


# --- catalog -------------------------------------------------------------------------


EXPECTED_CATALOG = {
    # linear oracle scenario
    "linear-drift-vol-bm",
    # generator contract scenarios
    "bm-monotone-clipped-z", "exp-decay-sine-z", "cubic-decay-abs-z",
    "sqrt-kink-log-z", "coupled-pair-sqrt-z", "exp-plus-linear-monotone",
    "worst-case-z-drift", "linear-mu-nu",
    # growth-necessity, margin, truncation and membership studies
    "infinite-horizon-decay", "supnorm-margin-study",
    "truncation-lognormal-decay", "quartic-weight-qualitative",
    # Feynman-Kac set
    "fk-heat-quadratic", "fk-product-decay", "fk-constant",
    "fk-elliptic-harmonic", "fk-elliptic-cosh", "fk-elliptic-quadratic",
    # utility set
    "utility-worst-case-drift", "utility-clipped-quadratic",
}


def test_catalog_complete():
    assert EXPECTED_CATALOG <= set(catalog.catalog_ids())


def test_catalog_list_runs(capsys):
    assert main(["catalog", "list"]) == 0
    out = capsys.readouterr().out
    for entry_id in EXPECTED_CATALOG:
        assert entry_id in out


def test_catalog_run_smoke(tmp_path):
    code = main(["catalog", "run", "linear-drift-vol-bm", "--profile", "smoke",
                 "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "linear-drift-vol-bm.json").exists()


def test_catalog_unknown_id(tmp_path):
    assert main(["catalog", "run", "missing-id", "--out", str(tmp_path)]) == 64


# --- determinism ----------------------------------------------------------------------


def test_report_bytes_deterministic(tmp_path):
    a = run_catalog_entry("linear-drift-vol-bm", "smoke", seed=5)
    b = run_catalog_entry("linear-drift-vol-bm", "smoke", seed=5)
    path_a = emit_report(a, "structured-records", tmp_path / "a")
    path_b = emit_report(b, "structured-records", tmp_path / "b")
    assert open(path_a, "rb").read() == open(path_b, "rb").read()


def test_report_bytes_independent_of_jobs(tmp_path):
    a = run_catalog_entry("truncation-lognormal-decay", "smoke", seed=5, jobs=1)
    b = run_catalog_entry("truncation-lognormal-decay", "smoke", seed=5, jobs=4)
    assert to_csv(a) == to_csv(b)


# --- emission and re-rendering -----------------------------------------------------------


def test_csv_fixed_columns(tmp_path):
    report = run_catalog_entry("infinite-horizon-decay", "smoke", seed=5)
    csv_text = to_csv(report)
    assert csv_text.splitlines()[0] == "scenario,check,status,value,se,expected,tol"


def test_empty_report_header_only():
    report = RunReport("empty", "abc")
    assert to_csv(report) == "scenario,check,status,value,se,expected,tol\n"


def test_render_records_roundtrip(tmp_path):
    report = run_catalog_entry("infinite-horizon-decay", "smoke", seed=5)
    path = emit_report(report, "structured-records", tmp_path)
    rendered = render_records(open(path).read(), "csv")
    assert rendered == to_csv(report)


def test_report_command(tmp_path, capsys):
    report = run_catalog_entry("infinite-horizon-decay", "smoke", seed=5)
    path = emit_report(report, "structured-records", tmp_path)
    assert main(["report", path, "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("scenario,check,status")


def test_fk_artifact_csv(tmp_path):
    report = run_catalog_entry("fk-constant", "smoke", seed=5)
    emit_report(report, "csv", tmp_path)
    artifact = (tmp_path / "fk-constant.fk_compare.csv").read_text()
    assert artifact.splitlines()[0] == "t,x,u_fd,u_bsde,se,diff"
