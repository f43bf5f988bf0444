"""End-to-end tests for the command-line pipeline."""

import csv
import hashlib
import json

import pytest

from hemoflow.cli import load_config, main
from hemoflow.errors import ValidationError

FAST_CONFIG = """\
[flow]
cardiac_phases = 4

[noise]
seed = 77
"""


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    """One fast pipeline run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("demo")
    config = root / "demo.ini"
    config.write_text(FAST_CONFIG)
    out = root / "run1"
    rc = main(["run", "--config", str(config), "--out", str(out)])
    assert rc == 0, "demo pipeline run failed"
    return config, out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# =========================================================================
# Full pipeline
# =========================================================================

def test_run_emits_every_artifact_class(demo):
    _, out = demo
    for name in ("config.ini", "rheology.json", "flow.csv",
                 "windkessel.csv", "kspace_phase000.json",
                 "kspace_phase000.bin", "images_phase000.json",
                 "fields_systole.vtk", "stats.csv", "comparison.csv",
                 "report.md", "report.svg", "manifest.json"):
        assert (out / name).is_file(), f"missing artifact {name}"


def test_manifest_covers_artifacts_with_hashes(demo):
    _, out = demo
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["package"]["name"] == "hemoflow"
    assert len(manifest["config_sha256"]) == 64
    artifacts = manifest["artifacts"]
    assert "stats.csv" in artifacts and "manifest.json" not in artifacts
    recorded = artifacts["stats.csv"]["sha256"]
    actual = hashlib.sha256((out / "stats.csv").read_bytes()).hexdigest()
    assert recorded == actual, "manifest hash does not match file content"


def test_stats_cover_all_models_frames_and_segments(demo):
    _, out = demo
    rows = read_rows(out / "stats.csv")
    segments = {"AAo", "AArch", "pDAo", "dDAo"}
    assert {r["segment"] for r in rows} == segments
    params = {r["param"] for r in rows}
    for model in ("power_law", "newtonian_fit1", "literature_3.5e-03"):
        for quantity in ("wss", "el_rate", "osi"):
            assert f"{quantity}:{model}" in params
    wss_pl = [r for r in rows if r["param"] == "wss:power_law"]
    assert len(wss_pl) == 4 * 4, "4 segments x 4 cardiac phases expected"
    osi_rows = [r for r in rows if r["param"].startswith("osi")]
    assert all(r["frame"] == "" for r in osi_rows), "OSI is a cycle quantity"
    assert all(r["mean"] != "" for r in rows), "no segment may come out empty"


def test_run_is_deterministic_for_fixed_seed(demo, tmp_path):
    config, out1 = demo
    out2 = tmp_path / "run2"
    rc = main(["run", "--config", str(config), "--out", str(out2)])
    assert rc == 0
    for name in ("stats.csv", "comparison.csv", "kspace_phase000.bin",
                 "windkessel.csv", "manifest.json"):
        first = (out1 / name).read_bytes()
        second = (out2 / name).read_bytes()
        assert first == second, f"{name} differs between identical runs"


def test_different_seed_changes_kspace(demo, tmp_path):
    config, out1 = demo
    out2 = tmp_path / "run_other_seed"
    rc = main(["run", "--config", str(config), "--out", str(out2),
               "--seed", "91"])
    assert rc == 0
    assert (out1 / "kspace_phase000.bin").read_bytes() != \
        (out2 / "kspace_phase000.bin").read_bytes()


# =========================================================================
# Stage subcommands
# =========================================================================

def test_fit_rheology_prints_known_fits(capsys):
    rc = main(["fit-rheology", "--hct", "45"])
    assert rc == 0
    printed = capsys.readouterr().out
    values = {}
    for line in printed.splitlines():
        key, _, rest = line.partition("=")
        values[key.split("(")[0].strip()] = float(rest.split()[0])
    assert values["m"] == pytest.approx(2.42e-2, rel=1e-6)
    assert values["n"] == pytest.approx(0.72, rel=1e-6)
    assert values["newtonian_fit1"] == pytest.approx(7.71e-3, rel=0.05)
    assert values["newtonian_fit2"] == pytest.approx(3.52e-3, rel=0.05)


def test_windkessel_reference_outlet(capsys, tmp_path):
    trace = tmp_path / "trace.csv"
    rc = main(["windkessel", "--demo-flow", "--trace-out", str(trace)])
    assert rc == 0
    printed = capsys.readouterr().out
    mean_line = next(l for l in printed.splitlines()
                     if l.startswith("mean pressure"))
    mean = float(mean_line.split("=")[1].split()[0])
    assert 85.0 < mean < 100.0, f"mean outlet pressure {mean} mmHg"
    rows = read_rows(trace)
    assert len(rows) == 1001, "10 cycles x 1000 steps, final cycle inclusive"
    assert set(rows[0]) == {"time_s", "flow_ml_s", "pressure_mmhg",
                            "distal_pressure_mmhg"}


def test_synth_reconstruct_estimate_chain(demo, tmp_path):
    config, _ = demo
    synth_dir = tmp_path / "synth"
    rc = main(["synth-mri", "--config", str(config), "--out", str(synth_dir)])
    assert rc == 0
    kspace_files = sorted(synth_dir.glob("kspace_*.json"))
    assert len(kspace_files) == 4

    recon_dir = tmp_path / "recon"
    rc = main(["reconstruct", "--kspace", str(synth_dir),
               "--out", str(recon_dir)])
    assert rc == 0
    assert len(sorted(recon_dir.glob("images_*.json"))) == 4

    est_dir = tmp_path / "estimate"
    rc = main(["estimate", "--images", str(recon_dir),
               "--config", str(config), "--out", str(est_dir)])
    assert rc == 0
    assert (est_dir / "stats.csv").is_file()
    assert (est_dir / "comparison.csv").is_file()
    assert (est_dir / "fields_systole.vtk").is_file()
    rows = read_rows(est_dir / "comparison.csv")
    assert {r["param"] for r in rows} == {"wss", "osi", "el_rate"}


def test_compare_identical_models_is_all_zero(demo, tmp_path):
    _, out = demo
    table = tmp_path / "self.csv"
    rc = main(["compare", "--stats", str(out / "stats.csv"),
               "--reference", "power_law", "--alternative", "power_law",
               "--out", str(table)])
    assert rc == 0
    rows = read_rows(table)
    assert rows, "comparison table came out empty"
    for row in rows:
        assert float(row["absolute_difference"]) == 0.0
        assert float(row["relative_difference_pct"]) == 0.0


def test_compare_reports_newtonian_sign_per_segment(demo, tmp_path):
    _, out = demo
    table = tmp_path / "cmp.csv"
    rc = main(["compare", "--stats", str(out / "stats.csv"),
               "--reference", "power_law",
               "--alternative", "literature_3.5e-03",
               "--out", str(table)])
    assert rc == 0
    rows = [r for r in read_rows(table) if r["param"] == "wss"]
    assert len(rows) == 5, "4 segments plus the cross-segment row"
    # 3.5e-3 Pa s sits far below the power-law viscosity at these rates
    assert all(float(r["relative_difference_pct"]) < 0.0 for r in rows)


def test_report_renders_tables_and_svg(demo, tmp_path):
    _, out = demo
    report_dir = tmp_path / "report"
    rc = main(["report", "--stats", str(out / "stats.csv"),
               "--comparison", str(out / "comparison.csv"),
               "--out", str(report_dir)])
    assert rc == 0
    text = (report_dir / "report.md").read_text()
    for quantity in ("wss", "osi", "el_rate"):
        assert f"## {quantity}" in text
    leading = sum(1 for line in text.splitlines()
                  if line.startswith("| AAo |"))
    assert leading == 3, "one 4-segment summary table per quantity"
    assert "Model differences" in text
    svg = (report_dir / "report.svg").read_text()
    assert svg.startswith("<svg") and "<rect" in svg


# =========================================================================
# Config validation and exit codes
# =========================================================================

def test_unknown_config_key_is_named(tmp_path, capsys):
    config = tmp_path / "bad.ini"
    config.write_text("[noise]\nsigmafraction = 0.1\n")
    rc = main(["run", "--config", str(config), "--out",
               str(tmp_path / "out")])
    assert rc == 2
    message = capsys.readouterr().err
    assert "sigmafraction" in message, "error must name the unknown key"


def test_unknown_config_section_is_named(tmp_path, capsys):
    config = tmp_path / "bad.ini"
    config.write_text("[noize]\nseed = 1\n")
    rc = main(["run", "--config", str(config), "--out",
               str(tmp_path / "out")])
    assert rc == 2
    assert "noize" in capsys.readouterr().err


def test_missing_mesh_file_fails_validation(tmp_path):
    config = tmp_path / "bad.ini"
    config.write_text("[paths]\nmesh = /no/such/mesh.vtk\n")
    rc = main(["run", "--config", str(config), "--out",
               str(tmp_path / "out")])
    assert rc == 2


def test_unknown_model_name_fails_validation(tmp_path):
    config = tmp_path / "bad.ini"
    config.write_text("[comparison]\nmodels = casson\n")
    rc = main(["run", "--config", str(config), "--out",
               str(tmp_path / "out")])
    assert rc == 2


def test_infeasible_sequence_exits_3(tmp_path, capsys):
    config = tmp_path / "hot.ini"
    config.write_text("[sequence]\nadc_bandwidth_khz = 2000\n"
                      "[flow]\ncardiac_phases = 2\n")
    rc = main(["run", "--config", str(config), "--out",
               str(tmp_path / "out")])
    assert rc == 3
    assert "[stage mri]" in capsys.readouterr().err


def test_partial_outputs_retained_on_stage_failure(tmp_path):
    config = tmp_path / "hot.ini"
    config.write_text("[sequence]\nadc_bandwidth_khz = 2000\n"
                      "[flow]\ncardiac_phases = 2\n")
    out = tmp_path / "out"
    assert main(["run", "--config", str(config), "--out", str(out)]) == 3
    assert (out / "flow.csv").is_file(), "pre-failure artifacts must remain"


def test_init_demo_writes_loadable_config(tmp_path):
    target = tmp_path / "demo.ini"
    assert main(["init-demo", "--out", str(target)]) == 0
    cfg = load_config(target)
    assert cfg.hct == 45.0
    assert cfg.sequence.matrix == (11, 11, 36)
    assert main(["init-demo", "--out", str(target)]) == 2  # refuses overwrite
    assert main(["init-demo", "--out", str(target), "--force"]) == 0


def test_config_defaults_match_rendered_demo(tmp_path):
    target = tmp_path / "demo.ini"
    main(["init-demo", "--out", str(target)])
    assert load_config(target).text == load_config(None).text


def test_load_config_rejects_bad_values(tmp_path):
    config = tmp_path / "bad.ini"
    config.write_text("[pipe]\nradius_m = wide\n")
    with pytest.raises(ValidationError):
        load_config(config)
