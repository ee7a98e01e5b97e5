import json

import numpy as np
import pytest
from pydantic import ValidationError

from surfvem.config import get_settings, reset_settings
from surfvem.exceptions import ConfigError, ParseError
from surfvem.main import build_parser, main, resolve_config
from surfvem.models import ExperimentConfig, MeshFamily, StabKind
from surfvem.pipeline import case_summary, level_mesh, run_experiment
from surfvem.services.mesh import export_mesh, mesh_checksum


def test_test_case_defaults():
    tc1 = ExperimentConfig(test_case=1)
    assert (tc1.r, tc1.a, tc1.freq) == (1.1, 0.0, 5)
    assert tc1.mesh_family is MeshFamily.TRI
    assert tc1.levels == 4
    assert tc1.n_boundary_nodes == 8
    assert tc1.fit_window == 4
    assert tc1.orders == [1, 2, 3, 4]

    tc3 = ExperimentConfig(test_case=3, a=2.0)
    assert (tc3.r, tc3.a) == (2.0, 2.0)
    assert tc3.levels == 6
    assert tc3.fit_window == 2

    tc4 = ExperimentConfig(test_case=4)
    assert tc4.mesh_family is MeshFamily.POLY
    assert (tc4.levels, tc4.n_cells, tc4.n_boundary_nodes) == (5, 100, 32)

    assert ExperimentConfig(test_case=2).n_cells == 25
    assert ExperimentConfig(test_case=1, orders=[3, 1, 3]).orders == [1, 3]


@pytest.mark.parametrize(
    "fields",
    [
        dict(test_case=5),
        dict(test_case=1, a=0.5),
        dict(test_case=1, r=1.5),
        dict(test_case=2, mesh_family="tri"),
        dict(test_case=3, r=1.1),
        dict(test_case=3, a=1.0),
        dict(test_case=4, r=2.0),
        dict(test_case=4, gamma=1.0),
        dict(test_case=1, orders=[5]),
        dict(test_case=1, orders=[]),
        dict(test_case=1, unknown=1),
        dict(test_case=1, mesh_files=[]),
        dict(test_case=1, levels=2, mesh_files=["level0.json"]),
    ],
)
def test_invalid_configs(fields):
    with pytest.raises(ValidationError):
        ExperimentConfig(**fields)


def test_config_hash_ignores_output_location():
    first = ExperimentConfig(test_case=1, output_dir="a")
    second = ExperimentConfig(test_case=1, output_dir="b", parallel_levels=True)
    assert first.config_hash() == second.config_hash()
    assert first.config_hash() != ExperimentConfig(test_case=1, seed=3).config_hash()


def test_config_precedence(tmp_path, monkeypatch):
    config_file = tmp_path / "case.json"
    config_file.write_text(json.dumps({"test_case": 2, "seed": 1, "levels": 2, "lloyd_iterations": 7}))
    parser = build_parser()

    config = resolve_config(parser.parse_args(["--config-file", str(config_file)]))
    assert (config.test_case, config.seed, config.levels, config.lloyd_iterations) == (2, 1, 2, 7)

    monkeypatch.setenv("SURFVEM_DEFAULT_SEED", "5")
    reset_settings()
    config = resolve_config(parser.parse_args(["--config-file", str(config_file)]))
    assert config.seed == 5
    assert config.lloyd_iterations == 7

    config = resolve_config(parser.parse_args(["--config-file", str(config_file), "--seed", "9", "--levels", "3"]))
    assert (config.seed, config.levels) == (9, 3)
    assert get_settings().default_seed == 5


def test_cli_flags_map_to_config():
    args = build_parser().parse_args(
        ["--test-case", "3", "--a", "2", "--orders", "1", "2", "--stab-kind", "d_recipe", "--w-hat", "1", "0.5", "--surface-weighted"]
    )
    config = resolve_config(args)
    assert config.a == 2.0
    assert config.orders == [1, 2]
    assert config.stab_kind is StabKind.D_RECIPE
    assert config.w_hat == (1.0, 0.5)
    assert config.surface_weighted
    assert not config.parallel_levels


def test_resolve_config_errors(tmp_path):
    parser = build_parser()
    with pytest.raises(ConfigError):
        resolve_config(parser.parse_args([]))
    with pytest.raises(ConfigError):
        resolve_config(parser.parse_args(["--test-case", "1", "--r", "1.5"]))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ParseError):
        resolve_config(parser.parse_args(["--config-file", str(broken)]))


def test_main_reports_config_errors(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["--test-case", "1", "--r", "1.5", "--output-dir", str(out)]) == 2
    report = json.loads((out / "error.json").read_text())
    assert report["error"] == "ConfigError"
    assert report["exit_code"] == 2
    assert "ConfigError" in capsys.readouterr().err


def test_level_meshes_follow_the_test_case():
    tc2 = ExperimentConfig(test_case=2, n_cells=8, lloyd_iterations=3)
    first, second = level_mesh(tc2, 0), level_mesh(tc2, 1)
    assert (first.n_boundary_nodes, second.n_boundary_nodes) == (8, 16)
    assert first.mesh.n_cells == second.mesh.n_cells == 8

    tc1 = ExperimentConfig(test_case=1)
    assert level_mesh(tc1, 1).mesh.n_cells == 4 * level_mesh(tc1, 0).mesh.n_cells


def test_small_run_writes_identical_tables(tmp_path):
    config = ExperimentConfig(test_case=1, levels=2, orders=[1], output_dir=str(tmp_path / "a"))
    result = run_experiment(config)
    for name in ("convergence.csv", "regularity.csv", "plot_l2.svg", "plot_h1.svg", "summary.json"):
        assert (tmp_path / "a" / name).exists()
    assert len(result.reports) == 1
    assert [row.level for row in result.reports[0].rows] == [0, 1]
    assert result.reports[0].rows[1].err_l2 < result.reports[0].rows[0].err_l2
    assert result.reports[0].rows[0].runtime_ms is None

    again = run_experiment(config.model_copy(update={"output_dir": str(tmp_path / "b")}))
    parallel = run_experiment(config.model_copy(update={"output_dir": str(tmp_path / "c"), "parallel_levels": True}))
    reference = (tmp_path / "a" / "convergence.csv").read_bytes()
    assert (tmp_path / "b" / "convergence.csv").read_bytes() == reference
    assert (tmp_path / "c" / "convergence.csv").read_bytes() == reference
    assert again.config_hash == parallel.config_hash == result.config_hash

    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["config_hash"] == result.config_hash
    assert summary["orders"][0]["k"] == 1
    header = reference.decode().splitlines()[0].split(",")
    assert header[:4] == ["test_case", "mesh_family", "k", "level"]


def test_sphere_run(tmp_path):
    config = ExperimentConfig(
        test_case=4, levels=2, orders=[1], n_cells=8, n_boundary_nodes=16,
        lloyd_iterations=5, output_dir=str(tmp_path), record_timings=True,
    )
    result = run_experiment(config)
    rows = result.reports[0].rows
    assert [row.n_cells for row in rows] == [8, 32]
    assert all(np.isfinite(row.err_l2) and row.err_l2 > 0.0 for row in rows)
    assert all(row.runtime_ms is not None for row in rows)
    assert rows[1].eoc_l2 is not None
    assert case_summary(result)[0][0] == 1


def test_main_runs_a_case(tmp_path):
    out = tmp_path / "run"
    assert main(["--test-case", "2", "--levels", "1", "--orders", "1", "--n-cells", "6",
                 "--lloyd-iterations", "3", "--output-dir", str(out)]) == 0
    assert (out / "convergence.csv").exists()
    assert not (out / "error.json").exists()


def test_imported_meshes_replace_generated_levels(tmp_path):
    generated = ExperimentConfig(test_case=1, levels=2, orders=[1], output_dir=str(tmp_path / "generated"))
    files = [str(export_mesh(level_mesh(generated, level).mesh, tmp_path / f"level{level}.json")) for level in range(2)]
    assert ExperimentConfig(test_case=1, mesh_files=files).levels == 2

    out = tmp_path / "imported"
    assert main(["--test-case", "1", "--orders", "1", "--mesh-files", *files, "--output-dir", str(out)]) == 0
    reference = run_experiment(generated)
    imported = run_experiment(generated.model_copy(update={"mesh_files": files, "output_dir": str(out)}))
    assert [row.mesh_checksum for row in imported.regularity] == [row.mesh_checksum for row in reference.regularity]
    assert imported.regularity[0].mesh_checksum == mesh_checksum(level_mesh(generated, 0).mesh)
    for first, second in zip(imported.reports[0].rows, reference.reports[0].rows):
        assert first.err_l2 == pytest.approx(second.err_l2, rel=1e-12)


def test_missing_mesh_file_is_a_parse_error(tmp_path):
    out = tmp_path / "run"
    assert main(["--test-case", "1", "--orders", "1", "--mesh-files", str(tmp_path / "none.json"),
                 "--output-dir", str(out)]) == ParseError.exit_code
    assert json.loads((out / "error.json").read_text())["error"] == "ParseError"


@pytest.mark.slow
def test_polygonal_high_order_rates(tmp_path):
    config = ExperimentConfig(test_case=1, mesh_family="poly", orders=[3, 4], output_dir=str(tmp_path))
    for k, slope_l2, slope_h1 in case_summary(run_experiment(config)):
        assert slope_l2 >= k + 0.7
        assert slope_h1 >= k - 0.3


@pytest.mark.slow
@pytest.mark.parametrize("n_cells", [25, 100])
def test_boundary_refinement_keeps_errors_flat(tmp_path, n_cells):
    config = ExperimentConfig(test_case=2, n_cells=n_cells, output_dir=str(tmp_path))
    result = run_experiment(config)
    assert [row.n_boundary_nodes for row in result.regularity] == [8, 16, 32, 64, 128]
    for report in result.reports:
        l2 = [row.err_l2 for row in report.rows]
        h1 = [row.err_h1 for row in report.rows]
        assert max(l2) <= 2.0 * min(l2)
        assert max(h1) <= 2.0 * min(h1)


@pytest.mark.slow
@pytest.mark.parametrize("a, orders, floors", [(0.5, [1, 2], [1.8, 2.8]), (2.0, [3, 4], [3.3, 4.3])])
def test_perturbed_surface_rates(tmp_path, a, orders, floors):
    result = run_experiment(ExperimentConfig(test_case=3, a=a, orders=orders, output_dir=str(tmp_path)))
    for report, floor in zip(result.reports, floors):
        assert report.rows[-1].eoc_l2 >= floor


@pytest.mark.slow
def test_sphere_rates(tmp_path):
    result = run_experiment(ExperimentConfig(test_case=4, orders=[1, 4], output_dir=str(tmp_path)))
    first, fourth = result.reports
    assert len(fourth.rows) == 5
    assert fourth.rows[-1].err_l2 <= 1e-8
    assert fourth.rows[-1].eoc_l2 >= 4.5
    assert first.rows[-1].eoc_l2 >= 1.8
