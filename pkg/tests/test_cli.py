import json

from click.testing import CliRunner

from spinenav.cli import main


def test_phantom_check_passes(tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main, ["phantom", "--output-dir", str(tmp_path), "--check"]
    )
    assert result.exit_code == 0, result.output
    assert "CHECK PASS" in result.output
    assert (tmp_path / "phantom.json").exists()
    assert (tmp_path / "phantom_rows.csv").exists()


def test_phantom_check_fails_on_bad_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"point_fle_mm": 5.0, "pixel_sigma_px": 10.0}))
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["phantom", "--config", str(cfg), "--output-dir", str(tmp_path),
         "--check"],
    )
    assert result.exit_code == 1
    assert "CHECK FAIL" in result.output


def test_cadaver_check_both_modes(tmp_path):
    runner = CliRunner()
    for mode in ("ROBOT_ASSISTED", "NAVIGATION_ONLY"):
        result = runner.invoke(
            main,
            ["cadaver", "--mode", mode, "--output-dir", str(tmp_path),
             "--check"],
        )
        assert result.exit_code == 0, result.output
        assert "shots/screw=3.00" in result.output


def test_calibrate_writes_parameters(tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["calibrate", "--target", "0.99", "--method", "point_based",
         "--samples", "200", "--output-dir", str(tmp_path), "--check"],
    )
    assert result.exit_code == 0, result.output
    out = json.loads((tmp_path / "calibration_point_based.json").read_text())
    assert out["point_fle_mm"] > 0


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"not_a_field": 1}))
    runner = CliRunner()
    result = runner.invoke(main, ["phantom", "--config", str(cfg)])
    assert result.exit_code != 0
    assert "unknown config keys" in result.output


def test_seed_flag_changes_rows(tmp_path):
    runner = CliRunner()
    a = tmp_path / "a"
    b = tmp_path / "b"
    for seed, out in (("1", a), ("2", b)):
        result = runner.invoke(
            main, ["phantom", "--seed", seed, "--output-dir", str(out)]
        )
        assert result.exit_code == 0, result.output
    ja = json.loads((a / "phantom.json").read_text())
    jb = json.loads((b / "phantom.json").read_text())
    assert ja["rows"] != jb["rows"]
