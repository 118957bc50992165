"""Command-line entry points: study runners, noise calibration, and the
HTTP service."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, fields, replace

import click

from . import study as st

TUPLE_FIELDS = {
    "user_group_multipliers",
    "tool_angles_deg",
    "tracker_distances_mm",
    "detector_distances_mm",
    "levels",
}


def load_config(config_path: str | None, seed: int | None) -> st.StudyConfig:
    cfg = st.StudyConfig()
    if config_path:
        with open(config_path) as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(st.StudyConfig)}
        unknown = set(raw) - known
        if unknown:
            raise click.ClickException(f"unknown config keys: {sorted(unknown)}")
        for key in TUPLE_FIELDS & set(raw):
            raw[key] = tuple(raw[key])
        try:
            cfg = replace(cfg, **raw)
        except st.ConfigError as exc:
            raise click.ClickException(str(exc))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _parse_formats(formats: str):
    parts = tuple(p.strip() for p in formats.split(",") if p.strip())
    bad = set(parts) - {"json", "csv"}
    if bad:
        raise click.ClickException(f"unknown output formats: {sorted(bad)}")
    return parts


def _fail_check(violations):
    if violations:
        for v in violations:
            click.echo(f"CHECK FAIL: {v}", err=True)
        sys.exit(1)
    click.echo("CHECK PASS")


@click.group()
def main():
    """Desk-scale spine-navigation experiment runner and service."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="JSON study-config overrides.")
@click.option("--seed", type=int, default=None)
@click.option("--output-dir", type=click.Path(), default="results")
@click.option("--formats", default="json,csv", show_default=True,
              help="Comma-separated: json (structured report), csv (raw rows).")
@click.option("--check", is_flag=True,
              help="Exit nonzero if acceptance bands are violated.")
def phantom(config_path, seed, output_dir, formats, check):
    """Phantom accuracy study: registration RMSE under cycled factors."""
    cfg = load_config(config_path, seed)
    report = st.run_phantom_study(cfg)
    written = st.save_report(report, output_dir, "phantom",
                             _parse_formats(formats))
    for method in st.METHODS:
        s = report["methods"][method]["stats"]
        click.echo(
            f"{method}: mu={s['mean_mm']:.3f} mm sd={s['sd_mm']:.3f} "
            f"mu+1sd={s['mean_plus_1sd_mm']:.3f} "
            f"mu+1.96sd={s['mean_plus_1.96sd_mm']:.3f} "
            f"mu+2sd={s['mean_plus_2sd_mm']:.3f} (n={s['n']})"
        )
    for p in written:
        click.echo(f"wrote {p}")
    if check:
        bands = {st.POINT_BASED: (0.8, 1.2), st.AUTOMATIC_2D: (0.85, 1.25)}
        violations = []
        for method, (lo, hi) in bands.items():
            s = report["methods"][method]["stats"]
            if not lo <= s["mean_mm"] <= hi:
                violations.append(
                    f"{method} mean {s['mean_mm']:.3f} outside [{lo}, {hi}] mm"
                )
            if s["mean_plus_2sd_mm"] > 2.0:
                violations.append(
                    f"{method} mu+2sd {s['mean_plus_2sd_mm']:.3f} > 2.0 mm"
                )
        _fail_check(violations)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--seed", type=int, default=None)
@click.option("--mode", type=click.Choice([st.ROBOT_ASSISTED, st.NAVIGATION_ONLY]),
              default=st.ROBOT_ASSISTED, show_default=True)
@click.option("--output-dir", type=click.Path(), default="results")
@click.option("--formats", default="json,csv", show_default=True)
@click.option("--check", is_flag=True)
def cadaver(config_path, seed, mode, output_dir, formats, check):
    """Cadaver-style placement study: simulated screws, graded and tallied."""
    cfg = load_config(config_path, seed)
    report = st.run_cadaver_style_study(cfg, mode)
    written = st.save_report(report, output_dir, f"cadaver_{mode.lower()}",
                             _parse_formats(formats))
    gp = report["grade_percent"]
    click.echo(
        f"{mode}: " + " ".join(f"{g}={gp[g]:.1f}%" for g in "ABCDE")
        + f" shots/screw={report['shots']['mean_per_screw']:.2f}"
    )
    for p in written:
        click.echo(f"wrote {p}")
    if check:
        violations = []
        if mode == st.ROBOT_ASSISTED:
            if gp["A"] < 85.0:
                violations.append(f"grade A {gp['A']:.1f}% < 85%")
            if gp["A"] + gp["B"] < 95.0:
                violations.append(f"grade A+B {gp['A'] + gp['B']:.1f}% < 95%")
        else:
            if gp["A"] + gp["B"] < 90.0:
                violations.append(f"grade A+B {gp['A'] + gp['B']:.1f}% < 90%")
        _fail_check(violations)


@main.command()
@click.option("--target", type=float, required=True,
              help="Target mean RMSE in mm.")
@click.option("--method", type=click.Choice(list(st.METHODS)),
              default=st.POINT_BASED, show_default=True)
@click.option("--samples", type=int, default=500, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
@click.option("--seed", type=int, default=None)
@click.option("--output-dir", type=click.Path(), default="results")
@click.option("--check", is_flag=True,
              help="Exit nonzero if the achieved mean is off-target by >2%.")
def calibrate(target, method, samples, config_path, seed, output_dir, check):
    """Solve for the noise scalar reproducing a target mean RMSE."""
    cfg = load_config(config_path, seed)
    try:
        out = st.calibrate_noise(target, method, cfg=cfg, samples=samples)
    except st.NonMonotoneBracket as exc:
        raise click.ClickException(str(exc))
    import pathlib

    outdir = pathlib.Path(output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"calibration_{method}.json"
    path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    click.echo(json.dumps(out, sort_keys=True))
    click.echo(f"wrote {path}")
    if check:
        violations = []
        if target > 0 and abs(out["achieved_mu_mm"] - target) > 0.02 * target:
            violations.append(
                f"achieved {out['achieved_mu_mm']:.4f} mm off target "
                f"{target} by more than 2%"
            )
        _fail_check(violations)


@main.command()
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--data-dir", type=click.Path(), default=None,
              help="Directory for persisted session event logs.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="Unused fields ignored; reserved for parity.")
def serve(port, host, data_dir, seed, config_path):
    """Run the HTTP service consumed by the console UI."""
    import uvicorn

    from .service import create_app

    app = create_app(data_dir=data_dir, seed=seed)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
