"""Batch scenario runner and reporting front end.

Subcommands drive the simulator end to end: `harvest` runs full trials and
writes per-fruit and per-trial metrics, `calibrate` solves the hand-eye and
force-torque identification problems, `workspace` sweeps mounting positions
for reachability, and `render-debug` dumps a single synthetic frame. All
outputs are deterministic: identical configs and seeds produce byte-identical
files.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import click
import numpy as np
from scipy.spatial.transform import Rotation

from .behavior import HarvestPhase
from .calib import (
    CalibError,
    HandEyeSetup,
    calibrate_ft,
    calibrate_hand_eye,
    load_ft_samples,
    synthesize_ft_samples,
    synthesize_hand_eye_samples,
)
from .geom import CameraModel, Pose, look_at_pose
from .kin import (
    KinError,
    default_arm,
    default_observer,
    load_chain,
    workspace_analysis,
)
from .scene import (
    NOISE_PROFILES,
    FtParams,
    SceneSpec,
    dump_frame,
    generate_scene,
    render,
    scene_spec_from_dict,
)
from .trial import default_system_config, run_trial

EXIT_CONFIG = 2
EXIT_DEGENERATE = 3

PHASE_ORDER = [
    HarvestPhase.APPROACH_FRUIT,
    HarvestPhase.GRASP_FRUIT,
    HarvestPhase.PULL_FRUIT,
    HarvestPhase.CUT_PEDUNCLE,
    HarvestPhase.PLACE_FRUIT,
]


@dataclass(frozen=True)
class RunConfig:
    """Resolved run parameters: file values overridden by flags."""

    seeds: tuple[int, ...]
    noise: str
    out: str
    unit_scale: float | None
    scene: SceneSpec

    def __post_init__(self):
        if not self.seeds:
            raise click.ClickException("no seeds given")
        if self.noise not in NOISE_PROFILES:
            raise click.ClickException(f"unknown noise profile {self.noise!r}")


def _parse_seeds(text: str) -> tuple[int, ...]:
    """'1-6' or '1,3,5' (or a mix) to an ordered tuple."""
    seeds: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return tuple(seeds)


def _load_run_config(config_path, seeds, noise, out, unit_scale) -> RunConfig:
    data = {}
    if config_path is not None:
        if not os.path.isfile(config_path):
            click.echo(f"error: config file not found: {config_path}", err=True)
            sys.exit(EXIT_CONFIG)
        try:
            with open(config_path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as err:
            click.echo(f"error: cannot read config: {err}", err=True)
            sys.exit(EXIT_CONFIG)
    scene = SceneSpec()
    if "scene" in data:
        try:
            scene = scene_spec_from_dict(data["scene"])
        except (TypeError, ValueError) as err:
            click.echo(f"error: bad scene spec: {err}", err=True)
            sys.exit(EXIT_CONFIG)
    resolved_seeds = _parse_seeds(seeds) if seeds is not None else None
    if resolved_seeds is None:
        file_seeds = data.get("seeds", "1-6")
        resolved_seeds = (_parse_seeds(file_seeds)
                          if isinstance(file_seeds, str)
                          else tuple(int(s) for s in file_seeds))
    return RunConfig(
        seeds=resolved_seeds,
        noise=noise if noise is not None else data.get("noise", "nominal"),
        out=out if out is not None else data.get("out", "hortisim_out"),
        unit_scale=(unit_scale if unit_scale is not None
                    else data.get("unit_scale")),
        scene=scene,
    )


def _worker_count(n_jobs: int) -> int:
    limit = int(os.environ.get("HORTISIM_THREADS", "4"))
    return max(1, min(limit, n_jobs))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


@click.group()
def main():
    """Deterministic dual-arm harvesting simulator."""


# ---------------------------------------------------------------------------
# harvest
# ---------------------------------------------------------------------------

@main.command()
@click.option("--config", "config_path", default=None,
              help="JSON run config; flags override file values.")
@click.option("--seeds", default=None, help="Seed list, e.g. '1-6' or '1,3'.")
@click.option("--noise", default=None,
              help="Noise profile: " + "|".join(sorted(NOISE_PROFILES)))
@click.option("--out", default=None, help="Output directory.")
@click.option("--unit-scale", type=float, default=None,
              help="Collision velocity scaling unit distance (m).")
@click.option("--svg/--no-svg", default=False,
              help="Also write a phase-duration bar chart.")
def harvest(config_path, seeds, noise, out, unit_scale, svg):
    """Run full harvest trials and write metrics files."""
    cfg = _load_run_config(config_path, seeds, noise, out, unit_scale)
    system = default_system_config(NOISE_PROFILES[cfg.noise])
    if cfg.unit_scale is not None:
        system = replace(system, scale_config=replace(
            system.scale_config, unit_scale=cfg.unit_scale))

    def one(seed: int):
        scene = generate_scene(cfg.scene, seed)
        return run_trial(scene, system, seed)

    with ThreadPoolExecutor(_worker_count(len(cfg.seeds))) as pool:
        metrics = list(pool.map(one, cfg.seeds))

    os.makedirs(cfg.out, exist_ok=True)
    _write_fruit_jsonl(os.path.join(cfg.out, "fruits.jsonl"), metrics)
    totals = _write_trials_csv(os.path.join(cfg.out, "trials.csv"), metrics)
    stats = _write_phase_summary(
        os.path.join(cfg.out, "phase_summary.csv"), metrics)
    if svg:
        _write_phase_svg(os.path.join(cfg.out, "phases.svg"), stats)
    click.echo(
        f"{len(metrics)} trials, {totals['n']} fruits: "
        f"grasp {totals['grasp']}, cut {totals['cut']}, "
        f"place {totals['place']}, overall {totals['overall']}")


def _write_fruit_jsonl(path, metrics) -> None:
    with open(path, "w") as f:
        for m in metrics:
            for rec in m.fruits:
                row = {
                    "seed": m.seed,
                    "fruit_id": rec.fruit_id,
                    "grasp": rec.grasp,
                    "cut": rec.cut,
                    "place": rec.place,
                    "overall": rec.overall,
                    "phases": [p.value for p in rec.phases],
                    "phase_durations": {
                        k: round(v, 6)
                        for k, v in sorted(rec.phase_durations.items())
                    },
                }
                f.write(json.dumps(row, sort_keys=True) + "\n")


def _write_trials_csv(path, metrics) -> dict:
    totals = {"n": 0, "grasp": 0, "cut": 0, "place": 0, "overall": 0}
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "fruits", "grasp", "cut", "place",
                         "overall", "duration_s"])
        for m in metrics:
            c = m.counts()
            writer.writerow([m.seed, c["n"], c["grasp"], c["cut"],
                             c["place"], c["overall"], _fmt(m.total_duration)])
            for k in totals:
                totals[k] += c[k]
        writer.writerow(["total", totals["n"], totals["grasp"], totals["cut"],
                         totals["place"], totals["overall"],
                         _fmt(sum(m.total_duration for m in metrics))])
    return totals


def _phase_stats(metrics) -> list[tuple[str, int, float, float]]:
    """(phase, n, mean, stderr) per workflow phase over all fruit records."""
    stats = []
    for phase in PHASE_ORDER:
        values = [rec.phase_durations[phase.value]
                  for m in metrics for rec in m.fruits
                  if phase.value in rec.phase_durations]
        if not values:
            stats.append((phase.value, 0, 0.0, 0.0))
            continue
        arr = np.asarray(values)
        stderr = (float(np.std(arr, ddof=1)) / np.sqrt(len(arr))
                  if len(arr) > 1 else 0.0)
        stats.append((phase.value, len(arr), float(np.mean(arr)), stderr))
    return stats


def _write_phase_summary(path, metrics):
    stats = _phase_stats(metrics)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["phase", "count", "mean_s", "stderr_s"])
        for name, n, mean, stderr in stats:
            writer.writerow([name, n, _fmt(mean), _fmt(stderr)])
    return stats


def _write_phase_svg(path, stats) -> None:
    """Minimal hand-written bar chart of mean phase durations."""
    width, height, margin = 480, 240, 40
    plot_w = width - 2 * margin
    plot_h = height - 2 * margin
    peak = max((mean + err for _, _, mean, err in stats), default=1.0) or 1.0
    bar_w = plot_w / max(len(stats), 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}">',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    for i, (name, _, mean, err) in enumerate(stats):
        x = margin + i * bar_w + bar_w * 0.15
        h = plot_h * mean / peak
        y = height - margin - h
        parts.append(
            f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w * 0.7:.1f}" '
            f'height="{h:.1f}" fill="#4878a8"/>')
        if err > 0:
            cx = x + bar_w * 0.35
            e = plot_h * err / peak
            parts.append(
                f'<line x1="{cx:.1f}" y1="{y - e:.1f}" x2="{cx:.1f}" '
                f'y2="{y + e:.1f}" stroke="black"/>')
        parts.append(
            f'<text x="{x:.1f}" y="{height - margin + 14}" '
            f'font-size="9">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

@main.command()
@click.argument("kind", type=click.Choice(["ft", "handeye"]))
@click.option("--samples-file", default=None,
              help="CSV of recorded samples (ft only).")
@click.option("--synthesize", is_flag=True,
              help="Generate synthetic samples from built-in ground truth.")
@click.option("--samples", "n_samples", type=int, default=None,
              help="Synthetic sample count (default 45 ft / 2000 handeye).")
@click.option("--noise", "noise_sigma", type=float, default=0.0,
              help="Force noise sigma in N (ft).")
@click.option("--pixel-noise", type=float, default=0.0,
              help="Pixel noise sigma (handeye).")
@click.option("--seed", type=int, default=0)
@click.option("--out", default="calib_out")
def calibrate(kind, samples_file, synthesize, n_samples, noise_sigma,
              pixel_noise, seed, out):
    """Solve a calibration problem and write the result document."""
    os.makedirs(out, exist_ok=True)
    try:
        if kind == "ft":
            _calibrate_ft_cmd(samples_file, synthesize, n_samples or 45,
                              noise_sigma, seed, out)
        else:
            _calibrate_handeye_cmd(synthesize, n_samples or 2000,
                                   pixel_noise, seed, out)
    except CalibError as err:
        click.echo(f"error: calibration degenerate: {err.code}", err=True)
        sys.exit(EXIT_DEGENERATE)


_FT_TRUTH = FtParams(mass=0.9, com=(0.0, 0.0, 0.04),
                     force_bias=(0.1, -0.2, 0.05),
                     torque_bias=(0.002, 0.001, -0.003))


def _calibrate_ft_cmd(samples_file, synthesize, n_samples, noise_sigma,
                      seed, out) -> None:
    if samples_file is not None:
        if not os.path.isfile(samples_file):
            click.echo(f"error: samples file not found: {samples_file}",
                       err=True)
            sys.exit(EXIT_CONFIG)
        samples = load_ft_samples(samples_file)
    elif synthesize:
        samples = synthesize_ft_samples(_FT_TRUTH, n_samples=n_samples,
                                        noise_sigma=noise_sigma, seed=seed)
    else:
        click.echo("error: give --samples-file or --synthesize", err=True)
        sys.exit(EXIT_CONFIG)

    result = calibrate_ft(samples)
    p = result.params
    lines = [
        "hortisim force-torque calibration",
        f"samples: {len(samples)}",
        f"mass_kg: {p.mass:.9f}",
        f"com_m: {p.com[0]:.9f} {p.com[1]:.9f} {p.com[2]:.9f}",
        f"force_bias_n: {p.force_bias[0]:.9f} {p.force_bias[1]:.9f} "
        f"{p.force_bias[2]:.9f}",
        f"torque_bias_nm: {p.torque_bias[0]:.9f} {p.torque_bias[1]:.9f} "
        f"{p.torque_bias[2]:.9f}",
        f"force_residual_rms_n: {result.force_residual:.3e}",
        f"torque_residual_rms_nm: {result.torque_residual:.3e}",
    ]
    with open(os.path.join(out, "ft_calibration.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    click.echo(f"ft calibration: mass {p.mass:.4f} kg, "
               f"force residual {result.force_residual:.3e} N")


def _handeye_problem():
    """Default dual-arm rig with small mounting offsets as ground truth."""
    grasper = default_arm("grasper", Pose.identity())
    cutter = default_arm("cutter")
    observer = default_observer("observer")
    camera = CameraModel(fx=320.0, fy=320.0, cx=160.0, cy=120.0,
                         width=320, height=240, pose=Pose.identity())
    setup = HandEyeSetup(
        grasper=grasper, cutter=cutter, observer=observer,
        marker_offsets={"grasper": Pose(trans=(0.0, 0.0, 0.02)),
                        "cutter": Pose(trans=(0.0, 0.0, 0.02))},
        camera=camera,
    )
    truth = {
        "cutter_mount": Pose(
            Rotation.from_euler("z", np.deg2rad(2.0)).as_quat(),
            (0.5, 0.02, -0.01)),
        "observer_mount": Pose(
            Rotation.from_euler("y", np.deg2rad(-1.5)).as_quat(),
            (0.24, -0.1, 0.05)),
        "camera_mount": Pose(
            Rotation.from_euler("x", np.deg2rad(1.0)).as_quat(),
            (0.01, 0.005, 0.06)),
    }
    initial = {
        "cutter_mount": Pose(trans=(0.5, 0.0, 0.0)),
        "observer_mount": Pose(trans=(0.25, -0.1, 0.05)),
        "camera_mount": Pose(trans=(0.0, 0.0, 0.05)),
    }
    return setup, truth, initial


def _calibrate_handeye_cmd(synthesize, n_samples, pixel_noise, seed,
                           out) -> None:
    if not synthesize:
        click.echo("error: handeye requires --synthesize", err=True)
        sys.exit(EXIT_CONFIG)
    setup, truth, initial = _handeye_problem()
    samples = synthesize_hand_eye_samples(setup, truth, n_samples=n_samples,
                                          pixel_noise=pixel_noise, seed=seed)
    result = calibrate_hand_eye(samples, setup, initial)

    def pose_line(label: str, pose: Pose) -> str:
        q, t = pose.quat, pose.trans
        return (f"{label}: quat {q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f} "
                f"trans {t[0]:.9f} {t[1]:.9f} {t[2]:.9f}")

    lines = [
        "hortisim hand-eye calibration",
        f"samples: {len(samples)}",
        pose_line("cutter_mount", result.cutter_mount),
        pose_line("observer_mount", result.observer_mount),
        pose_line("camera_mount", result.camera_mount),
        f"mean_reprojection_px: {result.mean_reprojection_error:.6f}",
        f"max_reprojection_px: {float(np.max(result.residuals)):.6f}",
    ]
    with open(os.path.join(out, "handeye_calibration.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    click.echo(f"hand-eye calibration: mean reprojection "
               f"{result.mean_reprojection_error:.3f} px over {len(samples)}")


# ---------------------------------------------------------------------------
# workspace
# ---------------------------------------------------------------------------

def _grid_lengths(n: int) -> tuple[int, int, int]:
    """Near-cubic (a, b, c) with a*b*c >= n."""
    a = max(int(round(n ** (1.0 / 3.0))), 1)
    while True:
        b = max(int(np.ceil(np.sqrt(n / a))), 1)
        c = int(np.ceil(n / (a * b)))
        if a * b * c >= n:
            return a, b, c
        a += 1


def _mount_samples(n: int) -> list[tuple[Pose, Pose]]:
    """Deterministic grid of mirrored (grasper, cutter) mounting poses:
    lateral offset x side-to-side spacing x height."""
    na, nb, nc = _grid_lengths(n)
    samples = []
    for x_off in np.linspace(0.15, 0.45, na):
        for y in np.linspace(0.0, 0.2, nb):
            for z in np.linspace(0.3, 0.7, nc):
                samples.append((Pose(trans=(-x_off, y, z)),
                                Pose(trans=(x_off, y, z))))
    return samples[:n]


def _fruit_grid(n: int) -> list[Pose]:
    na, nb, nc = _grid_lengths(n)
    poses = []
    for x in np.linspace(-0.3, 0.3, na):
        for y in np.linspace(0.35, 0.45, nb):
            for z in np.linspace(0.85, 1.25, nc):
                poses.append(Pose(trans=(x, y, z)))
    return poses[:n]


@main.command()
@click.option("--grasper", "grasper_path", default=None,
              help="Grasper chain JSON (default: built-in arm).")
@click.option("--cutter", "cutter_path", default=None,
              help="Cutter chain JSON (default: built-in arm).")
@click.option("--mounts", type=int, default=84,
              help="Mounting samples (default 84, fine sweep 840).")
@click.option("--fruits", "n_fruits", type=int, default=27,
              help="Fruit poses (default 27, fine sweep 270).")
@click.option("--out", default="workspace_out")
def workspace(grasper_path, cutter_path, mounts, n_fruits, out):
    """Sweep mounting positions and report reachable-fruit fractions."""
    for label, path in (("grasper", grasper_path), ("cutter", cutter_path)):
        if path is not None and not os.path.isfile(path):
            click.echo(f"error: {label} chain file not found: {path}",
                       err=True)
            sys.exit(EXIT_CONFIG)
    if mounts <= 0 or n_fruits <= 0:
        click.echo("error: need at least one mount and one fruit pose",
                   err=True)
        sys.exit(EXIT_CONFIG)
    grasper = (load_chain(grasper_path) if grasper_path
               else default_arm("grasper"))
    cutter = load_chain(cutter_path) if cutter_path else default_arm("cutter")
    mount_samples = _mount_samples(mounts)
    fruit_poses = _fruit_grid(n_fruits)
    try:
        result = workspace_analysis(mount_samples, fruit_poses,
                                    grasper, cutter)
    except KinError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(EXIT_CONFIG)

    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "workspace.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "grasper_x", "grasper_y", "grasper_z",
                         "cutter_x", "cutter_y", "cutter_z",
                         "reachable", "fraction"])
        for i, ((gm, cm), count) in enumerate(
                zip(mount_samples, result.counts)):
            writer.writerow([
                i, _fmt(gm.trans[0]), _fmt(gm.trans[1]), _fmt(gm.trans[2]),
                _fmt(cm.trans[0]), _fmt(cm.trans[1]), _fmt(cm.trans[2]),
                int(count), _fmt(count / len(fruit_poses))])
    best_gm, best_cm = mount_samples[result.best_index]
    pct = 100.0 * result.best_fraction
    lines = [
        "hortisim workspace sweep",
        f"mount_samples: {len(mount_samples)}",
        f"fruit_poses: {len(fruit_poses)}",
        f"best_index: {result.best_index}",
        f"best_grasper_mount_m: {_fmt(best_gm.trans[0])} "
        f"{_fmt(best_gm.trans[1])} {_fmt(best_gm.trans[2])}",
        f"best_cutter_mount_m: {_fmt(best_cm.trans[0])} "
        f"{_fmt(best_cm.trans[1])} {_fmt(best_cm.trans[2])}",
        f"best_reachable_pct: {pct:.2f}",
        "reference_reachable_pct: 90.00",
    ]
    with open(os.path.join(out, "summary.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    click.echo(f"best mount sample {result.best_index}: "
               f"{pct:.1f}% of fruits reachable (reference 90%)")


# ---------------------------------------------------------------------------
# render-debug
# ---------------------------------------------------------------------------

@main.command("render-debug")
@click.option("--seed", type=int, default=1)
@click.option("--noise", default="zero",
              help="Noise profile: " + "|".join(sorted(NOISE_PROFILES)))
@click.option("--out", default="render_out")
def render_debug(seed, noise, out):
    """Render one synthetic observation frame and dump it to disk."""
    if noise not in NOISE_PROFILES:
        click.echo(f"error: unknown noise profile {noise!r}", err=True)
        sys.exit(EXIT_CONFIG)
    scene = generate_scene(SceneSpec(), seed)
    camera = CameraModel(
        fx=160.0, fy=160.0, cx=100.0, cy=75.0, width=200, height=150,
        pose=look_at_pose((0.0, 0.05, 1.05), (0.0, 0.5, 1.05)))
    frame = render(scene, camera, noise=NOISE_PROFILES[noise],
                   seed=seed, timestamp=0.0)
    dump_frame(frame, out)
    click.echo(f"wrote frame with {len(frame.masks)} masks to {out}")


if __name__ == "__main__":
    main()
