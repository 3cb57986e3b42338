import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import capmodel
from capmodel import CapacitanceModel, FitError
from field import ElectrodeArray, FieldConstants
from kde import Bandwidth, DensityGrid, gaussian_target, save_grid_csv, save_grid_pgm, silverman_bandwidth, uniform_positions
from nnmap import PotentialMap, load_checkpoint, save_checkpoint
from optim import AdamConfig
from solver import (
    ControlProblem,
    PotentialSchedule,
    SolveError,
    SolverSettings,
    endpoint_gap,
    potential_snapshot,
    rollout,
    solve,
    trajectory_frame,
)

VERSION = "0.1.0"
THREADS_ENV = "DEPSHAPER_THREADS"

# Exit codes
EXIT_OK = 0
EXIT_ABORT = 1
EXIT_INPUT = 2
EXIT_FIT = 3
EXIT_RESIDUAL = 4

# Snapshot fractions of the horizon used when a scenario names none
SNAPSHOT_FRACTIONS = (0.0, 0.3, 0.6, 0.99)

logger = logging.getLogger("depshaper")


class ScenarioError(ValueError):
    """Schema violation; ``pointer`` is the JSON pointer of the offending value."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


def _number(low: Optional[float] = None, positive: bool = False):
    def check(value, pointer):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
            raise ScenarioError(pointer, f"expected a finite number, got {value!r}")
        if positive and not value > 0:
            raise ScenarioError(pointer, f"must be positive, got {value}")
        if low is not None and value < low:
            raise ScenarioError(pointer, f"must be at least {low}, got {value}")
        return float(value)

    return check


def _integer(low: int = 0):
    def check(value, pointer):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ScenarioError(pointer, f"expected an integer, got {value!r}")
        if value < low:
            raise ScenarioError(pointer, f"must be at least {low}, got {value}")
        return value

    return check


def _boolean(value, pointer):
    if not isinstance(value, bool):
        raise ScenarioError(pointer, f"expected true or false, got {value!r}")
    return value


def _string(choices: Optional[Sequence[str]] = None):
    def check(value, pointer):
        if not isinstance(value, str):
            raise ScenarioError(pointer, f"expected a string, got {value!r}")
        if choices is not None and value not in choices:
            raise ScenarioError(pointer, f"must be one of {list(choices)}, got {value!r}")
        return value

    return check


def _numbers(length: Optional[int] = None, item=None):
    item = item or _number()

    def check(value, pointer):
        if not isinstance(value, list):
            raise ScenarioError(pointer, f"expected a list, got {value!r}")
        if length is not None and len(value) != length:
            raise ScenarioError(pointer, f"expected {length} entries, got {len(value)}")
        return [item(v, f"{pointer}/{i}") for i, v in enumerate(value)]

    return check


def _section(schema: Dict[str, Any]):
    def check(value, pointer):
        if not isinstance(value, dict):
            raise ScenarioError(pointer, f"expected an object, got {type(value).__name__}")
        for key in value:
            if key not in schema:
                raise ScenarioError(f"{pointer}/{key}", "unknown key")
        return {key: schema[key](v, f"{pointer}/{key}") for key, v in value.items()}

    return check


SCHEMA = _section(
    {
        "name": _string(),
        "seed": _integer(0),
        "deterministic": _boolean,
        "mode": _string(("continuous", "collocation")),
        "domain_mm": _numbers(4),
        "horizon_s": _number(positive=True),
        "time_samples": _integer(2),
        "times_s": _numbers(),
        "electrodes": _section(
            {"nx": _integer(1), "ny": _integer(1), "pitch_mm": _number(positive=True), "v_max_v": _number(positive=True)}
        ),
        "capacitance": _section({"a_pf": _number(positive=True), "c_mm": _number(positive=True), "model_path": _string()}),
        "field": _section(
            {
                "mu_nn_s_per_mm": _number(positive=True),
                "energy_scale_pf": _number(positive=True),
                "gh_order": _integer(2),
                "energy_form": _string(("gh", "discrete", "normalized")),
            }
        ),
        "particles": _section(
            {"count": _integer(1), "layout": _string(("uniform",)), "positions_mm": _numbers(item=_numbers(2))}
        ),
        "target": _section({"mean_mm": _numbers(2), "sigma_mm": _number(positive=True)}),
        "bandwidth": _section({"rule": _string(("silverman",)), "h_mm": _numbers(2, _number(positive=True))}),
        "grid": _section({"cells": _integer(1)}),
        "networks": _section(
            {
                "trajectory_hidden": _integer(1),
                "potential_hidden": _integer(1),
                "potential_init_scale": _number(positive=True),
            }
        ),
        "optimizer": _section(
            {
                "iterations": _integer(0),
                "lr": _number(positive=True),
                "beta1": _number(low=0.0),
                "beta2": _number(low=0.0),
                "eps_adam": _number(positive=True),
            }
        ),
        "dual": _section(
            {
                "lambda0": _number(low=0.0),
                "alpha": _number(positive=True),
                "eps_tol": _number(positive=True),
                "every": _integer(1),
                "residual_grid_multiplier": _boolean,
            }
        ),
        "collocation_batch": _integer(1),
        "box_penalty": _number(low=0.0),
        "snapshot_times_s": _numbers(),
        "output_dir": _string(),
        "rollout_substeps": _integer(1),
    }
)

REQUIRED = ("domain_mm", "horizon_s", "electrodes", "capacitance", "particles", "target")


@dataclass(frozen=True)
class Scenario:
    """A validated scenario document and the directory it was read from."""

    data: Dict[str, Any]
    base_dir: Path
    digest: str

    @classmethod
    def from_dict(cls, document: Any, base_dir: Path = Path("."), digest: str = "") -> "Scenario":
        data = SCHEMA(document, "")
        for key in REQUIRED:
            if key not in data:
                raise ScenarioError(f"/{key}", "required key is missing")
        x1_min, x1_max, x2_min, x2_max = data["domain_mm"]
        if not (x1_min < x1_max and x2_min < x2_max):
            raise ScenarioError("/domain_mm", "bounds must be ordered as [x1_min, x1_max, x2_min, x2_max]")
        for key in ("nx", "ny", "pitch_mm", "v_max_v"):
            if key not in data["electrodes"]:
                raise ScenarioError(f"/electrodes/{key}", "required key is missing")
        cap = data["capacitance"]
        if "model_path" not in cap and not ("a_pf" in cap and "c_mm" in cap):
            raise ScenarioError("/capacitance", "give either model_path or both a_pf and c_mm")
        if "sigma_mm" not in data["target"]:
            raise ScenarioError("/target/sigma_mm", "required key is missing")
        if "times_s" in data:
            times = np.asarray(data["times_s"], dtype=float)
            if times.size < 2 or np.any(np.diff(times) <= 0):
                raise ScenarioError("/times_s", "time samples must be strictly increasing")
            if times[0] != 0.0 or not np.isclose(times[-1], data["horizon_s"]):
                raise ScenarioError("/times_s", "time samples must run from 0 to horizon_s")
        positions = data["particles"].get("positions_mm")
        if positions is None and "count" not in data["particles"]:
            raise ScenarioError("/particles", "give either count or positions_mm")
        return cls(data, Path(base_dir), digest)

    @classmethod
    def load(cls, path) -> "Scenario":
        path = Path(path)
        raw = path.read_bytes()
        try:
            document = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ScenarioError("", f"not a JSON document: {exc}")
        return cls.from_dict(document, path.parent, hashlib.sha256(raw).hexdigest())

    def get(self, section: str, key: str, default=None):
        return self.data.get(section, {}).get(key, default)

    @property
    def seed(self) -> int:
        return self.data.get("seed", 0)

    @property
    def deterministic(self) -> bool:
        return self.data.get("deterministic", False)

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        return tuple(self.data["domain_mm"])

    def times(self) -> np.ndarray:
        if "times_s" in self.data:
            return np.asarray(self.data["times_s"], dtype=float)
        return np.linspace(0.0, self.data["horizon_s"], self.data.get("time_samples", 100))

    def electrode_array(self) -> ElectrodeArray:
        e = self.data["electrodes"]
        x1_min, x1_max, x2_min, x2_max = self.bounds
        center = (0.5 * (x1_min + x1_max), 0.5 * (x2_min + x2_max))
        return ElectrodeArray.grid(e["nx"], e["ny"], e["pitch_mm"], e["v_max_v"], center)

    def capacitance(self) -> CapacitanceModel:
        cap = self.data["capacitance"]
        delta = 0.5 * self.data["electrodes"]["pitch_mm"]
        if "model_path" in cap:
            model = capmodel.load_model(self.base_dir / cap["model_path"])
            if not np.isclose(model.delta, delta):
                raise ScenarioError("/capacitance/model_path", f"model delta {model.delta} != half pitch {delta}")
            return model
        return CapacitanceModel.single(cap["a_pf"], cap["c_mm"], delta)

    def initial_positions(self) -> np.ndarray:
        particles = self.data["particles"]
        if "positions_mm" in particles:
            return np.asarray(particles["positions_mm"], dtype=float)
        return uniform_positions(particles["count"], self.bounds)

    def problem(self) -> ControlProblem:
        cap = self.capacitance()
        x0 = self.initial_positions()
        consts = FieldConstants(
            sigma=cap.sigma,
            mu=self.get("field", "mu_nn_s_per_mm", 1.0),
            energy_scale=self.get("field", "energy_scale_pf", 1.0),
            gh_order=self.get("field", "gh_order", 30),
            energy_form=self.get("field", "energy_form", "gh"),
        )
        cells = self.get("grid", "cells", 64)
        grid = DensityGrid.empty(self.bounds, cells)
        sigma = self.data["target"]["sigma_mm"]
        target = gaussian_target(self.get("target", "mean_mm", [0.0, 0.0]), sigma, grid)
        h = self.get("bandwidth", "h_mm")
        bandwidth = Bandwidth(*h) if h is not None else silverman_bandwidth(sigma, x0.shape[0])
        return ControlProblem(
            bounds=self.bounds,
            times=self.times(),
            array=self.electrode_array(),
            cap=cap,
            consts=consts,
            x0=x0,
            target=target,
            bandwidth=bandwidth,
            mode=self.data.get("mode", "continuous"),
        )

    def settings(self, seed: Optional[int] = None, deterministic: Optional[bool] = None) -> SolverSettings:
        adam = AdamConfig(
            lr=self.get("optimizer", "lr", 1e-3),
            beta1=self.get("optimizer", "beta1", 0.9),
            beta2=self.get("optimizer", "beta2", 0.999),
            eps=self.get("optimizer", "eps_adam", 1e-8),
        )
        return SolverSettings(
            iterations=self.get("optimizer", "iterations", 2000),
            adam=adam,
            dual_every=self.get("dual", "every", 50),
            lambda0=self.get("dual", "lambda0", 1.0),
            alpha=self.get("dual", "alpha"),
            eps_tol=self.get("dual", "eps_tol", 1e-4),
            collocation_batch=self.data.get("collocation_batch"),
            box_penalty=self.data.get("box_penalty", 10.0),
            residual_grid_multiplier=self.get("dual", "residual_grid_multiplier", False),
            trajectory_hidden=self.get("networks", "trajectory_hidden", 32),
            potential_hidden=self.get("networks", "potential_hidden", 32),
            potential_init_scale=self.get("networks", "potential_init_scale", 0.1),
            seed=self.seed if seed is None else seed,
            deterministic=self.deterministic if deterministic is None else deterministic,
        )

    def snapshot_times(self) -> List[float]:
        if "snapshot_times_s" in self.data:
            return list(self.data["snapshot_times_s"])
        return [f * self.data["horizon_s"] for f in SNAPSHOT_FRACTIONS]


def resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        if flag < 1:
            raise ValueError(f"--threads must be positive, got {flag}")
        return flag
    env = os.environ.get(THREADS_ENV)
    if env is None:
        return 1
    try:
        threads = int(env)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}")
    if threads < 1:
        raise ValueError(f"{THREADS_ENV} must be positive, got {threads}")
    return threads


def _write_json(path: Path, data: Dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_grid(out: Path, stem: str, grid: DensityGrid, written: List[str]) -> None:
    save_grid_csv(grid, out / f"{stem}.csv")
    save_grid_pgm(grid, out / f"{stem}.pgm")
    written.extend([f"{stem}.csv", f"{stem}.pgm"])


def _write_manifest(
    out: Path, scenario: Scenario, seed: int, command: str, written: List[str], threads: int = 1
) -> None:
    _write_json(
        out / "manifest.json",
        {
            "version": VERSION,
            "command": command,
            "scenario_sha256": scenario.digest,
            "seed": seed,
            "deterministic": scenario.deterministic,
            "threads": threads,
            "files": sorted(written),
        },
    )


def _write_workbook(path: Path, sheets: Dict[str, pd.DataFrame]) -> None:
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        for name, frame in sheets.items():
            frame.to_excel(writer, sheet_name=name, index=False)


def cmd_synth(args) -> int:
    grid = np.linspace(args.start, args.stop, args.count)
    samples = capmodel.synth_samples(args.a, args.c, args.delta, grid, noise_rel=args.noise, seed=args.seed)
    capmodel.save_samples_csv(samples, args.out)
    print(f"✓ Wrote {args.count} synthetic samples to: {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    if args.terms < 1:
        print(f"✗ --terms must be at least 1, got {args.terms}", file=sys.stderr)
        return EXIT_INPUT
    print(f"\n=== Fitting {args.terms}-term capacitance model ===")
    samples = capmodel.load_samples_csv(args.samples)
    try:
        model, rms = capmodel.fit(samples, m=args.terms, delta=args.delta)
    except FitError as exc:
        print(f"✗ {exc}", file=sys.stderr)
        if args.out:
            capmodel.save_model(exc.model, args.out)
            print(f"Saved best iterate to: {args.out}", file=sys.stderr)
        return EXIT_FIT
    for i, (a, c) in enumerate(model.terms, start=1):
        print(f"  term {i}: a = {a:.6g}, c = {c:.6g}")
    print(f"  delta = {model.delta:.6g}, sigma = {model.sigma:.6g}")
    print(f"  RMS residual: {rms:.3e}")
    if args.out:
        capmodel.save_model(model, args.out)
        print(f"\n✓ Saved model to: {args.out}")
    return EXIT_OK


def _output_dir(args, scenario: Scenario) -> Path:
    if args.out:
        out = Path(args.out)
    elif "output_dir" in scenario.data:
        out = scenario.base_dir / scenario.data["output_dir"]
    else:
        out = Path("depshaper_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(report, problem: ControlProblem) -> Tuple[Dict, Dict]:
    metadata = {
        "mode": report.mode,
        "bounds": list(problem.bounds),
        "horizon": problem.horizon,
        "n_particles": problem.n_particles,
        "electrodes": problem.array.count,
        "predicted_endpoints": report.positions.tolist(),
    }
    networks = {}
    if isinstance(report.control, PotentialMap):
        networks["potential"] = report.control.net.with_params(report.control_params)
        networks["trajectory_x1"], networks["trajectory_x2"] = report.bundle.nets
        metadata["v_max"] = report.control.v_max
    elif isinstance(report.control, PotentialSchedule):
        metadata["schedule"] = {"times": report.control.times.tolist(), "values": report.control.values.tolist()}
    return networks, metadata


def _rollout_summary(result, problem: ControlProblem, predicted) -> Dict:
    summary = {"exited": int(result.exited.sum()), "bandwidth": [problem.bandwidth.h1, problem.bandwidth.h2]}
    if predicted is not None:
        gaps = endpoint_gap(result.positions[-1], np.asarray(predicted, dtype=float))
        h = max(problem.bandwidth.h1, problem.bandwidth.h2)
        summary.update(
            {
                "median_gap": float(np.median(gaps)),
                "max_gap": float(np.max(gaps)),
                "median_gap_bandwidths": float(np.median(gaps) / h),
            }
        )
    return summary


def _with_flags(scenario: Scenario, args) -> Scenario:
    if args.deterministic:
        return Scenario({**scenario.data, "deterministic": True}, scenario.base_dir, scenario.digest)
    return scenario


def cmd_solve(args) -> int:
    scenario = Scenario.load(args.scenario)
    seed = scenario.seed if args.seed is None else args.seed
    threads = resolve_threads(args.threads)
    logger.info("scenario %s sha256=%s seed=%d", args.scenario, scenario.digest, seed)
    scenario = _with_flags(scenario, args)
    problem = scenario.problem()
    settings = scenario.settings(seed=seed)
    out = _output_dir(args, scenario)

    print(f"\n=== Solving {scenario.data.get('name', Path(args.scenario).stem)} ({problem.mode}) ===")
    print(f"Particles: {problem.n_particles}, electrodes: {problem.array.count}, time samples: {problem.times.size}")
    print(f"Bandwidth: h1 = {problem.bandwidth.h1:.4g}, h2 = {problem.bandwidth.h2:.4g}\n")

    report = solve(problem, settings)
    source = report.control.as_source(report.control_params) if isinstance(report.control, PotentialMap) else report.control
    substeps = scenario.data.get("rollout_substeps", 10)
    rolled = rollout(problem, source, substeps=substeps, threads=threads, deterministic=settings.deterministic)

    written: List[str] = []
    document = report.to_dict()
    document["scenario"] = scenario.data.get("name", Path(args.scenario).stem)
    document["seed"] = seed
    document["rollout"] = _rollout_summary(rolled, problem, report.positions)
    _write_json(out / "report.json", document)
    written.append("report.json")

    frame = trajectory_frame(report.times, report.trajectories)
    frame.to_csv(out / "trajectories.csv", index=False)
    written.append("trajectories.csv")
    _write_grid(out, "kde_final", report.kde, written)
    _write_grid(out, "target", problem.target, written)

    for t in scenario.snapshot_times():
        _write_grid(out, f"potential_t{t:.4g}", potential_snapshot(problem, source, t), written)

    networks, metadata = _checkpoint(report, problem)
    save_checkpoint(out / "checkpoint.json", networks, metadata)
    written.append("checkpoint.json")

    if args.xlsx:
        _write_workbook(
            out / "results.xlsx",
            {
                "trajectories": frame,
                "kde_final": report.kde.to_frame(),
                "target": problem.target.to_frame(),
                "history": report.history_frame(),
            },
        )
        written.append("results.xlsx")
    _write_manifest(out, scenario, seed, "solve", written, threads)

    print("=== Result ===")
    print(f"MSE initial: {report.mse_initial:.4e}")
    print(f"MSE final:   {report.mse_final:.4e}  (reduction {100 * report.mse_reduction:.1f}%)")
    print(f"Mean residual per point: {report.residual_mean:.3e}  (lambda = {report.lambda_final:.4g})")
    print(f"Rollout median endpoint gap: {document['rollout']['median_gap_bandwidths']:.2f} bandwidths ({threads} thread(s))")
    if report.status != "ok":
        print(f"✗ Dynamics residual above tolerance; results written to: {out}", file=sys.stderr)
        return EXIT_RESIDUAL
    print(f"\n✓ Saved results to: {out}")
    return EXIT_OK


def _rollout_source(networks, metadata, problem: ControlProblem):
    """Rebuild the learned control from a checkpoint, checking it against the scenario."""
    if metadata.get("n_particles") not in (None, problem.n_particles):
        raise ValueError(f"checkpoint is for {metadata['n_particles']} particles, scenario has {problem.n_particles}")
    if "schedule" in metadata:
        times = np.asarray(metadata["schedule"]["times"], dtype=float)
        values = np.asarray(metadata["schedule"]["values"], dtype=float)
        if values.ndim != 2 or values.shape != (times.size, problem.array.count):
            raise ValueError(
                f"checkpoint schedule has shape {values.shape}, expected ({times.size}, {problem.array.count})"
            )
        return PotentialSchedule(times, problem.array.check_potentials(values))
    net = networks.get("potential")
    if net is None:
        raise ValueError("checkpoint holds neither a potential network nor a schedule")
    if (net.in_dim, net.out_dim) != (3, 1):
        raise ValueError(f"potential network must be 3 -> 1, got {net.in_dim} -> {net.out_dim}")
    v_max = metadata.get("v_max", problem.array.v_max)
    return PotentialMap(net, problem.bounds, problem.horizon, v_max).as_source()


def cmd_rollout(args) -> int:
    scenario = _with_flags(Scenario.load(args.scenario), args)
    seed = scenario.seed if args.seed is None else args.seed
    problem = scenario.problem()
    threads = resolve_threads(args.threads)
    networks, metadata = load_checkpoint(args.checkpoint)
    source = _rollout_source(networks, metadata, problem)
    out = _output_dir(args, scenario)
    substeps = scenario.data.get("rollout_substeps", 10)

    print(f"\n=== Rollout of {Path(args.checkpoint).name} ({threads} thread(s), {substeps} substeps) ===")
    result = rollout(problem, source, substeps=substeps, threads=threads, deterministic=scenario.deterministic)

    written: List[str] = []
    frame = result.to_frame()
    frame.to_csv(out / "rollout.csv", index=False)
    written.append("rollout.csv")

    summary = _rollout_summary(result, problem, metadata.get("predicted_endpoints"))
    summary["seed"] = seed
    if "median_gap" in summary:
        print(f"Median endpoint gap: {summary['median_gap']:.4g} ({summary['median_gap_bandwidths']:.2f} bandwidths)")
    _write_json(out / "rollout_summary.json", summary)
    written.append("rollout_summary.json")
    if args.xlsx:
        _write_workbook(out / "rollout.xlsx", {"rollout": frame})
        written.append("rollout.xlsx")
    _write_manifest(out, scenario, seed, "rollout", written, threads)
    if summary["exited"]:
        print(f"✗ {summary['exited']} particle(s) left the safety box", file=sys.stderr)
    print(f"\n✓ Saved rollout to: {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Shape particle densities with dielectrophoretic electrode arrays",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python depshaper.py synth --a 2.5 --c 0.35 --delta 0.5 samples.csv     # Synthetic capacitance samples
  python depshaper.py fit samples.csv --terms 1 --delta 0.5 --out model.json
  python depshaper.py solve --scenario desk_uniform_to_gaussian.json --deterministic
  python depshaper.py rollout --scenario desk_uniform_to_gaussian.json --checkpoint out/checkpoint.json --threads 4
        """,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Log solver progress")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Write synthetic capacitance samples to CSV")
    synth.add_argument("out", help="Output CSV file path")
    synth.add_argument("--a", type=float, default=1.0, help="Capacitance scale (default: 1)")
    synth.add_argument("--c", type=float, default=1.0, help="Length scale (default: 1)")
    synth.add_argument("--delta", type=float, default=0.5, help="Half electrode pitch (default: 0.5)")
    synth.add_argument("--start", type=float, default=-50.0, help="First sample position (default: -50)")
    synth.add_argument("--stop", type=float, default=50.0, help="Last sample position (default: 50)")
    synth.add_argument("--count", type=int, default=201, help="Number of samples (default: 201)")
    synth.add_argument("--noise", type=float, default=0.0, help="Relative Gaussian noise (default: 0)")
    synth.add_argument("--seed", type=int, default=0, help="Noise seed (default: 0)")

    fit = sub.add_parser("fit", help="Fit the error-function capacitance model to samples")
    fit.add_argument("samples", help="CSV with header xi,capacitance")
    fit.add_argument("--terms", "-m", type=int, default=1, help="Number of error-function terms (default: 1)")
    fit.add_argument("--delta", type=float, required=True, help="Half electrode pitch")
    fit.add_argument("--out", help="Output model JSON path (optional)")

    for name, text in (("solve", "Solve a density-shaping scenario"), ("rollout", "Integrate particles under a learned control")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--scenario", required=True, help="Scenario JSON path")
        p.add_argument("--out", help="Output directory (default: scenario output_dir)")
        p.add_argument("--xlsx", action="store_true", help="Also write an Excel workbook")
        p.add_argument("--seed", type=int, help="Override the scenario seed")
        p.add_argument("--deterministic", action="store_true", help="Reproducible run; omits wall time")
        p.add_argument("--threads", type=int, help=f"Rollout worker threads (default: ${THREADS_ENV} or 1)")
        if name == "rollout":
            p.add_argument("--checkpoint", required=True, help="Checkpoint JSON written by solve")
    return parser


COMMANDS: Dict[str, Callable] = {"synth": cmd_synth, "fit": cmd_fit, "solve": cmd_solve, "rollout": cmd_rollout}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ScenarioError as exc:
        print(f"✗ Scenario error at {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"✗ File not found: {exc.filename}", file=sys.stderr)
        return EXIT_INPUT
    except SolveError as exc:
        print(f"✗ Solve aborted at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except FloatingPointError as exc:
        print(f"✗ Solve aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as exc:
        print(f"✗ {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
