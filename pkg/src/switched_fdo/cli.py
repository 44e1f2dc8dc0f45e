"""Command-line front end.

Commands: ``synthesize``, ``certify``, ``simulate``, ``detect`` and
``reproduce-paper``. Exit codes: 0 success, 1 configuration/input error or
failed certificate, 2 no feasible start, 3 solver or numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from contextlib import contextmanager
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .certify import check_design
from .detect import calibrate_threshold, evaluate_run
from .model import ConfigError, load_config
from .sim import NonFiniteState, SignalSpec, simulate
from .synthesis import NoFeasibleStart, ObserverDesign, SolverFailure, attenuation_design, synthesize

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_SOLVER = 0, 1, 2, 3

BUNDLED = ("paper_example.cfg", "relaxed_example.cfg", "sensor_fault_example.cfg")


class RunManifest:
    """Provenance of one command: inputs, outputs and per-phase timings."""

    def __init__(self, command, config=None, design=None, seed=None, out=None):
        self.command = command
        self.config = config
        self.design = design
        self.seed = seed
        self.out = out
        self.timings = {}
        self.outputs = []
        self.notes = {}

    @contextmanager
    def phase(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - t0

    def add_output(self, path):
        self.outputs.append(str(path))

    def to_dict(self):
        return {"command": self.command, "config": self.config, "design": self.design, "seed": self.seed,
                "output_dir": None if self.out is None else str(self.out), "version": __version__,
                "timings": self.timings, "outputs": self.outputs, "notes": self.notes}

    def write(self):
        if self.out is None:
            return None
        path = Path(self.out) / "manifest.json"
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"manifest references missing outputs: {missing}")
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def bundled_config_text(name: str) -> str:
    return (resources.files("switched_fdo") / "data" / name).read_text()


def read_config(ref: str):
    """Load a config from a path, or by name from the bundled configs."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text()
    elif path.name in BUNDLED and not path.parent.parts:
        text = bundled_config_text(path.name)
    else:
        raise ConfigError(f"config file not found: {ref}")
    return load_config(text)


def _signals(cfg, args):
    if not cfg.signals:
        raise ConfigError("config has no signals section")
    sig = SignalSpec.from_dict(cfg.signals)
    if getattr(args, "seed", None) is not None:
        sig = sig.with_seed(args.seed)
    return sig


def _detection_settings(sig, args):
    det = dict(sig.detection)
    return {"window": float(det.get("window", 0.1)),
            "runs": int(args.runs if args.runs is not None else det.get("runs", 50)),
            "margin": float(args.margin if args.margin is not None else det.get("margin", 1.1)),
            "warmup": float(args.warmup if args.warmup is not None else det.get("warmup", 4.0))}


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_design(plant, args, manifest):
    design = ObserverDesign.load(args.design)
    with manifest.phase("certify"):
        try:
            rep = check_design(plant, design)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    manifest.notes["certified"] = rep.pass_
    if not rep.pass_ and not args.uncertified:
        raise ConfigError(f"design fails certification ({', '.join(rep.failures[:5])}); "
                          "pass --uncertified to simulate anyway")
    return design


def _write_plot_data(out, trace, manifest):
    n = trace.x.shape[1]
    pp = out / "phase_plane.csv"
    with open(pp, "w") as fh:
        fh.write(",".join(["t"] + [f"x{i + 1}" for i in range(n)] + [f"xhat{i + 1}" for i in range(n)]) + "\n")
        for k in range(len(trace.t)):
            fh.write(",".join(repr(float(v)) for v in np.concatenate([[trace.t[k]], trace.x[k], trace.xhat[k]])) + "\n")
    rs = out / "residual.csv"
    with open(rs, "w") as fh:
        fh.write(",".join(["t"] + [f"r{i + 1}" for i in range(trace.r.shape[1])]) + "\n")
        for k in range(len(trace.t)):
            fh.write(",".join(repr(float(v)) for v in np.concatenate([[trace.t[k]], trace.r[k]])) + "\n")
    manifest.add_output(pp)
    manifest.add_output(rs)


def _write_trace(out, trace, manifest):
    tp, ep = out / "trace.csv", out / "events.json"
    trace.to_csv(tp)
    trace.save_events(ep)
    manifest.add_output(tp)
    manifest.add_output(ep)
    _write_plot_data(out, trace, manifest)


def cmd_synthesize(args):
    cfg = read_config(args.config)
    if cfg.synthesis is None:
        raise ConfigError("config has no synthesis section")
    out = _outdir(args)
    man = RunManifest("synthesize", config=args.config, out=out)
    try:
        with man.phase("synthesize"):
            if args.attenuation_only:
                design = attenuation_design(cfg.plant, cfg.synthesis)
            else:
                design = synthesize(cfg.plant, cfg.synthesis)
    except NoFeasibleStart as exc:
        (out / "iterations.json").write_text(json.dumps({"trace": exc.trace, "diagnosis": exc.diagnosis},
                                                        indent=2))
        man.add_output(out / "iterations.json")
        man.notes["error"] = str(exc)
        man.write()
        raise
    dp = out / "design.json"
    design.save(dp)
    (out / "iterations.json").write_text(json.dumps(design.iterations, indent=2))
    man.add_output(dp)
    man.add_output(out / "iterations.json")
    man.design = str(dp)
    man.notes.update(gamma=design.gamma.tolist(), beta=design.beta.tolist(),
                     perf_aggregate=design.perf_aggregate if design.sensitivity_certified else None)
    man.write()
    if design.sensitivity_certified:
        print(f"feasible: gamma={design.gamma.tolist()} beta={design.beta.tolist()} "
              f"gamma/beta={design.perf_aggregate:.4f}")
    else:
        print(f"attenuation-only design: gamma={design.gamma.tolist()} V={design.V.tolist()}")
    print(f"design written to {dp}")
    return EXIT_OK


def cmd_certify(args):
    cfg = read_config(args.config)
    design = ObserverDesign.load(args.design)
    try:
        rep = check_design(cfg.plant, design, tol=args.tol)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out:
        out = _outdir(args)
        (out / "certificate.json").write_text(json.dumps(rep.to_dict(), indent=2))
    for name, val in rep.scaled_margins.items():
        print(f"{'ok  ' if val <= rep.tol else 'FAIL'} {name:32s} {val: .3e}")
    for name, val in rep.equality_residuals.items():
        print(f"{'ok  ' if val <= rep.tol else 'FAIL'} jump_coupling[{name}]{'':14s} {val: .3e}")
    print(f"gain recovery residual {rep.gain_residual:.3e}, jump map residual {rep.jump_residual:.3e}")
    print(f"error bound coefficient {rep.bound_coeff:.4f}")
    print("PASS" if rep.pass_ else f"FAIL: {', '.join(rep.failures)}")
    return EXIT_OK if rep.pass_ else EXIT_CONFIG


def cmd_simulate(args):
    cfg = read_config(args.config)
    sig = _signals(cfg, args)
    out = _outdir(args)
    man = RunManifest("simulate", config=args.config, design=args.design, seed=sig.seed, out=out)
    design = _load_design(cfg.plant, args, man)
    with man.phase("simulate"):
        trace = simulate(cfg.plant, design, sig)
    with man.phase("export"):
        _write_trace(out, trace, man)
    man.write()
    print(f"{len(trace.t)} samples, {len(trace.events)} events, written to {out}")
    return EXIT_OK


def _run_detection(cfg, design, sig, settings, out, man):
    with man.phase("calibrate"):
        cal = calibrate_threshold(cfg.plant, design, sig, runs=settings["runs"], margin=settings["margin"],
                                  warmup=settings["warmup"], window=settings["window"],
                                  seed=None if sig.seed is None else sig.seed + 1)
    with man.phase("simulate"):
        trace = simulate(cfg.plant, design, sig)
    with man.phase("detect"):
        rep = evaluate_run(trace, sig, cal.J_th, window=settings["window"], warmup=settings["warmup"],
                           calibration=cal.to_dict())
    with man.phase("export"):
        _write_trace(out, trace, man)
        rp, nc = out / "detection.json", out / "norm.csv"
        rep.save(rp)
        rep.norm_csv(nc)
        man.add_output(rp)
        man.add_output(nc)
    return rep


def _print_detection(rep):
    print(f"threshold J_th = {rep.J_th:.6g} (max fault-free norm {rep.calibration.get('max_fault_free_norm', 0):.6g})")
    if rep.fault_onset is None:
        print(f"no fault declared; alarms after warm-up: {len(rep.alarms)}")
    elif rep.detected:
        print(f"fault detected at t = {rep.first_alarm_time:.4f} s, delay {rep.detection_delay:.4f} s")
    else:
        print("fault not detected")
    print(f"false alarms after warm-up: {len(rep.false_alarms)}")


def cmd_detect(args):
    cfg = read_config(args.config)
    sig = _signals(cfg, args)
    out = _outdir(args)
    man = RunManifest("detect", config=args.config, design=args.design, seed=sig.seed, out=out)
    design = _load_design(cfg.plant, args, man)
    rep = _run_detection(cfg, design, sig, _detection_settings(sig, args), out, man)
    man.write()
    _print_detection(rep)
    return EXIT_OK


def cmd_reproduce(args):
    """Full benchmark scenario on the bundled paper plant."""
    out = _outdir(args)
    man = RunManifest("reproduce-paper", config="paper_example.cfg", seed=args.seed, out=out)
    cfg = load_config(bundled_config_text("paper_example.cfg"))
    design = None
    try:
        with man.phase("synthesize"):
            design = synthesize(cfg.plant, cfg.synthesis)
        print(f"synthesis feasible: gamma/beta = {design.perf_aggregate:.4f}")
    except NoFeasibleStart as exc:
        man.notes["synthesis"] = str(exc)
        print(f"synthesis with the bundled parameters: {exc}")
        if args.no_fallback:
            man.write()
            return EXIT_INFEASIBLE
        relaxed = load_config(bundled_config_text("relaxed_example.cfg"))
        with man.phase("synthesize_fallback"):
            try:
                design = synthesize(relaxed.plant, relaxed.synthesis)
            except NoFeasibleStart:
                design = attenuation_design(relaxed.plant, relaxed.synthesis)
        man.notes["fallback"] = "relaxed_example.cfg"
        kind = "a full" if design.sensitivity_certified else "an attenuation-only"
        print(f"continuing with {kind} design from relaxed_example.cfg (gamma={design.gamma.tolist()})")
    dp = out / "design.json"
    design.save(dp)
    man.add_output(dp)
    man.design = str(dp)
    sig = SignalSpec.from_dict(cfg.signals)
    if args.seed is not None:
        sig = sig.with_seed(args.seed)
    rep = _run_detection(cfg, design, sig, _detection_settings(sig, args), out, man)
    man.notes["detection_delay"] = rep.detection_delay
    man.write()
    _print_detection(rep)
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="switched-fdo", description="Fault-detection observers for switched linear systems")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, design=True, out_default="out"):
        p.add_argument("--config", required=True, help="config file or bundled config name")
        if design:
            p.add_argument("--design", required=True)
        p.add_argument("--out", default=out_default)

    p = sub.add_parser("synthesize")
    common(p, design=False)
    p.add_argument("--attenuation-only", action="store_true",
                   help="steps 1-3 only, residual weight scaled to the attenuation limit")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("certify")
    common(p, out_default=None)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_certify)

    for name, func in (("simulate", cmd_simulate), ("detect", cmd_detect)):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--seed", type=int)
        p.add_argument("--uncertified", action="store_true")
        if name == "detect":
            p.add_argument("--runs", type=int)
            p.add_argument("--margin", type=float)
            p.add_argument("--warmup", type=float)
        p.set_defaults(func=func)

    p = sub.add_parser("reproduce-paper")
    p.add_argument("--out", default="out")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--warmup", type=float)
    p.add_argument("--no-fallback", action="store_true",
                   help="stop when the bundled parameters admit no feasible start")
    p.set_defaults(func=cmd_reproduce)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoFeasibleStart as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SolverFailure, NonFiniteState) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
