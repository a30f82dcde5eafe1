"""Command-line front end for fitting, synthesis, simulation and experiments.

Every command reads one JSON config (defaults merged in), writes its
artifacts under --out, and records them in a run manifest. Exit codes:
0 success/optimal, 2 infeasible, 3 solver or simulation failure, 4 I/O or
schema error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys as _sys

import numpy as np

from . import synthesis as syn
from .config import (ConfigError, RunManifest, build_setup, config_hash,
                     load_config)
from .error_model import (ErrorModel, NoNeighborsError, TrajectoryDataset,
                          epsilon_bound, fit as fit_error_model, residuals,
                          s_slope)
from .sim_harness import (CONDITIONS, CONTROLLER_NAMES, PdController,
                          FirTrackingController, MixedController, SimLog,
                          SimulationDivergedError, impulse_response, metrics,
                          run_experiment, simulate, smooth)
from .sls_ops import FirController, SystemResponses, realize_controller

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_SOLVER = 3
EXIT_IO = 4


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit code 2; this CLI reserves 2 for
    infeasibility, so usage problems exit with the I/O/schema code."""

    def error(self, message):
        self.print_usage(_sys.stderr)
        raise SystemExit(self.prog + ": error: " + message) from None


class _CliError(RuntimeError):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _say(args, *parts):
    if not args.quiet:
        print(*parts)


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write(manifest, path, text):
    with open(path, "w") as fh:
        fh.write(text)
        if not text.endswith("\n"):
            fh.write("\n")
    manifest.add(path)


def _load_json_file(path, loader, what):
    try:
        with open(path) as fh:
            return loader(fh.read())
    except OSError as exc:
        raise _CliError(f"cannot read {what}: {exc}", EXIT_IO) from exc
    except (ValueError, KeyError) as exc:
        raise _CliError(f"malformed {what} file {path}: {exc}", EXIT_IO) from exc


def _resolve_error_model(args, cfg, setup):
    """Error model by file, explicit config values, or dataset fit."""
    if getattr(args, "error_model", None):
        return _load_json_file(args.error_model, ErrorModel.from_json,
                               "error model")
    if setup.error_model is not None:
        return setup.error_model
    if getattr(args, "dataset", None):
        data = _read_dataset(args.dataset)
        return fit_error_model(data, setup.system.C, setup.radius,
                               q_eps=setup.q_eps, q_slope=setup.q_slope)
    raise _CliError(
        "no error model: pass --error-model/--dataset or set "
        "error_model.s_explicit and error_model.eps_e_explicit in the config",
        EXIT_IO)


def _read_dataset(path) -> TrajectoryDataset:
    try:
        return TrajectoryDataset.read_csv(path)
    except OSError as exc:
        raise _CliError(f"cannot read dataset: {exc}", EXIT_IO) from exc
    except ValueError as exc:
        raise _CliError(str(exc), EXIT_IO) from exc


def _synthesize(setup, model, cost, robust):
    problem = syn.SynthesisProblem(
        sys=setup.system, T=setup.horizon, eps_w=setup.eps_w,
        error_model=model, cost=cost, d_max=setup.d_max,
        robustness_enabled=robust, margin=setup.margin, r0=setup.r0)
    return syn.synthesize(problem), problem


# ---------------------------------------------------------------------------
# commands


def cmd_fit_error(args) -> int:
    cfg = load_config(args.config)
    setup = build_setup(cfg)
    data = _read_dataset(args.dataset)
    C = setup.system.C
    try:
        model = fit_error_model(data, C, setup.radius,
                                q_eps=setup.q_eps, q_slope=setup.q_slope)
        s_max = s_slope(data, C, setup.radius, quantile=1.0)
    except NoNeighborsError as exc:
        raise _CliError(f"no-neighbors failure: {exc}", EXIT_IO) from exc
    eps_raw = epsilon_bound(residuals(data, C), 1.0)
    out = _outdir(args)
    manifest = RunManifest(config_hash=config_hash(cfg))
    _write(manifest, os.path.join(out, "error_model.json"), model.to_json())
    manifest.write(os.path.join(out, "manifest.json"))
    _say(args, f"epsilon_e (q={setup.q_eps}): {model.epsilon_e:.6g} "
               f"(max: {eps_raw:.6g})")
    _say(args, f"S_hat at q=1: {s_max:.6g}")
    _say(args, f"S_hat at q={setup.q_slope}: {model.s_hat:.6g}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    cfg = load_config(args.config)
    setup = build_setup(cfg)
    model = _resolve_error_model(args, cfg, setup)
    quad = syn.CostSpec(kind="quadratic_l1", Q=setup.cost_q, R=setup.cost_r)
    try:
        if cfg["cost"]["kind"] == "imitation":
            (nominal, _), _ = _synthesize(setup, model, quad, robust=False)
            cost = syn.CostSpec(kind="imitation", Q=setup.cost_q,
                                R=setup.cost_r, nominal=nominal)
        else:
            cost = quad
        (resp, report), problem = _synthesize(
            setup, model, cost, robust=cfg["robustness"]["enabled"])
    except syn.SynthesisInfeasibleError as exc:
        print(f"infeasible: {exc}", file=_sys.stderr)
        for key, val in sorted(exc.diagnostics.items()):
            print(f"  {key}: {val}", file=_sys.stderr)
        return EXIT_INFEASIBLE
    except syn.SynthesisSolverError as exc:
        print(f"solver failure: {exc}", file=_sys.stderr)
        return EXIT_SOLVER

    controller = realize_controller(resp, setup.controller_horizon)
    out = _outdir(args)
    manifest = RunManifest(config_hash=config_hash(cfg))
    _write(manifest, os.path.join(out, "responses.json"), resp.to_json())
    _write(manifest, os.path.join(out, "controller.json"), controller.to_json())
    _write(manifest, os.path.join(out, "guarantee.json"), report.to_json())
    manifest.write(os.path.join(out, "manifest.json"))
    gamma = "void" if report.gamma is None else f"{report.gamma:.6g}"
    _say(args, f"|phi_xe| = {report.phi_xe_norm:.6g}, gamma = {gamma}, "
               f"margin = {report.feasibility_margin:.6g}")
    _say(args, f"controller taps: {controller.horizon}, truncation tail "
               f"{controller.truncation_tail_norm:.3g}")
    return EXIT_OK


def _build_sim_controller(args, setup):
    if getattr(args, "controller", None):
        fir = _load_json_file(args.controller, FirController.from_json,
                              "controller")
        ctrl = FirTrackingController(fir)
        if setup.use_pd_z:
            ctrl = MixedController(ctrl, PdController(
                kp=setup.pd_kp, kd=setup.pd_kd, params=setup.params))
        return ctrl
    return PdController(kp=setup.pd_kp, kd=setup.pd_kd, params=setup.params)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    setup = build_setup(cfg)
    sim_cfg = cfg["simulate"]
    seed = args.seed if args.seed is not None else sim_cfg["seed"]
    steps = sim_cfg["steps"] or setup.steps
    controller = _build_sim_controller(args, setup)
    out = _outdir(args)
    manifest = RunManifest(config_hash=config_hash(cfg))

    channel = sim_cfg["impulse_channel"]
    if channel is not None:
        X, U = impulse_response(setup.system, controller, channel,
                                sim_cfg["impulse_index"], steps)
        n, p = setup.system.n, setup.system.p
        log = SimLog(times=np.arange(steps) * setup.system.dt, states=X,
                     references=np.zeros((steps, n)),
                     measurements=X @ setup.system.C.T, inputs=U,
                     errors=np.zeros((steps, p)))
        log.write_csv(os.path.join(out, "simlog.csv"))
        manifest.add(os.path.join(out, "simlog.csv"))
        manifest.write(os.path.join(out, "manifest.json"))
        _say(args, f"impulse response ({channel}[{sim_cfg['impulse_index']}])"
                   f" over {steps} steps written")
        return EXIT_OK

    try:
        log = simulate(setup.system, controller, setup.reference,
                       setup.perception, eps_w=setup.eps_w, steps=steps,
                       seed=seed, params=setup.params)
    except SimulationDivergedError as exc:
        print(f"aborted: {exc}", file=_sys.stderr)
        if exc.log is not None:
            exc.log.write_csv(os.path.join(out, "simlog_partial.csv"))
            manifest.add(os.path.join(out, "simlog_partial.csv"))
            manifest.write(os.path.join(out, "manifest.json"))
        return EXIT_SOLVER

    report = None
    if getattr(args, "guarantee", None):
        report = _load_json_file(args.guarantee,
                                 syn.GuaranteeReport.from_json, "guarantee")
    summary = metrics(log, report)
    log.write_csv(os.path.join(out, "simlog.csv"))
    manifest.add(os.path.join(out, "simlog.csv"))
    _write(manifest, os.path.join(out, "metrics.json"), summary.to_json())
    manifest.write(os.path.join(out, "manifest.json"))
    _say(args, f"tracking RMSE {summary.tracking_rmse:.6g}, "
               f"max |e| {summary.max_error_norm:.6g}")
    return EXIT_OK


def _experiment_csvs(out, manifest, result, setup):
    """Plot-ready CSVs: tracking positions and smoothed error norms."""
    logs = result["example_logs"]
    report = result["report"]
    present = [c for c in CONTROLLER_NAMES if (c, "nominal") in logs]

    ref_log = logs[(present[0], "nominal")]
    header = ["t", "ref_px", "ref_py", "ref_pz"]
    cols = [ref_log.times, ref_log.references[:, 0],
            ref_log.references[:, 1], ref_log.references[:, 2]]
    for name in present:
        log = logs[(name, "nominal")]
        for i, ax in enumerate(("px", "py", "pz")):
            header.append(f"{name}_{ax}")
            cols.append(log.states[:, i])
    path = os.path.join(out, "tracking.csv")
    _write_columns(path, header, cols)
    manifest.add(path)

    gamma = None
    rob = report["guarantees"].get("l1_robust")
    if rob is not None:
        gamma = rob["gamma"]
    for condition in CONDITIONS:
        header = ["t"]
        cols = [ref_log.times]
        for name in present:
            log = logs[(name, condition)]
            header.append(f"{name}_enorm")
            cols.append(smooth(log.error_norms,
                               setup.smoothing_time_constant, setup.system.dt))
        if gamma is not None:
            header.append("gamma_bound")
            cols.append(np.full(len(ref_log.times), gamma))
        path = os.path.join(out, f"error_norms_{condition}.csv")
        _write_columns(path, header, cols)
        manifest.add(path)


def _write_columns(path, header, cols):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])


def _render_figures(out, manifest, setup):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    def read_cols(path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        data = np.asarray(rows[1:], dtype=float)
        return header, data

    header, data = read_cols(os.path.join(out, "tracking.csv"))
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.plot(data[:, header.index("ref_px")], data[:, header.index("ref_py")],
            "k--", label="reference")
    for name in CONTROLLER_NAMES:
        if f"{name}_px" in header:
            ax.plot(data[:, header.index(f"{name}_px")],
                    data[:, header.index(f"{name}_py")], label=name)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    fig.savefig(os.path.join(out, "tracking.png"), dpi=120)
    plt.close(fig)
    manifest.add(os.path.join(out, "tracking.png"))

    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for axi, condition in zip(axes, CONDITIONS):
        header, data = read_cols(
            os.path.join(out, f"error_norms_{condition}.csv"))
        t = data[:, 0]
        for name in CONTROLLER_NAMES:
            col = f"{name}_enorm"
            if col in header:
                axi.plot(t, data[:, header.index(col)], label=name)
        if "gamma_bound" in header:
            axi.plot(t, data[:, header.index("gamma_bound")], "k--",
                     label="gamma bound")
        axi.set_title(condition)
        axi.set_xlabel("t [s]")
        axi.legend(fontsize=8)
    axes[0].set_ylabel("smoothed |e| (inf norm)")
    fig.savefig(os.path.join(out, "error_norms.png"), dpi=120)
    plt.close(fig)
    manifest.add(os.path.join(out, "error_norms.png"))


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    setup = build_setup(cfg)
    if args.seed is not None:
        cfg["experiment"]["base_seed"] = args.seed
        setup = build_setup(cfg)
    result = run_experiment(setup)
    out = _outdir(args)
    manifest = RunManifest(config_hash=config_hash(cfg))
    _write(manifest, os.path.join(out, "summary.json"),
           json.dumps(result["report"], indent=2))
    _experiment_csvs(out, manifest, result, setup)
    if setup.render_figures:
        _render_figures(out, manifest, setup)
    manifest.write(os.path.join(out, "manifest.json"))

    report = result["report"]
    for name, info in report["failures"].items():
        _say(args, f"{name}: synthesis failed ({info['message']})")
    for name, conds in report["cells"].items():
        for condition, cell in conds.items():
            _say(args, f"{name:22s} {condition:9s} "
                       f"mean max|e| {cell['mean_max_error_norm']:.6g}  "
                       f"RMSE {cell['mean_tracking_rmse']:.6g}  "
                       f"bounds {cell['all_bounds_satisfied']}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    setup = build_setup(cfg)
    resp = _load_json_file(args.responses, SystemResponses.from_json,
                           "responses")
    rng = np.random.default_rng(0)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=10)
    zres = syn.z_domain_residuals(setup.system, resp, np.exp(1j * angles))
    worst = max(zres.values())
    _say(args, "z-domain residuals: "
         + ", ".join(f"{k}={v:.3g}" for k, v in sorted(zres.items())))
    ok = worst <= args.tol
    if not ok:
        print(f"achievability violated: residual {worst:.3g} > {args.tol:.3g}",
              file=_sys.stderr)

    if cfg["robustness"]["enabled"]:
        model = _resolve_error_model(args, cfg, setup)
        problem = syn.SynthesisProblem(
            sys=setup.system, T=resp.horizon, eps_w=setup.eps_w,
            error_model=model, cost=syn.CostSpec(
                kind="quadratic_l1", Q=setup.cost_q, R=setup.cost_r),
            d_max=setup.d_max, robustness_enabled=True,
            margin=setup.margin, r0=setup.r0)
        margin = syn.robustness_margin(problem, resp)
        _say(args, f"robustness margin: {margin:.6g}")
        if margin < -args.tol:
            print(f"robustness constraint violated by {-margin:.3g}",
                  file=_sys.stderr)
            return EXIT_INFEASIBLE
    return EXIT_OK if ok else EXIT_INFEASIBLE


# ---------------------------------------------------------------------------
# argument wiring


def _common(sub):
    sub.add_argument("--config", default=None, help="JSON config file")
    sub.add_argument("--out", default=".", help="output directory")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config seed")
    sub.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robustsls",
                     description="Robust perception-based controller "
                                 "synthesis and simulation")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("fit-error", help="fit an error model from a dataset")
    p.add_argument("dataset", help="trajectory CSV (t, x0.., y0..)")
    _common(p)
    p.set_defaults(func=cmd_fit_error)

    p = subs.add_parser("synthesize", help="synthesize a robust controller")
    p.add_argument("--error-model", default=None,
                   help="fitted error model JSON")
    p.add_argument("--dataset", default=None,
                   help="trajectory CSV to fit the error model from")
    _common(p)
    p.set_defaults(func=cmd_synthesize)

    p = subs.add_parser("simulate", help="run one closed-loop simulation")
    p.add_argument("--controller", default=None, help="FIR controller JSON")
    p.add_argument("--guarantee", default=None,
                   help="guarantee JSON for the bound check")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("experiment",
                        help="controller-comparison experiment matrix")
    _common(p)
    p.set_defaults(func=cmd_experiment)

    p = subs.add_parser("verify",
                        help="re-check achievability and robustness of a "
                             "responses file")
    p.add_argument("responses", help="system responses JSON")
    p.add_argument("--error-model", default=None,
                   help="fitted error model JSON")
    p.add_argument("--dataset", default=None,
                   help="trajectory CSV to fit the error model from")
    p.add_argument("--tol", type=float, default=1e-7)
    _common(p)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=_sys.stderr)
            return EXIT_IO
        return EXIT_IO if exc.code else EXIT_OK
    try:
        return args.func(args)
    except _CliError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
