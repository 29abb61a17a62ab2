"""Command-line entry point: ``cgdyn <command> --config PATH [--seed N] [--out DIR] [--workers K]``.

Every artifact starts with ``#`` comment lines holding the fully resolved
configuration, so re-running with those values reproduces the file.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys

import numpy as np

from . import conditional, experiments, integrate
from . import model as models
from ._parallel import default_workers
from .config import COMMANDS, RunConfig
from .errors import CgdynError, ConfigError

log = logging.getLogger("cgdyn")


# --- defaults that depend on the model -----------------------------------------------


def default_grid(cfg):
    name, rc = cfg.run["model"], cfg.run["rc"]
    if name == "doublewell":
        return conditional.XI2_GRID if rc == "xi2" else conditional.XI1_GRID
    if name == "threeatom":
        th = cfg.run["theta0"]
        return conditional.GridSpec(round(th - 0.5, 6), round(th + 0.5, 6), 0.01)
    return conditional.GridSpec(-1.5, 1.5, 0.05)


def default_x0(cfg, model, rc):
    if cfg.run["model"] == "threeatom":
        return rc.seed_point(cfg.run["theta0"])
    return np.array([1.0, 0.0])


def _grid_from_options(cfg):
    opts = cfg.options
    if not opts.get("grid"):
        return default_grid(cfg)
    lo, hi, step = opts["grid"]
    if opts.get("refine"):
        return conditional.GridSpec(lo, hi, step, *opts["refine"])
    return conditional.GridSpec(lo, hi, step)


def _engine(cfg, rc):
    engine = cfg.options.get("engine", "auto")
    if engine == "auto":
        return "quadrature" if rc.has_chart else "mc"
    if engine == "quadrature" and not rc.has_chart:
        raise ConfigError(f"reaction coordinate {rc.name!r} has no level-set chart; use engine = mc")
    return engine


def build_table(cfg, model, rc, grid=None, engine=None):
    grid = default_grid(cfg) if grid is None else grid
    engine = engine or ("quadrature" if rc.has_chart else "mc")
    return conditional.build_coefficient_table(
        model, rc, cfg.run["beta"], grid, engine,
        n_steps=cfg.options.get("mc_steps", 200_000), dt=cfg.options.get("mc_dt", 1e-4),
        seed=cfg.run["seed"], workers=_workers(cfg),
    )


def load_or_build_table(cfg, model, rc):
    path = cfg.options.get("table", "")
    if path:
        return conditional.read_table(path, beta=cfg.run["beta"])
    return build_table(cfg, model, rc)


def _workers(cfg):
    return cfg.run["workers"] or default_workers()


# --- output helpers ------------------------------------------------------------------


def header_lines(cfg):
    return cfg.to_text().splitlines()


def _out_path(cfg, name):
    os.makedirs(cfg.run["out"], exist_ok=True)
    return os.path.join(cfg.run["out"], name)


def write_csv(cfg, name, columns, data, extra_header=()):
    path = _out_path(cfg, name)
    # extra lines are nested comments so the header still parses as a configuration
    header = "\n".join(header_lines(cfg) + ["# " + l for l in extra_header] + [",".join(columns)])
    np.savetxt(path, np.atleast_2d(data), delimiter=",", fmt="%.17g", header=header, comments="# ")
    # savetxt prefixes the column line with '# '; keep it as a plain CSV header instead
    with open(path) as fh:
        lines = fh.read().splitlines()
    n_comment = len(header.splitlines())
    lines[n_comment - 1] = lines[n_comment - 1][2:]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


# --- commands ------------------------------------------------------------------------


def cmd_estimate_coefficients(cfg):
    model, rc = cfg.build_model()
    table = build_table(cfg, model, rc, _grid_from_options(cfg), _engine(cfg, rc))
    path = _out_path(cfg, f"coefficients_{model.name}_{rc.name}.csv")
    conditional.write_table(table, path, header=header_lines(cfg))
    resid = conditional.check_stationarity(table)
    print(f"wrote {path}: {len(table.grid)} nodes, stationarity residual {resid:.3e}")
    return 0


def cmd_simulate(cfg):
    model, rc = cfg.build_model()
    o = cfg.options
    dt, beta, seed = cfg.run["dt"], cfg.run["beta"], cfg.run["seed"]
    x0 = np.array(o["x0"]) if o["x0"] else default_x0(cfg, model, rc)
    if len(x0) != model.dimension:
        raise ConfigError(f"x0 needs {model.dimension} coordinates")
    n_steps = int(round(o["T"] / dt))
    kind = o["dynamics"]
    if kind == "full":
        t, X = integrate.simulate_full(model, x0, n_steps, dt, beta, seed, stride=o["stride"])
        cols = ["t"] + [f"x{i + 1}" for i in range(model.dimension)] + ["xi"]
        path = write_csv(cfg, "trajectory_full.csv", cols, np.column_stack([t, X, rc.value(X)]))
    else:
        table = load_or_build_table(cfg, model, rc)
        if kind == "coupled":
            tr = integrate.coupled_run(model, rc, table, x0, o["T"], dt, beta, seed, stride=o["stride"])
            path = write_csv(cfg, "trajectory_coupled.csv", ["t", "xi", "y"], np.column_stack([tr.t, tr.xi, tr.y]))
            print(f"max |xi(X_t) - y_t| = {tr.max_deviation:.4f}")
        else:
            t, y = integrate.simulate_reduced(table, rc.value(x0), n_steps, dt, beta, seed, stride=o["stride"], kind=kind)
            path = write_csv(cfg, f"trajectory_{kind}.csv", ["t", "value"], np.column_stack([t, y]))
    print(f"wrote {path}")
    return 0


def cmd_residence(cfg):
    model, rc = cfg.build_model()
    o = cfg.options
    beta, dt, seed = cfg.run["beta"], cfg.run["dt"], cfg.run["seed"]
    initials = experiments.sample_well_initials(model, rc, o["threshold"], o["n"], beta, seed, dt=dt, stride=o["init_stride"])
    table = None
    rows = []
    for kind in o["kinds"]:
        if kind != "full" and table is None:
            table = load_or_build_table(cfg, model, rc)
        rep = experiments.residence_time_study(
            model, rc, table, o["threshold"], o["n"], dt, beta, seed, kind,
            initials=initials, max_steps=o["max_steps"], workers=_workers(cfg),
        )
        rows.append(rep)
        print(f"{kind:12s} mean residence time {rep.mean_tau:8.3f} +/- {rep.half_ci:.3f} (n = {rep.n_traj})")
    kinds = {k: i for i, k in enumerate(("full", "effective", "free_energy"))}
    data = [[kinds[r.dynamics_kind], r.threshold, r.n_traj, r.mean_tau, r.half_ci] for r in rows]
    path = write_csv(
        cfg, "residence.csv", ["kind", "threshold", "n", "mean_tau", "half_ci"], data,
        extra_header=[f"kind codes: {', '.join(f'{v} = {k}' for k, v in kinds.items())}",
                      f"initial acceptance fraction = {initials.acceptance_fraction!r}"],
    )
    print(f"wrote {path}")
    return 0


def cmd_pathwise(cfg):
    o = cfg.options
    _, rc = cfg.build_model()
    dts = dict(zip(o["epsilons"], o["dts"]))
    x0 = np.array(o["x0"]) if o["x0"] else None
    reports = experiments.pathwise_study(
        lambda eps: cfg.build_model(epsilon=eps)[0], rc, lambda m: build_table(cfg, m, rc),
        o["epsilons"], o["T"], dts, cfg.run["beta"], o["replicas"], cfg.run["seed"], x0=x0, workers=_workers(cfg),
    )
    for r in reports:
        print(f"epsilon = {r.epsilon:g}: sup_t RMS |xi(X_t) - y_t| = {r.sup_rms:.4f} over {r.n_replicas} replicas")
    for a, b in zip(reports, reports[1:]):
        print(f"ratio {b.epsilon:g}/{a.epsilon:g}: {b.sup_rms / a.sup_rms:.3f} (sqrt of epsilon ratio {math.sqrt(b.epsilon / a.epsilon):.3f})")
    path = write_csv(cfg, "pathwise.csv", ["epsilon", "n_replicas", "sup_rms"], [[r.epsilon, r.n_replicas, r.sup_rms] for r in reports])
    print(f"wrote {path}")
    return 0


def cmd_marginals(cfg):
    model, rc = cfg.build_model()
    o = cfg.options
    x0 = np.array(o["x0"]) if o["x0"] else default_x0(cfg, model, rc)
    table = load_or_build_table(cfg, model, rc)
    rep = experiments.marginal_study(
        model, rc, table, o["t"], o["n"], o["bins"], cfg.run["dt"], cfg.run["beta"], cfg.run["seed"],
        x0=x0, workers=_workers(cfg),
    )
    for t, d, f in zip(rep.t_checkpoints, rep.tv_distance, rep.noise_floor):
        print(f"t = {t:g}: TV = {d:.4f} (noise floor {f:.4f})")
    path = write_csv(cfg, "marginals.csv", ["t", "tv", "noise_floor"], np.column_stack([rep.t_checkpoints, rep.tv_distance, rep.noise_floor]))
    print(f"wrote {path}")
    return 0


def run_checks(z_samples=(-1.0, -0.5, 0.0, 0.5, 1.0)):
    """Invariant suite over the builtin models; returns a list of (name, passed, detail)."""
    rng = np.random.default_rng(0)
    out = []
    dw = models.builtin_doublewell(0.01)
    xi1, xi2 = models.builtin_xi1(), models.builtin_xi2()
    ta, theta = models.builtin_threeatom()
    om, omx = models.builtin_omega_testcase(1e-3)
    for m in (dw, ta, om):
        pts = m.sample_box(50, rng)
        err = models.gradient_fd_error(m.potential, m.gradient, pts)
        out.append((f"gradient of V ({m.name})", err < 1e-6, f"{err:.2e}"))
        err = models.hessian_fd_error(m.gradient, m.hessian, pts)
        out.append((f"Hessian of V ({m.name})", err < 1e-6, f"{err:.2e}"))
    for m, rc in ((dw, xi1), (dw, xi2), (ta, theta)):
        pts = m.sample_box(50, rng)
        err = models.gradient_fd_error(rc.value, rc.gradient, pts)
        out.append((f"gradient of {rc.name}", err < 1e-6, f"{err:.2e}"))
        err = models.hessian_fd_error(rc.gradient, rc.hessian, pts)
        out.append((f"Hessian of {rc.name}", err < 1e-6, f"{err:.2e}"))
    u = experiments.condition_cs1_check(dw, xi2, z_samples)
    out.append(("xi2 orthogonal to q", u < 1e-12, f"max |u| = {u:.2e}"))
    u = experiments.condition_cs1_check(dw, xi1, z_samples)
    out.append(("xi1 not orthogonal to q", u > 0.1, f"max |u| = {u:.3f}"))
    th = theta.params["theta0"]
    u = experiments.condition_cs1_check(ta, theta, [th - 0.2, th, th + 0.2], fd=True)
    out.append(("theta orthogonal to q1, q3", u < 1e-5, f"max |u| = {u:.2e}"))
    r = conditional.check_stationarity(conditional.xi1_analytic_table(3.0, conditional.GridSpec(-3, 3, 2e-4).nodes()))
    out.append(("stationarity, analytic xi1 table", r < 1e-6, f"{r:.2e}"))
    t2 = conditional.build_coefficient_table(dw, xi2, 3.0, conditional.GridSpec(-2, 2, 0.1, -0.3, 0.3, 5e-3))
    r = conditional.check_stationarity(t2)
    out.append(("stationarity, xi2 quadrature table", r < 1e-2, f"{r:.2e}"))
    b = conditional.table_point_quadrature(om, omx, 0.5, 1.0).value[0]
    exact = float(models.omega_exact_drift(0.5, 1e-3, 1.0))
    out.append(("quadrature drift vs closed form", abs(b - exact) < 1e-8, f"{abs(b - exact):.2e}"))
    return out


def cmd_check(cfg):
    results = run_checks(cfg.options["z"])
    lines = [f"{'PASS' if ok else 'FAIL'}  {name}: {detail}" for name, ok, detail in results]
    print("\n".join(lines))
    with open(_out_path(cfg, "check.txt"), "w") as fh:
        fh.write("\n".join("# " + l for l in header_lines(cfg)) + "\n" + "\n".join(lines) + "\n")
    return 0 if all(ok for _, ok, _ in results) else 1


HANDLERS = {
    "estimate-coefficients": cmd_estimate_coefficients,
    "simulate": cmd_simulate,
    "residence": cmd_residence,
    "pathwise": cmd_pathwise,
    "marginals": cmd_marginals,
    "check": cmd_check,
}


def make_parser():
    p = argparse.ArgumentParser(prog="cgdyn", description="Effective dynamics along a reaction coordinate.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="INI run configuration")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--out", help="override [run] out (output directory)")
    p.add_argument("--workers", type=int, help="override [run] workers (0: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = RunConfig.from_file(
            args.config, args.command, overrides={"seed": args.seed, "out": args.out, "workers": args.workers}
        )
        cfg.validate()
        return HANDLERS[cfg.command](cfg)
    except CgdynError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
