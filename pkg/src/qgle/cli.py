"""Command-line front end.

Subcommands: ``check`` (certificate table), ``simulate`` (trajectory CSV +
optional binary noise sidecar), ``fordkac`` (explicit-bath run), ``analyze``
(JSON diagnostics report) and ``figure-eigs`` (eigenvalue curves of the
position-dependent certificate matrix over the torus).

Exit codes: 0 success, 1 certificate/analysis failure, 2 usage error,
3 runtime failure.  With ``--format json`` failures also emit a
machine-readable error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .config import load_config
from .errors import QgleError
from .ergodicity import (
    Certificate,
    hormander_const_check,
    lyapunov_matrix_const,
    posdep_certificate_search,
    posdep_certificate_verify,
)
from .kernels import MemoryKernel, kernel_eval
from .model import (
    NOT_APPLICABLE,
    default_grid,
    purecolor_check,
    solve_fdt_Q,
    stability_margin,
    verify_fdt,
)
from .simulate import (
    GibbsInit,
    IntegratorSpec,
    fordkac_simulate,
    simulate,
    trajectory_to_csv,
    write_noise_sidecar,
)

RESIDUAL_TOL = 1e-9


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="qgle",
        description="quasi-Markovian generalized Langevin equations: "
                    "simulation and ergodicity certificates")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("check", "evaluate certificates and print the table"),
            ("simulate", "integrate the model and write trajectory output"),
            ("fordkac", "run the explicit harmonic-bath model"),
            ("analyze", "simulate and emit a JSON diagnostics report"),
            ("figure-eigs", "eigenvalue curves of Gamma(q) C + C Gamma(q)'")):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the JSON config")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the integrator seed")
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--format", choices=("csv", "json"), default="csv")
        if name == "check":
            cmd.add_argument("--kernel-csv", default=None,
                             help="also export the memory kernel as t,K(t)")
    return parser


def _out_path(args, config, default_name, key):
    directory = args.out or config.output.get("directory", ".")
    os.makedirs(directory, exist_ok=True)
    return os.path.join(directory, config.output.get(key, default_name))


def _integrator(config, args):
    integ = config.integrator
    if integ is None:
        raise QgleError("config has no integrator section")
    if args.seed is not None:
        integ = IntegratorSpec(scheme=integ.scheme, dt=integ.dt,
                               n_steps=integ.n_steps, seed=args.seed,
                               store_noise=integ.store_noise,
                               stride=integ.stride)
    return integ


def _grid_for(config):
    points = config.analysis.get("grid_points")
    return default_grid(config.model.domain, points)


def _certificates(config):
    model = config.model
    coeffs = model.coeffs
    grid = _grid_for(config)
    certs = []

    margin = stability_margin(coeffs, grid)
    certs.append(Certificate(kind="stability", satisfied=margin > 0,
                             margin=margin, witness={},
                             notes="min real part of the friction spectrum"))

    if model.Q is not None:
        residual = verify_fdt(coeffs, model.Q, grid)
        certs.append(Certificate(
            kind="fdt", satisfied=residual <= RESIDUAL_TOL,
            margin=RESIDUAL_TOL - residual,
            witness={"residual": residual},
            notes=f"block-relation defect {residual:.3e}"))
        violation = purecolor_check(coeffs, model.Q, grid)
        if violation is not NOT_APPLICABLE:
            certs.append(Certificate(
                kind="purecolor", satisfied=violation <= RESIDUAL_TOL,
                margin=RESIDUAL_TOL - violation,
                witness={"violation": violation},
                notes=f"coupling-constraint violation {violation:.3e}"))

    if coeffs.constant:
        for mode in ("ii", "iii"):
            cert = hormander_const_check(coeffs, mode)
            certs.append(Certificate(
                kind=f"hormander_{mode}", satisfied=cert.satisfied,
                margin=cert.margin, witness=cert.witness, notes=cert.notes))
        if margin > 0:
            lyap = lyapunov_matrix_const(coeffs.gamma())
            certs.append(Certificate(
                kind="lyapunov_const", satisfied=True, margin=lyap.lam,
                witness={"lambda": lyap.lam, "residual": lyap.residual},
                notes=f"dense solve residual {lyap.residual:.3e}"))
    else:
        try:
            c_mat = (config.lyapunov_C if config.lyapunov_C is not None
                     else posdep_certificate_search(coeffs, grid))
            verification = posdep_certificate_verify(coeffs, c_mat, grid)
            certs.append(Certificate(
                kind="lyapunov_posdep", satisfied=verification.margin > 0,
                margin=verification.margin, witness={"C": c_mat.tolist()},
                notes="min eigenvalue of Gamma(q) C + C Gamma(q)' on the grid"))
        except QgleError as err:
            certs.append(Certificate(kind="lyapunov_posdep", satisfied=False,
                                     margin=-np.inf, witness={},
                                     notes=str(err)))
    return certs


def _cert_json(cert):
    witness = {k: v for k, v in cert.witness.items()
               if isinstance(v, (int, float, str, list))}
    return {"kind": cert.kind, "satisfied": bool(cert.satisfied),
            "margin": float(cert.margin), "witness": witness,
            "notes": cert.notes}


def _cmd_check(args):
    config = load_config(args.config)
    certs = _certificates(config)
    if args.kernel_csv and config.model.coeffs.constant:
        kernel = MemoryKernel.from_coeffs(config.model.coeffs)
        ts = np.linspace(0.0, 10.0, 201)
        with open(args.kernel_csv, "w", newline="") as handle:
            handle.write("t,K\r\n")
            for t in ts:
                value = kernel_eval(kernel, float(t))
                handle.write(f"{float(t)!r},{float(value[0, 0])!r}\r\n")
    if args.format == "json":
        print(json.dumps({"certificates": [_cert_json(c) for c in certs]},
                         sort_keys=True, indent=2))
    else:
        for cert in certs:
            print(cert.summary())
    return 0 if all(c.satisfied for c in certs) else 1


def _cmd_simulate(args):
    config = load_config(args.config)
    integ = _integrator(config, args)
    model = config.model
    initial = GibbsInit() if (model.force.is_conservative and model.Q is not None
                              and model.domain.is_torus) else GibbsInit(
        q0=np.zeros(model.n))
    if not (model.force.is_conservative and model.Q is not None):
        from .model import ExtendedState
        initial = ExtendedState(q=np.zeros(model.n), p=np.zeros(model.n),
                                s=np.zeros(model.m))
    traj = simulate(model, integ, initial)
    csv_path = _out_path(args, config, "trajectory.csv", "trajectory_csv")
    trajectory_to_csv(traj, csv_path)
    written = {"trajectory_csv": csv_path}
    if traj.noise is not None:
        sidecar = _out_path(args, config, "noise.qgln", "noise_sidecar")
        write_noise_sidecar(sidecar, traj.noise)
        written["noise_sidecar"] = sidecar
    summary = {"states": len(traj), "files": written,
               "final_time": float(traj.times[-1])}
    if args.format == "json":
        print(json.dumps(summary, sort_keys=True, indent=2))
    else:
        print(f"wrote {csv_path} ({len(traj)} states, t_final "
              f"{summary['final_time']:g})")
    return 0


def _cmd_fordkac(args):
    config = load_config(args.config)
    section = config.fordkac
    if not section:
        raise QgleError("config has no fordkac section")
    from .kernels import FordKacSpectrum, fordkac_spectrum_for_exponential
    spec_sec = section["spectrum"]
    if spec_sec.get("kind") == "exponential":
        spectrum = fordkac_spectrum_for_exponential(
            spec_sec["c"], spec_sec["alpha"], int(spec_sec["m_modes"]),
            spec_sec["omega_max"])
    elif spec_sec.get("kind") == "modes":
        spectrum = FordKacSpectrum(tuple((k, w) for k, w in spec_sec["modes"]))
    else:
        raise QgleError("fordkac.spectrum.kind must be 'exponential' or 'modes'")
    force = None
    if section.get("potential") is not None:
        from .model import ForceField
        force = ForceField.from_potential_expr(section["potential"], 1)
    seed = args.seed if args.seed is not None else (
        config.integrator.seed if config.integrator else 0)
    dt = float(section.get("dt", config.integrator.dt if config.integrator else 1e-3))
    traj = fordkac_simulate(force, spectrum, config.model.beta, dt,
                            float(section["T"]), seed,
                            q0=float(section.get("q0", 0.0)),
                            p0=float(section.get("p0", 0.0)),
                            stride=int(section.get("stride", 1)))
    csv_path = _out_path(args, config, "fordkac.csv", "trajectory_csv")
    with open(csv_path, "w", newline="") as handle:
        handle.write("t,q,p,energy\r\n")
        for t, q, p, e in zip(traj.times, traj.q, traj.p, traj.energy):
            handle.write(f"{float(t)!r},{float(q)!r},{float(p)!r},{float(e)!r}\r\n")
    drift = float(np.abs(traj.energy - traj.energy[0]).max()
                  / max(1e-300, abs(traj.energy[0])))
    if args.format == "json":
        print(json.dumps({"trajectory_csv": csv_path,
                          "relative_energy_drift": drift},
                         sort_keys=True, indent=2))
    else:
        print(f"wrote {csv_path} (relative energy drift {drift:.3e})")
    return 0


def _rate_fit_report(config, integ, model, observable, replicas):
    """Relaxation-rate fit of an ensemble restarted from a displaced point."""
    from .errors import NoSignalError
    from .model import ExtendedState
    from .simulate import simulate_ensemble
    from .stats import geometric_rate_fit, gibbs_quadrature_mean

    if observable is None:
        def observable(q):
            return np.cos(2.0 * np.pi * q[..., 0])
    start = ExtendedState(q=np.zeros(model.n), p=np.zeros(model.n),
                          s=np.zeros(model.m))
    ensemble = simulate_ensemble(model, integ, start, n_replicas=replicas)
    values = np.stack([observable(ensemble.q[r]) for r in range(replicas)])
    mu = config.analysis.get("rate_mu")
    if mu is None and model.force.is_conservative and model.n == 1 \
            and model.domain.is_torus:
        mu = gibbs_quadrature_mean(observable, model.force.potential,
                                   model.beta)
    try:
        fit = geometric_rate_fit(ensemble.times, values, mu=mu)
    except NoSignalError as err:
        return {"status": "no-signal", "message": str(err)}
    return {"status": "fitted", "kappa": fit.kappa,
            "r_squared": fit.r_squared, "mu": fit.mu,
            "n_replicas": replicas}


def _cmd_analyze(args):
    from .stats import clt_sigma, gibbs_moment_test
    config = load_config(args.config)
    integ = _integrator(config, args)
    model = config.model
    certs = _certificates(config)
    report = {
        "provenance": {"seed": integ.seed, "dt": integ.dt,
                       "n_steps": integ.n_steps, "scheme": integ.scheme},
        "certificates": [_cert_json(c) for c in certs],
    }
    can_gibbs = model.force.is_conservative and model.Q is not None
    initial = GibbsInit() if can_gibbs and model.domain.is_torus else None
    if initial is None:
        from .model import ExtendedState
        initial = ExtendedState(q=np.zeros(model.n), p=np.zeros(model.n),
                                s=np.zeros(model.m))
    traj = simulate(model, integ, initial)
    burn_in = float(config.analysis.get("burn_in", 0.1))
    observable = None
    if config.analysis.get("observable") and model.n == 1 \
            and model.domain.is_torus:
        from .expressions import compile_expr, parse_expr, validate_expr
        tree = parse_expr(config.analysis["observable"])
        validate_expr(tree, model.n, model.domain.is_torus)
        fn = compile_expr(tree)

        def observable(q, _fn=fn):
            return np.broadcast_to(np.asarray(_fn(q), dtype=float),
                                   (q.shape[0],))
    if can_gibbs:
        moments = gibbs_moment_test(traj, model, observable=observable,
                                    burn_in=burn_in)
        report["moments"] = {
            "z_pp": moments.z_pp.tolist(), "z_ss": moments.z_ss.tolist(),
            "z_ps": moments.z_ps.tolist(),
            "z_observable": moments.z_observable,
            "observable_mean": moments.observable_mean,
            "observable_target": moments.observable_target,
        }
    skip = int(burn_in * len(traj))
    series = traj.p[skip:, 0]
    method = config.analysis.get("sigma_method", "green_kubo_window")
    sigma = clt_sigma(series, method=method, dt=integ.dt * integ.stride,
                      n_batches=int(config.analysis.get("n_batches", 32)))
    report["sigma"] = {"sigma2": sigma.sigma2, "stderr": sigma.stderr,
                       "method": sigma.method}

    replicas = config.analysis.get("rate_replicas")
    if replicas:
        report["rate_fit"] = _rate_fit_report(config, integ, model,
                                              observable, int(replicas))
    text = json.dumps(report, sort_keys=True, indent=2)
    path = config.output.get("report_json")
    if path or args.out:
        report_path = _out_path(args, config, "report.json", "report_json")
        with open(report_path, "w", encoding="utf-8") as handle:
            handle.write(text + "\n")
    print(text)
    return 0 if all(c.satisfied for c in certs) else 1


def _cmd_figure_eigs(args):
    config = load_config(args.config)
    model = config.model
    if model.coeffs.constant:
        raise QgleError("figure-eigs needs position-dependent coefficients")
    points = int(config.analysis.get("grid_points", 1001))
    grid = np.linspace(0.0, 1.0, points)[:, None]
    c_mat = config.lyapunov_C
    if c_mat is None:
        c_mat = posdep_certificate_search(model.coeffs, grid)
    verification = posdep_certificate_verify(model.coeffs, c_mat, grid)
    csv_path = _out_path(args, config, "figure_eigs.csv", "figure_csv")
    with open(csv_path, "w", newline="") as handle:
        handle.write("q,lambda_min,lambda_max\r\n")
        for row, eigs in zip(grid, verification.eigenvalues):
            handle.write(f"{float(row[0])!r},{float(eigs[0])!r},"
                         f"{float(eigs[-1])!r}\r\n")
    if args.format == "json":
        print(json.dumps({"figure_csv": csv_path,
                          "margin": verification.margin},
                         sort_keys=True, indent=2))
    else:
        print(f"wrote {csv_path} (margin {verification.margin:.6f})")
    return 0 if verification.margin > 0 else 1


_COMMANDS = {
    "check": _cmd_check,
    "simulate": _cmd_simulate,
    "fordkac": _cmd_fordkac,
    "analyze": _cmd_analyze,
    "figure-eigs": _cmd_figure_eigs,
}


def dispatch(argv):
    """Parse argv and run the subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return _COMMANDS[args.command](args)
    except (QgleError, ValueError, OSError) as err:
        if getattr(args, "format", "csv") == "json":
            print(json.dumps({"error": {"type": type(err).__name__,
                                        "message": str(err)}}),
                  file=sys.stderr)
        else:
            print(f"error: {err}", file=sys.stderr)
        return 3


def main(argv=None):
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
