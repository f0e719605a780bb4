"""Command-line orchestration: experiments, verification suites, tables.

Modes: simulate, estimate, threshold, verify-inequality, verify-kernels,
martingale-test, epsilon-study. Exit codes: 0 success, 1 verification
failure, 2 configuration/usage error, 3 integration blow-up (partial
artifacts are still written). CSV artifacts are byte-identical for a fixed
manifest and seed; wall-clock timings go only into run_meta.json.

The KSPP_THREADS environment variable sets the replica-level thread count
of the simulator.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, constants, estimators, funineq, io, kernels, simulator

MODES = ("simulate", "estimate", "threshold", "verify-inequality",
         "verify-kernels", "martingale-test", "epsilon-study")


@dataclass
class ExperimentManifest:
    mode: str
    out_dir: Path
    config_path: Path | None = None
    seed: int | None = None
    options: dict = field(default_factory=dict)


def _write_json(path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["version"] = __version__
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_config(manifest: ExperimentManifest) -> simulator.SimConfig:
    if manifest.config_path is None:
        raise ValueError("this mode requires --config")
    cfg = io.load_config(manifest.config_path)
    if manifest.seed is not None:
        cfg = dataclasses.replace(cfg, seed=manifest.seed)
    return cfg


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------


def _mode_simulate(manifest: ExperimentManifest) -> int:
    cfg = _load_config(manifest)
    out = manifest.out_dir
    ens = simulator.run(cfg)
    fmt = manifest.options.get("format", "csv")
    if fmt in ("csv", "both"):
        io.write_trajectory_csv(out / "trajectory.csv", ens)
    if fmt in ("bin", "both"):
        io.write_trajectory_bin(out / "trajectory.ksw1", ens)
    (out / "config_resolved.txt").write_text(io.format_config(cfg))
    _write_json(out / "run_meta.json", {
        "mode": "simulate",
        "config": io.format_config(cfg),
        "rng": ens.rng_provenance,
        "blowups": ens.blowups,
        "drift_seconds": ens.drift_seconds,
    })
    if ens.blowups:
        print(f"blow-up in replicas {sorted({r for r, _ in ens.blowups})}",
              file=sys.stderr)
        return 3
    print(f"simulate: wrote {cfg.n_replicas} replicas x {cfg.n_steps} steps "
          f"x {cfg.n_particles} particles to {out}")
    return 0


def _mode_estimate(manifest: ExperimentManifest) -> int:
    cfg = _load_config(manifest)
    opts = manifest.options
    out = manifest.out_dir
    traj = opts.get("trajectory")
    blowups: list = []
    if traj:
        path = Path(traj)
        if path.suffix == ".ksw1":
            positions, dt = io.read_trajectory_bin(path)
        else:
            positions, dt = io.read_trajectory_csv(path)
        if abs(dt - cfg.dt) > 1e-12 * max(1.0, cfg.dt):
            raise ValueError(f"trajectory dt={dt} does not match config dt={cfg.dt}")
        cfg = dataclasses.replace(cfg, n_replicas=positions.shape[0],
                                n_steps=positions.shape[1] - 1,
                                n_particles=positions.shape[2])
        ens = simulator.TrajectoryEnsemble(
            positions=positions, config=cfg,
            rng_provenance={"seed": cfg.seed, "scheme": "external-trajectory"})
    else:
        ens = simulator.run(cfg)
        blowups = ens.blowups
    ep = estimators.EstimatorParams(
        gamma=opts["gamma"], alpha=opts["alpha"],
        delta=opts.get("delta", 0.0), horizon=opts.get("horizon"))
    report = estimators.paper_moments(ens, ep)
    _write_json(out / "report.json", report.to_json_dict())
    names = list(report.estimates)
    with open(out / "per_replica.csv", "w") as fh:
        fh.write("replica," + ",".join(names) + "\n")
        for r in range(ens.n_replicas):
            row = ",".join(f"{report.estimates[n].per_replica[r]:.17g}" for n in names)
            fh.write(f"{r},{row}\n")
    for name in names:
        est = report.estimates[name]
        print(f"{name}: {est.value:.6g} +- {est.stderr:.3g}")
    if report.divergent_terms:
        print(f"divergent terms excluded: {report.divergent_terms}")
    return 3 if blowups else 0


_REMARK_ROWS = (
    # scenario label, theta, p, claimed bound(s)
    ("small-theta-fixed-point", 1e-6, 4.0, 3.27, 3.30),
    ("theta-0.1", 0.1, 2.61, 2.42, None),
    ("theta-1", 1.0, 3.31, 1.39, None),
    ("theta-10", 10.0, 3.51, 0.51, None),
    ("large-theta-scaled", 1e4, 3.51, 1.60, None),
)


def remark61_table() -> tuple[str, bool]:
    """Five-scenario threshold table as CSV text, plus the overall verdict.

    The small-theta row evaluates the fixed near-degenerate point
    (gamma, alpha) = (1.5 + 1e-3, 0.13e-6) directly; the large-theta row
    reports sqrt(theta) * chi_star; the middle rows are plain chi_star
    optimizations at the quoted (theta, p).
    """
    lines = ["scenario,theta,p,gamma,alpha,computed,target_low,target_high,pass"]
    all_ok = True
    for name, theta, p, lo, hi in _REMARK_ROWS:
        if name == "small-theta-fixed-point":
            sp = constants.StructuralParams(gamma=1.5 + 1e-3, alpha=0.13e-6,
                                            theta=theta, p=p)
            computed = constants.chi_for(sp)
            gamma, alpha = sp.gamma, sp.alpha
        else:
            res = constants.chi_star(theta, p)
            gamma, alpha = res.best_gamma, res.best_alpha
            computed = res.chi_star
            if name == "large-theta-scaled":
                computed = math.sqrt(theta) * computed
        ok = computed >= lo and (hi is None or computed <= hi)
        all_ok = all_ok and ok
        hi_txt = "" if hi is None else f"{hi}"
        lines.append(f"{name},{theta:g},{p:g},{gamma:.8g},{alpha:.8g},"
                     f"{computed:.8g},{lo},{hi_txt},{'pass' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n", all_ok


def _mode_threshold(manifest: ExperimentManifest) -> int:
    opts = manifest.options
    out = manifest.out_dir
    if opts.get("remark61"):
        table, ok = remark61_table()
        (out / "remark61.csv").write_text(table)
        print(table, end="")
        return 0 if ok else 1
    theta, p = opts["theta"], opts["p"]
    settings = constants.SearchSettings(
        coarse=opts.get("coarse", 60),
        refine_rounds=opts.get("refine_rounds", 4),
        refine_points=opts.get("refine_points", 15))
    res = constants.chi_star(theta, p, settings)
    csv_text = ("theta,p,chi_star,best_gamma,best_alpha\n"
                f"{theta:.8g},{p:.8g},{res.chi_star:.8g},"
                f"{res.best_gamma:.8g},{res.best_alpha:.8g}\n")
    (out / "threshold.csv").write_text(csv_text)
    print(csv_text, end="")
    return 0


def _mode_verify_inequality(manifest: ExperimentManifest) -> int:
    opts = manifest.options
    cases = opts.get("cases", 10000)
    seed = manifest.seed if manifest.seed is not None else 0
    sweep = funineq.random_sweep(cases, seed)
    # extremal-profile optimality on an (a, b) grid, three profile scales
    grid_err = 0.0
    for a in np.linspace(0.1, 2.0, 10):
        for off in np.linspace(0.1, 1.0, 10):
            b = a + off
            k_ref = constants.kappa(float(a), float(b))
            for k in (0.1, 1.0, 10.0):
                _, _, ratio = funineq.extremal_profile(k, float(a), float(b))
                grid_err = max(grid_err, abs(ratio - k_ref))
    ratios = funineq.tightness_scan([1e-1, 1e-2, 1e-3, 1e-4], 0.5, 1.0, 1.0)
    monotone = all(r2 > r1 for r1, r2 in zip(ratios, ratios[1:]))
    ok = (sweep.violations == 0 and grid_err < 1e-9 and monotone)
    print(f"random sweep: cases={sweep.cases} evaluated={sweep.evaluated} "
          f"divergent={sweep.divergent} violations={sweep.violations} "
          f"worst_ratio={sweep.worst_ratio:.12f}")
    print(f"extremal-profile max |ratio - kappa| = {grid_err:.3g}")
    print(f"tightness ratios (eps 1e-1..1e-4): "
          + " ".join(f"{r:.6f}" for r in ratios)
          + (" (increasing)" if monotone else " (NOT increasing)"))
    payload = {
        "mode": "verify-inequality", "cases": sweep.cases,
        "evaluated": sweep.evaluated, "divergent": sweep.divergent,
        "violations": sweep.violations, "worst_ratio": sweep.worst_ratio,
        "extremal_grid_max_err": grid_err, "tightness_ratios": ratios,
        "pass": ok,
    }
    _write_json(manifest.out_dir / "verify_inequality.json", payload)
    return 0 if ok else 1


def _mode_verify_kernels(manifest: ExperimentManifest) -> int:
    opts = manifest.options
    seed = manifest.seed if manifest.seed is not None else 0
    fd_tol = opts.get("fd_tol", 1e-5)
    norm_tol = opts.get("norm_tol", 1e-6)
    n_env = opts.get("samples", 100000)
    n_fd = opts.get("fd_points", 100)
    rng = np.random.default_rng(seed)

    # finite differences vs the closed-form gradient
    worst_fd = 0.0
    for _ in range(n_fd):
        params = kernels.KernelParams(theta=rng.uniform(0.3, 3.0),
                                      lam=rng.uniform(0.0, 1.0), chi=1.0)
        t = rng.uniform(0.1, 5.0)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        x = rng.uniform(0.1, 5.0) * np.array([math.cos(ang), math.sin(ang)])
        h = 1e-6 * max(1.0, float(np.linalg.norm(x)))
        fd = np.array([
            (kernels.chemo_kernel(t, x + [h, 0.0], params)
             - kernels.chemo_kernel(t, x - [h, 0.0], params)) / (2 * h),
            (kernels.chemo_kernel(t, x + [0.0, h], params)
             - kernels.chemo_kernel(t, x - [0.0, h], params)) / (2 * h)])
        grad = kernels.chemo_kernel_grad(t, x, params)
        worst_fd = max(worst_fd, float(np.linalg.norm(fd - grad)
                                       / np.linalg.norm(grad)))

    # envelope domination sweep: random parameter groups, vectorized samples
    violations = 0
    n_groups = max(1, min(200, n_env // 500))
    per_group = max(1, n_env // (2 * n_groups))
    for eps in (0.0, 0.1):
        for _ in range(n_groups):
            params = kernels.KernelParams(theta=float(rng.uniform(0.1, 10.0)),
                                          chi=1.0, epsilon=eps)
            alpha = float(rng.uniform(0.01, 0.3))
            ts = rng.uniform(0.0, 5.0, per_group)
            if eps == 0.0:
                ts = np.maximum(ts, 1e-9)
            angs = rng.uniform(0.0, 2.0 * math.pi, per_group)
            rads = rng.uniform(0.0, 5.0, per_group)
            xs = rads[:, None] * np.stack([np.cos(angs), np.sin(angs)], axis=-1)
            h_val = kernels.smoothed_grad(ts, xs, params)
            mags = np.sqrt(np.einsum("nc,nc->n", h_val, h_val))
            env = kernels.grad_envelope(ts, xs, alpha, params)
            violations += int(np.sum(mags > env * (1.0 + 1e-12)))

    # heat-kernel normalization by tensor quadrature
    nodes, weights = np.polynomial.legendre.leggauss(400)
    worst_norm = 0.0
    for t, theta in ((1.0, 1.0), (0.25, 4.0), (3.0, 0.5)):
        params = kernels.KernelParams(theta=theta, chi=1.0)
        half = 20.0 * math.sqrt(t / theta)
        u = half * nodes
        w2 = np.outer(weights, weights) * half * half
        grid = np.stack(np.meshgrid(u, u, indexing="ij"), axis=-1)
        total = float(np.sum(kernels.heat_kernel(t, grid, params) * w2))
        worst_norm = max(worst_norm, abs(total - 1.0))

    ok = worst_fd < fd_tol and violations == 0 and worst_norm < norm_tol
    print(f"gradient finite differences: worst rel err {worst_fd:.3g} "
          f"(tol {fd_tol:g})")
    print(f"envelope sweep: {violations} violations over "
          f"{2 * n_groups * per_group} samples")
    print(f"normalization: worst |quadrature - 1| = {worst_norm:.3g} "
          f"(tol {norm_tol:g})")
    _write_json(manifest.out_dir / "verify_kernels.json", {
        "mode": "verify-kernels", "fd_worst": worst_fd,
        "envelope_violations": violations, "norm_worst": worst_norm,
        "pass": ok,
    })
    return 0 if ok else 1


def _mode_martingale_test(manifest: ExperimentManifest) -> int:
    opts = manifest.options
    seed = manifest.seed if manifest.seed is not None else 0
    replicas = opts.get("replicas", 10000)
    steps = opts.get("steps", 64)
    n_small = opts.get("n_small", 16)
    n_large = opts.get("n_large", 64)
    lo_band = opts.get("var_lo", 2.5)
    hi_band = opts.get("var_hi", 6.0)
    batch = opts.get("batch", 500)
    params = kernels.KernelParams(theta=1.0, chi=0.0, epsilon=0.0)

    # (a) Ito-balance residual for the Gaussian family on Brownian pairs
    per_rep = []
    ep = estimators.EstimatorParams(gamma=1.62, alpha=0.045)
    done = 0
    while done < replicas:
        n_batch = min(batch, replicas - done)
        cfg = simulator.SimConfig(params=params, n_particles=2, dt=1.0 / steps,
                                  n_steps=steps, n_replicas=n_batch,
                                  seed=seed + 1000 + done,
                                  init=simulator.InitSpec("gaussian", sigma=1.0))
        ens = simulator.run(cfg)
        rep = estimators.ito_balance_check(ens, ep, f_spec="gaussian-bump",
                                           n_boot=1, boot_seed=0)
        per_rep.append(rep.per_replica)
        done += n_batch
    values = np.concatenate(per_rep)
    lo, hi = estimators.bootstrap_mean_ci(values, level=0.99, seed=seed)
    resid_ok = lo <= 0.0 <= hi

    # (b) variance scaling of the empirical martingale residual in N
    variances = {}
    for n_particles in (n_small, n_large):
        vals = []
        done = 0
        while done < replicas:
            n_batch = min(batch, replicas - done)
            cfg = simulator.SimConfig(params=params, n_particles=n_particles,
                                      dt=1.0 / steps, n_steps=steps,
                                      n_replicas=n_batch, seed=seed + done,
                                      init=simulator.InitSpec("gaussian", sigma=1.0))
            ens = simulator.run(cfg)
            res = estimators.martingale_residual(ens, None, ("const",),
                                                 s=0.5, t=1.0)
            vals.append(res.per_replica)
            done += n_batch
        variances[n_particles] = float(np.concatenate(vals).var(ddof=1))
    ratio = variances[n_small] / variances[n_large]
    ratio_ok = lo_band <= ratio <= hi_band

    ok = resid_ok and ratio_ok
    print(f"Ito-balance residual: mean {values.mean():.3e}, 99% CI "
          f"[{lo:.3e}, {hi:.3e}] -> {'pass' if resid_ok else 'FAIL'}")
    print(f"variance ratio N={n_small} vs N={n_large}: {ratio:.3f} "
          f"(band [{lo_band}, {hi_band}]) -> {'pass' if ratio_ok else 'FAIL'}")
    _write_json(manifest.out_dir / "martingale_test.json", {
        "mode": "martingale-test", "replicas": replicas,
        "residual_mean": float(values.mean()), "residual_ci": [lo, hi],
        "variances": {str(k): v for k, v in variances.items()},
        "variance_ratio": ratio, "band": [lo_band, hi_band], "pass": ok,
    })
    return 0 if ok else 1


def _mode_epsilon_study(manifest: ExperimentManifest) -> int:
    opts = manifest.options
    seed = manifest.seed if manifest.seed is not None else 3
    eps_list = opts.get("epsilons", [0.1, 0.05, 0.025])
    n_particles = opts.get("particles", 8)
    steps = opts.get("steps", 128)
    horizon = opts.get("horizon", 1.0)
    chi = opts.get("chi", 0.3)
    factor = opts.get("factor", 2.0)
    gamma = opts.get("gamma", 1.52)
    alpha = opts.get("alpha", 0.045)
    sigma = opts.get("sigma", 2.0)
    dt = horizon / steps
    base = simulator.SimConfig(
        params=kernels.KernelParams(theta=1.0, chi=chi, epsilon=eps_list[0]),
        n_particles=n_particles, dt=dt, n_steps=steps,
        n_replicas=opts.get("replicas", 8),
        seed=seed, init=simulator.InitSpec("gaussian", sigma=sigma))
    noise = simulator.draw_noise(base)
    initial = simulator.draw_initial(base)
    ep = estimators.EstimatorParams(gamma=gamma, alpha=alpha)
    rows = []
    for eps in eps_list:
        cfg = dataclasses.replace(
            base, params=kernels.KernelParams(theta=1.0, chi=chi, epsilon=eps))
        ens = simulator.run(cfg, initial=initial, noise=noise)
        rep = estimators.paper_moments(ens, ep)
        rows.append((eps, rep.estimates["E4"].value))
    values = [v for _, v in rows]
    spread = max(values) / min(values)
    ok = spread < factor
    csv_text = "epsilon,E4\n" + "".join(f"{e:.8g},{v:.8g}\n" for e, v in rows)
    (manifest.out_dir / "epsilon_study.csv").write_text(csv_text)
    print(csv_text, end="")
    print(f"max/min E4 ratio = {spread:.4f} (limit {factor}) -> "
          f"{'pass' if ok else 'FAIL'}")
    _write_json(manifest.out_dir / "epsilon_study.json", {
        "mode": "epsilon-study", "rows": rows, "spread": spread,
        "factor": factor, "pass": ok,
    })
    return 0 if ok else 1


_DISPATCH = {
    "simulate": _mode_simulate,
    "estimate": _mode_estimate,
    "threshold": _mode_threshold,
    "verify-inequality": _mode_verify_inequality,
    "verify-kernels": _mode_verify_kernels,
    "martingale-test": _mode_martingale_test,
    "epsilon-study": _mode_epsilon_study,
}


def run_experiment(manifest: ExperimentManifest) -> int:
    """Execute one experiment; returns the process exit status."""
    if manifest.mode not in _DISPATCH:
        raise ValueError(f"unknown mode {manifest.mode!r}")
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    return _DISPATCH[manifest.mode](manifest)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kspp",
        description="Keller-Segel particle system: simulate, estimate, verify.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="mode", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p_sim = sub.add_parser("simulate", help="integrate the particle system")
    common(p_sim)
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--format", choices=("csv", "bin", "both"), default="csv")

    p_est = sub.add_parser("estimate", help="moment functionals of a run")
    common(p_est)
    p_est.add_argument("--config", required=True)
    p_est.add_argument("--trajectory", default=None,
                       help="existing trajectory file (.csv or .ksw1); "
                            "otherwise the run happens inline")
    p_est.add_argument("--gamma", type=float, required=True)
    p_est.add_argument("--alpha", type=float, required=True)
    p_est.add_argument("--delta", type=float, default=0.0)
    p_est.add_argument("--horizon", type=float, default=None)

    p_thr = sub.add_parser("threshold", help="sensitivity threshold table")
    common(p_thr)
    p_thr.add_argument("--theta", type=float)
    p_thr.add_argument("--p", type=float)
    p_thr.add_argument("--remark61", action="store_true",
                       help="emit the five-scenario reference table")
    p_thr.add_argument("--coarse", type=int, default=60)
    p_thr.add_argument("--refine-rounds", type=int, default=4)
    p_thr.add_argument("--refine-points", type=int, default=15)

    p_vi = sub.add_parser("verify-inequality", help="functional inequality suite")
    common(p_vi)
    p_vi.add_argument("--cases", type=int, default=10000)

    p_vk = sub.add_parser("verify-kernels", help="kernel identity suite")
    common(p_vk)
    p_vk.add_argument("--samples", type=int, default=100000)
    p_vk.add_argument("--fd-points", type=int, default=100)
    p_vk.add_argument("--fd-tol", type=float, default=1e-5)
    p_vk.add_argument("--norm-tol", type=float, default=1e-6)

    p_mt = sub.add_parser("martingale-test", help="empirical martingale checks")
    common(p_mt)
    p_mt.add_argument("--replicas", type=int, default=10000)
    p_mt.add_argument("--steps", type=int, default=64)
    p_mt.add_argument("--n-small", type=int, default=16)
    p_mt.add_argument("--n-large", type=int, default=64)
    p_mt.add_argument("--var-lo", type=float, default=2.5)
    p_mt.add_argument("--var-hi", type=float, default=6.0)
    p_mt.add_argument("--batch", type=int, default=500)

    p_es = sub.add_parser("epsilon-study", help="smoothing refinement stability")
    common(p_es)
    p_es.add_argument("--epsilons", default="0.1,0.05,0.025")
    p_es.add_argument("--particles", type=int, default=8)
    p_es.add_argument("--steps", type=int, default=128)
    p_es.add_argument("--horizon", type=float, default=1.0)
    p_es.add_argument("--chi", type=float, default=0.3)
    p_es.add_argument("--replicas", type=int, default=8)
    p_es.add_argument("--gamma", type=float, default=1.52)
    p_es.add_argument("--alpha", type=float, default=0.045)
    p_es.add_argument("--sigma", type=float, default=2.0)
    p_es.add_argument("--factor", type=float, default=2.0)

    return parser


def _manifest_from_args(args: argparse.Namespace) -> ExperimentManifest:
    options = {k: v for k, v in vars(args).items()
               if k not in ("mode", "out", "seed", "config") and v is not None}
    if args.mode == "threshold":
        if not args.remark61 and (args.theta is None or args.p is None):
            raise ValueError("threshold needs either --remark61 or --theta and --p")
    if args.mode == "epsilon-study":
        options["epsilons"] = [float(v) for v in str(args.epsilons).split(",")]
    return ExperimentManifest(
        mode=args.mode,
        out_dir=Path(args.out),
        config_path=Path(args.config) if getattr(args, "config", None) else None,
        seed=args.seed,
        options=options,
    )


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        manifest = _manifest_from_args(args)
        return run_experiment(manifest)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
