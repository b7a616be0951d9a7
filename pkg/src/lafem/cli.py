"""Command line: ``lafem <command> [--config PATH] [--seed N] [--threads N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 acceptance-check failure.  Main outputs are functions of (config, seed);
wall-clock numbers go to ``timings.json`` so the rest stays byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import diff, dsm, eit, fem, flb
from .linalg import CGNotConverged, NotPositiveDefiniteError
from .mesh import uniform_mesh
from .parallel import ENV_VAR, num_threads, set_num_threads

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """All knobs of every command; unknown keys are rejected on load."""
    n: int = 64
    order: int = 1
    channels: list = field(default_factory=lambda: list(eit.DEFAULT_CHANNELS))
    K0: int = flb.DEFAULT_K0
    refine: int = flb.DEFAULT_REFINE
    seed: int = 0
    # gamma recovery
    gamma_true: list = field(default_factory=lambda: [0.75])
    gamma_init: list = field(default_factory=lambda: [0.0])
    xi_mode: str = "shared"            # shared: one cos(theta); symmetric: one harmonic per channel
    recovery_noise: float = 0.0
    subdomain: list = field(default_factory=lambda: [-0.5, 0.5])
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    max_iter: int = 500
    tol: float = 1e-12
    # data generation and DSM
    n_samples: int = 4
    N_c: int = 3
    sigma1: float = eit.SIGMA_INCLUSION
    sigma0: float = eit.SIGMA_BACKGROUND
    delta: float = 0.0
    noise_kind: str = "lowfreq"
    data_refine: int = 1
    grid: int = dsm.GRID_N
    gammas: list = field(default_factory=lambda: [0.0, 0.5, 0.75, 1.0])
    # benchmarks
    bench_n: list = field(default_factory=lambda: [16, 32, 64, 128])
    bench_orders: list = field(default_factory=lambda: [1, 2])
    repeats: int = 5
    batch_L: int = 10
    batch_n: int = 32
    # gradient check
    grad_n: int = 32
    draws: int = 20
    grad_tol: float = 1e-5
    corrupt_gradient: float = 0.0      # negative-control hook: scales the adjoint gradient

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text()) if path else {}
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)
        need(isinstance(self.n, int) and self.n >= 2, "n must be an integer >= 2")
        need(self.order in (1, 2), "order must be 1 or 2")
        need(len(self.channels) >= 1 and all(isinstance(l, int) and l >= 1 for l in self.channels),
             "channels must be positive integers")
        need(isinstance(self.refine, int) and self.refine >= 0, "refine must be >= 0")
        need(isinstance(self.K0, int) and 1 <= self.K0 < 4 * self.n * 2 ** self.refine,
             "K0 must be positive and below the refined boundary DoF count")
        need(len(self.gamma_true) >= 1 and len(self.gamma_init) in (1, len(self.gamma_true)),
             "gamma_init must have one entry or one per gamma_true entry")
        need(all(np.isfinite(self.gamma_true)) and all(np.isfinite(self.gamma_init)),
             "gammas must be finite")
        need(self.xi_mode in ("shared", "symmetric"), "xi_mode must be 'shared' or 'symmetric'")
        need(self.recovery_noise >= 0 and self.delta >= 0, "noise levels must be >= 0")
        need(len(self.subdomain) == 2 and -1 < self.subdomain[0] < self.subdomain[1] < 1,
             "subdomain must be [lo, hi] strictly inside (-1, 1)")
        need(self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "bad optimizer params")
        need(self.max_iter >= 0 and self.tol >= 0, "bad stopping params")
        need(self.n_samples >= 1 and self.N_c >= 1, "n_samples and N_c must be >= 1")
        need(self.sigma1 > 0 and self.sigma0 > 0, "conductivities must be positive")
        need(self.noise_kind in ("gaussian", "lowfreq"), "noise_kind must be gaussian or lowfreq")
        need(self.data_refine >= 0 and self.grid >= 2, "bad data_refine or grid")
        need(all(o in (1, 2) for o in self.bench_orders) and all(m >= 1 for m in self.bench_n),
             "bad benchmark sweep")
        need(self.repeats >= 1 and self.batch_L >= 1 and self.batch_n >= 1, "bad benchmark sizes")
        need(self.grad_n >= 2 and self.draws >= 1 and self.grad_tol > 0, "bad gradient check params")

    def recovery_config(self):
        return diff.RecoveryConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                                   max_iter=self.max_iter, tol=self.tol)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    Path(path).write_text(buf.getvalue())


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _median_time(fn, repeats):
    """Warm-up call discarded, median of ``repeats`` timed calls; returns (median, result)."""
    out = fn()
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts), out


class Timings:
    def __init__(self):
        self.data = {}

    def __setitem__(self, k, v):
        self.data[k] = v

    def write(self, out):
        _write_json(Path(out) / "timings.json", self.data)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _laplace_problem(n, p):
    """Manufactured Neumann problem on [-1,1]^2: u = cos(pi x) cos(pi y)."""
    space = fem.LagrangeSpace(uniform_mesh(2, n, box=eit.BOX), p)

    def src(x):
        return 2 * np.pi ** 2 * np.cos(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1])
    return space, src


def cmd_bench_assembly(cfg: RunConfig, out: Path, timings: Timings):
    rows, trows = [], []
    for p in cfg.bench_orders:
        for n in cfg.bench_n:
            space, src = _laplace_problem(n, p)
            w = fem.boundary_weights(space)
            t_asm, K = _median_time(lambda: fem.assemble_stiffness(space), cfg.repeats)
            b = fem.assemble_load(space, src)
            t_cg, u = _median_time(
                lambda: fem.ConstrainedSolver(K, w, method="cg").solve(b, warn=False),
                max(1, min(cfg.repeats, 2)))
            exact = lambda x: np.cos(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1])
            shift = w @ space.interpolate(exact) / w.sum()
            err = fem.l2_error(space, u, lambda x: exact(x) - shift)
            rows.append([n, p, space.ndof, err])
            trows.append([n, p, space.ndof, t_asm, t_cg])
    _write_csv(out / "bench_assembly.csv", ["n", "order", "dofs", "l2_error"], rows)
    _write_csv(out / "bench_assembly_timings.csv",
               ["n", "order", "dofs", "assembly_s", "cg_s"], trows)
    timings["bench_assembly"] = trows
    return EXIT_OK


def batched_poisson_3d(L, n, batched=True, tol=1e-10):
    """L Neumann problems on [0,1]^3 with u_l = cos(l pi x) cos(l pi y) cos(l pi z)."""
    space = fem.LagrangeSpace(uniform_mesh(3, n), 1)
    ls = np.arange(1, L + 1, dtype=np.float64)

    def u(x, l):
        return np.cos(l * np.pi * x[..., 0]) * np.cos(l * np.pi * x[..., 1]) \
            * np.cos(l * np.pi * x[..., 2])

    def f(x, l):
        return 3 * (l * np.pi) ** 2 * u(x, l)

    def g(x, nrm, l):
        s, c = np.sin(l * np.pi * x), np.cos(l * np.pi * x)
        grad = -l * np.pi * np.stack([s[..., 0] * c[..., 1] * c[..., 2],
                                      c[..., 0] * s[..., 1] * c[..., 2],
                                      c[..., 0] * c[..., 1] * s[..., 2]], axis=-1)
        return np.einsum("fqd,fd->fq", grad, nrm)

    w = fem.boundary_weights(space)
    if batched:
        K = fem.assemble_stiffness(space)
        vol = fem.assemble_load(space, lambda x: np.stack([f(x, l) for l in ls]), batched=True)
        neu = fem.assemble_load(space, lambda x, nrm: np.stack([g(x, nrm, l) for l in ls]),
                                kind="neumann", batched=True)
        U = fem.ConstrainedSolver(K, w, method="cg", tol=tol).solve(vol + neu, warn=False)
    else:
        U = []
        for l in ls:
            K = fem.assemble_stiffness(space)
            b = fem.assemble_load(space, lambda x: f(x, l)) \
                + fem.assemble_load(space, lambda x, nrm: g(x, nrm, l), kind="neumann")
            U.append(fem.ConstrainedSolver(K, w, method="cg", tol=tol).solve(b, warn=False))
        U = np.stack(U)
    return space, U


def cmd_bench_batched(cfg: RunConfig, out: Path, timings: Timings):
    t_ser, (space, Us) = _median_time(lambda: batched_poisson_3d(cfg.batch_L, cfg.batch_n, False),
                                      max(1, min(cfg.repeats, 2)))
    t_bat, (_, Ub) = _median_time(lambda: batched_poisson_3d(cfg.batch_L, cfg.batch_n, True),
                                  max(1, min(cfg.repeats, 2)))
    diffmax = float(np.abs(Us - Ub).max())
    ok = diffmax <= 1e-12
    speedup = t_ser / t_bat
    _write_csv(out / "bench_batched.csv", ["dofs", "L", "max_abs_diff", "equal"],
               [[space.ndof, cfg.batch_L, diffmax, int(ok)]])
    _write_csv(out / "bench_batched_timings.csv", ["dofs", "serial_ms", "batched_ms", "speedup"],
               [[space.ndof, 1e3 * t_ser, 1e3 * t_bat, speedup]])
    timings["bench_batched"] = {"serial_s": t_ser, "batched_s": t_bat, "speedup": speedup,
                                "speedup_ok": speedup >= 1.5}
    if speedup < 1.5:
        print(f"warning: batched speedup {speedup:.2f} below 1.5", file=sys.stderr)
    return EXIT_OK if ok else EXIT_CHECK


def square_boundary_eigenvalues(k):
    """(ceil(k/2) pi / 4)^2: Laplace-Beltrami spectrum of the perimeter-8 square boundary."""
    k = np.asarray(k)
    return (np.ceil(k / 2) * np.pi / 4) ** 2


def cmd_eigenbasis(cfg: RunConfig, out: Path, timings: Timings):
    space = eit.reconstruction_space(cfg.n)
    t0 = time.perf_counter()
    B = flb.build_spectral_basis(space.trace, cfg.K0, cfg.refine)
    timings["eigenbasis_s"] = time.perf_counter() - t0
    B.save(out / "basis.json")
    k = np.arange(1, B.K0 + 1)
    ref = square_boundary_eigenvalues(k)
    rel = np.abs(B.eigenvalues - ref) / ref
    _write_csv(out / "eigenvalues.csv", ["k", "lambda", "analytic", "rel_err"],
               zip(k, B.eigenvalues, ref, rel))
    orth = float(np.abs(B.eigenvectors.T @ B.mass.matvec(B.eigenvectors.T).T
                        - np.eye(B.K0)).max())
    _write_json(out / "eigenbasis_summary.json",
                {"K0": B.K0, "refine": cfg.refine, "n": cfg.n, "orthonormality_error": orth,
                 "max_rel_err_k_le_16": float(rel[:16].max())})
    return EXIT_OK


def cmd_gen_data(cfg: RunConfig, out: Path, timings: Timings):
    t0 = time.perf_counter()
    eit.generate_dataset(out / "dataset", cfg.n_samples, cfg.seed, cfg.n, cfg.N_c, cfg.channels,
                         cfg.delta, cfg.noise_kind, cfg.data_refine, cfg.sigma1, cfg.sigma0,
                         image_n=cfg.grid)
    timings["gen_data_s"] = time.perf_counter() - t0
    return EXIT_OK


def recovery_operator(cfg: RunConfig, space=None, basis=None):
    space = space or eit.reconstruction_space(cfg.n)
    basis = basis or flb.build_spectral_basis(space.trace, cfg.K0, cfg.refine)
    if cfg.xi_mode == "shared":
        xi = eit.mean_zero(space, np.cos(space.trace.theta))[0]
    else:
        xi = diff.symmetry_channels(space, len(cfg.gamma_true))
    return diff.FeatureOperator(space, basis, xi)


def cmd_recover_gamma(cfg: RunConfig, out: Path, timings: Timings):
    op = recovery_operator(cfg)
    lo, hi = cfg.subdomain
    prob = diff.make_recovery_problem(op, cfg.gamma_true, diff.box_subdomain(lo, hi),
                                      cfg.recovery_noise, cfg.seed, cfg.recovery_config())
    g0 = np.broadcast_to(np.asarray(cfg.gamma_init, dtype=np.float64), (len(cfg.gamma_true),))
    try:
        traj = diff.recover_gamma(prob, g0)
    except diff.DivergenceError as e:
        (out / "trajectory.csv").write_text(e.trajectory.to_csv())
        raise
    timings["recover_gamma_s"] = traj.elapsed
    (out / "trajectory.csv").write_text(traj.to_csv())
    g_hat = traj.final_gamma
    g_true = np.asarray(cfg.gamma_true)
    _write_json(out / "summary.json",
                {"gamma_hat": g_hat.tolist(), "gamma_true": g_true.tolist(),
                 "abs_error": np.abs(g_hat - g_true).tolist(),
                 "rel_error": (np.abs(g_hat - g_true) / np.abs(g_true)).tolist(),
                 "iterations": traj.iterations[-1], "final_loss": traj.losses[-1],
                 "noise": cfg.recovery_noise, "xi_mode": cfg.xi_mode})
    return EXIT_OK


def cmd_dsm(cfg: RunConfig, out: Path, timings: Timings):
    t0 = time.perf_counter()
    space = eit.reconstruction_space(cfg.n)
    basis = flb.build_spectral_basis(space.trace, cfg.K0, cfg.refine)
    cache = dsm.ProbeCache(space, basis, cfg.grid)
    dtn = fem.DtNMap(space)
    report = []
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_samples)
    for i, ss in enumerate(streams):
        geo, noise = ss.spawn(2)
        incl = eit.sample_inclusions(cfg.N_c, np.random.default_rng(geo))
        field_ = eit.conductivity_from_inclusions(space.mesh, incl, cfg.sigma1, cfg.sigma0)
        data = eit.forward_eit(space, field_, cfg.channels, cfg.data_refine)
        data = eit.add_noise(data, cfg.delta, cfg.noise_kind,
                             int(np.random.default_rng(noise).integers(2 ** 32)), basis)
        xi = eit.compute_xi(data, dtn)
        truth = eit.characteristic_image(incl, cfg.grid)
        sdir = out / f"sample_{i:03d}"
        sdir.mkdir(parents=True, exist_ok=True)
        _write_csv(sdir / "truth.csv", [f"c{j}" for j in range(cfg.grid)], truth.tolist())
        entry = {"sample": i, "inclusions": incl.to_json(), "gammas": {}}
        for gamma in cfg.gammas:
            ims = dsm.index_image(cache, xi, gamma)
            fused = dsm.fuse(ims)
            tag = f"gamma_{gamma:g}"
            for im in ims:
                dsm.export_image(im, sdir / f"{tag}_l{im.labels[0]}.csv")
            dsm.export_image(fused, sdir / f"{tag}_fused.csv")
            dsm.export_image(fused, sdir / f"{tag}_fused.pgm")
            inside = truth.astype(bool)
            v = fused.values
            am = int(np.argmax(v))
            entry["gammas"][f"{gamma:g}"] = {
                "argmax_inside": bool(inside.ravel()[am]),
                "mean_inside_gt_outside": bool(inside.any() and (~inside).any()
                                              and v[inside].mean() > v[~inside].mean())}
        report.append(entry)
    _write_json(out / "dsm_report.json", {"samples": report, "factorizations": cache.factorizations})
    timings["dsm_s"] = time.perf_counter() - t0
    return EXIT_OK


def cmd_grad_check(cfg: RunConfig, out: Path, timings: Timings):
    rng = np.random.default_rng(cfg.seed)
    space = eit.reconstruction_space(cfg.grad_n)
    basis = flb.build_spectral_basis(space.trace, cfg.K0, cfg.refine)
    solver = fem.ConstrainedSolver(fem.assemble_stiffness(space), fem.boundary_weights(space),
                                   method="cholesky")
    M_d = fem.assemble_mass(space, diff.box_subdomain(*cfg.subdomain))
    L = len(cfg.channels)
    rows, worst = [], 0.0
    t0 = time.perf_counter()
    for draw in range(cfg.draws):
        xi, g_true, g = random_draw(rng, space, basis, L)
        op = diff.FeatureOperator(space, basis, xi, solver=solver)
        prob = diff.GammaRecoveryProblem(op, op.forward(g_true).sum(axis=0), M_d)
        fun = prob.loss_and_grad
        if cfg.corrupt_gradient:
            def fun(gm, _f=prob.loss_and_grad):
                loss, grad = _f(gm)
                return loss, grad * (1.0 + cfg.corrupt_gradient)
        chk = diff.fd_gradient_check(fun, g)
        worst = max(worst, chk.max_relative_error)
        for c, (a, f, r) in enumerate(zip(chk.adjoint, chk.finite_difference, chk.relative_errors)):
            rows.append([draw, c, a, f, r])
    timings["grad_check_s"] = time.perf_counter() - t0
    _write_csv(out / "grad_check.csv", ["draw", "component", "adjoint", "fd", "rel_err"], rows)
    ok = worst <= cfg.grad_tol
    _write_json(out / "grad_check_summary.json",
                {"max_rel_err": worst, "tolerance": cfg.grad_tol, "pass": ok, "draws": cfg.draws})
    print(f"grad-check: max relative error {worst:.3e} ({'pass' if ok else 'FAIL'})")
    return EXIT_OK if ok else EXIT_CHECK


def random_draw(rng, space, basis, L):
    """Random boundary channels (random modal combinations) and two random gamma vectors."""
    coef = rng.standard_normal((L, basis.K0)) / (1.0 + np.arange(basis.K0))
    xi = eit.mean_zero(space, basis.synthesize(coef))
    return xi, rng.uniform(0.2, 0.9, L), rng.uniform(0.0, 1.0, L)


COMMANDS = {
    "bench-assembly": cmd_bench_assembly,
    "bench-batched": cmd_bench_batched,
    "eigenbasis": cmd_eigenbasis,
    "gen-data": cmd_gen_data,
    "recover-gamma": cmd_recover_gamma,
    "dsm": cmd_dsm,
    "grad-check": cmd_grad_check,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="lafem", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None, help="JSON run configuration")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker cap (default: ${ENV_VAR} or 1)")
        sp.add_argument("--out", type=Path, default=Path("lafem-out"), help="output directory")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except (ConfigError, TypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    set_num_threads(args.threads)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    timings = Timings()
    timings["threads"] = num_threads()
    try:
        # BLAS stays single-threaded so results do not depend on --threads
        with threadpool_limits(limits=1):
            code = COMMANDS[args.command](cfg, out, timings)
    except (CGNotConverged, NotPositiveDefiniteError, diff.DivergenceError,
            np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        set_num_threads(None)
    timings.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
