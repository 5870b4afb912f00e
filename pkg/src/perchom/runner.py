"""Experiment runner: dispatch, artifacts and the run manifest.

Every experiment writes CSV tables (floats in ``repr`` form, rows in a fixed
order), optional SVG plots and field files into one output directory, and
finishes with ``manifest.json`` holding the config echo, the package version,
a sha256 per artifact and the wall-clock time per stage.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .cluster import density_scaling_experiment, estimate_theta, label_clusters
from .config import EXPERIMENTS, ExperimentConfig
from .elliptic import (
    corrector_oscillation,
    estimate_homogenized,
    flux_field,
    nearest_vertex,
    solve_corrector,
    weak_norm,
)
from .env import Environment, LatticeBox, derive_seed, generate_environment
from .errors import FitError, ParameterError, PercHomError, StageError
from .fieldio import save_field
from .homog import dirichlet_homogenization_experiment, fit_rate, green_function, lclt_error
from .oracles import exhaustive_theta_3x3, two_vertex_return
from .parabolic import (
    check_kernel_bounds,
    evolve_kernel,
    gaussian_mass,
    gradient_profile,
    homogenized_kernel_field,
    sample_walks,
)
from .partition import build_partition, check_partition, partition_stats, save_partition_csv

PRESETS = ("smoke", "figure1", "figure2")

_C_GRID = tuple(float(c) for c in np.geomspace(0.25, 256.0, 41))

__all__ = [
    "PRESETS",
    "RunManifest",
    "RunContext",
    "run",
    "run_preset",
    "verify_manifest",
    "thread_count",
    "write_csv_text",
]


# ---------------------------------------------------------------- plumbing


def thread_count() -> int:
    """Worker cap from ``PERCHOM_THREADS`` (default 1)."""
    raw = os.environ.get("PERCHOM_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"PERCHOM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ParameterError("PERCHOM_THREADS must be at least 1")
    return n


def _map(fn: Callable, items: Sequence) -> list:
    """``[fn(x) for x in items]``, possibly on worker threads; order kept."""
    items = list(items)
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, (tuple, list)):
        return " ".join(_cell(x) for x in v)
    return str(v)


def write_csv_text(header: Sequence[str], rows) -> str:
    """CSV text with ``\\n`` line ends and ``repr`` floats."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    """Record of one run.

    Attributes
    ----------
    experiment : str
    config : str
        Canonical config text.
    version : str
    outputs : dict
        Artifact path (relative to the output directory) -> sha256.
    timings : dict
        Stage name -> wall-clock seconds.
    """

    experiment: str
    config: str
    version: str = __version__
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {
            "experiment": self.experiment,
            "version": self.version,
            "config": self.config,
            "outputs": dict(sorted(self.outputs.items())),
            "timings": self.timings,
        }
        return json.dumps(body, indent=2) + "\n"

    def write(self, path) -> None:
        _atomic_write(Path(path), self.to_json().encode("utf-8"))

    @classmethod
    def read(cls, path) -> "RunManifest":
        body = json.loads(Path(path).read_text())
        return cls(body["experiment"], body["config"], body["version"], body["outputs"], body["timings"])


def verify_manifest(path) -> list:
    """Artifacts whose current sha256 differs from the manifest (or are missing)."""
    path = Path(path)
    man = RunManifest.read(path)
    bad = []
    for rel, digest in man.outputs.items():
        p = path.parent / rel
        if not p.exists() or _sha256(p) != digest:
            bad.append(rel)
    return bad


class RunContext:
    """Output directory, artifact registry and stage timer of one run."""

    def __init__(self, cfg: ExperimentConfig, outdir, experiment: Optional[str] = None):
        self.cfg = cfg
        self.out = Path(outdir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(experiment or cfg.experiment, cfg.to_text())
        self._t0 = time.perf_counter()

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except PercHomError as exc:
            raise StageError(name, exc) from exc
        finally:
            self.manifest.timings[name] = round(time.perf_counter() - t0, 6)

    def _register(self, rel: str) -> Path:
        return self.out / rel

    def _done(self, rel: str) -> None:
        self.manifest.outputs[rel] = _sha256(self.out / rel)

    def csv(self, rel: str, header, rows) -> Path:
        path = self._register(rel)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(write_csv_text(header, rows))
        self._done(rel)
        return path

    def json(self, rel: str, body) -> Path:
        path = self._register(rel)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        self._done(rel)
        return path

    def field(self, rel: str, values, **kw) -> Path:
        path = self._register(rel)
        save_field(values, path, **kw)
        self._done(rel)
        if (self.out / (rel + ".mask")).exists():
            self._done(rel + ".mask")
        return path

    def plot(self, rel: str, fn: Callable, *args, **kw) -> Optional[Path]:
        if not self.cfg.plots:
            return None
        path = self._register(rel)
        fn(path, *args, **kw)
        self._done(rel)
        return path

    def finish(self) -> RunManifest:
        self.manifest.timings["total"] = round(time.perf_counter() - self._t0, 6)
        self.manifest.write(self.out / "manifest.json")
        return self.manifest


def _plots():
    from . import plotting

    return plotting


# ---------------------------------------------------------------- helpers


def _env(cfg: ExperimentConfig, seed: int, side: Optional[int] = None) -> Environment:
    box = LatticeBox.centered(side or cfg.box, cfg.d)
    return generate_environment(box, cfg.p, cfg.lam, cfg.law, seed)


def _base_point(cfg: ExperimentConfig, labeling) -> tuple:
    y = tuple(cfg.y) if cfg.y is not None else (0,) * cfg.d
    return nearest_vertex(labeling.proxy, labeling.box, y)


def _is_unit(cfg: ExperimentConfig) -> bool:
    return cfg.p == 1.0 and cfg.law == "bernoulli-unit"


def _homog_params(ctx: RunContext) -> tuple:
    """``(sigma2, theta, source)``; estimated on periodic cells when not given."""
    cfg = ctx.cfg
    if cfg.sigma2 is not None and cfg.theta is not None:
        return cfg.sigma2, cfg.theta, "config"
    if _is_unit(cfg):
        s2, th, src = 2.0, 1.0, "exact"
    else:
        with ctx.stage("homogenized-parameters"):
            level = 5 if cfg.d == 2 else 3
            hp = estimate_homogenized(
                cfg.p, cfg.lam, cfg.law, m=level, n_samples=4,
                seed=derive_seed(cfg.seeds[0], 7919), d=cfg.d, force=cfg.force, boundary="periodic",
            )
        s2, th, src = hp.sigma2, hp.theta, "periodic-cell"
    s2 = cfg.sigma2 if cfg.sigma2 is not None else s2
    th = cfg.theta if cfg.theta is not None else th
    return s2, th, src


def _params_csv(ctx: RunContext, sigma2, theta, source) -> None:
    ctx.csv("parameters.csv", ["sigma2", "theta", "source"], [(float(sigma2), float(theta), source)])


def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=float)))


# ---------------------------------------------------------------- experiments


def _exp_theta(ctx: RunContext) -> None:
    cfg = ctx.cfg
    exact = None
    if cfg.box == 3 and cfg.d == 2 and cfg.law == "bernoulli-unit":
        exact = exhaustive_theta_3x3(cfg.p)

    def one(seed):
        return estimate_theta(cfg.p, cfg.box, cfg.n_samples, seed, cfg.d, cfg.lam, cfg.law)

    with ctx.stage("theta"):
        ests = _map(one, cfg.seeds)
    rows = []
    for seed, e in zip(cfg.seeds, ests):
        z = None if exact is None or e.stderr == 0 else (e.theta - exact) / e.stderr
        rows.append((seed, cfg.p, cfg.box, e.n_samples, e.theta, e.ci[0], e.ci[1], e.stderr, exact, z))
    ctx.csv("theta.csv", ["seed", "p", "box", "n_samples", "theta", "ci_low", "ci_high", "stderr", "exact", "z"], rows)


def _exp_density(ctx: RunContext) -> None:
    cfg = ctx.cfg

    def one(seed):
        return density_scaling_experiment(cfg.p, cfg.levels, cfg.n_samples, seed, cfg.d, cfg.lam, cfg.law)

    with ctx.stage("density-scaling"):
        reps = _map(one, cfg.seeds)
    rows, fits, series = [], [], []
    for seed, rep in zip(cfg.seeds, reps):
        rows += [(seed,) + tuple(r) for r in rep.rows()]
        fits.append((seed, rep.slope, rep.intercept, -cfg.d / 2, rep.degenerate))
        series.append((f"seed {seed}", [3.0 ** m for m in rep.levels], rep.std_density))
    ctx.csv("density.csv", ["seed", "m", "n_samples", "mean_density", "std_density"], rows)
    ctx.csv("density_fit.csv", ["seed", "slope", "intercept", "target", "degenerate"], fits)
    slopes = [r.slope for r in reps if r.slope is not None]
    ctx.json("density_summary.json", {
        "target_slope": -cfg.d / 2,
        "median_slope": _median(slopes) if slopes else None,
        "per_seed": [
            {"seed": seed, "slope": r.slope, "intercept": r.intercept, "theta": r.theta,
             "theta_ci": list(r.theta_ci), "degenerate": r.degenerate}
            for seed, r in zip(cfg.seeds, reps)
        ],
    })
    ctx.plot("density.svg", _plots().line_plot, series, "block side 3^m", "std of block density", logx=True, logy=True)


def _exp_partition(ctx: RunContext) -> None:
    cfg = ctx.cfg

    def one(seed):
        env = _env(cfg, seed)
        part = build_partition(env, stride=cfg.stride)
        return part, check_partition(part), partition_stats(part, q=cfg.q)

    with ctx.stage("partition"):
        results = _map(one, cfg.seeds)
    summary, stats_rows = [], []
    for seed, (part, chk, st) in zip(cfg.seeds, results):
        dg = part.diagnostics
        summary.append((
            seed, part.root.level, part.n_elements(), dg.get("n_good_elements"), dg.get("root_good"),
            dg.get("merges"), chk.tiling, chk.neighbor_ratio, chk.predecessor_good, chk.connectivity,
            chk.n_pairs, chk.n_connectivity_pairs, int(part.sizes().max()),
        ))
        stats_rows += [(seed,) + r for r in st.rows()]
    ctx.csv(
        "partition.csv",
        ["seed", "root_level", "n_elements", "n_good_elements", "root_good", "merges", "tiling",
         "neighbor_ratio", "predecessor_good", "connectivity", "n_pairs", "n_connectivity_pairs", "max_size"],
        summary,
    )
    ctx.csv("partition_stats.csv", ["seed", "R", "moment", "max_size", "bound_holds"], stats_rows)
    part = results[0][0]
    seed = cfg.seeds[0]
    save_partition_csv(part, ctx.out / f"partition_elements_seed{seed}.csv")
    ctx._done(f"partition_elements_seed{seed}.csv")
    sizes = part.sizes().astype(float)
    ctx.field(f"partition_sizes_seed{seed}.percfld", sizes, box=part.box, method="partition-size")
    if cfg.d == 2:
        ctx.plot("partition_sizes.svg", _plots().heatmap, np.log(sizes) / np.log(3.0), part.box.origin,
                 title=f"element level, seed {seed}", label="level")


def _exp_cell(ctx: RunContext) -> None:
    cfg = ctx.cfg
    jobs = [(seed, m) for seed in cfg.seeds for m in cfg.levels]

    def one(job):
        seed, m = job
        return estimate_homogenized(cfg.p, cfg.lam, cfg.law, m=m, n_samples=cfg.n_samples, seed=seed,
                                    d=cfg.d, force=cfg.force, boundary=cfg.boundary)

    with ctx.stage("cell"):
        res = _map(one, jobs)
    rows = []
    for (seed, m), hp in zip(jobs, res):
        rows.append((seed, m, cfg.boundary, hp.theta, hp.sigma2, hp.sigma2_stderr, hp.sigma2_prev,
                     hp.sigma2_extrapolated, hp.n_samples, hp.n_degenerate) + tuple(np.ravel(hp.a_bar)))
    a_cols = [f"a_bar_{i}{j}" for i in range(cfg.d) for j in range(cfg.d)]
    ctx.csv("cell.csv", ["seed", "level", "boundary", "theta", "sigma2", "sigma2_stderr", "sigma2_prev",
                         "sigma2_extrapolated", "n_samples", "n_degenerate"] + a_cols, rows)


def _exp_corrector(ctx: RunContext) -> None:
    cfg = ctx.cfg

    def one(seed):
        env = _env(cfg, seed)
        lab = label_clusters(env)
        chi = solve_corrector(env, 0, _base_point(cfg, lab), lab, tol=max(cfg.tol, 1e-10))
        return chi.residual, corrector_oscillation(chi, cfg.radii)

    with ctx.stage("corrector"):
        res = _map(one, cfg.seeds)
    rows = []
    for seed, (resid, osc) in zip(cfg.seeds, res):
        rows += [(seed, r, o, o / r, resid) for r, o in zip(cfg.radii, osc)]
    ctx.csv("corrector.csv", ["seed", "r", "osc", "osc_over_r", "residual"], rows)
    med = [(r, _median([osc[i] / r for _, osc in res])) for i, r in enumerate(cfg.radii)]
    ctx.csv("corrector_median.csv", ["r", "median_osc_over_r"], med)
    ctx.plot("corrector.svg", _plots().line_plot, [("median", [m[0] for m in med], [m[1] for m in med])],
             "r", "osc(B_r) / r", logx=True, logy=True)


def _exp_flux(ctx: RunContext) -> None:
    cfg = ctx.cfg
    sigma2, theta, src = _homog_params(ctx)
    _params_csv(ctx, sigma2, theta, src)

    def one(seed):
        env = _env(cfg, seed)
        lab = label_clusters(env)
        chi = solve_corrector(env, 0, _base_point(cfg, lab), lab, tol=max(cfg.tol, 1e-10))
        g = flux_field(env, chi, sigma2)
        d2 = env.box.distance2_from(chi.anchor)
        out = []
        for r in cfg.radii:
            wn = weak_norm(g, env, chi.mask & (d2 < r * r), r)
            out.append((wn.value, wn.multiscale_bound, wn.n_vertices))
        return out

    with ctx.stage("flux-norm"):
        res = _map(one, cfg.seeds)
    rows = []
    for seed, vals in zip(cfg.seeds, res):
        rows += [(seed, r, v, v / r, b, n) for r, (v, b, n) in zip(cfg.radii, vals)]
    ctx.csv("flux.csv", ["seed", "r", "norm", "norm_over_r", "multiscale_bound", "n_vertices"], rows)
    med = [(r, _median([vals[i][0] / r for vals in res])) for i, r in enumerate(cfg.radii)]
    ctx.csv("flux_median.csv", ["r", "median_norm_over_r"], med)
    ctx.plot("flux.svg", _plots().line_plot, [("median", [m[0] for m in med], [m[1] for m in med])],
             "r", "||g||_{H^-1(B_r)} / r", logx=True, logy=True)


def _exp_kernel(ctx: RunContext) -> None:
    cfg = ctx.cfg
    d = cfg.d

    def one(seed):
        env = _env(cfg, seed)
        lab = label_clusters(env)
        y = _base_point(cfg, lab)
        snaps = evolve_kernel(env, lab, y, list(cfg.times), "uniformization", cfg.tol)
        rows = []
        for s in snaps:
            rep = check_kernel_bounds(s, _C_GRID)
            grad = gradient_profile(s, env, y, [math.sqrt(s.t) / 4])[0]
            rows.append((seed, s.t, s.mass(), s.t ** (d / 2) * s(y), rep.cv_C, rep.barlow_C, grad))
        return rows, snaps

    with ctx.stage("kernel"):
        res = _map(one, cfg.seeds)
    rows = [r for rr, _ in res for r in rr]
    ctx.csv("kernel.csv", ["seed", "t", "mass", "scaled_return", "cv_C", "barlow_C", "grad_norm"], rows)
    snaps = res[0][1]
    for s in snaps:
        ctx.field(f"kernel_seed{cfg.seeds[0]}_t{s.t:g}.percfld", s)
    if d == 2:
        s = snaps[-1]
        ctx.plot("kernel.svg", _plots().heatmap, s.t ** (d / 2) * s.values, s.box.origin, mask=s.mask,
                 title=f"t^(d/2) p(t, x, y), t={s.t:g}")


def _exp_walks(ctx: RunContext) -> None:
    cfg = ctx.cfg
    t = cfg.times[0]

    def one(seed):
        env = _env(cfg, seed)
        lab = label_clusters(env)
        y = _base_point(cfg, lab)
        ws = sample_walks(env, lab, y, t, cfg.walk_type, cfg.n_replicas, derive_seed(seed, 1))
        disp = ws.endpoints - np.array(y)
        msd = float(np.mean(np.sum(disp.astype(float) ** 2, axis=1)))
        tv = None
        if cfg.walk_type == "VSRW":
            k = evolve_kernel(env, lab, y, t, "uniformization", cfg.tol)
            tv = 0.5 * float(np.abs(ws.histogram(env.box) - k.values).sum())
        return (seed, cfg.walk_type, t, cfg.n_replicas, msd, msd / t, tv)

    with ctx.stage("walks"):
        rows = _map(one, cfg.seeds)
    ctx.csv("walks.csv", ["seed", "walk_type", "t", "n_replicas", "mean_sq_disp", "msd_over_t", "tv_to_kernel"], rows)


def _lclt_runs(ctx: RunContext, sigma2: float, theta: float, keep_first: bool = False):
    cfg = ctx.cfg

    def one(seed):
        env = _env(cfg, seed)
        lab = label_clusters(env)
        y = _base_point(cfg, lab)
        snaps = evolve_kernel(env, lab, y, list(cfg.times), "uniformization", cfg.tol)
        errs = [lclt_error(s, sigma2, theta) for s in snaps]
        return errs, (snaps if keep_first and seed == cfg.seeds[0] else None)

    with ctx.stage("lclt"):
        return _map(one, cfg.seeds)


def _write_lclt(ctx: RunContext, res, prefix: str = "lclt") -> list:
    cfg = ctx.cfg
    rows = []
    for seed, (errs, _) in zip(cfg.seeds, res):
        rows += [(seed, e.t, e.sup_error, e.sup_weighted, e.weighted_l2, e.relative, e.C) for e in errs]
    ctx.csv(f"{prefix}.csv", ["seed", "t", "sup_error", "sup_weighted", "weighted_l2", "relative", "fitted_C"], rows)
    med = [(t, _median([errs[i].sup_error for errs, _ in res]), _median([errs[i].weighted_l2 for errs, _ in res]))
           for i, t in enumerate(cfg.times)]
    ctx.csv(f"{prefix}_median.csv", ["t", "median_sup_error", "median_weighted_l2"], med)
    series = [(f"seed {s}", cfg.times, [e.sup_error for e in errs]) for s, (errs, _) in zip(cfg.seeds, res)]
    series.append(("median", cfg.times, [m[1] for m in med]))
    ctx.plot(f"{prefix}_decay.svg", _plots().line_plot, series, "t", "t^(d/2) sup |p - p_bar/theta|",
             logx=True, logy=True)
    return med


def _write_rates(ctx: RunContext, res, prefix: str = "rate") -> None:
    cfg = ctx.cfg
    rows, slopes = [], []
    for seed, (errs, _) in zip(cfg.seeds, res):
        try:
            fit = fit_rate([(e.t, e.sup_error) for e in errs])
        except FitError:
            rows.append((seed, None, None, None, errs[0].sup_error / errs[-1].sup_error if errs[-1].sup_error else None))
            continue
        slopes.append(fit.slope)
        rows.append((seed, fit.slope, fit.intercept, fit.residual, errs[0].sup_error / errs[-1].sup_error))
    rows.append(("median", _median(slopes) if slopes else None, None, None,
                 _median([errs[0].sup_error / errs[-1].sup_error for errs, _ in res])))
    ctx.csv(f"{prefix}.csv", ["seed", "slope", "intercept", "residual", "ratio_first_last"], rows)


def _exp_lclt(ctx: RunContext, with_rate: bool = False) -> None:
    sigma2, theta, src = _homog_params(ctx)
    _params_csv(ctx, sigma2, theta, src)
    res = _lclt_runs(ctx, sigma2, theta)
    _write_lclt(ctx, res)
    if with_rate:
        _write_rates(ctx, res)


def _exp_green(ctx: RunContext) -> None:
    cfg = ctx.cfg
    sigma2, theta, src = _homog_params(ctx)
    _params_csv(ctx, sigma2, theta, src)
    seed = cfg.seeds[0]
    with ctx.stage("green"):
        env = _env(cfg, seed)
        lab = label_clusters(env)
        y = _base_point(cfg, lab)
        rep = green_function(env, lab, y, cfg.t_max, cfg.quadrature, sigma2=sigma2, theta=theta,
                             annulus=tuple(cfg.annulus), tol=cfg.tol)
    rows = []
    half = (cfg.box - 1) // 2
    for r in range(1, half + 1):
        x = (y[0] + r,) + tuple(y[1:])
        if env.box.contains(x) and rep.mask[env.box.local(x)]:
            i = env.box.local(x)
            rows.append((r, rep.g[i], rep.g_bar[i], rep.g[i] - rep.g_bar[i]))
    ctx.csv("green_profile.csv", ["r", "g", "g_bar", "difference"], rows)
    ctx.csv("green.csv", ["seed", "d", "K", "K_spread", "annulus_min", "annulus_max", "T_max", "quadrature"],
            [(seed, rep.d, rep.K, rep.K_spread, rep.annulus[0], rep.annulus[1], rep.T_max, rep.quadrature)])
    if cfg.d == 2:
        diff = np.where(rep.mask & np.isfinite(rep.g_bar), rep.g - np.nan_to_num(rep.g_bar), 0.0)
        ctx.plot("green_difference.svg", _plots().heatmap, diff, env.box.origin, mask=rep.mask,
                 title="g - g_bar")


def _exp_dirichlet(ctx: RunContext) -> None:
    cfg = ctx.cfg
    sigma2, theta, src = _homog_params(ctx)
    _params_csv(ctx, sigma2, theta, src)
    slope = np.zeros(cfg.d)
    slope[0] = 1.0
    if cfg.d > 1:
        slope[1] = 0.5
    jobs = [(seed, r) for seed in cfg.seeds for r in cfg.radii]

    def one(job):
        seed, r = job
        env = _env(cfg, seed, side=2 * int(math.ceil(r)) + 5)
        return dirichlet_homogenization_experiment(env, r, slope, sigma2, n_steps=cfg.n_steps)

    with ctx.stage("dirichlet"):
        res = _map(one, jobs)
    ctx.csv("dirichlet.csv", ["seed", "r", "error", "n_steps", "n_vertices"],
            [(s, r, x.error, x.n_steps, x.n_vertices) for (s, r), x in zip(jobs, res)])
    med = [(r, _median([x.error for (s, rr), x in zip(jobs, res) if rr == r])) for r in cfg.radii]
    ctx.csv("dirichlet_median.csv", ["r", "median_error"], med)
    ctx.plot("dirichlet.svg", _plots().line_plot, [("median", [m[0] for m in med], [m[1] for m in med])],
             "r", "relative error", logx=True, logy=True)


def _exp_report_all(ctx: RunContext) -> None:
    for name in EXPERIMENTS:
        if name == "report-all":
            continue
        sub = RunContext(replace(ctx.cfg, experiment=name), ctx.out / name)
        _DISPATCH[name](sub)
        man = sub.finish()
        for rel, digest in man.outputs.items():
            ctx.manifest.outputs[f"{name}/{rel}"] = digest
        ctx.manifest.outputs[f"{name}/manifest.json"] = _sha256(sub.out / "manifest.json")
        for stage, sec in man.timings.items():
            ctx.manifest.timings[f"{name}/{stage}"] = sec


_DISPATCH = {
    "theta": _exp_theta,
    "density-scaling": _exp_density,
    "partition": _exp_partition,
    "cell": _exp_cell,
    "corrector": _exp_corrector,
    "flux-norm": _exp_flux,
    "kernel": _exp_kernel,
    "walks": _exp_walks,
    "lclt": _exp_lclt,
    "rate": lambda ctx: _exp_lclt(ctx, with_rate=True),
    "green": _exp_green,
    "dirichlet": _exp_dirichlet,
    "report-all": _exp_report_all,
}


def run(cfg: ExperimentConfig, outdir=None) -> RunManifest:
    """Run one configured experiment and write its manifest last.

    Raises
    ------
    StageError
        Wrapping the module error, with the stage it came from.
    """
    ctx = RunContext(cfg, outdir if outdir is not None else cfg.output)
    _DISPATCH[cfg.experiment](ctx)
    return ctx.finish()


# ---------------------------------------------------------------- presets


def _preset_smoke(outdir) -> RunManifest:
    cfg = ExperimentConfig(experiment="theta", p=0.6, box=3, seeds=[0], n_samples=100_000,
                           times=[0.25, 0.5, 1.0, 2.0, 4.0], output=str(outdir))
    ctx = RunContext(cfg, outdir, experiment="smoke")
    with ctx.stage("theta-3x3"):
        est = estimate_theta(cfg.p, 3, cfg.n_samples, seed=0)
        exact = exhaustive_theta_3x3(cfg.p)
    ctx.csv("theta.csv", ["p", "n_samples", "theta_mc", "stderr", "theta_exact", "z"],
            [(cfg.p, est.n_samples, est.theta, est.stderr, exact, (est.theta - exact) / est.stderr)])
    with ctx.stage("two-vertex"):
        box = LatticeBox((0, 0), (2, 2))
        a = 1.0
        c0 = np.zeros(box.bond_shape(0))
        c0[0, 0] = a
        env = Environment.from_arrays(box, [c0, np.zeros(box.bond_shape(1))])
        uni = evolve_kernel(env, None, (0, 0), list(cfg.times), "uniformization", 1e-14)
        rows = []
        for s in uni:
            rk = evolve_kernel(env, None, (0, 0), s.t, "rk-integrator")
            ex = two_vertex_return(a, s.t)
            rows.append((s.t, s((0, 0)), rk((0, 0)), ex, abs(s((0, 0)) - ex)))
    ctx.csv("two_vertex.csv", ["t", "uniformization", "rk_integrator", "exact", "abs_error"], rows)
    ctx.plot("two_vertex.svg", _plots().line_plot,
             [("uniformization", cfg.times, [r[1] for r in rows]), ("exact", cfg.times, [r[3] for r in rows])],
             "t", "p(t, y, y)")
    return ctx.finish()


def _preset_figure1(outdir) -> RunManifest:
    cfg = ExperimentConfig(experiment="kernel", p=0.7, box=255, seeds=[0], times=[1000.0], output=str(outdir))
    ctx = RunContext(cfg, outdir, experiment="figure1")
    sigma2, theta, src = _homog_params(ctx)
    _params_csv(ctx, sigma2, theta, src)
    with ctx.stage("kernel"):
        env = _env(cfg, 0)
        lab = label_clusters(env)
        y = _base_point(cfg, lab)
        s = evolve_kernel(env, lab, y, 1000.0, "uniformization", cfg.tol)
        err = lclt_error(s, sigma2, theta)
        pbar = homogenized_kernel_field(s.box, sigma2, s.t, y) / theta
    scale = s.t ** (env.d / 2)
    diff = np.where(s.mask, s.values - pbar, 0.0)
    ctx.csv("figure1.csv", ["t", "p", "sigma2", "theta", "mass", "sup_error", "relative", "weighted_l2"],
            [(s.t, cfg.p, sigma2, theta, s.mass(), err.sup_error, err.relative, err.weighted_l2)])
    ctx.field("figure1_kernel.percfld", s)
    ctx.field("figure1_error.percfld", diff, box=s.box, t=s.t, y=y, method="error", mask=s.mask)
    pl = _plots()
    ctx.plot("figure1_kernel.svg", pl.heatmap, scale * s.values, s.box.origin, mask=s.mask,
             title="t p(t, x, 0), p=0.7, t=1000", label="t p")
    ctx.plot("figure1_error.svg", pl.heatmap, scale * diff, s.box.origin, mask=s.mask, symmetric=True,
             cmap="RdBu_r", title="t (p - p_bar/theta), t=1000", label="scaled error")
    return ctx.finish()


def _preset_figure2(outdir) -> RunManifest:
    cfg = ExperimentConfig(experiment="rate", p=0.6, box=256, seeds=[0, 1, 2, 3, 4],
                           times=[500.0, 1000.0, 2000.0, 3000.0, 4000.0], output=str(outdir))
    ctx = RunContext(cfg, outdir, experiment="figure2")
    sigma2, theta, src = _homog_params(ctx)
    _params_csv(ctx, sigma2, theta, src)
    res = _lclt_runs(ctx, sigma2, theta, keep_first=True)
    _write_lclt(ctx, res, prefix="figure2_errors")
    _write_rates(ctx, res, prefix="figure2_rate")
    snaps = res[0][1]
    fields = []
    for s in snaps:
        scale = s.t ** (s.box.d / 2)
        fields.append((f"t={s.t:g}", np.where(s.mask, scale * s.values, 0.0)))
        ctx.field(f"figure2_kernel_t{s.t:g}.percfld", s)
    ctx.plot("figure2_levelsets.svg", _plots().level_sets, fields, snaps[0].box.origin,
             title="level sets of t p(t, x, 0), p=0.6")
    return ctx.finish()


_PRESETS = {"smoke": _preset_smoke, "figure1": _preset_figure1, "figure2": _preset_figure2}


def run_preset(name: str, outdir) -> RunManifest:
    """Run a named preset (``smoke``, ``figure1`` or ``figure2``)."""
    if name not in _PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return _PRESETS[name](Path(outdir))
