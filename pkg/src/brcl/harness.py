"""Experiment orchestration: config, seeding, persistence, resume, ingest.

Configs are TOML or JSON; outputs are long-format CSV plus a JSON run
manifest.  Each replication draws from an independent counter-based stream
keyed by (master seed, experiment id, replication id), so a finished run is
bit-reproducible from its manifest in single-thread mode and can be resumed
after interruption without repeating completed replications.
"""

import csv
import hashlib
import json
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .estimators import (DEFAULT_ALPHA_BOUNDS, DEFAULT_SIGMA_BOUNDS,
                         cl2_objective, cl3_objective, fit_alpha, fit_sigma,
                         rate_diagnostics)
from .gaussfield import FieldValues, ModelParams, build_cov_factor, pointwise_max
from .geometry import (Window, delaunay, extract_edges, extract_triples,
                       guard_margin_for, sample_poisson)
from .increments import (br_local_time_sum, compute_constants, decompose_v2,
                         decompose_v3, edge_u_values, epsilon_schedule,
                         local_time_zero, triple_arrays_for_decomposition,
                         triple_u_values, v2_stat, v3_stat)
from .likelihood import PairGeometry, TripleGeometry, pair_log_density, \
    triple_log_density
from .maxstable import build_cell_cover, diagnostic_grid, simulate_br
from .rngs import replication_stream, seed_record

__all__ = [
    "ConfigError",
    "IngestError",
    "ExperimentConfig",
    "RunManifest",
    "load_config",
    "run",
    "ingest",
    "EXPERIMENT_IDS",
]

EXPERIMENT_IDS = {
    "simulate": 1,
    "fit": 2,
    "mc-clt": 3,
    "mc-maxtwo": 4,
    "mc-br-rate": 5,
    "constants": 6,
    "geometry-check": 7,
    "eval": 8,
}

_TOP_KEYS = {"kind", "sigma", "alpha", "intensities", "replications",
             "master_seed", "out", "options"}
_OPTION_KEYS = {"grid_resolution", "br_mode", "stop_rank", "fit_orders",
                "fit_sigma", "fit_alpha", "sigma_bounds", "alpha_bounds",
                "input_csv", "window_half_side", "n_samples_c3",
                "epsilon_scale", "export_fields", "stop_miss_target",
                "sigma0", "alpha0", "paired_sweep"}


class ConfigError(ValueError):
    pass


class IngestError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    sigma: float = 1.0
    alpha: float = 0.5
    intensities: tuple = (1000.0,)
    replications: int = 1
    master_seed: int = 0
    out: str = "runs/out"
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_IDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if not self.intensities or any(n <= 0 for n in self.intensities):
            raise ConfigError("intensities must be positive")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        unknown = set(self.options) - _OPTION_KEYS
        if unknown:
            raise ConfigError(f"unknown option keys: {sorted(unknown)}")
        try:
            ModelParams(self.sigma, self.alpha)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def params(self):
        return ModelParams(self.sigma, self.alpha)

    def canonical(self):
        return {
            "kind": self.kind, "sigma": self.sigma, "alpha": self.alpha,
            "intensities": list(map(float, self.intensities)),
            "replications": int(self.replications),
            "master_seed": int(self.master_seed),
            "options": {k: self.options[k] for k in sorted(self.options)},
        }

    def content_hash(self):
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path, overrides=None) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        raw = json.loads(text)
    else:
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        raw = tomllib.loads(text)
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    raw.setdefault("options", {})
    try:
        return ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    code_version: str
    completed: dict = field(default_factory=dict)   # "N:rep" -> seed record
    errors: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    status: str = "running"
    constants: dict = field(default_factory=dict)

    def path(self, out_dir):
        return Path(out_dir) / "manifest.json"

    def save(self, out_dir):
        p = self.path(out_dir)
        p.write_text(json.dumps(self.__dict__, indent=1, default=float))

    @classmethod
    def load(cls, out_dir):
        p = Path(out_dir) / "manifest.json"
        data = json.loads(p.read_text())
        return cls(**data)


class _CsvAppender:
    """Serialized row appender with header management."""

    def __init__(self, path, fieldnames):
        self.path = Path(path)
        self.fieldnames = fieldnames
        self._fh = None

    def _open(self):
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.fieldnames)
        if new:
            self._writer.writeheader()

    def write_rows(self, rows):
        if self._fh is None:
            self._open()
        for row in rows:
            self._writer.writerow(row)
        self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


_RESULT_FIELDS = ["replication_id", "intensity", "sigma", "alpha",
                  "stat_kind", "value", "term_count", "skipped", "localtime"]
_FIT_FIELDS = ["replication_id", "intensity", "order", "target", "estimate",
               "objective", "evaluations", "bracket_width", "converged",
               "boundary", "skipped"]
_RATE_FIELDS = ["replication_id", "intensity", "order", "n_edges",
                "normalized_sigma2_error", "normalized_alpha_error",
                "predicted_limit_sigma2", "predicted_limit_alpha",
                "localtime_sum"]


def _windows_for(intensity, options):
    half = options.get("window_half_side", 0.5)
    return Window(half, guard_margin_for(intensity)), Window(half)


def _geometry_for(intensity, rng, options):
    guarded, inner = _windows_for(intensity, options)
    sample = sample_poisson(intensity, guarded, rng)
    tri = delaunay(sample.points)
    edges = extract_edges(tri, inner)
    triples = extract_triples(tri, inner)
    return sample, tri, edges, triples


def _stat_row(rep, n, cfg, kind, value, term_count=0, skipped=0, localtime=""):
    return {"replication_id": rep, "intensity": n, "sigma": cfg.sigma,
            "alpha": cfg.alpha, "stat_kind": kind, "value": value,
            "term_count": term_count, "skipped": skipped,
            "localtime": localtime}


# ---------------------------------------------------------------------------
# experiment bodies (one replication each)
# ---------------------------------------------------------------------------


def _rep_geometry_check(cfg, n, rep, rng):
    _, tri, edges, triples = _geometry_for(n, rng, cfg.options)
    return [
        _stat_row(rep, n, cfg, "edges_per_intensity", edges.count / n,
                  edges.count),
        _stat_row(rep, n, cfg, "triangles_per_intensity", triples.count / n,
                  triples.count),
        _stat_row(rep, n, cfg, "hull_size", tri.hull_size, tri.n_vertices),
    ], [], []


def _rep_mc_clt(cfg, n, rep, rng):
    _, tri, edges, triples = _geometry_for(n, rng, cfg.options)
    factor = build_cov_factor(tri.vertices, cfg.params)
    w = factor.sample(rng)[0]
    u = edge_u_values(w, edges, cfg.params)
    s2 = v2_stat(u)
    u12, u13, r = triple_u_values(w, triples, cfg.params)
    keep = np.abs(r) < 1.0 - 1e-8
    s3 = v3_stat(u12[keep], u13[keep], r[keep],
                 skipped_degenerate=int(np.count_nonzero(~keep)))
    return [
        _stat_row(rep, n, cfg, "v2_fbm", s2.value, s2.term_count),
        _stat_row(rep, n, cfg, "v3_fbm", s3.value, s3.term_count,
                  s3.skipped_degenerate),
    ], [], []


def _rep_mc_maxtwo(cfg, n, rep, rng):
    res = int(cfg.options.get("grid_resolution", 64))
    _, tri, edges, triples = _geometry_for(n, rng, cfg.options)
    grid = diagnostic_grid(res)
    pts = np.vstack([tri.vertices, grid])
    factor = build_cov_factor(pts, cfg.params)
    draws = factor.sample(rng, size=2)
    nv = tri.n_vertices
    fv1 = FieldValues(tri.vertices, draws[0, :nv], cfg.params)
    fv2 = FieldValues(tri.vertices, draws[1, :nv], cfg.params)
    eps = epsilon_schedule(n, cfg.alpha) * cfg.options.get("epsilon_scale", 1.0)
    diff_grid = draws[1, nv:] - draws[0, nv:]
    lt = local_time_zero(diff_grid, eps, 1.0 / res ** 2, grid_resolution=res)

    fmax = pointwise_max(fv1, fv2)
    d2 = decompose_v2(fv1, fv2, edges, cfg.params)
    v2max = v2_stat(edge_u_values(fmax.values, edges, cfg.params))
    arrs = triple_arrays_for_decomposition(fv1, fv2, triples, cfg.params)
    keep = arrs[7]
    d3 = decompose_v3(fv1, fv2, triples, cfg.params)
    u12m, u13m, rm = triple_u_values(fmax.values, triples, cfg.params)
    v3max = v3_stat(u12m[keep], u13m[keep], rm[keep],
                    skipped_degenerate=d3.skipped_degenerate)
    scale = n ** (-(2.0 - cfg.alpha) / 4.0)
    rows = [
        _stat_row(rep, n, cfg, "v2_max", v2max.value, v2max.term_count,
                  localtime=lt.value),
        _stat_row(rep, n, cfg, "v3_max", v3max.value, v3max.term_count,
                  d3.skipped_degenerate, localtime=lt.value),
        _stat_row(rep, n, cfg, "v2_part1", d2.part1, d2.term_count),
        _stat_row(rep, n, cfg, "v2_part2", d2.part2, d2.term_count),
        _stat_row(rep, n, cfg, "v2_cross", d2.cross, d2.term_count),
        _stat_row(rep, n, cfg, "v3_part1", d3.part1, d3.term_count),
        _stat_row(rep, n, cfg, "v3_part2", d3.part2, d3.term_count),
        _stat_row(rep, n, cfg, "v3_cross", d3.cross, d3.term_count),
        _stat_row(rep, n, cfg, "v2_scaled", np.sqrt(3.0) / 3.0 * scale * v2max.value,
                  v2max.term_count, localtime=lt.value),
        _stat_row(rep, n, cfg, "v3_scaled", np.sqrt(2.0) / 2.0 * scale * v3max.value,
                  v3max.term_count, localtime=lt.value),
        _stat_row(rep, n, cfg, "decomp_gap_v2", abs(d2.total - v2max.value),
                  d2.term_count),
        _stat_row(rep, n, cfg, "decomp_gap_v3", abs(d3.total - v3max.value),
                  d3.term_count),
    ]
    return rows, [], []


def _rep_mc_br_rate(cfg, n, rep, rng, constants):
    options = cfg.options
    mode = options.get("br_mode", "truncated")
    res = int(options.get("grid_resolution", 64))
    diagnostic = mode == "truncated"
    _, tri, edges, triples = _geometry_for(n, rng, options)
    grid = diagnostic_grid(res) if diagnostic else None
    sample = simulate_br(
        tri.vertices, cfg.params, rng, mode=mode, grid=grid,
        stop_rank=int(options.get("stop_rank", 2)),
        stop_miss_target=options.get("stop_miss_target", 1e-6))
    logeta = sample.log_eta()
    u = edge_u_values(logeta, edges, cfg.params)
    s2 = v2_stat(u)
    u12, u13, r = triple_u_values(logeta, triples, cfg.params)
    keep = np.abs(r) < 1.0 - 1e-8
    s3 = v3_stat(u12[keep], u13[keep], r[keep],
                 skipped_degenerate=int(np.count_nonzero(~keep)))
    eps = epsilon_schedule(n, cfg.alpha) * options.get("epsilon_scale", 1.0)
    lt = ""
    if diagnostic:
        cover = build_cell_cover(sample)
        lt = br_local_time_sum(cover, sample.grid_spectral_values(), eps)
    scale = n ** (-(2.0 - cfg.alpha) / 4.0)
    rows = [
        _stat_row(rep, n, cfg, "v2_br", s2.value, s2.term_count, localtime=lt),
        _stat_row(rep, n, cfg, "v3_br", s3.value, s3.term_count,
                  s3.skipped_degenerate, localtime=lt),
        _stat_row(rep, n, cfg, "v2_br_scaled",
                  np.sqrt(3.0) / 3.0 * scale * s2.value, s2.term_count,
                  localtime=lt),
        _stat_row(rep, n, cfg, "v3_br_scaled",
                  np.sqrt(2.0) / 2.0 * scale * s3.value, s3.term_count,
                  localtime=lt),
        _stat_row(rep, n, cfg, "miss_bound",
                  sample.diagnostics.get("miss_probability_bound", 0.0)),
    ]
    fit_rows, rate_rows = _fits_and_rates(cfg, rep, n, sample.eta, edges,
                                          triples, constants,
                                          lt if lt != "" else None)
    return rows, fit_rows, rate_rows


def _fits_and_rates(cfg, rep, n, eta_values, edges, triples, constants, lt):
    options = cfg.options
    fit_rows = []
    rate_rows = []
    sigma_bounds = tuple(options.get("sigma_bounds", DEFAULT_SIGMA_BOUNDS))
    alpha_bounds = tuple(options.get("alpha_bounds", DEFAULT_ALPHA_BOUNDS))
    for order in tuple(options.get("fit_orders", (2, 3))):
        idx = edges if order == 2 else triples
        fs = fa = None
        if options.get("fit_sigma", True):
            fs = fit_sigma(order, eta_values, idx, cfg.alpha, sigma_bounds)
            fit_rows.append({
                "replication_id": rep, "intensity": n, "order": order,
                "target": "sigma", "estimate": fs.estimate,
                "objective": fs.objective_at_optimum,
                "evaluations": fs.evaluations,
                "bracket_width": fs.bracket_width_final,
                "converged": fs.converged, "boundary": fs.boundary,
                "skipped": fs.skipped_terms})
        if options.get("fit_alpha", True):
            fa = fit_alpha(order, eta_values, idx, cfg.sigma, alpha_bounds)
            fit_rows.append({
                "replication_id": rep, "intensity": n, "order": order,
                "target": "alpha", "estimate": fa.estimate,
                "objective": fa.objective_at_optimum,
                "evaluations": fa.evaluations,
                "bracket_width": fa.bracket_width_final,
                "converged": fa.converged, "boundary": fa.boundary,
                "skipped": fa.skipped_terms})
        c_v = constants.get("c_v2") if order == 2 else constants.get("c_v3")
        diag = rate_diagnostics(fs, fa, n, order, cfg.sigma, cfg.alpha,
                                edges.count, c_v=c_v, localtime_sum=lt)
        rate_rows.append({
            "replication_id": rep, "intensity": n, "order": order,
            "n_edges": edges.count,
            "normalized_sigma2_error": diag.normalized_sigma2_error,
            "normalized_alpha_error": diag.normalized_alpha_error,
            "predicted_limit_sigma2": diag.predicted_limit_sigma2,
            "predicted_limit_alpha": diag.predicted_limit_alpha,
            "localtime_sum": "" if lt is None else lt})
    return fit_rows, rate_rows


def _rep_br_paired_sweep(cfg, rep, rng, constants):
    """One Brown-Resnick realization served to every sweep intensity.

    Sites at the top intensity are thinned independently for the smaller
    ones (a Poisson sample of the right intensity), and the max-stable
    field restricts exactly to any subset of sites, so errors across the
    sweep are computed on coupled realizations.
    """
    options = cfg.options
    ns = sorted(cfg.intensities, reverse=True)
    n_max = ns[0]
    half = options.get("window_half_side", 0.5)
    guarded = Window(half, guard_margin_for(min(ns)))
    inner = Window(half)
    sample_pts = sample_poisson(n_max, guarded, rng)
    marks = rng.uniform(size=sample_pts.count)
    br = simulate_br(
        sample_pts.points, cfg.params, rng,
        mode=options.get("br_mode", "truncated"),
        stop_rank=int(options.get("stop_rank", 1)),
        stop_miss_target=options.get("stop_miss_target", 1e-6))
    rows, fit_rows, rate_rows = [], [], []
    for n in ns:
        keep = marks < n / n_max
        sites_n = sample_pts.points[keep]
        eta_n = br.eta[keep]
        order = np.lexsort((sites_n[:, 1], sites_n[:, 0]))
        tri = delaunay(sites_n)
        values = eta_n[order]
        edges = extract_edges(tri, inner)
        triples = extract_triples(tri, inner)
        logeta = np.log(values)
        s2 = v2_stat(edge_u_values(logeta, edges, cfg.params))
        u12, u13, r = triple_u_values(logeta, triples, cfg.params)
        keep3 = np.abs(r) < 1.0 - 1e-8
        s3 = v3_stat(u12[keep3], u13[keep3], r[keep3],
                     skipped_degenerate=int(np.count_nonzero(~keep3)))
        rows.append(_stat_row(rep, n, cfg, "v2_br", s2.value, s2.term_count))
        rows.append(_stat_row(rep, n, cfg, "v3_br", s3.value, s3.term_count,
                              s3.skipped_degenerate))
        frows, rrows = _fits_and_rates(cfg, rep, n, values, edges, triples,
                                       constants, None)
        fit_rows.extend(frows)
        rate_rows.extend(rrows)
    rows.append(_stat_row(rep, n_max, cfg, "miss_bound",
                          br.diagnostics.get("miss_probability_bound", 0.0)))
    return rows, fit_rows, rate_rows


def _rep_simulate(cfg, n, rep, rng, out_dir):
    options = cfg.options
    mode = options.get("br_mode", "exact-extremal")
    res = int(options.get("grid_resolution", 0))
    _, tri, edges, triples = _geometry_for(n, rng, options)
    grid = diagnostic_grid(res) if (res and mode == "truncated") else None
    sample = simulate_br(tri.vertices, cfg.params, rng, mode=mode, grid=grid)
    stem = Path(out_dir) / f"sample_N{int(n)}_rep{rep}"
    sample.to_csv(stem.with_suffix(".csv"))
    if grid is not None:
        cover = build_cell_cover(sample)
        cover.to_csv(stem.with_name(stem.name + "_cells").with_suffix(".csv"))
    rows = [_stat_row(rep, n, cfg, "eta_max", float(sample.eta.max()),
                      sample.n_sites)]
    return rows, [], []


def _run_fit_kind(cfg, out_dir, manifest):
    options = cfg.options
    path = options.get("input_csv")
    if not path:
        raise ConfigError("fit experiment requires options.input_csv")
    half = options.get("window_half_side", 0.5)
    sites, values = ingest(path, Window(half, guard_margin=10.0))
    tri = delaunay(sites)
    order_map = np.lexsort((sites[:, 1], sites[:, 0]))
    values_sorted = values[order_map]
    inner = Window(half)
    edges = extract_edges(tri, inner)
    triples = extract_triples(tri, inner)
    fit_rows = []
    sigma_bounds = tuple(options.get("sigma_bounds", DEFAULT_SIGMA_BOUNDS))
    alpha_bounds = tuple(options.get("alpha_bounds", DEFAULT_ALPHA_BOUNDS))
    for order in tuple(options.get("fit_orders", (2, 3))):
        idx = edges if order == 2 else triples
        if options.get("fit_sigma", True):
            fs = fit_sigma(order, values_sorted, idx,
                           options.get("alpha0", cfg.alpha), sigma_bounds)
            fit_rows.append({"replication_id": 0, "intensity": len(sites),
                             "order": order, "target": "sigma",
                             "estimate": fs.estimate,
                             "objective": fs.objective_at_optimum,
                             "evaluations": fs.evaluations,
                             "bracket_width": fs.bracket_width_final,
                             "converged": fs.converged, "boundary": fs.boundary,
                             "skipped": fs.skipped_terms})
        if options.get("fit_alpha", False):
            fa = fit_alpha(order, values_sorted, idx,
                           options.get("sigma0", cfg.sigma), alpha_bounds)
            fit_rows.append({"replication_id": 0, "intensity": len(sites),
                             "order": order, "target": "alpha",
                             "estimate": fa.estimate,
                             "objective": fa.objective_at_optimum,
                             "evaluations": fa.evaluations,
                             "bracket_width": fa.bracket_width_final,
                             "converged": fa.converged, "boundary": fa.boundary,
                             "skipped": fa.skipped_terms})
    appender = _CsvAppender(Path(out_dir) / "fits.csv", _FIT_FIELDS)
    appender.write_rows(fit_rows)
    appender.close()
    manifest.completed["fit:0"] = {"rows": len(fit_rows)}
    return fit_rows


def ingest(path, window: Window, min_rows=3):
    """Read a sites-values CSV with schema x,y,value.

    Values must be positive, sites distinct and within the window;
    violations are reported with 1-based line numbers.
    """
    path = Path(path)
    sites = []
    values = []
    seen = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["x", "y", "value"]:
            raise IngestError(f"{path}: line 1: expected header x,y,value")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 3:
                raise IngestError(f"{path}: line {lineno}: expected 3 columns")
            try:
                x, y, v = float(row[0]), float(row[1]), float(row[2])
            except ValueError:
                raise IngestError(
                    f"{path}: line {lineno}: non-numeric entry") from None
            if not np.isfinite([x, y, v]).all():
                raise IngestError(f"{path}: line {lineno}: non-finite entry")
            if v <= 0:
                raise IngestError(
                    f"{path}: line {lineno}: non-positive value {v}")
            outer = window.outer_half_side
            if not (-outer <= x <= outer and -outer <= y <= outer):
                raise IngestError(
                    f"{path}: line {lineno}: site ({x}, {y}) outside window")
            if (x, y) in seen:
                raise IngestError(
                    f"{path}: line {lineno}: duplicate site ({x}, {y}) "
                    f"first seen on line {seen[(x, y)]}")
            seen[(x, y)] = lineno
            sites.append((x, y))
            values.append(v)
    if len(sites) < min_rows:
        raise IngestError(f"{path}: fewer than {min_rows} usable rows")
    return np.asarray(sites, dtype=float), np.asarray(values, dtype=float)


def run_eval(cfg, out_stream=print):
    """Point evaluation of likelihood quantities (debug surface)."""
    options = cfg.options
    params = cfg.params
    lines = []
    if "input_csv" in options:
        sites, values = ingest(options["input_csv"], Window(10.0), min_rows=2)
        if len(sites) == 3:
            geom = TripleGeometry.from_sites(sites[0], sites[1], sites[2])
            logf, ss, sa = triple_log_density(geom, *values, params)
            lines.append(f"triple log density: {logf:.10g}")
            lines.append(f"score sigma: {ss:.10g}  score alpha: {sa:.10g}")
        else:
            geom = PairGeometry.from_sites(sites[0], sites[1])
            logf, ss, sa = pair_log_density(geom, values[0], values[1], params)
            lines.append(f"pair log density: {logf:.10g}")
            lines.append(f"score sigma: {ss:.10g}  score alpha: {sa:.10g}")
    else:
        geom = PairGeometry(d=float(options.get("epsilon_scale", 0.1)))
        logf, ss, sa = pair_log_density(geom, 1.0, 1.0, params)
        lines.append(f"pair log density at z=(1,1), d={geom.d}: {logf:.10g}")
    for line in lines:
        out_stream(line)
    return lines


_REP_BODIES = {
    "geometry-check": _rep_geometry_check,
    "mc-clt": _rep_mc_clt,
    "mc-maxtwo": _rep_mc_maxtwo,
}


def run(cfg: ExperimentConfig, resume=False, progress=None) -> int:
    """Execute an experiment; returns the process exit code (0/2/3)."""
    t_start = time.time()
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = None
    if resume and (out_dir / "manifest.json").exists():
        manifest = RunManifest.load(out_dir)
        if manifest.config_hash != cfg.content_hash():
            raise ConfigError("resume config does not match existing manifest")
        manifest.status = "running"
    if manifest is None:
        manifest = RunManifest(config=cfg.canonical(),
                               config_hash=cfg.content_hash(),
                               code_version=__version__)

    exp_id = EXPERIMENT_IDS[cfg.kind]
    results = _CsvAppender(out_dir / "results.csv", _RESULT_FIELDS)
    fits = _CsvAppender(out_dir / "fits.csv", _FIT_FIELDS)
    rates = _CsvAppender(out_dir / "rate.csv", _RATE_FIELDS)

    try:
        if cfg.kind == "constants":
            cns = compute_constants(cfg.alpha,
                                    n_samples_c3=int(cfg.options.get(
                                        "n_samples_c3", 200_000)),
                                    seed=cfg.master_seed)
            payload = {
                "alpha": cfg.alpha,
                "psi": cns.psi, "psi_error": cns.psi_error,
                "c_v2": cns.c_v2, "c_v2_error": cns.c_v2_error,
                "c_v3": cns.c_v3, "c_v3_error": cns.c_v3_error,
                "method": "quadrature+typical-cell-mc",
                "n_samples_c3": int(cfg.options.get("n_samples_c3", 200_000)),
            }
            key = f"alpha={cfg.alpha}:method=default:n={payload['n_samples_c3']}"
            cache_path = out_dir / "constants.json"
            cache = json.loads(cache_path.read_text()) if cache_path.exists() else {}
            cache[key] = payload
            cache_path.write_text(json.dumps(cache, indent=1))
            manifest.constants = payload
            manifest.status = "done"
            manifest.wall_clock = time.time() - t_start
            manifest.save(out_dir)
            return 0
        if cfg.kind == "eval":
            run_eval(cfg)
            manifest.status = "done"
            manifest.save(out_dir)
            return 0
        if cfg.kind == "fit":
            _run_fit_kind(cfg, out_dir, manifest)
            manifest.status = "done"
            manifest.wall_clock = time.time() - t_start
            manifest.save(out_dir)
            return 0

        constants = manifest.constants
        if cfg.kind == "mc-br-rate" and not constants:
            cns = compute_constants(cfg.alpha, seed=cfg.master_seed)
            constants = {"c_v2": cns.c_v2, "c_v3": cns.c_v3, "psi": cns.psi}
            manifest.constants = constants

        paired = bool(cfg.options.get("paired_sweep", False))
        plan = [(None, rep) for rep in range(cfg.replications)] if paired \
            else [(n, rep) for n in cfg.intensities
                  for rep in range(cfg.replications)]
        used_streams = set()
        for n, rep in plan:
            key = f"sweep:{rep}" if n is None else f"{int(n)}:{rep}"
            if key in manifest.completed:
                continue
            stream_id = rep if n is None \
                else rep * 1000003 + int(n) % 1000003
            assert stream_id not in used_streams, "stream reuse"
            used_streams.add(stream_id)
            rng = replication_stream(cfg.master_seed, exp_id, stream_id)
            try:
                if cfg.kind == "simulate":
                    rows, frows, rrows = _rep_simulate(cfg, n, rep, rng,
                                                       out_dir)
                elif cfg.kind == "mc-br-rate" and paired:
                    rows, frows, rrows = _rep_br_paired_sweep(cfg, rep, rng,
                                                              constants)
                elif cfg.kind == "mc-br-rate":
                    rows, frows, rrows = _rep_mc_br_rate(cfg, n, rep, rng,
                                                         constants)
                else:
                    rows, frows, rrows = _REP_BODIES[cfg.kind](cfg, n, rep,
                                                               rng)
            except Exception as exc:  # noqa: BLE001 - recorded, not fatal
                manifest.errors[key] = "".join(
                    traceback.format_exception_only(type(exc), exc)).strip()
                manifest.save(out_dir)
                continue
            results.write_rows(rows)
            if frows:
                fits.write_rows(frows)
            if rrows:
                rates.write_rows(rrows)
            manifest.completed[key] = seed_record(
                cfg.master_seed, exp_id, stream_id)
            manifest.save(out_dir)
            if progress:
                progress(cfg.kind, n, rep)
        manifest.status = "done"
        manifest.wall_clock = time.time() - t_start
        manifest.save(out_dir)
        return 0
    except ConfigError:
        raise
    except Exception:
        manifest.status = "failed"
        manifest.errors["__run__"] = traceback.format_exc()
        manifest.save(out_dir)
        return 3
    finally:
        results.close()
        fits.close()
        rates.close()
