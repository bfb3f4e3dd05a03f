"""Twin-experiment configuration, problem construction and persistence.

Four experiment kinds are supported:

``source_location``
    Steady flow with a Gaussian source at an unknown location; mixture prior.
``channel_dct``
    Unsteady flow with an unknown channelized log-permeability, parameterized
    by truncated cosine coefficients.
``fracture_fractional``
    Time-fractional diffusion with an unknown fracture and fractional order;
    the inversion runs on latent variables mapped into ``(0, 1)``.
``custom_linear``
    A random linear map with a standard normal prior, for checking the
    smoother against the closed-form posterior.

Configs are JSON objects. Unknown keys are rejected; missing keys take the
per-kind defaults listed by :func:`default_config`.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse.linalg as spla

from . import diagnostics as diag
from .dct import ORDERINGS, DctBasis, build_basis, synthesize
from .drivers import (DctSettings, GmmSettings, InversionResult, IterationRecord, run_dct_ies_is,
                      run_gmm_ies_is)
from .ensemble import RngStreams
from .errors import SolverError, ValidationError
from .forward import (FractureSpec, Grid2D, arctan_map, assemble_operator,
                      embed_fracture, gaussian_source, interpolation_matrix, nodal_operator,
                      sensor_lattice, solve_fractional_diffusion, solve_steady_flow,
                      solve_unsteady_flow)
from .gmm import GaussianMixture, SmemConfig
from .ies import ObservationSetup, PriorSpec
from .oracle import LinearModel, linear_gmm_posterior
from .postprocess import PostProcessSpec, project_log_field

log = logging.getLogger(__name__)

KINDS = ("source_location", "channel_dct", "fracture_fractional", "custom_linear")


@dataclass
class ExperimentConfig:
    """Fully resolved experiment settings.

    Grid sizes are cells per side of the unit square. ``dt``/``data_dt`` and
    ``horizon`` are ignored by the steady and linear kinds. ``truth`` is the
    physical parameter vector where one exists.
    """

    kind: str
    seed: int = 0
    output_dir: Optional[str] = None
    n_e: int = 500
    sigma: float = 0.01
    rho: float = 1.0
    min_ess: float = 0.0
    lambda0: float = 1.0
    nu: float = 2.0
    eps_stop: float = 1e-3
    max_iter: int = 20
    k_min: int = 2
    k_max: int = 5
    eps_screen: float = 0.05
    smem_max_iter: int = 50
    smem_prune: bool = True
    fd_step: float = 1e-4
    grid: int = 50
    data_grid: int = 100
    dt: Optional[float] = None
    data_dt: Optional[float] = None
    horizon: Optional[float] = None
    forcing: float = 10.0
    sensor_shape: list = field(default_factory=lambda: [4, 5])
    sensor_x_range: list = field(default_factory=lambda: [0.1, 0.7])
    sensor_y_range: list = field(default_factory=lambda: [0.0, 1.0])
    truth: Optional[list] = None
    source_strength: float = math.exp(2.0)
    source_width: float = 0.05
    n_c: int = 200
    alpha_reduce: float = 0.95
    dct_ordering: str = "zigzag"
    tau: float = 0.75
    penalty_b: list = field(default_factory=lambda: [1.0, 0.0, 1.0, 1.0])
    facies: list = field(default_factory=lambda: [-0.5, 0.5])
    postprocess: bool = True
    postprocess_prior: bool = False
    a_frac: float = 1.0e4
    n_theta: int = 8
    n_d: int = 5
    g_scale: float = 0.3
    problem_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


_KIND_DEFAULTS = {
    "source_location": dict(
        sigma=0.01, rho=1.0, grid=50, data_grid=100, sensor_shape=[4, 5],
        sensor_x_range=[0.1, 0.7], sensor_y_range=[0.0, 1.0], truth=[0.09, 0.23],
        k_min=2, k_max=5, max_iter=10),
    "channel_dct": dict(
        sigma=0.01, rho=10.0, grid=30, data_grid=60, dt=0.02, data_dt=0.01, horizon=1.0,
        forcing=10.0, sensor_shape=[21, 24], sensor_x_range=[1.0 / 22.0, 21.0 / 22.0],
        sensor_y_range=[1.0 / 25.0, 24.0 / 25.0], k_min=1, k_max=1, max_iter=10,
        n_e=2000, min_ess=0.1),
    "fracture_fractional": dict(
        sigma=0.03, rho=10.0, grid=50, data_grid=100, dt=0.1, data_dt=0.05, horizon=5.0,
        forcing=10.0, sensor_shape=[3, 6], sensor_x_range=[0.3, 0.7],
        sensor_y_range=[0.0, 1.0], truth=[0.7, 0.3, 0.6, 0.4], k_min=2, k_max=5,
        max_iter=10),
    "custom_linear": dict(
        sigma=1.0, rho=1.0, n_e=2000, k_min=1, k_max=1, max_iter=10, eps_stop=0.0),
}


def default_config(kind: str) -> ExperimentConfig:
    if kind not in KINDS:
        raise ValidationError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
    return ExperimentConfig(kind=kind, **_KIND_DEFAULTS[kind])


def _require(cond: bool, name: str, what: str):
    if not cond:
        raise ValidationError(f"{name}: {what}")


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Range checks; raises :class:`ValidationError` naming the field."""
    _require(cfg.kind in KINDS, "kind", f"must be one of {KINDS}")
    _require(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed", "must be a nonnegative integer")
    _require(isinstance(cfg.n_e, int) and cfg.n_e >= 20, "n_e", "must be an integer >= 20")
    _require(cfg.sigma >= 0, "sigma", "must be nonnegative")
    _require(cfg.rho > 0, "rho", "must be positive")
    _require(0 <= cfg.min_ess <= 1, "min_ess", "must lie in [0, 1]")
    _require(cfg.lambda0 > 0, "lambda0", "must be positive")
    _require(cfg.nu >= 1, "nu", "must be at least 1")
    _require(cfg.eps_stop >= 0, "eps_stop", "must be nonnegative")
    _require(isinstance(cfg.max_iter, int) and cfg.max_iter >= 1, "max_iter", "must be a positive integer")
    _require(isinstance(cfg.k_min, int) and cfg.k_min >= 1, "k_min", "must be a positive integer")
    _require(isinstance(cfg.k_max, int) and cfg.k_max >= cfg.k_min, "k_max", "must be an integer >= k_min")
    _require(0 <= cfg.eps_screen < 1, "eps_screen", "must lie in [0, 1)")
    _require(isinstance(cfg.smem_max_iter, int) and cfg.smem_max_iter >= 1, "smem_max_iter",
             "must be a positive integer")
    _require(cfg.fd_step > 0, "fd_step", "must be positive")
    if cfg.kind != "custom_linear":
        _require(isinstance(cfg.grid, int) and cfg.grid >= 4, "grid", "must be an integer >= 4")
        _require(isinstance(cfg.data_grid, int) and cfg.data_grid > cfg.grid, "data_grid",
                 "must be an integer strictly finer than grid")
        _require(len(cfg.sensor_shape) == 2 and all(int(v) >= 1 for v in cfg.sensor_shape),
                 "sensor_shape", "must be two positive integers")
        for name in ("sensor_x_range", "sensor_y_range"):
            r = getattr(cfg, name)
            _require(len(r) == 2 and 0 <= r[0] <= r[1] <= 1, name, "must be [lo, hi] inside [0, 1]")
    if cfg.kind in ("channel_dct", "fracture_fractional"):
        for name in ("dt", "data_dt", "horizon"):
            v = getattr(cfg, name)
            _require(v is not None and v > 0, name, "must be positive")
        _require(cfg.data_dt <= cfg.dt, "data_dt", "must not exceed dt")
        _require(cfg.horizon >= cfg.dt, "horizon", "must be at least dt")
    if cfg.kind == "source_location":
        _require(cfg.truth is not None and len(cfg.truth) == 2, "truth", "must be a 2-vector")
        _require(cfg.source_strength > 0, "source_strength", "must be positive")
        _require(cfg.source_width > 0, "source_width", "must be positive")
    if cfg.kind == "fracture_fractional":
        _require(cfg.truth is not None and len(cfg.truth) == 4
                 and all(0 < v < 1 for v in cfg.truth), "truth", "must be four values in (0, 1)")
        _require(cfg.a_frac > 0, "a_frac", "must be positive")
    if cfg.kind == "channel_dct":
        _require(isinstance(cfg.n_c, int) and 1 <= cfg.n_c <= cfg.grid**2, "n_c",
                 "must lie in [1, grid^2]")
        _require(0 < cfg.alpha_reduce <= 1, "alpha_reduce", "must lie in (0, 1]")
        _require(cfg.dct_ordering in ORDERINGS, "dct_ordering", f"must be one of {ORDERINGS}")
        _require(len(cfg.facies) == 2 and cfg.facies[0] < cfg.facies[1], "facies",
                 "must be [low, high] with low < high")
        _require(len(cfg.penalty_b) == 4, "penalty_b", "must have four entries")
        _require(0 < cfg.tau < 1, "tau", "must lie in (0, 1)")
        _require(1 - cfg.tau * cfg.penalty_b[0] * cfg.penalty_b[3] > 0, "tau",
                 "makes the penalty nonconvex (need 1 - tau*b1*b4 > 0)")
    if cfg.kind == "custom_linear":
        _require(isinstance(cfg.n_theta, int) and cfg.n_theta >= 1, "n_theta", "must be a positive integer")
        _require(isinstance(cfg.n_d, int) and cfg.n_d >= 1, "n_d", "must be a positive integer")
        _require(cfg.g_scale > 0, "g_scale", "must be positive")
    return cfg


_INT_FIELDS = {f.name for f in fields(ExperimentConfig) if f.type in ("int", int)}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Resolve a raw mapping against the defaults of its kind."""
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    if "kind" not in raw:
        raise ValidationError("kind: missing")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    cfg = default_config(raw["kind"])
    for k, v in raw.items():
        if k in _INT_FIELDS and isinstance(v, float) and v.is_integer():
            v = int(v)
        setattr(cfg, k, v)
    return validate_config(cfg)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ValidationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# problems


@dataclass
class Problem:
    """Everything a driver needs, plus the truth for scoring.

    ``forward`` maps inversion-variable columns to predictions. ``to_physical``
    maps an inversion-variable vector to the physical parameters scored by
    ``truth`` (identity except for the fracture latent map).
    """

    config: ExperimentConfig
    forward: Callable[[np.ndarray], np.ndarray]
    prior: PriorSpec
    sensors: Optional[np.ndarray]
    truth: np.ndarray
    to_physical: Callable[[np.ndarray], np.ndarray] = lambda v: np.asarray(v, dtype=float)
    basis: Optional[DctBasis] = None
    postprocess: Optional[Callable[[np.ndarray], np.ndarray]] = None
    states: Optional[Callable[[np.ndarray], np.ndarray]] = None
    noiseless: Optional[Callable[[], np.ndarray]] = None
    linear: Optional[LinearModel] = None


def _sensors(cfg: ExperimentConfig) -> np.ndarray:
    nx, ny = (int(v) for v in cfg.sensor_shape)
    return sensor_lattice(cfg.sensor_x_range, cfg.sensor_y_range, nx, ny)


def _nodal_obs_matrix(grid: Grid2D, sensors):
    xs, ys = grid.node_coords()
    return interpolation_matrix(xs, ys, sensors)


def _source_permeability(grid: Grid2D) -> np.ndarray:
    X, Y = grid.cell_centers()
    return np.exp(1.0 + 0.5 * X + Y)


class _SteadySourceModel:
    """Sensor response to a Gaussian source on a fixed permeability.

    The operator is factored once; the response is affine in the source
    field, so predictions for a whole ensemble cost one matrix product.
    """

    def __init__(self, grid: Grid2D, sensors, strength: float, width: float):
        self.grid, self.strength, self.width = grid, strength, width
        A, load = assemble_operator(_source_permeability(grid), grid)
        try:
            self.lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc
        self.load = load
        self.T, self.b = nodal_operator(grid)
        MT = (_nodal_obs_matrix(grid, sensors) @ self.T).toarray()
        Mb = _nodal_obs_matrix(grid, sensors) @ self.b
        # R = M T A^{-1}: one transposed solve per sensor
        self.R = self.lu.solve(np.ascontiguousarray(MT.T), trans="T").T
        self.offset = self.R @ load + Mb
        X, Y = grid.cell_centers()
        self.xc, self.yc = X.ravel(), Y.ravel()

    def source_fields(self, theta) -> np.ndarray:
        th = np.atleast_2d(np.asarray(theta, dtype=float))
        r2 = (self.xc[:, None] - th[0]) ** 2 + (self.yc[:, None] - th[1]) ** 2
        return self.strength / (math.pi * self.width) * np.exp(-r2 / (2.0 * self.width**2))

    def __call__(self, theta) -> np.ndarray:
        return self.R @ self.source_fields(theta) + self.offset[:, None]

    def states(self, theta) -> np.ndarray:
        """Nodal states, one member per row."""
        U = self.lu.solve(self.source_fields(theta) + self.load[:, None])
        return (self.T @ U + self.b[:, None]).T


def _bitmap() -> np.ndarray:
    text = resources.files("iesis").joinpath("data/channel_facies.txt").read_text()
    rows = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    return np.array([[int(c) for c in r] for r in rows], dtype=float)


def channel_truth(n: int, facies) -> np.ndarray:
    """Log-permeability of the bundled facies bitmap sampled on an ``n x n`` grid."""
    B = _bitmap()
    centers = (np.arange(n) + 0.5) / n
    ix = np.minimum((centers * B.shape[0]).astype(int), B.shape[0] - 1)
    iy = np.minimum((centers * B.shape[1]).astype(int), B.shape[1] - 1)
    ind = B[np.ix_(ix, iy)]
    lo, hi = facies
    return (lo + (hi - lo) * ind).ravel()


class _UnsteadyFieldModel:
    """Sensor response at the horizon for log-permeability fields."""

    def __init__(self, grid: Grid2D, sensors, dt: float, horizon: float, forcing: float):
        self.grid, self.dt, self.horizon, self.forcing = grid, dt, horizon, forcing
        self.M = _nodal_obs_matrix(grid, sensors)

    def final_state(self, log_perm) -> np.ndarray:
        a = np.exp(np.asarray(log_perm, dtype=float)).reshape(self.grid.shape)
        return solve_unsteady_flow(a, self.forcing, self.grid, self.dt, self.horizon,
                                   keep_history=False).final.ravel()

    def states(self, fields) -> np.ndarray:
        F = np.atleast_2d(np.asarray(fields, dtype=float).T).T
        return np.stack([self.final_state(F[:, j]) for j in range(F.shape[1])])

    def __call__(self, fields) -> np.ndarray:
        return (self.M @ self.states(fields).T)


ALPHA_CLIP = 1e-6


def fracture_physical(q) -> np.ndarray:
    """Latent ``q`` to ``(alpha, x0, y0, L0)``."""
    return arctan_map(q)


class _FractureModel:
    """Sensor response at the horizon for latent fracture parameters."""

    def __init__(self, grid: Grid2D, sensors, dt: float, horizon: float, forcing: float,
                 a_frac: float):
        self.grid, self.dt, self.horizon = grid, dt, horizon
        self.forcing, self.a_frac = forcing, a_frac
        self.M = _nodal_obs_matrix(grid, sensors)

    def final_state_physical(self, theta) -> np.ndarray:
        alpha, x0, y0, L0 = theta
        alpha = min(max(alpha, ALPHA_CLIP), 1.0 - ALPHA_CLIP)
        perm = embed_fracture(FractureSpec(x0, y0, L0, self.a_frac), np.ones(self.grid.shape),
                              self.grid)
        return solve_fractional_diffusion(perm, alpha, self.forcing, self.grid, self.dt,
                                          self.horizon, keep_history=False).final.ravel()

    def states(self, Q) -> np.ndarray:
        TH = fracture_physical(np.atleast_2d(np.asarray(Q, dtype=float).T).T)
        return np.stack([self.final_state_physical(TH[:, j]) for j in range(TH.shape[1])])

    def __call__(self, Q) -> np.ndarray:
        return self.M @ self.states(Q).T


def linear_problem_matrices(cfg: ExperimentConfig):
    """``(G, theta_true, noise)`` for the linear experiment, from ``problem_seed``."""
    rng = np.random.default_rng(cfg.problem_seed)
    G = cfg.g_scale * rng.standard_normal((cfg.n_d, cfg.n_theta))
    theta = rng.standard_normal(cfg.n_theta)
    noise = rng.standard_normal(cfg.n_d)
    return G, theta, noise


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Inversion-grid forward model, prior and truth for ``cfg``."""
    validate_config(cfg)
    if cfg.kind == "custom_linear":
        G, theta, _ = linear_problem_matrices(cfg)
        model = LinearModel(G, max(cfg.sigma, 1e-300) ** 2 * np.eye(cfg.n_d))
        return Problem(cfg, lambda X: G @ X, PriorSpec.standard(cfg.n_theta), None, theta,
                       linear=model)
    grid = Grid2D(cfg.grid, cfg.grid)
    sensors = _sensors(cfg)
    if cfg.kind == "source_location":
        model = _SteadySourceModel(grid, sensors, cfg.source_strength, cfg.source_width)
        return Problem(cfg, model, PriorSpec.standard(2), sensors, np.array(cfg.truth, dtype=float),
                       states=model.states)
    if cfg.kind == "channel_dct":
        model = _UnsteadyFieldModel(grid, sensors, cfg.dt, cfg.horizon, cfg.forcing)
        basis = build_basis(cfg.grid, cfg.grid, cfg.n_c, cfg.dct_ordering)
        post = None
        if cfg.postprocess:
            spec = PostProcessSpec(cfg.tau, tuple(cfg.penalty_b))
            facies = tuple(cfg.facies)
            post = lambda A: project_log_field(A, spec, facies)  # noqa: E731
        return Problem(cfg, model, PriorSpec.standard(cfg.n_c), sensors,
                       channel_truth(cfg.grid, cfg.facies), basis=basis, postprocess=post,
                       states=model.states)
    model = _FractureModel(grid, sensors, cfg.dt, cfg.horizon, cfg.forcing, cfg.a_frac)
    return Problem(cfg, model, PriorSpec.standard(4), sensors, np.array(cfg.truth, dtype=float),
                   to_physical=fracture_physical, states=model.states)


def noiseless_data(cfg: ExperimentConfig) -> np.ndarray:
    """Observation of the truth solved on the data-generation grid."""
    if cfg.kind == "custom_linear":
        G, theta, _ = linear_problem_matrices(cfg)
        return G @ theta
    grid = Grid2D(cfg.data_grid, cfg.data_grid)
    sensors = _sensors(cfg)
    M = _nodal_obs_matrix(grid, sensors)
    if cfg.kind == "source_location":
        f = gaussian_source(cfg.truth, cfg.source_strength, cfg.source_width, grid)
        state = solve_steady_flow(_source_permeability(grid), f, grid)
    elif cfg.kind == "channel_dct":
        a = np.exp(channel_truth(cfg.data_grid, cfg.facies)).reshape(grid.shape)
        state = solve_unsteady_flow(a, cfg.forcing, grid, cfg.data_dt, cfg.horizon,
                                    keep_history=False)
    else:
        alpha, x0, y0, L0 = cfg.truth
        perm = embed_fracture(FractureSpec(x0, y0, L0, cfg.a_frac), np.ones(grid.shape), grid)
        state = solve_fractional_diffusion(perm, alpha, cfg.forcing, grid, cfg.data_dt,
                                           cfg.horizon, keep_history=False)
    return M @ state.final.ravel()


def generate_synthetic_data(cfg: ExperimentConfig, rng: Optional[np.random.Generator] = None
                            ) -> ObservationSetup:
    """Fine-grid truth observation plus ``N(0, sigma^2)`` noise.

    ``rng`` defaults to the ``"noise"`` stream of the config seed. The linear
    kind draws its noise together with the problem matrices.
    """
    clean = noiseless_data(cfg)
    if cfg.kind == "custom_linear":
        noise = linear_problem_matrices(cfg)[2]
    else:
        rng = RngStreams(cfg.seed).get("noise") if rng is None else rng
        noise = rng.standard_normal(clean.shape)
    sensors = None if cfg.kind == "custom_linear" else _sensors(cfg)
    t = cfg.horizon if cfg.kind in ("channel_dct", "fracture_fractional") else None
    return ObservationSetup(clean + cfg.sigma * noise, cfg.sigma, sensors, t)


def linear_posterior(cfg: ExperimentConfig, obs: ObservationSetup) -> GaussianMixture:
    """Closed-form posterior of the linear experiment."""
    problem = build_problem(cfg)
    prior = GaussianMixture(np.ones(1), np.zeros((1, cfg.n_theta)), np.eye(cfg.n_theta)[None])
    return linear_gmm_posterior(problem.linear, obs.d, prior)


# ---------------------------------------------------------------------------
# running and persistence


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_matrix_csv(path, rows, index, header_prefix: str, col_prefix: str = "m") -> None:
    """Headered CSV; first column is ``index``, one further column per entry."""
    R = np.atleast_2d(np.asarray(rows, dtype=float))
    idx = list(index)
    lines = [",".join([header_prefix] + [f"{col_prefix}{j}" for j in range(R.shape[1])])]
    for i, row in zip(idx, R):
        lines.append(",".join([str(i)] + [_fmt(v) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_csv(path):
    """Inverse of :func:`write_matrix_csv`: ``(index, values)``."""
    lines = Path(path).read_text().splitlines()[1:]
    idx = [ln.split(",", 1)[0] for ln in lines]
    vals = np.array([[float(v) for v in ln.split(",")[1:]] for ln in lines])
    return idx, vals


def _interval_csv(path, summary: diag.IntervalSummary, names) -> None:
    rows = summary.as_rows()
    lines = ["component,lower95,p25,median,p75,upper95"]
    for n, r in zip(names, rows):
        lines.append(",".join([str(n)] + [_fmt(v) for v in r]))
    Path(path).write_text("\n".join(lines) + "\n")


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


@dataclass
class RunOutput:
    """In-memory result of :func:`run`.

    ``timings`` holds wall-clock seconds per stage; it is logged but not
    written to disk so persisted outputs stay bitwise reproducible.
    """

    config: ExperimentConfig
    problem: Problem
    observations: ObservationSetup
    result: InversionResult
    series: list
    timings: dict
    output_dir: Optional[Path] = None


def _iteration_metrics(problem: Problem, rec: IterationRecord) -> dict:
    cfg = problem.config
    dim = len(rec.mean) if rec.retained is None else len(rec.retained)
    out = {"iteration": rec.l, "lambda": rec.lam, "k": rec.k, "ess": list(rec.ess),
           "step_norm": rec.step_norm, "weight_scale": list(rec.rho), "dimension": int(dim)}
    if cfg.kind == "channel_dct":
        truth = problem.truth
        out["field_error"] = diag.relative_error(rec.field_estimate, truth)
        out["field_error_raw"] = diag.relative_error(rec.field_mean, truth)
        out["retained"] = [int(v) for v in problem.basis.retained[rec.retained]]
        return out
    est = problem.to_physical(rec.estimate)
    out["estimate"] = est
    out["error_theta"] = diag.relative_error(est, problem.truth)
    if cfg.kind == "fracture_fractional":
        out["error_endpoints"] = diag.relative_error(diag.fracture_endpoints(est),
                                                     diag.fracture_endpoints(problem.truth))
        out["estimate_latent"] = rec.estimate
    if rec.mixture is not None:
        out["mixture"] = {"weights": rec.mixture.weights, "means": rec.mixture.means,
                          "covs": rec.mixture.covs}
    return out


def _persist_iteration(root: Path, problem: Problem, obs: ObservationSetup, rec: IterationRecord,
                       metrics: dict, streams: RngStreams) -> None:
    d = root / f"iter_{rec.l:03d}"
    d.mkdir(parents=True, exist_ok=True)
    cfg = problem.config
    if rec.retained is not None:
        index = problem.basis.retained[rec.retained]
    else:
        index = range(rec.ensemble.shape[0])
    write_matrix_csv(d / "ensemble.csv", rec.ensemble, index, "component")
    write_matrix_csv(d / "weights.csv", rec.weights, range(rec.weights.shape[0]), "model")
    _write_json(d / "diagnostics.json", metrics)
    if cfg.kind == "channel_dct":
        names = [f"c{int(i)}" for i in index]
        _interval_csv(d / "intervals.csv", diag.ensemble_percentiles(rec.ensemble), names)
        write_matrix_csv(d / "field.csv",
                         np.column_stack([rec.field_mean, rec.field_estimate]).T,
                         ["mean", "estimate"], "field", col_prefix="cell")
    else:
        phys = problem.to_physical(rec.ensemble)
        names = [f"theta{i}" for i in range(phys.shape[0])]
        _interval_csv(d / "intervals.csv", diag.ensemble_percentiles(phys), names)
        hists = diag.marginal_histograms(phys, bins=30)
        lines = ["component,left,right,density"]
        for name, (edges, dens) in zip(names, hists):
            for a, b, v in zip(edges[:-1], edges[1:], dens):
                lines.append(f"{name},{_fmt(a)},{_fmt(b)},{_fmt(v)}")
        (d / "density.csv").write_text("\n".join(lines) + "\n")
    credible, prediction = diag.prediction_intervals(rec.predictions, obs.sigma,
                                                     streams.get("intervals", rec.l))
    names = [f"sensor{i}" for i in range(rec.predictions.shape[0])]
    _interval_csv(d / "credible_intervals.csv", credible, names)
    _interval_csv(d / "prediction_intervals.csv", prediction, names)


def _persist_header(root: Path, cfg: ExperimentConfig, problem: Problem, obs: ObservationSetup,
                    clean: np.ndarray) -> None:
    root.mkdir(parents=True, exist_ok=True)
    save_config(cfg, root / "config.json")
    lines = ["sensor,x,y,observed,noiseless"]
    for i in range(obs.n_d):
        x, y = (obs.sensors[i] if obs.sensors is not None else (float("nan"), float("nan")))
        lines.append(",".join([str(i), _fmt(x), _fmt(y), _fmt(obs.d[i]), _fmt(clean[i])]))
    (root / "observations.csv").write_text("\n".join(lines) + "\n")
    if cfg.kind == "channel_dct":
        write_matrix_csv(root / "truth_field.csv", problem.truth[None], ["truth"], "field",
                         col_prefix="cell")
    else:
        _write_json(root / "truth.json", {"truth": problem.truth})


def run(cfg: ExperimentConfig, output_dir=None, seed: Optional[int] = None) -> RunOutput:
    """Generate data, run the inversion and persist every iteration.

    ``output_dir`` and ``seed`` override the config values when given. With no
    output directory nothing is written.
    """
    if seed is not None:
        cfg = config_from_dict({**cfg.to_dict(), "seed": int(seed)})
    if output_dir is not None:
        cfg = config_from_dict({**cfg.to_dict(), "output_dir": str(output_dir)})
    validate_config(cfg)
    if not cfg.sigma > 0:
        raise ValidationError("sigma: must be positive to run an inversion")
    timings = {}
    t0 = time.perf_counter()
    problem = build_problem(cfg)
    clean = noiseless_data(cfg)
    obs = generate_synthetic_data(cfg)
    timings["setup"] = time.perf_counter() - t0
    streams = RngStreams(cfg.seed)
    root = Path(cfg.output_dir) if cfg.output_dir else None
    if root is not None:
        _persist_header(root, cfg, problem, obs, clean)
    series = []

    def callback(rec: IterationRecord):
        metrics = _iteration_metrics(problem, rec)
        series.append(metrics)
        if root is not None:
            _persist_iteration(root, problem, obs, rec, metrics, streams)
        log.info("iteration %d persisted", rec.l)

    t1 = time.perf_counter()
    if cfg.kind == "channel_dct":
        settings = DctSettings(n_e=cfg.n_e, rho=cfg.rho, lambda0=cfg.lambda0, nu=cfg.nu,
                               eps_stop=cfg.eps_stop, max_iter=cfg.max_iter,
                               min_ess=cfg.min_ess, alpha_reduce=cfg.alpha_reduce,
                               postprocess=problem.postprocess,
                               postprocess_prior=cfg.postprocess_prior)
        result = run_dct_ies_is(problem.forward, problem.basis, problem.prior, obs, settings,
                                streams, callback=callback)
    else:
        smem = SmemConfig(k_max=cfg.k_max, k_min=cfg.k_min, eps_screen=cfg.eps_screen,
                          max_iter=cfg.smem_max_iter, prune=cfg.smem_prune)
        settings = GmmSettings(n_e=cfg.n_e, rho=cfg.rho, lambda0=cfg.lambda0, nu=cfg.nu,
                               eps_stop=cfg.eps_stop, max_iter=cfg.max_iter,
                               min_ess=cfg.min_ess, smem=smem,
                               fd_step=cfg.fd_step)
        result = run_gmm_ies_is(problem.forward, problem.prior, obs, settings, streams,
                                callback=callback)
    timings["inversion"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    if root is not None:
        final = result.final
        if problem.states is not None:
            members = final.ensemble
            if cfg.kind == "channel_dct":
                basis = problem.basis.subset(final.retained)
                members = synthesize(final.ensemble, basis)
                if problem.postprocess is not None:
                    members = problem.postprocess(members)
            std = diag.state_std_field(problem.states(members))
            write_matrix_csv(root / "state_std.csv", std.reshape(cfg.grid + 2, cfg.grid + 2),
                             range(cfg.grid + 2), "x_node", col_prefix="y")
        _write_json(root / "result.json", {
            "kind": cfg.kind, "seed": cfg.seed, "converged": result.converged,
            "n_iter": result.n_iter, "iterations": [f"iter_{r.l:03d}" for r in result.records],
            "series": series})
    timings["persist"] = time.perf_counter() - t2
    log.info("timings: %s", ", ".join(f"{k}={v:.2f}s" for k, v in timings.items()))
    return RunOutput(cfg, problem, obs, result, series, timings, root)

