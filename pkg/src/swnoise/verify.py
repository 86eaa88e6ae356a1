"""Ensemble forecast experiments and verification metrics: RMSE, CRPS, rank
histograms, and per-location Kolmogorov-Smirnov normality tests, with the
generative noise source compared against moment-matched Gaussian baselines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import kolmogorov, ndtr
from scipy.stats import chisquare

from .grid import Grid, ScalarField, VectorField
from . import dsb as dsb_mod
from . import transform as tr
from .rsw import BlowUp, FlowState, RswParams, step_perturbed

log = logging.getLogger(__name__)

VARIABLES = ("u", "v", "e")  # "e" is the height variable eta


class EmptyDataset(ValueError):
    pass


class DegenerateSample(ValueError):
    """Zero-variance sample cannot be standardized."""


@dataclass
class NoiseSource:
    """Per-step velocity-perturbation generator for the stochastic stepper.

    kind "generative": decode bridge samples through the transform and lift
    them from streamfunctions.  kind "gaussian_iso"/"gaussian_diag": mean-zero
    Gaussian perturbation components, pooled or per-location std.  All kinds
    are clipped at spec.clip like the calibrated noise.
    """

    kind: str
    seed: int = 0
    model: dsb_mod.DsbModel | None = None
    spec: tr.TransformSpec | None = None
    sigma: float = 0.0
    sigma_field: np.ndarray | None = None  # (2, nx, ny)

    def __post_init__(self):
        if self.kind == "generative":
            if self.model is None or self.spec is None:
                raise ValueError("generative source needs a model and transform spec")
        elif self.kind == "gaussian_iso":
            if not self.sigma > 0:
                raise ValueError("iso Gaussian source needs sigma > 0")
        elif self.kind == "gaussian_diag":
            # zeros are allowed where the matched noise is structurally zero
            # (wall-clamped rows); a fully zero field carries no noise at all
            if (
                self.sigma_field is None
                or (self.sigma_field < 0).any()
                or not (self.sigma_field > 0).any()
            ):
                raise ValueError(
                    "diag Gaussian source needs non-negative per-location stds, "
                    "not all zero"
                )
        elif self.kind != "zero":
            raise ValueError(f"unknown noise kind {self.kind!r}")

    def draw_batch(self, grid: Grid, count: int, rng: np.random.Generator) -> list[VectorField]:
        """`count` independent perturbation fields, one per ensemble member."""
        clip = self.spec.clip if self.spec is not None else 3.0
        if self.kind == "zero":
            return [VectorField.zeros(grid) for _ in range(count)]
        if self.kind == "generative":
            from .rsw import NoiseRealization, perturbation_from_stream

            flat = dsb_mod.sample(self.model, count, seed=int(rng.integers(2**63)),
                                  clamp=(0.0, 1.0))
            out = []
            for row in flat:
                stream = tr.inverse(
                    ScalarField(grid, row.reshape(grid.shape)), self.spec
                )
                out.append(
                    perturbation_from_stream(NoiseRealization(stream, clip=clip))
                )
            return out
        shape = (count, 2, grid.nx, grid.ny)
        if self.kind == "gaussian_iso":
            w = rng.standard_normal(shape) * self.sigma
        else:
            w = rng.standard_normal(shape) * self.sigma_field[None, :, :, :]
        w = np.clip(w, -clip, clip)
        return [
            VectorField(ScalarField(grid, w[i, 0]), ScalarField(grid, w[i, 1]))
            for i in range(count)
        ]


@dataclass
class ForecastConfig:
    members: int = 10
    lead: int = 200
    init_std: float = 0.0
    resets: int = 8
    variables: tuple = VARIABLES

    def __post_init__(self):
        if self.members < 2:
            raise ValueError("need at least 2 members for CRPS and ranks")
        if self.lead < 1 or self.resets < 1:
            raise ValueError("lead and resets must be positive")


@dataclass
class ForecastRecord:
    """truth[var]: (cycles, lead, nx, ny); members[var]: (cycles, lead, M, nx, ny).
    Lead index 0 is the post-perturbation initial state."""

    truth: dict = field(default_factory=dict)
    members: dict = field(default_factory=dict)
    blowups: int = 0

    @property
    def lead_steps(self) -> int:
        return next(iter(self.truth.values())).shape[1]


def _state_var(state: FlowState, var: str) -> np.ndarray:
    if var == "u":
        return state.vel.u.values
    if var == "v":
        return state.vel.v.values
    return state.eta.values


def run_forecast(
    truth_traj: list[FlowState],
    config: ForecastConfig,
    source: NoiseSource,
    params: RswParams,
    seed: int = 0,
) -> ForecastRecord:
    """Cycled ensemble forecast against a coarse-grid truth trajectory.

    Every cycle restarts the ensemble from the truth plus iid N(0, init_std^2)
    perturbations, then advances each member with the stochastic step drawing
    fresh noise from the source at every step.  Truth and members are recorded
    at leads 0..lead-1; a member blow-up skips the cycle (counted).
    """
    needed = config.resets * config.lead
    if len(truth_traj) < needed:
        raise ValueError(
            f"truth trajectory has {len(truth_traj)} coarse steps, need {needed}"
        )
    grid = truth_traj[0].grid
    rng = np.random.default_rng(seed)
    rec = ForecastRecord()
    for var in config.variables:
        rec.truth[var] = np.empty((config.resets, config.lead, grid.nx, grid.ny))
        rec.members[var] = np.empty(
            (config.resets, config.lead, config.members, grid.nx, grid.ny)
        )
    def perturbed(f: ScalarField) -> ScalarField:
        if config.init_std == 0:
            return f.copy()
        return ScalarField(
            grid, f.values + config.init_std * rng.standard_normal(grid.shape)
        )

    kept = 0
    for cycle in range(config.resets):
        base = truth_traj[cycle * config.lead]
        ensemble = [
            FlowState(
                VectorField(perturbed(base.vel.u), perturbed(base.vel.v)),
                perturbed(base.eta),
                t=base.t,
                step=base.step,
            )
            for _ in range(config.members)
        ]
        try:
            for lead in range(config.lead):
                truth_state = truth_traj[cycle * config.lead + lead]
                for var in config.variables:
                    rec.truth[var][kept, lead] = _state_var(truth_state, var)
                    for m, member in enumerate(ensemble):
                        rec.members[var][kept, lead, m] = _state_var(member, var)
                if lead < config.lead - 1:
                    noises = source.draw_batch(grid, config.members, rng)
                    ensemble = [
                        step_perturbed(member, params, w)
                        for member, w in zip(ensemble, noises)
                    ]
        except BlowUp as exc:
            log.warning("cycle %d skipped: %s", cycle, exc)
            rec.blowups += 1
            continue
        kept += 1
    for var in config.variables:
        rec.truth[var] = rec.truth[var][:kept]
        rec.members[var] = rec.members[var][:kept]
    return rec


def rmse(record: ForecastRecord) -> dict[str, np.ndarray]:
    """RMSE of the ensemble mean vs truth per lead step, averaged over grid
    and cycles."""
    out = {}
    for var, truth in record.truth.items():
        if truth.size == 0:
            raise EmptyDataset("record holds no completed cycles")
        mean = record.members[var].mean(axis=2)
        out[var] = np.sqrt(((mean - truth) ** 2).mean(axis=(0, 2, 3)))
    return out


def crps_ensemble(members: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Sample CRPS per point: mean|x_i - y| - mean|x_i - x_j|/2 with members
    on the leading axis."""
    m = members.shape[0]
    term1 = np.abs(members - obs[None]).mean(axis=0)
    term2 = 0.0
    for i in range(m):
        term2 = term2 + np.abs(members[i][None] - members).sum(axis=0)
    return term1 - term2 / (2.0 * m * m)


def crps(record: ForecastRecord) -> dict[str, np.ndarray]:
    """Grid- and cycle-averaged sample CRPS per lead step."""
    out = {}
    for var, truth in record.truth.items():
        if truth.size == 0:
            raise EmptyDataset("record holds no completed cycles")
        members = np.moveaxis(record.members[var], 2, 0)  # (M, cycles, lead, nx, ny)
        out[var] = crps_ensemble(members, truth).mean(axis=(0, 2, 3))
    return out


def rank_histogram(
    truth_values: np.ndarray, member_values: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Counts of the truth's rank among M sorted members (ranks 0..M), ties
    broken uniformly: rank = #(members < truth) + U{0..#ties}."""
    m = member_values.shape[-1]
    below = (member_values < truth_values[..., None]).sum(axis=-1)
    ties = (member_values == truth_values[..., None]).sum(axis=-1)
    ranks = below + (rng.integers(0, ties + 1)).astype(int)
    return np.bincount(ranks.ravel(), minlength=m + 1)


def rank_uniformity_pvalue(counts: np.ndarray) -> float:
    """Chi-square p-value against a flat histogram."""
    return float(chisquare(counts).pvalue)


def ks_statistic_normal(x: np.ndarray, standardize: bool = True) -> float:
    """D = sup |F_emp - Phi| against the standard normal."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    if standardize:
        sd = x.std()
        if sd == 0.0:
            raise DegenerateSample("sample has zero variance")
        x = (x - x.mean()) / sd
    cdf = ndtr(x)
    hi = np.arange(1, n + 1) / n
    lo = np.arange(0, n) / n
    return float(max((hi - cdf).max(), (cdf - lo).max()))


def ks_normality(
    samples: np.ndarray, standardize: bool = True, alpha: float = 0.05
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-location KS normality test on an (n_samples, n_locations) array.

    Returns (D, p, reject) arrays; p-values use the asymptotic Kolmogorov
    distribution of sqrt(n)*D.
    """
    samples = np.atleast_2d(samples)
    n = samples.shape[0]
    if n < 20:
        raise ValueError(f"need at least 20 samples per location, got {n}")
    stats = np.array(
        [ks_statistic_normal(samples[:, j], standardize) for j in range(samples.shape[1])]
    )
    pvals = kolmogorov(np.sqrt(n) * stats)
    return stats, pvals, pvals < alpha


def fit_gaussian_baselines(noise_fields: np.ndarray) -> tuple[float, np.ndarray]:
    """(sigma_iso, sigma_diag) from generated velocity perturbations
    (n_samples, 2, nx, ny): pooled std and per-location/component stds."""
    noise_fields = np.asarray(noise_fields, dtype=float)
    if noise_fields.size == 0:
        raise EmptyDataset("no generated noise to fit")
    sigma_iso = float(noise_fields.std())
    sigma_diag = noise_fields.std(axis=0)
    return sigma_iso, sigma_diag
