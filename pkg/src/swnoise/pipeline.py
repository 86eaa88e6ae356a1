"""Pipeline stage drivers behind the CLI: simulate, calibrate, train,
forecast, report.  Each stage reads only persisted upstream artifacts, writes
its outputs plus a manifest recording the digest of the config keys it
consumes, and fails (rather than recomputes) on a digest mismatch.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import calibrate as cal
from . import dsb as dsb_mod
from . import fileio
from . import operators as ops
from . import transform as tr
from . import verify
from .config import RunConfig, stage_digest
from .grid import Grid, ScalarField, VectorField
from .rsw import (
    FlowState,
    RswParams,
    default_nu,
    geostrophic_init,
    initial_eta,
    perturbation_from_stream,
    NoiseRealization,
    step_deterministic,
    validate_cfl,
)

log = logging.getLogger(__name__)


class MissingInput(FileNotFoundError):
    pass


class StaleInput(RuntimeError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])


def _write_manifest(stage_dir: Path, stage: str, cfg: RunConfig, extra: dict | None = None) -> None:
    manifest = {"stage": stage, "config_digest": stage_digest(cfg, stage)}
    if extra:
        manifest.update(extra)
    (stage_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _check_manifest(workdir: Path, stage: str, cfg: RunConfig) -> dict:
    path = workdir / stage / "manifest.json"
    if not path.exists():
        raise MissingInput(f"stage '{stage}' has not run yet (missing {path})")
    manifest = json.loads(path.read_text())
    expect = stage_digest(cfg, stage)
    if manifest.get("config_digest") != expect:
        raise StaleInput(
            f"stage '{stage}' outputs are stale: config digest "
            f"{manifest.get('config_digest')} != {expect}; rerun '{stage}'"
        )
    return manifest


def _grids(cfg: RunConfig) -> tuple[Grid, Grid]:
    return (
        Grid(cfg.fine_nx, cfg.fine_ny, cfg.lx, cfg.ly),
        Grid(cfg.coarse_nx, cfg.coarse_ny, cfg.lx, cfg.ly),
    )


def _load_topography(cfg: RunConfig, grid: Grid):
    if not cfg.topography:
        return None
    b = fileio.read_field(cfg.topography)
    if b.grid != grid:
        raise MissingInput(f"topography grid {b.grid} does not match {grid}")
    return b


def _project_state(state: FlowState, coarse: Grid) -> FlowState:
    return FlowState(
        VectorField(
            ops.coarse_project(state.vel.u, coarse),
            ops.coarse_project(state.vel.v, coarse),
        ),
        ops.coarse_project(state.eta, coarse),
        t=state.t,
        step=state.step,
    )


def cmd_simulate(cfg: RunConfig) -> Path:
    """Fine and coarse deterministic runs: spin-up, trajectory bundles at
    coarse-step cadence, checkpoints and the x-spectrum diagnostic."""
    fine, coarse = _grids(cfg)
    ratio = fine.nx // coarse.nx
    stage_dir = Path(cfg.workdir) / "simulate"
    stage_dir.mkdir(parents=True, exist_ok=True)

    params_probe = RswParams(ro=cfg.ro, fr=cfg.fr, f_cor=cfg.f_cor, dt=1e-6)
    state = geostrophic_init(initial_eta(fine, cfg.a), params_probe)
    dt_f = cfg.dt_value(state, params_probe)
    p_fine = RswParams(
        ro=cfg.ro, fr=cfg.fr, f_cor=cfg.f_cor, dt=dt_f,
        nu=cfg.nu_value(fine), b=_load_topography(cfg, fine),
    )
    validate_cfl(p_fine, state)
    log.info("fine run: dt=%g nu=%g", p_fine.dt, p_fine.nu)

    for _ in range(cfg.spinup_steps):
        state = step_deterministic(state, p_fine)
    spun_up = state.copy()

    eta_records = []
    truth_records = []
    for n in range(cfg.dataset_steps + 1):
        eta_records.append({"t": state.t, "step": state.step, "eta": state.eta})
        proj = _project_state(state, coarse)
        truth_records.append(
            {"t": state.t, "step": state.step, "u": proj.vel.u, "v": proj.vel.v,
             "eta": proj.eta}
        )
        if n < cfg.dataset_steps:
            for _ in range(ratio):
                state = step_deterministic(state, p_fine)

    # coarse deterministic twin over the same spin-up horizon
    coarse_state = geostrophic_init(initial_eta(coarse, cfg.a), params_probe)
    p_coarse = RswParams(
        ro=cfg.ro, fr=cfg.fr, f_cor=cfg.f_cor, dt=ratio * dt_f,
        nu=cfg.nu_value(coarse),
    )
    validate_cfl(p_coarse, coarse_state)
    for _ in range(cfg.spinup_steps // ratio):
        coarse_state = step_deterministic(coarse_state, p_coarse)

    fileio.write_bundle(stage_dir / "fine_eta.swb", eta_records)
    fileio.write_bundle(stage_dir / "truth_coarse.swb", truth_records)
    fileio.write_state_checkpoint(
        stage_dir / "fine_final", state,
        f"ro = {cfg.ro}\nfr = {cfg.fr}\nf_cor = {cfg.f_cor}\ndt = {_fmt(p_fine.dt)}\nnu = {_fmt(p_fine.nu)}\n",
    )
    fileio.write_state_checkpoint(
        stage_dir / "coarse_spunup", coarse_state,
        f"dt = {_fmt(p_coarse.dt)}\nnu = {_fmt(p_coarse.nu)}\n",
    )

    rows = []
    for label, st in (("fine", spun_up), ("coarse", coarse_state)):
        for var in ("u", "v", "e"):
            f = {"u": st.vel.u, "v": st.vel.v, "e": st.eta}[var]
            fluct = ScalarField(f.grid, f.values - f.values.mean())
            k, e = ops.x_spectrum(fluct)
            rows.extend((label, var, int(kk), float(ee)) for kk, ee in zip(k, e))
    _write_csv(stage_dir / "spectrum.csv", ["grid", "variable", "k", "energy"], rows)

    frac = ops.high_wavenumber_fraction(
        [spun_up.vel.u, spun_up.vel.v, spun_up.eta], coarse.nx // 2
    )
    _write_manifest(
        stage_dir, "simulate", cfg,
        {"dt_fine": p_fine.dt, "nu_fine": p_fine.nu, "dt_coarse": p_coarse.dt,
         "nu_coarse": p_coarse.nu, "ratio": ratio,
         "high_wavenumber_fraction": frac},
    )
    log.info("above-Nyquist energy fraction after spin-up: %.3e", frac)
    return stage_dir


def cmd_calibrate(cfg: RunConfig) -> Path:
    """Extract one streamfunction sample per coarse step and fit the data
    transform."""
    fine, coarse = _grids(cfg)
    workdir = Path(cfg.workdir)
    sim_manifest = _check_manifest(workdir, "simulate", cfg)
    stage_dir = workdir / "calibrate"
    stage_dir.mkdir(parents=True, exist_ok=True)

    bundle_path = workdir / "simulate" / "fine_eta.swb"
    if not bundle_path.exists():
        raise MissingInput(f"missing fine trajectory bundle {bundle_path}")
    records = fileio.read_bundle(bundle_path)
    traj = [
        FlowState(VectorField.zeros(fine), rec["eta"], t=rec["t"], step=rec["step"])
        for rec in records
    ]
    provenance = sim_manifest["config_digest"]
    dataset = cal.build_dataset(traj, coarse, reg=cfg.reg_value(), provenance=provenance)
    fileio.write_dataset(stage_dir / "dataset.swds", dataset)

    spec = tr.fit(dataset.to_array(), theta=cfg.theta, clip=cfg.clip)
    tr.save_spec(stage_dir / "transform_spec.txt", spec)

    _write_csv(
        stage_dir / "residuals.csv",
        ["step_index", "residual_norm"],
        [(s.step_index, float(s.residual_norm)) for s in dataset.samples],
    )

    transformed = tr.forward_values(dataset.to_array(), spec)
    counts, edges = np.histogram(transformed, bins=50, range=(0.0, 1.0))
    _write_csv(
        stage_dir / "pixel_hist.csv",
        ["bin_lo", "bin_hi", "count"],
        [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(50)],
    )
    _write_manifest(stage_dir, "calibrate", cfg, {"n_samples": len(dataset)})
    return stage_dir


def cmd_train(cfg: RunConfig, toy: bool = False) -> Path:
    """Train the bridge on the transformed dataset (or run the embedded 1-D
    oracle with --toy)."""
    workdir = Path(cfg.workdir)
    stage_dir = workdir / "train"
    stage_dir.mkdir(parents=True, exist_ok=True)

    if toy:
        return _train_toy(cfg, stage_dir)

    _check_manifest(workdir, "calibrate", cfg)
    dataset_path = workdir / "calibrate" / "dataset.swds"
    spec_path = workdir / "calibrate" / "transform_spec.txt"
    for path in (dataset_path, spec_path):
        if not path.exists():
            raise MissingInput(f"missing calibrate output {path}")
    dataset = fileio.read_dataset(dataset_path)
    spec = tr.load_spec(spec_path)
    data = tr.forward_values(dataset.to_array(), spec)

    dsb_cfg = dsb_mod.DsbConfig(
        n_steps=cfg.dsb_steps, ipf_iters=cfg.ipf_iters, batch=cfg.batch,
        lr=cfg.lr, inner_steps=cfg.inner_steps, hidden=cfg.hidden,
        cache_size=cfg.cache_size, refresh_every=cfg.refresh_every,
        seed=cfg.seed + 1,
    )
    initial = None
    model_path = stage_dir / "model.dsb"
    if model_path.exists():
        previous = dsb_mod.load_model(model_path)
        if previous.tspec_digest == spec.digest() and previous.halves_done < 2 * cfg.ipf_iters:
            initial = previous
            log.info("resuming training at half-iteration %d", previous.halves_done)

    def checkpoint(model):
        dsb_mod.save_model(stage_dir / f"ckpt_half_{model.halves_done:02d}.dsb", model)
        dsb_mod.save_model(model_path, model)

    model, history = dsb_mod.ipf_train(
        data, dsb_cfg, tspec_digest=spec.digest(), checkpoint_cb=checkpoint,
        initial=initial,
    )
    if initial is None and not history:
        raise dsb_mod.Diverged("training produced no history")
    dsb_mod.save_model(model_path, model)
    if history:  # a completed-training rerun must not clobber the loss log
        _write_csv(
            stage_dir / "loss.csv",
            ["half_iteration", "inner_step", "loss"],
            [(h, s, float(v)) for h, s, v in history],
        )
    _write_manifest(stage_dir, "train", cfg, {"halves_done": model.halves_done})
    return stage_dir


def _train_toy(cfg: RunConfig, stage_dir: Path) -> Path:
    """1-D Gaussian oracle: data N(2, 0.25), two IPF iterations, asserts the
    recovered moments."""
    rng = np.random.default_rng(cfg.seed)
    data = 2.0 + 0.5 * rng.standard_normal((4000, 1))
    toy_cfg = dsb_mod.DsbConfig(
        n_steps=10, ipf_iters=2, batch=256, lr=2e-3, inner_steps=4000,
        hidden=32, cache_size=4096, refresh_every=500, seed=cfg.seed,
    )
    model, history = dsb_mod.ipf_train(data, toy_cfg)
    out = dsb_mod.sample(model, 10_000, seed=cfg.seed + 1)
    mean, std = float(out.mean()), float(out.std())
    log.info("toy oracle: mean %.4f std %.4f", mean, std)
    (stage_dir / "toy_oracle.txt").write_text(
        f"mean = {_fmt(mean)}\nstd = {_fmt(std)}\n"
    )
    if abs(mean - 2.0) > 0.1 or abs(std - 0.5) > 0.1:
        raise dsb_mod.Diverged(
            f"toy oracle out of tolerance: mean {mean:.4f} (want 2 +/- 0.1), "
            f"std {std:.4f} (want 0.5 +/- 0.1)"
        )
    return stage_dir


def _load_truth(workdir: Path, coarse: Grid) -> list[FlowState]:
    path = workdir / "simulate" / "truth_coarse.swb"
    if not path.exists():
        raise MissingInput(f"missing truth bundle {path}")
    records = fileio.read_bundle(path)
    return [
        FlowState(
            VectorField(rec["u"], rec["v"]), rec["eta"], t=rec["t"], step=rec["step"]
        )
        for rec in records
    ]


def _noise_dataset(model, spec, coarse: Grid, count: int, seed: int):
    """Generated velocity perturbations (count, 2, nx, ny) plus the fraction
    of components the clip cap touched."""
    flat = dsb_mod.sample(model, count, seed=seed, clamp=(0.0, 1.0))
    fields = np.empty((count, 2, coarse.nx, coarse.ny))
    clipped = 0
    for i, row in enumerate(flat):
        stream = tr.inverse(ScalarField(coarse, row.reshape(coarse.shape)), spec)
        raw = perturbation_from_stream(NoiseRealization(stream, clip=np.inf))
        clipped += int(
            (np.abs(raw.u.values) > spec.clip).sum()
            + (np.abs(raw.v.values) > spec.clip).sum()
        )
        fields[i, 0] = np.clip(raw.u.values, -spec.clip, spec.clip)
        fields[i, 1] = np.clip(raw.v.values, -spec.clip, spec.clip)
    return fields, clipped / (count * 2 * coarse.size)


def central_block(grid: Grid, size: int = 8) -> tuple[slice, slice]:
    i0 = max((grid.nx - size) // 2, 0)
    j0 = max((grid.ny - size) // 2, 0)
    return slice(i0, i0 + min(size, grid.nx)), slice(j0, j0 + min(size, grid.ny))


def _forecast_cell(args):
    """One (noise kind, init_std) cell; module-level for process pools."""
    (workdir, cfg, kind, init_std, sigma_iso, sigma_diag, seed) = args
    _, coarse = _grids(cfg)
    truth = _load_truth(Path(workdir), coarse)
    manifest = json.loads((Path(workdir) / "simulate" / "manifest.json").read_text())
    p_coarse = RswParams(
        ro=cfg.ro, fr=cfg.fr, f_cor=cfg.f_cor,
        dt=manifest["dt_coarse"], nu=manifest["nu_coarse"],
    )
    source = _make_source(workdir, cfg, kind, sigma_iso, sigma_diag, seed)
    fconfig = verify.ForecastConfig(
        members=cfg.members, lead=cfg.lead, init_std=init_std,
        resets=cfg.resets, variables=tuple(cfg.variables),
    )
    record = verify.run_forecast(truth, fconfig, source, p_coarse, seed=seed)
    return {
        "kind": kind,
        "init_std": init_std,
        "crps": {var: vals.tolist() for var, vals in verify.crps(record).items()},
        "rmse": {var: vals.tolist() for var, vals in verify.rmse(record).items()},
        "blowups": record.blowups,
    }


def _make_source(workdir, cfg, kind, sigma_iso, sigma_diag, seed):
    spec = tr.load_spec(Path(workdir) / "calibrate" / "transform_spec.txt")
    if kind == "generative":
        model = dsb_mod.load_model(Path(workdir) / "train" / "model.dsb")
        return verify.NoiseSource(kind=kind, model=model, spec=spec, seed=seed)
    if kind == "gaussian_iso":
        return verify.NoiseSource(kind=kind, sigma=sigma_iso, spec=spec, seed=seed)
    return verify.NoiseSource(
        kind=kind, sigma_field=np.asarray(sigma_diag), spec=spec, seed=seed
    )


SOURCE_KINDS = ("generative", "gaussian_iso", "gaussian_diag")


def cmd_forecast(cfg: RunConfig, jobs: int = 1) -> Path:
    """Noise-source comparison over the scenario grid plus rank histograms,
    KS normality table and noise diagnostics."""
    workdir = Path(cfg.workdir)
    _check_manifest(workdir, "simulate", cfg)
    _check_manifest(workdir, "calibrate", cfg)
    train_manifest = _check_manifest(workdir, "train", cfg)
    stage_dir = workdir / "forecast"
    stage_dir.mkdir(parents=True, exist_ok=True)
    _, coarse = _grids(cfg)

    model = dsb_mod.load_model(workdir / "train" / "model.dsb")
    spec = tr.load_spec(workdir / "calibrate" / "transform_spec.txt")

    noise, clip_fraction = _noise_dataset(
        model, spec, coarse, cfg.noise_samples, seed=cfg.seed + 11
    )
    sigma_iso, sigma_diag = verify.fit_gaussian_baselines(noise)
    if sigma_iso <= 0:
        raise verify.EmptyDataset("generated noise has zero variance")

    # KS normality of the u-perturbation over the central block
    bi, bj = central_block(coarse)
    block = noise[:, 0, bi, bj].reshape(cfg.noise_samples, -1)
    d_stats, pvals, reject = verify.ks_normality(block)
    locs = [(i, j) for i in range(bi.start, bi.stop) for j in range(bj.start, bj.stop)]
    _write_csv(
        stage_dir / "ks_table.csv",
        ["i", "j", "statistic", "p_value", "reject"],
        [
            (i, j, float(d), float(p), int(r))
            for (i, j), d, p, r in zip(locs, d_stats, pvals, reject)
        ],
    )

    rows = []
    for col, (i, j) in enumerate(locs):
        qs = np.quantile(block[:, col], [0.05, 0.25, 0.5, 0.75, 0.95])
        rows.append((i, j, *map(float, qs)))
    _write_csv(
        stage_dir / "boxplot.csv",
        ["i", "j", "q05", "q25", "median", "q75", "q95"],
        rows,
    )

    cells = [
        (str(workdir), cfg, kind, float(std), sigma_iso, sigma_diag.tolist(),
         cfg.seed + 100 + 17 * idx)
        for idx, (kind, std) in enumerate(
            (kind, std) for std in cfg.init_std for kind in SOURCE_KINDS
        )
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_forecast_cell, cells))
    else:
        results = [_forecast_cell(cell) for cell in cells]

    crps_rows, rmse_rows = [], []
    blowups = {}
    for res in results:
        scen = _fmt(res["init_std"])
        blowups[f"{res['kind']}@{scen}"] = res["blowups"]
        for var in cfg.variables:
            for lead, val in enumerate(res["crps"][var]):
                crps_rows.append((var, scen, res["kind"], lead, float(val)))
            for lead, val in enumerate(res["rmse"][var]):
                rmse_rows.append((var, scen, res["kind"], lead, float(val)))
    header = ["variable", "scenario", "noise_kind", "lead_step", "value"]
    _write_csv(stage_dir / "crps.csv", header, crps_rows)
    _write_csv(stage_dir / "rmse.csv", header, rmse_rows)

    rank_rows = _rank_histograms(cfg, workdir, coarse, sigma_iso, sigma_diag)
    _write_csv(
        stage_dir / "rank_histograms.csv",
        ["variable", "noise_kind", "rank", "count"],
        rank_rows,
    )

    stats = {
        "sigma_iso": sigma_iso,
        "clip_fraction": clip_fraction,
        "ks_rejections": int(reject.sum()),
        "ks_locations": int(reject.size),
        "blowups": blowups,
        "trained_halves": train_manifest.get("halves_done"),
    }
    (stage_dir / "noise_stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    _write_manifest(stage_dir, "forecast", cfg, stats)
    return stage_dir


def _rank_histograms(cfg: RunConfig, workdir: Path, coarse: Grid,
                     sigma_iso: float, sigma_diag: np.ndarray) -> list[tuple]:
    """Long no-reset runs, repeated with fresh noise seeds; ranks collected
    over the central block at every tenth lead."""
    manifest = json.loads((workdir / "simulate" / "manifest.json").read_text())
    p_coarse = RswParams(
        ro=cfg.ro, fr=cfg.fr, f_cor=cfg.f_cor,
        dt=manifest["dt_coarse"], nu=manifest["nu_coarse"],
    )
    truth = _load_truth(workdir, coarse)
    lead = min(cfg.rank_lead, len(truth))
    bi, bj = central_block(coarse)
    rng = np.random.default_rng(cfg.seed + 500)
    rows = []
    for kind in ("generative", "gaussian_iso"):
        counts = {var: np.zeros(cfg.members + 1, dtype=int) for var in cfg.variables}
        for rep in range(cfg.rank_reps):
            source = _make_source(
                str(workdir), cfg, kind, sigma_iso, sigma_diag,
                cfg.seed + 1000 + rep,
            )
            fconfig = verify.ForecastConfig(
                members=cfg.members, lead=lead, init_std=0.0, resets=1,
                variables=tuple(cfg.variables),
            )
            record = verify.run_forecast(
                truth, fconfig, source, p_coarse, seed=cfg.seed + 2000 + rep
            )
            if record.truth[cfg.variables[0]].shape[0] == 0:
                continue
            for var in cfg.variables:
                t_blk = record.truth[var][0, 9::10, bi, bj]
                m_blk = record.members[var][0, 9::10, :, bi, bj]
                m_blk = np.moveaxis(m_blk, 1, -1)  # members last
                counts[var] += verify.rank_histogram(t_blk, m_blk, rng)
        for var in cfg.variables:
            rows.extend(
                (var, kind, rank, int(c)) for rank, c in enumerate(counts[var])
            )
    return rows


def cmd_report(cfg: RunConfig) -> Path:
    """One-page text summary: metric winners per variable and scenario, KS
    rejections and the clip fraction."""
    workdir = Path(cfg.workdir)
    stage_dir = workdir / "report"
    stage_dir.mkdir(parents=True, exist_ok=True)
    forecast_dir = workdir / "forecast"
    summary_path = stage_dir / "summary.txt"
    if not (forecast_dir / "crps.csv").exists():
        summary_path.write_text("nothing to report: no forecast metrics found\n")
        return stage_dir

    def read_metric(name):
        table = {}
        with open(forecast_dir / f"{name}.csv") as fh:
            for row in csv.DictReader(fh):
                key = (row["variable"], row["scenario"], row["noise_kind"])
                table.setdefault(key, []).append(
                    (int(row["lead_step"]), float(row["value"]))
                )
        return table

    lines = ["noise-source comparison (winner = lowest value at final lead)", ""]
    winners = {}
    for metric in ("crps", "rmse"):
        table = read_metric(metric)
        scenarios = sorted({k[1] for k in table}, key=float)
        variables = sorted({k[0] for k in table})
        for var in variables:
            for scen in scenarios:
                finals = {}
                for kind in SOURCE_KINDS:
                    curve = sorted(table.get((var, scen, kind), []))
                    if curve:
                        finals[kind] = curve[-1][1]
                if not finals:
                    continue
                best = min(finals, key=finals.get)
                winners[(metric, var, scen)] = best
                ranked = ", ".join(
                    f"{kind}={finals[kind]:.4g}" for kind in sorted(finals)
                )
                lines.append(f"{metric} {var} init_std={scen}: winner {best} ({ranked})")
        lines.append("")

    stats_path = forecast_dir / "noise_stats.json"
    if stats_path.exists():
        stats = json.loads(stats_path.read_text())
        lines.append(
            f"KS normality: {stats['ks_rejections']}/{stats['ks_locations']} "
            "central locations reject Gaussianity at p < 0.05"
        )
        lines.append(f"clip fraction: {stats['clip_fraction']:.6f}")
        lines.append(f"pooled sigma: {stats['sigma_iso']:.6g}")
        skipped = sum(stats.get("blowups", {}).values())
        lines.append(f"cycles skipped by blow-up: {skipped}")
    gen_wins = sum(1 for v in winners.values() if v == "generative")
    lines.append(f"generative source wins {gen_wins}/{len(winners)} metric cells")
    eta_low = [
        winners.get(("crps", "e", scen))
        for scen in ("0", "0.001")
        if ("crps", "e", scen) in winners
    ]
    if eta_low:
        verdict = "pass" if all(w == "generative" for w in eta_low) else "fail"
        lines.append(
            f"qualitative check (generative wins height CRPS at low uncertainty): {verdict}"
        )
    summary_path.write_text("\n".join(lines) + "\n")
    _write_manifest(stage_dir, "report", cfg)
    return stage_dir
