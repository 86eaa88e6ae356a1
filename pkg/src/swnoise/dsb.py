"""Diffusion Schrodinger bridge between the streamfunction data law and an
isotropic Gaussian prior.

Forward chain:   X_{k+1} = X_k + gamma_{k+1} f(k, X_k) + sqrt(2 gamma_{k+1}) V
Backward chain:  X_k = X_{k+1} + gamma_{k+1} b(k+1, X_{k+1}) + sqrt(2 gamma_{k+1}) V

with f, b parametrised by drift nets, trained by alternating half-iterations
of iterative proportional fitting with the mean-matching regression: the
backward map B(k+1, x) = x + gamma b(k+1, x) is regressed on
X_{k+1} + F(X_k) - F(X_{k+1}) over forward chains (and symmetrically for F
over backward chains).

Data is centred per dimension inside the bridge (with zero reference drift an
uncentred data law can never reach the N(0, I) prior in total variation) and
the constant gamma schedule is sized so the terminal law of the first forward
chain has unit variance: 2*sum(gamma) = 1 - Var(centred data).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .nets import Adam, DriftNet

log = logging.getLogger(__name__)

DSB_MAGIC = b"DSB1"


class Diverged(RuntimeError):
    pass


class NonFiniteState(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"chain state became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class GammaSchedule:
    gammas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gammas", np.asarray(self.gammas, dtype=float))
        if self.gammas.ndim != 1 or self.gammas.size < 1:
            raise ValueError("schedule needs at least one step")
        if (self.gammas <= 0).any():
            raise ValueError("all step sizes must be positive")

    @property
    def n_steps(self) -> int:
        return self.gammas.size

    @property
    def total_noise_var(self) -> float:
        """Variance added by the zero-drift forward chain: 2*sum(gamma)."""
        return float(2.0 * self.gammas.sum())

    @classmethod
    def constant_for_data(cls, n_steps: int, data_var: float,
                          min_noise_var: float = 0.3) -> "GammaSchedule":
        s2 = max(1.0 - data_var, min_noise_var)
        return cls(np.full(n_steps, s2 / (2.0 * n_steps)))


@dataclass
class DsbConfig:
    n_steps: int = 30
    ipf_iters: int = 5
    batch: int = 64
    lr: float = 1e-3
    inner_steps: int = 5000
    hidden: int = 256
    cache_size: int = 1024
    refresh_every: int = 500
    log_every: int = 100
    seed: int = 0


@dataclass
class DsbModel:
    schedule: GammaSchedule
    forward_net: DriftNet
    backward_net: DriftNet
    d: int
    data_mean: np.ndarray
    halves_done: int = 0
    tspec_digest: str = ""

    @property
    def ipf_iteration(self) -> int:
        """Completed full IPF iterations (backward + forward half each)."""
        return self.halves_done // 2

    def copy(self) -> "DsbModel":
        return DsbModel(
            schedule=self.schedule,
            forward_net=self.forward_net.copy(),
            backward_net=self.backward_net.copy(),
            d=self.d,
            data_mean=self.data_mean.copy(),
            halves_done=self.halves_done,
            tspec_digest=self.tspec_digest,
        )


@dataclass
class TrajectoryCache:
    chains: np.ndarray  # (batch, n_steps+1, d), index k = chain time
    direction: str      # "forward" (from data) or "backward" (from prior)

    def __post_init__(self):
        if self.chains.ndim != 3:
            raise ValueError("chains must be (batch, steps+1, d)")
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"unknown direction {self.direction!r}")


def forward_rollout(x0_batch: np.ndarray, model: DsbModel,
                    rng: np.random.Generator) -> TrajectoryCache:
    """Noising chain from data samples with the current forward drift."""
    x0 = np.atleast_2d(np.asarray(x0_batch, dtype=float))
    if not np.isfinite(x0).all():
        raise NonFiniteState(0)
    gammas = model.schedule.gammas
    n = gammas.size
    chains = np.empty((x0.shape[0], n + 1, x0.shape[1]))
    chains[:, 0, :] = x0
    x = x0
    for k in range(n):
        g = gammas[k]
        x = x + g * model.forward_net(k, x) + np.sqrt(2.0 * g) * rng.standard_normal(x.shape)
        if not np.isfinite(x).all():
            raise NonFiniteState(k + 1)
        chains[:, k + 1, :] = x
    return TrajectoryCache(chains=chains, direction="forward")


def backward_rollout(xn_batch: np.ndarray, model: DsbModel,
                     rng: np.random.Generator) -> TrajectoryCache:
    """Denoising chain from prior samples with the current backward drift."""
    xn = np.atleast_2d(np.asarray(xn_batch, dtype=float))
    if not np.isfinite(xn).all():
        raise NonFiniteState(model.schedule.n_steps)
    gammas = model.schedule.gammas
    n = gammas.size
    chains = np.empty((xn.shape[0], n + 1, xn.shape[1]))
    chains[:, n, :] = xn
    x = xn
    for k in range(n - 1, -1, -1):
        g = gammas[k]
        x = x + g * model.backward_net(k + 1, x) + np.sqrt(2.0 * g) * rng.standard_normal(x.shape)
        if not np.isfinite(x).all():
            raise NonFiniteState(k)
        chains[:, k, :] = x
    return TrajectoryCache(chains=chains, direction="backward")


def _pairs(cache: TrajectoryCache, ks: np.ndarray, idx: np.ndarray):
    xk = cache.chains[idx, ks, :]
    xk1 = cache.chains[idx, ks + 1, :]
    return xk, xk1


def mean_matching_loss(cache: TrajectoryCache, net_to_train: DriftNet,
                       net_generating: DriftNet, schedule: GammaSchedule,
                       ks: np.ndarray | None = None,
                       idx: np.ndarray | None = None,
                       with_grad: bool = False):
    """Mean-squared mismatch between the trained map and its drift-corrected
    chain target, averaged over batch and steps.

    Forward caches train the backward map B(k+1, x) = x + gamma b(k+1, x) on
    the target X_{k+1} + F_k(X_k) - F_k(X_{k+1}); backward caches train the
    forward map symmetrically.  With ks/idx omitted the loss runs over every
    transition of every chain (the deterministic full-cache value).
    """
    n_chains, n_plus_1, d = cache.chains.shape
    n = n_plus_1 - 1
    if ks is None:
        idx = np.repeat(np.arange(n_chains), n)
        ks = np.tile(np.arange(n), n_chains)
    xk, xk1 = _pairs(cache, ks, idx)
    g = schedule.gammas[ks][:, None]

    if cache.direction == "forward":
        # target = X_{k+1} + F_k(X_k) - F_k(X_{k+1}) = X_k + g(f(k,Xk) - f(k,Xk1))
        f_k = net_generating(ks, xk)
        f_k1 = net_generating(ks, xk1)
        target = xk + g * (f_k - f_k1)
        out, net_cache = net_to_train.forward(ks + 1, xk1)
        pred = xk1 + g * out
    else:
        # target = X_k + B_{k+1}(X_{k+1}) - B_{k+1}(X_k) = X_{k+1} + g(b(k+1,Xk1) - b(k+1,Xk))
        b_k1 = net_generating(ks + 1, xk1)
        b_k = net_generating(ks + 1, xk)
        target = xk1 + g * (b_k1 - b_k)
        out, net_cache = net_to_train.forward(ks, xk)
        pred = xk + g * out

    diff = pred - target
    loss = float(np.mean(diff**2))
    if not with_grad:
        return loss
    dout = (2.0 / diff.size) * diff * g
    grads = net_to_train.backward(net_cache, dout)
    return loss, grads


def _train_half(model: DsbModel, data: np.ndarray, cfg: DsbConfig, half: int,
                rng: np.random.Generator, history: list) -> None:
    """One IPF half-iteration: refresh trajectory caches periodically and run
    a fixed budget of Adam steps on the mean-matching loss."""
    training_backward = half % 2 == 0
    net = model.backward_net if training_backward else model.forward_net
    frozen = model.forward_net if training_backward else model.backward_net
    opt = Adam(net, lr=cfg.lr)
    cache = None
    n = model.schedule.n_steps
    cache_size = min(cfg.cache_size, max(cfg.batch, len(data)))
    for step in range(cfg.inner_steps):
        if step % cfg.refresh_every == 0:
            if training_backward:
                x0 = data[rng.integers(len(data), size=cache_size)]
                cache = forward_rollout(x0, model, rng)
            else:
                xn = rng.standard_normal((cache_size, model.d))
                cache = backward_rollout(xn, model, rng)
        idx = rng.integers(cache.chains.shape[0], size=cfg.batch)
        ks = rng.integers(n, size=cfg.batch)
        loss, grads = mean_matching_loss(
            cache, net, frozen, model.schedule, ks=ks, idx=idx, with_grad=True
        )
        if not np.isfinite(loss):
            raise Diverged(f"loss became non-finite in half-iteration {half}, step {step}")
        opt.step(grads)
        if step % cfg.log_every == 0 or step == cfg.inner_steps - 1:
            history.append((half, step, loss))


def ipf_train(data: np.ndarray, cfg: DsbConfig,
              tspec_digest: str = "",
              checkpoint_cb=None,
              initial: DsbModel | None = None) -> tuple[DsbModel, list]:
    """Alternating IPF half-iterations of mean-matching training.

    data: (n_samples, d).  Returns (model, loss history) where history rows
    are (half_iteration, inner_step, loss).  checkpoint_cb(model) runs after
    every completed half-iteration; pass `initial` to resume training.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] < 2:
        raise ValueError("need at least two samples to train")
    rng = np.random.default_rng(cfg.seed)
    if initial is None:
        mean = data.mean(axis=0)
        centered = data - mean
        schedule = GammaSchedule.constant_for_data(cfg.n_steps, float(centered.var()))
        model = DsbModel(
            schedule=schedule,
            forward_net=DriftNet(data.shape[1], cfg.hidden, cfg.n_steps, seed=cfg.seed + 1),
            backward_net=DriftNet(data.shape[1], cfg.hidden, cfg.n_steps, seed=cfg.seed + 2),
            d=data.shape[1],
            data_mean=mean,
            tspec_digest=tspec_digest,
        )
    else:
        model = initial
        if model.d != data.shape[1]:
            raise ValueError("resume model dimension does not match data")
    centered = data - model.data_mean

    history: list = []
    for half in range(model.halves_done, 2 * cfg.ipf_iters):
        history_half: list = []
        _train_half(model, centered, cfg, half, rng, history_half)
        model.halves_done = half + 1
        if checkpoint_cb is not None:
            checkpoint_cb(model)
        if history_half:
            log.info("half %d final loss %.3e", half, history_half[-1][2])
        history.extend(history_half)
    return model, history


def sample(model: DsbModel, count: int, seed: int,
           clamp: tuple[float, float] | None = None) -> np.ndarray:
    """Draw `count` new samples by running the backward chain from the prior.

    Deterministic given the seed.  `clamp` bounds the output componentwise
    (the pipeline passes (0, 1); toy problems pass None)."""
    rng = np.random.default_rng(seed)
    xn = rng.standard_normal((count, model.d))
    cache = backward_rollout(xn, model, rng)
    out = cache.chains[:, 0, :] + model.data_mean
    if clamp is not None:
        out = np.clip(out, clamp[0], clamp[1])
    return out


def score_from_drift(model: DsbModel, k, x: np.ndarray) -> np.ndarray:
    """Implied score estimate s(k, x) = b(k, x)/2 for the zero-reference
    chain (diagnostic)."""
    return model.backward_net(k, np.atleast_2d(x)) / 2.0


def terminal_gaussian_tv(model: DsbModel, data: np.ndarray,
                         n_chains: int = 2000, seed: int = 0) -> float:
    """Total variation between a Gaussian fit of the terminal forward marginal
    (pooled over dimensions) and the N(0,1) prior; schedule sanity check."""
    rng = np.random.default_rng(seed)
    data = np.atleast_2d(data)
    idx = rng.integers(len(data), size=n_chains)
    cache = forward_rollout(data[idx] - model.data_mean, model, rng)
    terminal = cache.chains[:, -1, :].ravel()
    mu, sd = float(terminal.mean()), float(terminal.std())
    xs = np.linspace(min(-6.0, mu - 6 * sd), max(6.0, mu + 6 * sd), 4001)
    fitted = np.exp(-0.5 * ((xs - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
    prior = np.exp(-0.5 * xs**2) / np.sqrt(2 * np.pi)
    return float(0.5 * np.trapezoid(np.abs(fitted - prior), xs))


def save_model(path: str | Path, model: DsbModel) -> None:
    header = {
        "d": model.d,
        "hidden": model.forward_net.hidden,
        "n_steps": model.schedule.n_steps,
        "halves_done": model.halves_done,
        "tspec_digest": model.tspec_digest,
        "n_params": model.forward_net.n_params,
    }
    blob = json.dumps(header).encode()
    chunks = [
        DSB_MAGIC,
        struct.pack("<I", len(blob)),
        blob,
        model.schedule.gammas.astype("<f8").tobytes(),
        model.data_mean.astype("<f8").tobytes(),
        model.forward_net.pack().astype("<f8").tobytes(),
        model.backward_net.pack().astype("<f8").tobytes(),
    ]
    Path(path).write_bytes(b"".join(chunks))


def load_model(path: str | Path) -> DsbModel:
    buf = Path(path).read_bytes()
    if buf[:4] != DSB_MAGIC:
        raise ValueError("bad model checkpoint magic")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8: 8 + hlen])
    offset = 8 + hlen
    n, d = header["n_steps"], header["d"]

    def take(count):
        nonlocal offset
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).copy()
        offset += 8 * count
        return arr

    gammas = take(n)
    mean = take(d)
    fwd = DriftNet(d, header["hidden"], n)
    fwd.unpack(take(fwd.n_params))
    bwd = DriftNet(d, header["hidden"], n)
    bwd.unpack(take(bwd.n_params))
    return DsbModel(
        schedule=GammaSchedule(gammas),
        forward_net=fwd,
        backward_net=bwd,
        d=d,
        data_mean=mean,
        halves_done=header["halves_done"],
        tspec_digest=header["tspec_digest"],
    )


class DiffusionBridge(BaseEstimator):
    """Sklearn-style front end: fit(X) learns the bridge from an
    (n_samples, d) array; sample(count, seed) draws new rows."""

    def __init__(self, n_steps: int = 30, ipf_iters: int = 5, batch: int = 64,
                 lr: float = 1e-3, inner_steps: int = 5000, hidden: int = 256,
                 cache_size: int = 1024, refresh_every: int = 500, seed: int = 0):
        self.n_steps = n_steps
        self.ipf_iters = ipf_iters
        self.batch = batch
        self.lr = lr
        self.inner_steps = inner_steps
        self.hidden = hidden
        self.cache_size = cache_size
        self.refresh_every = refresh_every
        self.seed = seed

    def _config(self) -> DsbConfig:
        return DsbConfig(
            n_steps=self.n_steps, ipf_iters=self.ipf_iters, batch=self.batch,
            lr=self.lr, inner_steps=self.inner_steps, hidden=self.hidden,
            cache_size=self.cache_size, refresh_every=self.refresh_every,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        self.model_, self.history_ = ipf_train(np.asarray(X, dtype=float), self._config())
        return self

    def sample(self, count: int, seed: int = 0,
               clamp: tuple[float, float] | None = None) -> np.ndarray:
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "model_")
        return sample(self.model_, count, seed, clamp=clamp)
