"""Point-wise local diffusion for LiDAR completion.

The forward process perturbs each target point around its own position,
noised = target + sqrt(1 - alpha_bar_t) * eps, with no scaling of the
mean, so absolute scale is preserved at every step.  The reverse sampler
is the first-order rule consistent with that parameterization: estimate
x0 = x_t - sigma_t * eps_hat, then re-noise to the next visited step
(with eps_hat deterministically, or fresh noise ancestrally).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .errors import ContractError, DataError
from .geometry import RigidTransform
from .objectives import OptimConfig, OptimState, adamw_step
from .scene import PointCloud

T_EMBED_DIM = 32
KNN_CONDITION = 8
HIDDEN = 64


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray        # (T,), linear from beta0 to betaT
    alpha_bar: np.ndarray   # (T,), running product of (1 - beta)

    def sigma(self, t: int) -> float:
        """Perturbation std sqrt(1 - alpha_bar_t); t is 1-based."""
        if not 1 <= t <= self.T:
            raise ContractError(f"step {t} outside 1..{self.T}")
        return float(np.sqrt(1.0 - self.alpha_bar[t - 1]))


def make_schedule(T: int = 1000, beta0: float = 3.0e-5,
                  betaT: float = 7.0e-3) -> NoiseSchedule:
    if T < 1:
        raise ContractError("T must be >= 1")
    if not (0.0 < beta0 <= betaT < 1.0):
        raise ContractError("need 0 < beta0 <= betaT < 1")
    beta = np.linspace(beta0, betaT, T)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T, beta, alpha_bar)


def forward_perturb(targets, t: int, schedule: NoiseSchedule, rng):
    """noised = targets + sigma_t * eps with eps ~ N(0, I) per coordinate."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    sigma = schedule.sigma(t)
    eps = rng.standard_normal(targets.shape)
    return targets + sigma * eps, eps


# ---------------------------------------------------------------------------
# denoisers

def sinusoidal_embedding(t: int, dim: int = T_EMBED_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class MlpDenoiser:
    """Per-point noise predictor conditioned on the sparse input scan.

    Features per point: scaled coordinates, a sinusoidal embedding of
    the step, and the mean offset to the 8 nearest condition points
    scaled by 1/sigma_t (clipped), which puts the offsets in noise
    units.  The prediction is a zero-initialized 3-layer GELU MLP
    correction added to the nearest-neighbor noise estimate (the negated
    normalized offset), so an untrained sampler projects points onto the
    conditioning scan and training learns deviations from it.
    """

    OFFSET_CLIP = 8.0    # clip for the pooled-offset features
    TRUST_RADIUS = 1.5   # snap baseline active within this many sigma
    COORD_SCALE = 0.1    # meters -> feature units, keeps coords O(1)

    def __init__(self, seed: int = 0, hidden: int = HIDDEN,
                 schedule: "NoiseSchedule | None" = None):
        self.schedule = schedule if schedule is not None else make_schedule()
        rng = np.random.default_rng(seed)
        d_in = 3 + T_EMBED_DIM + 3
        self.params = {
            "denoiser.w1": rng.normal(size=(d_in, hidden)) / np.sqrt(d_in),
            "denoiser.b1": np.zeros(hidden),
            "denoiser.w2": rng.normal(size=(hidden, hidden)) / np.sqrt(hidden),
            "denoiser.b2": np.zeros(hidden),
            "denoiser.w3": np.zeros((hidden, 3)),  # zero head: identity residual at init
            "denoiser.b3": np.zeros(3),
        }
        self._cond_cache = (None, None)

    def _condition_tree(self, condition: PointCloud) -> cKDTree:
        key = id(condition)
        if self._cond_cache[0] != key:
            self._cond_cache = (key, cKDTree(condition.world_points()))
        return self._cond_cache[1]

    def inputs(self, points, condition: PointCloud, t: int):
        """(features, baseline): the MLP input matrix and the snap-to-
        nearest noise estimate the MLP output corrects."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(condition) == 0:
            raise DataError("empty condition cloud")
        tree = self._condition_tree(condition)
        k = min(KNN_CONDITION, len(condition))
        _, idx = tree.query(points, k=k)
        idx = idx.reshape(points.shape[0], k)
        sigma = self.schedule.sigma(t)
        pooled = (tree.data[idx] - points[:, None, :]).mean(axis=1)
        pooled = np.clip(pooled / sigma, -self.OFFSET_CLIP, self.OFFSET_CLIP)
        nearest = (tree.data[idx[:, 0]] - points) / sigma
        # trust the snap-to-nearest estimate only close-in (in sigma
        # units); beyond that the nearest scan point is rarely the origin
        trusted = np.all(np.abs(nearest) <= self.TRUST_RADIUS, axis=1, keepdims=True)
        baseline = -nearest * trusted
        emb = np.broadcast_to(sinusoidal_embedding(t), (points.shape[0], T_EMBED_DIM))
        feats = np.concatenate([points * self.COORD_SCALE, emb, pooled], axis=1)
        return feats, baseline

    def forward(self, feats, baseline, params=None) -> ad.Tensor:
        p = params if params is not None else self.params
        h = ad.gelu(ad.add(ad.matmul(ad._coerce(feats), ad._coerce(p["denoiser.w1"])),
                           ad._coerce(p["denoiser.b1"])))
        h = ad.gelu(ad.add(ad.matmul(h, ad._coerce(p["denoiser.w2"])),
                           ad._coerce(p["denoiser.b2"])))
        correction = ad.add(ad.matmul(h, ad._coerce(p["denoiser.w3"])),
                            ad._coerce(p["denoiser.b3"]))
        return ad.add(correction, ad.constant(baseline))

    def predict(self, noised, condition: PointCloud, t: int) -> np.ndarray:
        feats, baseline = self.inputs(noised, condition, t)
        return self.forward(feats, baseline).array


class OracleDenoiser:
    """Knows the clean targets; returns the exact noise in the input."""

    def __init__(self, targets, schedule: NoiseSchedule):
        self.targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
        self.schedule = schedule
        self.calls = 0

    def predict(self, noised, condition, t: int) -> np.ndarray:
        self.calls += 1
        noised = np.asarray(noised, dtype=np.float64).reshape(-1, 3)
        return (noised - self.targets) / self.schedule.sigma(t)


class ZeroDenoiser:
    def __init__(self):
        self.calls = 0

    def predict(self, noised, condition, t: int) -> np.ndarray:
        self.calls += 1
        return np.zeros_like(np.asarray(noised, dtype=np.float64))


# ---------------------------------------------------------------------------
# training objective

def diffusion_loss(denoiser, targets, condition: PointCloud,
                   schedule: NoiseSchedule, rng, params=None) -> ad.Tensor:
    """Mean squared error between injected and predicted noise, averaged
    over points and coordinates; t drawn uniformly in 1..T."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    t = int(rng.integers(1, schedule.T + 1))
    noised, eps = forward_perturb(targets, t, schedule, rng)
    if isinstance(denoiser, MlpDenoiser):
        feats, baseline = denoiser.inputs(noised, condition, t)
        pred = denoiser.forward(feats, baseline, params)
    else:
        pred = ad.constant(denoiser.predict(noised, condition, t))
    diff = ad.sub(pred, ad.constant(eps))
    return ad.mean_(ad.mul(diff, diff))


def seed_points(condition: PointCloud, n_out: int) -> np.ndarray:
    """Round-robin duplication of the condition points up to n_out."""
    cond = condition.world_points()
    if cond.shape[0] == 0:
        raise DataError("cannot seed sampling from an empty cloud")
    return cond[np.arange(n_out) % cond.shape[0]]


def reverse_sample(denoiser, condition: PointCloud, schedule: NoiseSchedule,
                   n_out: int, steps: int, mode: str = "deterministic",
                   rng=None) -> PointCloud:
    """Iterative denoising seeded from duplicated condition points.

    Visits `steps` values of t uniformly subsampled from T..1; the final
    output is the x0 estimate at the last visited step.
    """
    if steps > schedule.T:
        raise ContractError("steps must not exceed the schedule length")
    if steps < 1:
        raise ContractError("steps must be >= 1")
    if n_out < len(condition):
        raise ContractError("n_out must be at least the condition point count")
    if mode not in ("deterministic", "ancestral"):
        raise ContractError(f"unknown sampling mode {mode!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    base = seed_points(condition, n_out)
    x = base + schedule.sigma(schedule.T) * rng.standard_normal(base.shape)
    ts = np.round(np.linspace(schedule.T, 1, steps)).astype(int)
    x0 = x
    for i, t in enumerate(ts):
        eps_hat = denoiser.predict(x, condition, int(t))
        x0 = x - schedule.sigma(int(t)) * eps_hat
        if i + 1 < len(ts):
            t_next = int(ts[i + 1])
            renoise = eps_hat if mode == "deterministic" \
                else rng.standard_normal(x.shape)
            x = x0 + schedule.sigma(t_next) * renoise
    intensity = condition.intensity[np.arange(n_out) % len(condition)]
    return PointCloud(x0, intensity, RigidTransform.identity())


# ---------------------------------------------------------------------------
# pre-training

def train_denoiser(corpus, epochs: int, opt: OptimConfig, seed: int = 0,
                   batch_points: int = 512, denoiser: MlpDenoiser | None = None,
                   schedule: NoiseSchedule | None = None, lr: float | None = 2e-4):
    """Train the noise predictor on (sparse scan, dense target) pairs.

    One optimizer step per pair per epoch on a random subsample of the
    target points.  Returns (denoiser, per-step losses).
    """
    if not corpus:
        raise DataError("empty training corpus")
    if schedule is None:
        schedule = make_schedule()
    if denoiser is None:
        denoiser = MlpDenoiser(seed=seed, schedule=schedule)
    rng = np.random.default_rng(seed)
    state = OptimState(opt)
    losses = []
    for _ in range(epochs):
        for cond, target in corpus:
            tpts = target.world_points()
            if tpts.shape[0] > batch_points:
                pick = rng.choice(tpts.shape[0], size=batch_points, replace=False)
                tpts = tpts[pick]
            tape = ad.Tape()
            leaves = {k: tape.leaf(v) for k, v in denoiser.params.items()}
            loss = diffusion_loss(denoiser, tpts, cond, schedule, rng, params=leaves)
            ad.backward(tape, loss)
            grads = {k: tape.grad(t) for k, t in leaves.items()}
            adamw_step(denoiser.params, grads, state, lr_override=lr)
            losses.append(loss.item())
    return denoiser, losses
