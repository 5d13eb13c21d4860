"""Offline tuning of BP momentum weights and EM schedule weights.

The loss of a weight vector is estimated on freshly sampled batches and
minimized with simultaneous-perturbation gradient estimates (two loss
evaluations per step) fed into Adam.  An L1 term on the smallest schedule
weights drives them toward zero so they can be pruned at the end.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .channel import (BPSK, ChannelParams, Constellation, TransmissionBlock, get_constellation,
                      random_block, stack_blocks)
from .em import EmbpResult, EmSchedule, embp_run
from .errors import InvalidParameter, TrainingDiverged
from .metrics import aligned_squared_error, best_rotation, bmd_llrs, bmi_estimate, rotate_beliefs
from .vae import vae_le_run

WEIGHTS_FORMAT_VERSION = 1
LOSS_KINDS = ("mse", "neg-bmi")
TRAIN_TARGETS = ("bp", "em", "both")
FAILED_SE = 4.0  # squared error of a sign-flipped unit-norm estimate
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50


@dataclass
class TrainConfig:
    loss: str = "neg-bmi"
    batches: int = 200
    batch_size: int = 100
    snr_range_db: tuple = (0.0, 12.0)
    L: int = 5
    T: int | None = None  # None: 3 (L + 2)
    K_em_target: int | None = None  # active schedule entries kept; None disables pruning
    step_size: float = 0.01
    seed: int = 0
    N: int = 100
    l1_weight: float = 0.1
    perturbation: float = 0.05
    train: str = "bp"
    constellation: str = "BPSK"
    pdp: str = "uniform"
    S_vae: int = 10
    lr_vae: float = 0.1

    def __post_init__(self):
        if self.T is None:
            self.T = 3 * (self.L + 2)
        lo, hi = self.snr_range_db
        if lo > hi:
            raise InvalidParameter("snr range must satisfy lo <= hi")
        if self.batch_size < 1 or self.batches < 0 or self.T < 1 or self.L < 0:
            raise InvalidParameter("batch_size, T >= 1 and batches, L >= 0 required")
        if self.loss not in LOSS_KINDS:
            raise InvalidParameter(f"loss must be one of {LOSS_KINDS}")
        if self.train not in TRAIN_TARGETS:
            raise InvalidParameter(f"train must be one of {TRAIN_TARGETS}")
        if self.K_em_target is not None and not 0 <= self.K_em_target <= self.T * (self.L + 2):
            raise InvalidParameter("K_em_target must lie in [0, T (L + 2)]")
        get_constellation(self.constellation)


@dataclass
class TrainedWeights:
    beta_bp: np.ndarray  # (T,)
    beta_em: np.ndarray  # (T, L + 2)
    mask: np.ndarray = field(default=None)  # (T, L + 2) True where pruned

    def __post_init__(self):
        self.beta_bp = np.asarray(self.beta_bp, dtype=float).copy()
        self.beta_em = np.atleast_2d(np.asarray(self.beta_em, dtype=float)).copy()
        if self.mask is None:
            self.mask = np.zeros(self.beta_em.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).copy()
        if self.beta_bp.shape != (self.T,) or self.mask.shape != self.beta_em.shape:
            raise InvalidParameter("weight shapes do not agree")
        self.beta_em[self.mask] = 0.0

    @property
    def T(self) -> int:
        return self.beta_em.shape[0]

    @property
    def L(self) -> int:
        return self.beta_em.shape[1] - 2

    @classmethod
    def identity(cls, L: int, T: int | None = None) -> "TrainedWeights":
        """Unit BP weights and the serial schedule: plain EMBP."""
        schedule = EmSchedule.serial(L, T)
        return cls(np.ones(schedule.T), schedule.beta_em)

    def schedule(self) -> EmSchedule:
        return EmSchedule(self.beta_em)

    def to_dict(self) -> dict:
        return {
            "version": WEIGHTS_FORMAT_VERSION,
            "T": self.T,
            "L": self.L,
            "beta_bp": [float(v) for v in self.beta_bp],
            "beta_em": [[float(v) for v in row] for row in self.beta_em],
            "mask": [[int(v) for v in row] for row in self.mask],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainedWeights":
        if data.get("version") != WEIGHTS_FORMAT_VERSION:
            raise InvalidParameter(f"unsupported weights version {data.get('version')!r}")
        w = cls(data["beta_bp"], data["beta_em"], np.asarray(data["mask"], dtype=bool))
        if (w.T, w.L) != (data["T"], data["L"]):
            raise InvalidParameter("declared T or L does not match the arrays")
        return w

    def save(self, path) -> None:
        # json writes floats with the shortest repr that reads back to the same double
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "TrainedWeights":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidParameter(f"malformed weights file: {exc}") from None
        return cls.from_dict(data)


def sample_dataset(config: TrainConfig, rng: np.random.Generator) -> Iterator[TransmissionBlock]:
    """Endless stream of independent blocks with SNR drawn uniformly from the range."""
    const = get_constellation(config.constellation)
    lo, hi = config.snr_range_db
    while True:
        snr = rng.uniform(lo, hi)
        yield random_block(config.N, config.L, const, snr, rng, config.pdp)


@dataclass
class TrainingBatch:
    blocks: TransmissionBlock
    theta0: ChannelParams  # blind initial estimates, independent of the trained weights


def prepare_batch(blocks: TransmissionBlock, config: TrainConfig) -> TrainingBatch:
    theta0 = vae_le_run(blocks.y, config.L, config.S_vae, config.lr_vae,
                        constellation=config.constellation).theta
    return TrainingBatch(blocks, theta0)


def apply_weights(weights: TrainedWeights) -> Callable[..., EmbpResult]:
    """EMBP runner bound to ``weights``; pruned entries are never computed."""
    schedule = weights.schedule()
    beta_bp = weights.beta_bp.copy()

    def run(y, theta0: ChannelParams, constellation: Constellation | str = BPSK,
            **kwargs) -> EmbpResult:
        L = np.shape(theta0.h)[-1] - 1
        if L != weights.L:
            raise InvalidParameter(f"weights are for L={weights.L}, channel has L={L}")
        return embp_run(y, theta0, schedule, beta_bp, constellation, **kwargs)

    return run


def batch_loss(weights: TrainedWeights, batch: TrainingBatch, loss: str = "neg-bmi",
               constellation: Constellation | str = BPSK) -> float:
    """Mean aligned squared error, or negative BMI, of EMBP with ``weights``.

    Blocks with a numerical failure score the worst value: ``FAILED_SE`` or
    zero-information LLRs.
    """
    if loss not in LOSS_KINDS:
        raise InvalidParameter(f"loss must be one of {LOSS_KINDS}")
    const = get_constellation(constellation)
    blocks = batch.blocks
    res = apply_weights(weights)(blocks.y, batch.theta0, const, on_failure="mask")
    h = blocks.truth.h
    if loss == "mse":
        with np.errstate(invalid="ignore", over="ignore"):
            se = aligned_squared_error(res.theta.h, h, const)
        se = np.where(res.failed | ~np.isfinite(se), FAILED_SE, se)
        return float(np.mean(se))
    rot = best_rotation(res.theta.h, h, const)
    beliefs = np.where(res.failed[:, None, None], 1.0 / const.M, res.beliefs)
    llrs = bmd_llrs(rotate_beliefs(beliefs, rot, const), const)
    return -bmi_estimate(llrs, blocks.bits, const)


def _l1_subgradient(beta_em: np.ndarray, free: np.ndarray, k: int):
    """Value and subgradient of the sum of the ``k`` smallest |beta| among free entries."""
    grad = np.zeros_like(beta_em)
    if k <= 0:
        return 0.0, grad
    flat = np.flatnonzero(free.ravel())
    mags = np.abs(beta_em.ravel()[flat])
    pick = flat[np.argsort(mags, kind="stable")[:k]]
    grad.ravel()[pick] = np.sign(beta_em.ravel()[pick])
    return float(np.abs(beta_em.ravel()[pick]).sum()), grad


@dataclass
class TrainingStep:
    step: int
    loss: float
    k_prune: int


def train_weights(config: TrainConfig, history: list | None = None) -> TrainedWeights:
    """Simultaneous-perturbation training of the EMBP weights.

    Each step samples a batch, evaluates the loss at ``w + delta * d`` and
    ``w - delta * d`` for a Rademacher direction ``d``, adds the L1 subgradient
    on the ``K'`` smallest schedule weights and takes an Adam step.  ``K'``
    ramps linearly to ``T (L + 2) - K_em_target``; those entries are zeroed and
    masked at the end.  ``history`` (a list) receives one record per step.
    """
    from .vae import ADAM_BETA1, ADAM_BETA2, ADAM_EPS

    const = get_constellation(config.constellation)
    rng = np.random.default_rng(config.seed)
    stream = sample_dataset(config, rng)
    weights = TrainedWeights.identity(config.L, config.T)
    T, P = weights.T, config.L + 2
    n_em = T * P
    k_final = 0 if config.K_em_target is None or config.train == "bp" else n_em - config.K_em_target

    w = np.concatenate([weights.beta_bp, weights.beta_em.ravel()])
    trainable = np.zeros(w.size, dtype=bool)
    if config.train in ("bp", "both"):
        trainable[:T] = True
    if config.train in ("em", "both"):
        trainable[T:] = True
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    initial = None
    bad_run = 0

    def unpack(vec):
        return TrainedWeights(vec[:T], vec[T:].reshape(T, P))

    for step in range(config.batches):
        blocks = stack_blocks([next(stream) for _ in range(config.batch_size)])
        batch = prepare_batch(blocks, config)
        k_prune = int(round(k_final * step / max(config.batches - 1, 1)))
        direction = np.where(trainable, rng.choice([-1.0, 1.0], size=w.size), 0.0)
        delta = config.perturbation
        plus = batch_loss(unpack(w + delta * direction), batch, config.loss, const)
        minus = batch_loss(unpack(w - delta * direction), batch, config.loss, const)
        loss = 0.5 * (plus + minus)
        grad = (plus - minus) / (2.0 * delta) * direction
        if config.train in ("em", "both"):
            _, sub = _l1_subgradient(w[T:].reshape(T, P), np.ones((T, P), bool), k_prune)
            grad[T:] += config.l1_weight * sub.ravel()
        if history is not None:
            history.append(TrainingStep(step, loss, k_prune))

        if initial is None:
            initial = loss
        # worse by DIVERGENCE_FACTOR relative to the initial loss magnitude
        if loss - initial > (DIVERGENCE_FACTOR - 1.0) * max(abs(initial), 1e-12):
            bad_run += 1
            if bad_run >= DIVERGENCE_PATIENCE:
                raise TrainingDiverged(
                    f"loss {loss:.4g} exceeded {DIVERGENCE_FACTOR}x the initial {initial:.4g} "
                    f"for {DIVERGENCE_PATIENCE} steps (step {step})")
        else:
            bad_run = 0

        t = step + 1
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * grad ** 2
        update = config.step_size * (m / (1 - ADAM_BETA1 ** t)) / (np.sqrt(v / (1 - ADAM_BETA2 ** t)) + ADAM_EPS)
        w = np.where(trainable, w - update, w)

    beta_em = w[T:].reshape(T, P)
    mask = np.zeros((T, P), dtype=bool)
    if k_final:
        order = np.argsort(np.abs(beta_em).ravel(), kind="stable")[:k_final]
        mask.ravel()[order] = True
    return TrainedWeights(w[:T], beta_em, mask)
