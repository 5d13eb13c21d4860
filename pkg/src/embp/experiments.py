"""Monte-Carlo experiment runners behind the command-line interface.

Every runner takes an :class:`ExperimentConfig` and returns ``(header, rows)``
ready for CSV output.  Blocks are generated from per-block random streams, so
the numbers do not depend on ``chunk`` (the number of blocks processed at once).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .baselines import PilotConfig, bcjr_map, dd_map_estimate, ml_pilot_estimate
from .channel import ChannelParams, block_rng, get_constellation, random_blocks
from .em import EmSchedule, elbo, embp_run
from .errors import InvalidParameter
from .graph import bp_detect
from .learn import TrainConfig, TrainedWeights, apply_weights, train_weights
from .metrics import (aligned_squared_error, ber, best_rotation, bmd_llrs, order_statistics,
                      rotate_beliefs, squared_error)
from .vae import blind_sigma2, impulse, moment_sigma2, vae_le_run, vae_q

CSV_SCHEMA_VERSION = 1
INIT_NOISE_STREAM = 1_000_000
SURROGATE_CHANNEL = (0.3 - 0.3j, 0.6 - 0.1j, 0.6 - 0.3j)


@dataclass
class ExperimentConfig:
    N: int = 100
    L: int = 5
    constellation: str = "BPSK"
    pdp: str = "uniform"
    snr_db: list = field(default_factory=lambda: [10.0])
    blocks: int = 1000
    chunk: int = 1000
    T: int | None = None  # None: 3 (L + 2)
    S_vae: int = 10
    lr_vae: list = field(default_factory=lambda: [0.1])
    weights: str | None = None
    pilot_fractions: list = field(default_factory=lambda: [0.1, 0.2])
    gammas: list = field(default_factory=lambda: [1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001])
    alphas: list = field(default_factory=lambda: list(np.round(np.arange(0.3, 1.3001, 0.05), 2)))
    channel: list | None = None  # fixed taps; None draws a channel per block
    schedules: list = field(default_factory=lambda: ["serial", "parallel"])
    seed: int = 0
    out: str = "results.csv"

    def __post_init__(self):
        if self.T is None:
            self.T = 3 * (self.L + 2)
        if self.blocks < 1 or self.chunk < 1:
            raise InvalidParameter("blocks and chunk must be >= 1")
        if self.N < 1 or self.L < 0 or self.T < 1 or self.S_vae < 1:
            raise InvalidParameter("N, T, S_vae >= 1 and L >= 0 required")
        if not self.snr_db:
            raise InvalidParameter("snr grid is empty")
        if len(self.lr_vae) not in (1, self.S_vae):
            raise InvalidParameter("lr_vae needs one value or S_vae values")
        if self.channel is not None and len(self.channel) != self.L + 1:
            raise InvalidParameter(f"channel needs L + 1 = {self.L + 1} taps")
        get_constellation(self.constellation)

    @property
    def const(self):
        return get_constellation(self.constellation)

    @property
    def lr(self):
        return self.lr_vae[0] if len(self.lr_vae) == 1 else np.asarray(self.lr_vae)

    def resolved(self) -> dict:
        out = dataclasses.asdict(self)
        if self.channel is not None:
            out["channel"] = [str(complex(c)) for c in self.channel]
        return out


def _stream(snr: float) -> int:
    return int(round(snr * 1000)) + 1_000_000


def _chunks(cfg: ExperimentConfig, snr: float, h=None):
    h = cfg.channel if h is None else h
    for start in range(0, cfg.blocks, cfg.chunk):
        count = min(cfg.chunk, cfg.blocks - start)
        taps = None if h is None else np.asarray(h, dtype=complex)
        yield start, random_blocks(count, cfg.N, cfg.L, cfg.const, snr, cfg.seed, _stream(snr),
                                   cfg.pdp, taps, start)


def _init_noise(cfg, snr, index):
    rng = block_rng(cfg.seed, _stream(snr) + INIT_NOISE_STREAM, index)
    return (rng.standard_normal(cfg.L + 1) + 1j * rng.standard_normal(cfg.L + 1)) / np.sqrt(2)


def _blind_ber(beliefs, h_hat, blk, const):
    rot = best_rotation(h_hat, blk.truth.h, const)
    return bmd_llrs(rotate_beliefs(beliefs, rot, const), const)


def _uniform_failed(result, M):
    beliefs = result.beliefs.copy()
    beliefs[result.failed] = 1.0 / M
    return beliefs


def _vae(cfg, y, h_init=None, keep_trace=False):
    return vae_le_run(y, cfg.L, cfg.S_vae, cfg.lr, h_init=h_init, constellation=cfg.const,
                      keep_trace=keep_trace)


def _embp(cfg, y, theta0, runner=None, keep_trace=False):
    if runner is not None:
        return runner(y, theta0, cfg.const, on_failure="mask", keep_trace=keep_trace)
    return embp_run(y, theta0, EmSchedule.serial(cfg.L, cfg.T), None, cfg.const,
                    keep_trace=keep_trace, on_failure="mask")


def _impulse_theta(cfg, y):
    return ChannelParams(impulse(cfg.L), blind_sigma2(y, cfg.L))


def _stat_columns(name):
    return [f"{name}_{s}" for s in ("mean", "median", "p25", "p75")]


def _stat_values(values):
    s = order_statistics(values)
    return [s.mean, s.median, s.p25, s.p75]


def run_mse_vs_snr(cfg: ExperimentConfig):
    """Channel-estimation squared error of blind and pilot-based estimators per SNR."""
    const = cfg.const
    names = ["vae_le", "embp_impulse", "embp_vae"]
    for f in cfg.pilot_fractions:
        names += [f"pilot_ml_{round(100 * f)}", f"dd_map_{round(100 * f)}"]
    header = ["snr_db"] + [c for n in names for c in _stat_columns(n)]
    rows = []
    for snr in cfg.snr_db:
        errs = {n: [] for n in names}
        for _, blk in _chunks(cfg, snr):
            h = blk.truth.h
            vae = _vae(cfg, blk.y)
            errs["vae_le"].append(aligned_squared_error(vae.theta.h, h, const))
            for name, theta0 in (("embp_impulse", _impulse_theta(cfg, blk.y)), ("embp_vae", vae.theta)):
                res = _embp(cfg, blk.y, theta0)
                errs[name].append(aligned_squared_error(res.theta.h, h, const))
            for f in cfg.pilot_fractions:
                pilots = PilotConfig.prefix(blk.symbols, f)
                tag = round(100 * f)
                errs[f"pilot_ml_{tag}"].append(squared_error(ml_pilot_estimate(blk.y, pilots, cfg.L), h))
                dd = dd_map_estimate(blk.y, pilots, cfg.L, blk.truth.sigma2, const)
                errs[f"dd_map_{tag}"].append(squared_error(dd.h, h))
        row = [snr]
        for n in names:
            row += _stat_values(np.concatenate(errs[n]))
        rows.append(row)
    return header, rows


def run_ber_vs_snr(cfg: ExperimentConfig):
    """Bit error rates of coherent, blind and (optionally) trained detectors per SNR."""
    const = cfg.const
    runner = apply_weights(TrainedWeights.load(cfg.weights)) if cfg.weights else None
    names = ["coherent_map", "coherent_bp", "vae_le", "embp"] + (["embp_star"] if runner else [])
    header = ["snr_db"] + [f"{n}_ber" for n in names]
    rows = []
    for snr in cfg.snr_db:
        wrong = dict.fromkeys(names, 0.0)
        total = 0
        for _, blk in _chunks(cfg, snr):
            bits = blk.bits
            total += bits.size
            llrs = {
                "coherent_map": bmd_llrs(bcjr_map(blk.y, blk.truth, const).beliefs, const),
                "coherent_bp": bmd_llrs(bp_detect(blk.y, blk.truth, cfg.T, constellation=const), const),
            }
            vae = _vae(cfg, blk.y)
            q = vae_q(vae.state.phi, vae.state.sigma2_vae, blk.y, cfg.L, const)
            llrs["vae_le"] = _blind_ber(q, vae.theta.h, blk, const)
            res = _embp(cfg, blk.y, vae.theta)
            llrs["embp"] = _blind_ber(_uniform_failed(res, const.M), res.theta.h, blk, const)
            if runner:
                res = _embp(cfg, blk.y, vae.theta, runner)
                llrs["embp_star"] = _blind_ber(_uniform_failed(res, const.M), res.theta.h, blk, const)
            for n in names:
                wrong[n] += ber(llrs[n], bits) * bits.size
        rows.append([snr] + [wrong[n] / total for n in names])
    return header, rows


def run_init_sensitivity(cfg: ExperimentConfig):
    """Estimation error of VAE-LE and EMBP versus the quality of the initial taps.

    ``genie`` rows perturb the true taps with variance-``gamma`` noise; the
    ``impulse`` row starts both from the blind impulse and the ``vae_init`` row
    feeds the VAE-LE result into EMBP.
    """
    const = cfg.const
    snr = cfg.snr_db[0]
    header = ["init", "gamma", "init_se_mean"] + _stat_columns("vae_le") + _stat_columns("embp")
    rows = []
    for gamma in list(cfg.gammas) + ["impulse", "vae_init"]:
        init_se, vae_se, embp_se = [], [], []
        for start, blk in _chunks(cfg, snr):
            h = blk.truth.h
            if gamma == "impulse" or gamma == "vae_init":
                h_init = np.broadcast_to(impulse(cfg.L), h.shape)
            else:
                w = np.stack([_init_noise(cfg, snr, start + i) for i in range(len(h))])
                h_init = h + np.sqrt(float(gamma)) * w
            vae = _vae(cfg, blk.y, h_init=h_init)
            if gamma == "vae_init":
                theta0 = vae.theta
                init_se.append(aligned_squared_error(vae.theta.h, h, const))
            else:
                theta0 = ChannelParams(h_init, moment_sigma2(blk.y, h_init, const, cfg.L))
                init_se.append(squared_error(h_init, h))
            res = _embp(cfg, blk.y, theta0)
            vae_se.append(aligned_squared_error(vae.theta.h, h, const))
            embp_se.append(aligned_squared_error(res.theta.h, h, const))
        label = "genie" if not isinstance(gamma, str) else gamma
        g = float(gamma) if label == "genie" else float("nan")
        rows.append([label, g, float(np.mean(np.concatenate(init_se)))]
                    + _stat_values(np.concatenate(vae_se)) + _stat_values(np.concatenate(embp_se)))
    return header, rows


def run_alpha_scan(cfg: ExperimentConfig):
    """BER and ELBO of BP and exact detection on the scaled channels alpha * h."""
    const = cfg.const
    h0 = np.asarray(cfg.channel if cfg.channel is not None else SURROGATE_CHANNEL, dtype=complex)
    if len(h0) != cfg.L + 1:
        raise InvalidParameter(f"alpha scan channel has {len(h0)} taps, L={cfg.L}")
    snr = cfg.snr_db[0]
    header = ["alpha", "ber_bp", "ber_map", "elbo_bp", "elbo_app"]
    sums = np.zeros((len(cfg.alphas), 4))
    for _, blk in _chunks(cfg, snr, h0):
        for k, a in enumerate(cfg.alphas):
            theta = ChannelParams(a * h0, blk.truth.sigma2)
            b = bp_detect(blk.y, theta, cfg.T, constellation=const)
            exact = bcjr_map(blk.y, theta, const)
            sums[k] += [
                ber(bmd_llrs(b, const), blk.bits) * len(blk.y),
                ber(bmd_llrs(exact.beliefs, const), blk.bits) * len(blk.y),
                np.sum(elbo(b, blk.y, theta, const)),
                np.sum(exact.log_evidence),
            ]
    sums /= cfg.blocks
    return header, [[float(a)] + list(s) for a, s in zip(cfg.alphas, sums)]


def run_iteration_trace(cfg: ExperimentConfig):
    """Mean squared error after every VAE-LE step and every EMBP iteration.

    VAE-LE steps are indexed ``s - S_vae`` (non-positive); EMBP iterations
    start at 1 from the VAE-LE result.
    """
    const = cfg.const
    snr = cfg.snr_db[0]
    runners = {}
    for name in cfg.schedules:
        if name == "serial":
            runners[name] = apply_weights(TrainedWeights.identity(cfg.L, cfg.T))
        elif name == "parallel":
            s = EmSchedule.parallel(cfg.L, cfg.T)
            runners[name] = apply_weights(TrainedWeights(np.ones(cfg.T), s.beta_em))
        elif name == "learned":
            if not cfg.weights:
                raise InvalidParameter("learned schedule needs a weights file")
            runners[name] = apply_weights(TrainedWeights.load(cfg.weights))
        else:
            raise InvalidParameter(f"unknown schedule {name!r}")
    vae_err = np.zeros(cfg.S_vae + 1)
    traces = {}
    for _, blk in _chunks(cfg, snr):
        h = blk.truth.h
        vae = _vae(cfg, blk.y, keep_trace=True)
        vae_err += np.array([aligned_squared_error(hs, h, const).sum() for hs in vae.h_trace])
        for name, run in runners.items():
            res = run(blk.y, vae.theta, const, on_failure="mask", keep_trace=True)
            errs = np.array([aligned_squared_error(tv[:, :-1], h, const).sum() for tv in res.trace[1:]])
            traces[name] = traces.get(name, 0.0) + errs
    header = ["algorithm", "iteration", "mean_se"]
    rows = [["vae_le", s - cfg.S_vae, e / cfg.blocks] for s, e in enumerate(vae_err)]
    for name, errs in traces.items():
        rows += [[name, t + 1, e / cfg.blocks] for t, e in enumerate(errs)]
    return header, rows


def run_training(train_cfg: TrainConfig, weights_path: str):
    """Train weights, save them and return the per-step loss history."""
    history = []
    weights = train_weights(train_cfg, history)
    weights.save(weights_path)
    return ["step", "loss", "k_prune"], [[h.step, h.loss, h.k_prune] for h in history]


def schedule_report(weights: TrainedWeights):
    """One row per iteration: BP weight, then the EM weights of h_0..h_L and sigma2."""
    header = ["t", "beta_bp"] + [f"h{k}" for k in range(weights.L + 1)] + ["sigma2"]
    rows = []
    for t in range(weights.T):
        em = np.where(weights.mask[t], 0.0, weights.beta_em[t])
        rows.append([t + 1, float(weights.beta_bp[t])] + [float(v) for v in em])
    return header, rows

