"""Monte Carlo experiment driver: SNR sweeps, BER/MSE metrics, CSV output.

Every trial draws a fresh channel, CFO pair, delay, and payload, then runs
all configured receivers on the identical received samples (the EM-BP run
at the largest requested iteration count also yields every smaller count,
including the pilot-only baseline, from its per-iteration history).  Trial
RNG streams are derived from (master_seed, snr index, trial index), so
results are bit-identical whether trials run serially or in parallel.
"""

from __future__ import annotations

import configparser
import csv
import multiprocessing
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import channel as chan_mod
from . import frame as frame_mod
from . import receiver as rx_mod
from .codec import JointPairDecoder, RaCode, ra_encode

_BATCH = 8  # stop-condition check granularity; fixed so results never depend on jobs


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one Monte Carlo sweep."""

    snr_db_list: tuple = (4.0, 6.0, 8.0, 10.0, 12.0)
    trials_per_snr: int = 1000
    min_errors: int = 100
    # one lost frame contributes ~k_info/2 XOR errors, so burst-dominated
    # points can hit min_errors after a handful of frames; a frame floor
    # keeps such points statistically meaningful
    min_frames: int = 1
    modulation: str = frame_mod.QPSK
    m_symbols: int = 10
    interleaver_seed: int = 2024
    channel_kind: str = "flat"  # "flat" or "selective"
    n_taps: int = 4
    decay: float = 1.0
    delta: float = 0.1
    tau: int | None = None  # None draws uniformly from the CP-safe range
    receivers: tuple = ("baseline", "em_bp")
    em_bp_k: tuple = (7,)
    bp_inner_iters: int = 20
    particle_rounds: int = 4
    particle_l: int = 10
    particle_shrink: float = 0.1
    em_refine_passes: int = 0
    sigma_w2_override: float | None = None
    ls_includes_channel: bool = True
    noiseless: bool = False
    master_seed: int = 1
    output_path: str = "result.csv"
    jobs: int = 1

    def __post_init__(self):
        if not self.snr_db_list:
            raise ValueError("snr list must be non-empty")
        if self.trials_per_snr < 1:
            raise ValueError("trials_per_snr must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.channel_kind not in ("flat", "selective"):
            raise ValueError(f"unknown channel kind {self.channel_kind!r}")
        bad = set(self.receivers) - {"baseline", "em_bp"}
        if bad:
            raise ValueError(f"unknown receivers {sorted(bad)}")
        if not self.receivers:
            raise ValueError("at least one receiver must be configured")
        if "em_bp" in self.receivers and not self.em_bp_k:
            raise ValueError("em_bp requested but no iteration counts given")
        if any(k < 1 for k in self.em_bp_k):
            raise ValueError("em_bp iteration counts must be >= 1")

    def reported(self) -> list[tuple[str, int]]:
        """(receiver label, em iteration count) rows, in output order."""
        rows = []
        if "baseline" in self.receivers:
            rows.append(("baseline", 0))
        if "em_bp" in self.receivers:
            rows.extend(("em_bp", k) for k in sorted(self.em_bp_k))
        return rows


@dataclass
class ResultRow:
    receiver: str
    em_iters: int
    snr_db: float
    ber: float
    mse_a: float
    mse_b: float
    bits: int
    frames: int
    seconds: float
    errors: int = 0  # kept for interval computation; not a CSV column


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[ResultRow] = field(default_factory=list)

    def row(self, receiver: str, em_iters: int, snr_db: float) -> ResultRow:
        for r in self.rows:
            if r.receiver == receiver and r.em_iters == em_iters and r.snr_db == snr_db:
                return r
        raise KeyError((receiver, em_iters, snr_db))


def mse_metric(estimated, truth) -> np.ndarray:
    """Per-node mean of |e^{j est} - e^{j true}|^2 over the OFDM symbols."""
    est = estimated.phases if hasattr(estimated, "phases") else np.asarray(estimated)
    tru = truth.phases if hasattr(truth, "phases") else np.asarray(truth)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {tru.shape}")
    return np.mean(np.abs(np.exp(1j * est) - np.exp(1j * tru)) ** 2, axis=0)


def wilson_interval(errors: int, total: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if total <= 0:
        return (0.0, 1.0)
    p = errors / total
    denom = 1.0 + z * z / total
    center = (p + z * z / (2 * total)) / denom
    half = z * np.sqrt(p * (1 - p) / total + z * z / (4 * total * total)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass(eq=False)
class TrialMetrics:
    """Per-frame outcome for every reported receiver (same index order)."""

    xor_errors: np.ndarray  # (n_reported,)
    bits: int
    mse: np.ndarray  # (n_reported, 2)


@dataclass(eq=False)
class _TrialContext:
    """Static per-experiment objects shared by all trials."""

    cfg: ExperimentConfig
    frame_cfg: frame_mod.FrameConfig
    tone_map: frame_mod.ToneMap
    constellation: frame_mod.Constellation
    ra_code: RaCode
    decoder: JointPairDecoder
    report_ks: tuple


def _make_context(cfg: ExperimentConfig) -> _TrialContext:
    ks = tuple(k for _, k in cfg.reported())
    frame_cfg = frame_mod.default_config(cfg.modulation, cfg.m_symbols, max(ks))
    ra_code = RaCode.build(frame_cfg.k_info, cfg.interleaver_seed)
    constellation = frame_cfg.constellation()
    return _TrialContext(
        cfg=cfg,
        frame_cfg=frame_cfg,
        tone_map=frame_cfg.tone_map(),
        constellation=constellation,
        ra_code=ra_code,
        decoder=JointPairDecoder(ra_code, constellation),
        report_ks=ks,
    )


def _receiver_config(ctx: _TrialContext, sigma_n2: float) -> rx_mod.ReceiverConfig:
    cfg = ctx.cfg
    sigma_w2 = cfg.sigma_w2_override
    if sigma_w2 is None:
        sigma_w2 = rx_mod.effective_noise_var(sigma_n2, cfg.delta)
    return rx_mod.ReceiverConfig(
        sigma_w2=sigma_w2,
        em_iters=max(ctx.report_ks),
        bp_inner_iters=cfg.bp_inner_iters,
        particle=rx_mod.ParticleConfig(
            rounds=cfg.particle_rounds, l_grid=cfg.particle_l, shrink=cfg.particle_shrink
        ),
        ls_includes_channel=cfg.ls_includes_channel,
        em_refine_passes=cfg.em_refine_passes,
    )


def run_single_trial(
    ctx: _TrialContext, snr_idx: int, trial_idx: int, sigma_n2: float
) -> TrialMetrics:
    """One frame pair end to end; all reported receivers see the same samples."""
    cfg = ctx.cfg
    fc = ctx.frame_cfg
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.master_seed, snr_idx, trial_idx])
    )
    if cfg.channel_kind == "flat":
        n_taps_b = 1
        draw = lambda tau, ca, cb: chan_mod.sample_flat(rng, fc.n_fft, tau, ca, cb)
    else:
        n_taps_b = cfg.n_taps
        draw = lambda tau, ca, cb: chan_mod.sample_selective(
            cfg.n_taps, cfg.decay, rng, fc.n_fft, tau, ca, cb
        )
    if cfg.tau is None:
        tau = int(rng.integers(0, fc.n_cp - n_taps_b + 2))
    else:
        tau = cfg.tau
    if cfg.delta > 0:
        cfo_a, cfo_b = rng.uniform(-cfg.delta / 2, cfg.delta / 2, size=2)
    else:
        cfo_a = cfo_b = 0.0
    chan = draw(tau, cfo_a, cfo_b)

    info_a = rng.integers(0, 2, fc.k_info)
    info_b = rng.integers(0, 2, fc.k_info)
    frame_a = frame_mod.transmit_frame(
        ra_encode(info_a, ctx.ra_code), fc, ctx.tone_map, ctx.constellation, "a"
    )
    frame_b = frame_mod.transmit_frame(
        ra_encode(info_b, ctx.ra_code), fc, ctx.tone_map, ctx.constellation, "b"
    )
    samples = chan_mod.simulate_uplink(
        frame_a, frame_b, chan, chan_mod.NoiseModel(sigma_n2), rng, fc
    )
    freq = rx_mod.demodulate(samples, fc)
    rx_cfg = _receiver_config(ctx, sigma_n2)
    out = rx_mod.em_bp_receive(
        freq, chan, fc, ctx.tone_map, ctx.constellation, ctx.ra_code, rx_cfg, ctx.decoder
    )
    truth = chan_mod.phase_trajectory(chan, fc.m_symbols, fc).phases
    true_xor = np.bitwise_xor(info_a, info_b)
    errors = np.array(
        [int(np.sum(out.xor_history[k] != true_xor)) for k in ctx.report_ks]
    )
    mse = np.stack([mse_metric(out.theta_history[k], truth) for k in ctx.report_ks])
    return TrialMetrics(xor_errors=errors, bits=fc.k_info, mse=mse)


_WORKER_CTX: _TrialContext | None = None


def _init_worker(ctx: _TrialContext):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _worker_trial(args) -> TrialMetrics:
    snr_idx, trial_idx, sigma_n2 = args
    return run_single_trial(_WORKER_CTX, snr_idx, trial_idx, sigma_n2)


def _sigma_n2_for(cfg: ExperimentConfig, frame_cfg: frame_mod.FrameConfig, snr_db: float) -> float:
    if cfg.noiseless:
        return 0.0
    return chan_mod.NoiseModel.from_ebn0_db(
        snr_db, 1.0 / frame_cfg.code_rate_inv, frame_cfg.bits_per_symbol
    ).sigma_n2


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Execute the sweep: per SNR, run trials until the error-count policy
    (>= min_errors XOR-bit errors for every reported receiver) or the trial
    cap is met, whichever comes first."""
    ctx = _make_context(cfg)
    reported = cfg.reported()
    n_rep = len(reported)
    result = ExperimentResult(config=cfg)
    pool = None
    if cfg.jobs > 1:
        pool = multiprocessing.Pool(cfg.jobs, initializer=_init_worker, initargs=(ctx,))
    try:
        for snr_idx, snr_db in enumerate(cfg.snr_db_list):
            sigma_n2 = _sigma_n2_for(cfg, ctx.frame_cfg, snr_db)
            t0 = time.perf_counter()
            errors = np.zeros(n_rep, dtype=np.int64)
            mse_sum = np.zeros((n_rep, 2))
            bits = 0
            frames = 0
            while frames < cfg.trials_per_snr and (
                frames < cfg.min_frames
                or frames == 0
                or int(errors.min()) < cfg.min_errors
            ):
                batch = range(frames, min(frames + _BATCH, cfg.trials_per_snr))
                tasks = [(snr_idx, t, sigma_n2) for t in batch]
                if pool is not None:
                    metrics = pool.map(_worker_trial, tasks)
                else:
                    metrics = [run_single_trial(ctx, *t) for t in tasks]
                for m in metrics:
                    errors += m.xor_errors
                    mse_sum += m.mse
                    bits += m.bits
                    frames += 1
            elapsed = time.perf_counter() - t0
            for i, (name, k) in enumerate(reported):
                result.rows.append(
                    ResultRow(
                        receiver=name,
                        em_iters=k,
                        snr_db=snr_db,
                        ber=errors[i] / bits,
                        mse_a=mse_sum[i, 0] / frames,
                        mse_b=mse_sum[i, 1] / frames,
                        bits=bits,
                        frames=frames,
                        seconds=elapsed,
                        errors=int(errors[i]),
                    )
                )
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    # deterministic row order: receiver block first, SNR ascending inside
    order = {rep: i for i, rep in enumerate(reported)}
    result.rows.sort(key=lambda r: (order[(r.receiver, r.em_iters)], r.snr_db))
    return result


CSV_COLUMNS = ("receiver", "em_iters", "snr_db", "ber", "mse_a", "mse_b", "bits", "frames", "seconds")


def emit_csv(result: ExperimentResult, path: str) -> None:
    """Write one row per (receiver, em_iters, snr); floats use shortest
    round-trip decimal form, so parsing recovers them exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in result.rows:
            writer.writerow(
                [
                    r.receiver,
                    r.em_iters,
                    repr(float(r.snr_db)),
                    repr(float(r.ber)),
                    repr(float(r.mse_a)),
                    repr(float(r.mse_b)),
                    r.bits,
                    r.frames,
                    repr(float(r.seconds)),
                ]
            )


def parse_csv(path: str) -> list[ResultRow]:
    """Inverse of emit_csv (errors are not serialized and read back as 0)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header in {path}")
        for rec in reader:
            rows.append(
                ResultRow(
                    receiver=rec["receiver"],
                    em_iters=int(rec["em_iters"]),
                    snr_db=float(rec["snr_db"]),
                    ber=float(rec["ber"]),
                    mse_a=float(rec["mse_a"]),
                    mse_b=float(rec["mse_b"]),
                    bits=int(rec["bits"]),
                    frames=int(rec["frames"]),
                    seconds=float(rec["seconds"]),
                )
            )
    return rows


def load_config(path: str) -> ExperimentConfig:
    """Read the key = value experiment file (sections mirror the modules)."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(path)
    kw = {}
    if parser.has_section("frame"):
        sec = parser["frame"]
        if "modulation" in sec:
            kw["modulation"] = sec["modulation"].strip().lower()
        if "m_symbols" in sec:
            kw["m_symbols"] = sec.getint("m_symbols")
    if parser.has_section("code"):
        sec = parser["code"]
        if "interleaver_seed" in sec:
            kw["interleaver_seed"] = sec.getint("interleaver_seed")
    if parser.has_section("channel"):
        sec = parser["channel"]
        if "kind" in sec:
            kw["channel_kind"] = sec["kind"].strip().lower()
        if "taps" in sec:
            kw["n_taps"] = sec.getint("taps")
        if "decay" in sec:
            kw["decay"] = sec.getfloat("decay")
        if "delta" in sec:
            kw["delta"] = sec.getfloat("delta")
        if "tau" in sec:
            raw = sec["tau"].strip().lower()
            kw["tau"] = None if raw == "random" else int(raw)
    if parser.has_section("receiver"):
        sec = parser["receiver"]
        if "receivers" in sec:
            kw["receivers"] = tuple(s.strip() for s in sec["receivers"].split(",") if s.strip())
        if "em_bp_k" in sec:
            kw["em_bp_k"] = tuple(int(s) for s in sec["em_bp_k"].split(",") if s.strip())
        if "bp_iters" in sec:
            kw["bp_inner_iters"] = sec.getint("bp_iters")
        if "particle_rounds" in sec:
            kw["particle_rounds"] = sec.getint("particle_rounds")
        if "particle_l" in sec:
            kw["particle_l"] = sec.getint("particle_l")
        if "particle_shrink" in sec:
            kw["particle_shrink"] = sec.getfloat("particle_shrink")
        if "em_refine_passes" in sec:
            kw["em_refine_passes"] = sec.getint("em_refine_passes")
        if "sigma_w2" in sec:
            raw = sec["sigma_w2"].strip().lower()
            kw["sigma_w2_override"] = None if raw == "auto" else float(raw)
        if "ls_includes_channel" in sec:
            kw["ls_includes_channel"] = sec.getboolean("ls_includes_channel")
    if parser.has_section("run"):
        sec = parser["run"]
        if "snr_db" in sec:
            kw["snr_db_list"] = tuple(float(s) for s in sec["snr_db"].split(",") if s.strip())
        if "trials_per_snr" in sec:
            kw["trials_per_snr"] = sec.getint("trials_per_snr")
        if "min_errors" in sec:
            kw["min_errors"] = sec.getint("min_errors")
        if "min_frames" in sec:
            kw["min_frames"] = sec.getint("min_frames")
        if "noiseless" in sec:
            kw["noiseless"] = sec.getboolean("noiseless")
        if "master_seed" in sec:
            kw["master_seed"] = sec.getint("master_seed")
        if "out" in sec:
            kw["output_path"] = sec["out"]
        if "jobs" in sec:
            kw["jobs"] = sec.getint("jobs")
    return ExperimentConfig(**kw)


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Config with CLI overrides applied (None values are ignored)."""
    actual = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **actual)
