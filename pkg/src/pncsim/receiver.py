"""Relay receiver: OFDM demodulation, pilot phase tracking, EM-BP loop.

The pilot-only baseline estimates each node's per-symbol phase drift by
correlating the received pilot tones against the known pilot-times-channel
references, then runs one joint BP decode.  The EM-BP receiver iterates:
decode with the current phase pair, then re-estimate each OFDM symbol's
phase pair by maximizing the posterior-weighted fit of the received tones
with a shrinking particle grid, and finally decodes once more with the
converged phases before taking the per-bit XOR decision.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelRealization
from .codec import JointPairDecoder, PairEvidence, PairPosterior, RaCode
from .frame import Constellation, FrameConfig, ToneMap

# Floor for the effective noise variance so that noiseless ablations yield
# delta-shaped evidence instead of dividing by zero.
_SIGMA_W2_FLOOR = 1e-12


@dataclass(eq=False)
class FreqFrame:
    """Frequency-domain received frame, shape (m_symbols, n_fft)."""

    r: np.ndarray


@dataclass(eq=False)
class PhaseEstimate:
    """Per-symbol phase drift estimates, shape (m_symbols, 2), in [0, 2pi)."""

    theta: np.ndarray
    iteration: int = 0


@dataclass(frozen=True)
class ParticleConfig:
    """Shrinking-grid search parameters: grid is l_grid x l_grid over [0, 2pi)^2."""

    rounds: int = 4
    l_grid: int = 10
    shrink: float = 0.1

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.l_grid < 2:
            raise ValueError("l_grid must be >= 2")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")


@dataclass(frozen=True)
class ReceiverConfig:
    """Tunables of the relay receiver."""

    sigma_w2: float
    em_iters: int = 0
    bp_inner_iters: int = 20
    particle: ParticleConfig = field(default_factory=ParticleConfig)
    # Correlate pilots against (pilot * channel)* so the angle isolates the
    # drift; False reproduces the plain pilot-conjugate correlation.
    ls_includes_channel: bool = True
    # Never return a particle worse than the coarse grid argmax; False keeps
    # the bare shrink-and-argmax behavior.
    particle_grid_fallback: bool = True
    # Keep the previous phase pair whenever the particle search does not
    # improve the per-symbol objective.  Without this the search can only
    # return lattice-descended points, whose quantization error can exceed
    # the pilot estimate's error and then each EM round degrades good
    # phases; False keeps the bare restart-from-lattice behavior.
    em_monotone: bool = True
    # Extra windowed passes of the particle search around the running
    # winner, each narrowing the lattice span by 2/l_grid.  The coarse
    # lattice alone quantizes phases to 2*pi/l_grid, which caps tracking
    # accuracy well above what the data tones support; 0 keeps the bare
    # single-pass search.
    em_refine_passes: int = 1

    def __post_init__(self):
        if self.sigma_w2 <= 0:
            raise ValueError("sigma_w2 must be positive")
        if self.em_iters < 0:
            raise ValueError("em_iters must be >= 0")
        if self.bp_inner_iters < 1:
            raise ValueError("bp_inner_iters must be >= 1")


def _wrap(theta: np.ndarray) -> np.ndarray:
    """Wrap angles into [0, 2pi), guarding the floating-point boundary."""
    out = np.mod(theta, 2.0 * np.pi)
    return np.where(out >= 2.0 * np.pi, 0.0, out)


def effective_noise_var(sigma_n2: float, cfo_spread: float, signal_power: float = 1.0) -> float:
    """Noise-plus-ICI variance the receiver assumes per tone.

    The ICI term uses the small-CFO approximation at the edge of the CFO
    range (|cfo| <= cfo_spread/2), summed over both nodes:
    2 * (pi*cfo_spread/2)^2 / 3 * per-node per-tone signal power.
    """
    ici = 2.0 * (np.pi * cfo_spread / 2.0) ** 2 / 3.0 * signal_power
    return max(sigma_n2 + ici, _SIGMA_W2_FLOOR)


def demodulate(samples: np.ndarray, config: FrameConfig) -> FreqFrame:
    """Strip each symbol's cyclic prefix and take the unitary DFT."""
    samples = np.asarray(samples)
    n_total = config.m_symbols * config.n_s
    if samples.shape != (n_total,):
        raise ValueError(f"expected {n_total} samples, got {samples.shape}")
    blocks = samples.reshape(config.m_symbols, config.n_s)[:, config.n_cp :]
    return FreqFrame(r=np.fft.fft(blocks, norm="ortho", axis=1))


def ls_pilot_phase(
    freq_frame: FreqFrame,
    tone_map: ToneMap,
    h_a: np.ndarray,
    h_b: np.ndarray,
    include_channel: bool = True,
) -> PhaseEstimate:
    """Least-squares pilot correlation phases, independently per node and symbol.

    With ``include_channel`` the correlation reference is the known pilot
    symbol times the known channel, so the angle is the phase drift alone.
    A zero-magnitude correlation falls back to the previous symbol's
    estimate (0 for the first symbol).
    """
    r = freq_frame.r
    m_symbols = r.shape[0]
    theta = np.zeros((m_symbols, 2))
    refs = (
        (tone_map.pilot_tones_a, tone_map.pilot_values_a, h_a),
        (tone_map.pilot_tones_b, tone_map.pilot_values_b, h_b),
    )
    for col, (tones, values, h) in enumerate(refs):
        ref = values * h[tones]
        if not include_channel:
            ref = values
        corr = r[:, tones] @ np.conj(ref)
        mags = np.abs(corr)
        for m in range(m_symbols):
            if mags[m] == 0.0:
                warnings.warn("zero pilot correlation; reusing previous phase estimate")
                theta[m, col] = theta[m - 1, col] if m > 0 else 0.0
            else:
                theta[m, col] = np.angle(corr[m])
    return PhaseEstimate(theta=_wrap(theta), iteration=0)


def _joint_points(constellation: Constellation) -> tuple[np.ndarray, np.ndarray]:
    """Per joint-alphabet entry, the (X_a, X_b) constellation points."""
    q = constellation.size
    joint = np.arange(q * q)
    return constellation.points[joint // q], constellation.points[joint % q]


def pair_evidence(
    freq_frame: FreqFrame,
    chan: ChannelRealization,
    tone_map: ToneMap,
    constellation: Constellation,
    phase: PhaseEstimate,
    sigma_w2: float,
) -> PairEvidence:
    """Gaussian channel evidence on every data tone for every symbol pair.

    Entry (m, i, a*Q+b) is proportional to
    exp(-|R_{m,i} - e^{j theta_a,m} X_a H_a,i - e^{j theta_b,m} X_b H_b,i|^2
    / sigma_w2), normalized per tone in the log domain so no table can
    underflow to all zeros.
    """
    data = tone_map.data_tones
    r = freq_frame.r[:, data]  # (M, N_d)
    xa, xb = _joint_points(constellation)
    rot_a = np.exp(1j * phase.theta[:, 0])[:, None, None]
    rot_b = np.exp(1j * phase.theta[:, 1])[:, None, None]
    hyp = rot_a * chan.h_freq_a[data][None, :, None] * xa[None, None, :]
    hyp += rot_b * chan.h_freq_b[data][None, :, None] * xb[None, None, :]
    log_k = -np.abs(r[:, :, None] - hyp) ** 2 / sigma_w2
    log_k -= log_k.max(axis=2, keepdims=True)
    tables = np.exp(log_k)
    tables /= tables.sum(axis=2, keepdims=True)
    return PairEvidence(tables=tables.reshape(-1, len(xa)))


class PhaseObjective:
    """Posterior-weighted fit of one OFDM symbol's phase drift pair.

    value(theta_a, theta_b) returns the negative expected squared residual
    of the received occupied tones against the phase-rotated hypothesis:
    data tones averaged over the decoder's joint symbol posterior, pilot
    tones against their known symbols (the other node is silent there).
    Larger is better; exactly 0 only for a perfect noiseless fit.  The sums
    over tones and symbol pairs are folded into four sufficient statistics
    so evaluation is O(1) per phase pair.
    """

    def __init__(
        self,
        r_data: np.ndarray,
        h_a_data: np.ndarray,
        h_b_data: np.ndarray,
        posterior: np.ndarray,
        constellation: Constellation,
        pilot_a: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
        pilot_b: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    ):
        xa, xb = _joint_points(constellation)
        a = h_a_data[:, None] * xa[None, :]  # (N_d, Q^2)
        b = h_b_data[:, None] * xb[None, :]
        p = posterior
        self.c0 = float(
            np.sum(np.abs(r_data) ** 2)
            + np.sum(p * (np.abs(a) ** 2 + np.abs(b) ** 2))
        )
        self.s_a = complex(np.sum(np.conj(r_data) * np.sum(p * a, axis=1)))
        self.s_b = complex(np.sum(np.conj(r_data) * np.sum(p * b, axis=1)))
        self.s_ab = complex(np.sum(p * a * np.conj(b)))
        # pilot tones: known symbol for the owner, silence from the other
        if pilot_a is not None:
            r_p, h_p, vals = pilot_a
            ref = vals * h_p
            self.c0 += float(np.sum(np.abs(r_p) ** 2) + np.sum(np.abs(ref) ** 2))
            self.s_a += complex(np.sum(np.conj(r_p) * ref))
        if pilot_b is not None:
            r_p, h_p, vals = pilot_b
            ref = vals * h_p
            self.c0 += float(np.sum(np.abs(r_p) ** 2) + np.sum(np.abs(ref) ** 2))
            self.s_b += complex(np.sum(np.conj(r_p) * ref))

    def value(self, theta_a, theta_b):
        ra = np.exp(1j * np.asarray(theta_a))
        rb = np.exp(1j * np.asarray(theta_b))
        return -(
            self.c0
            - 2.0 * np.real(ra * self.s_a)
            - 2.0 * np.real(rb * self.s_b)
            + 2.0 * np.real(ra * np.conj(rb) * self.s_ab)
        )


def build_phase_objective(
    r_symbol: np.ndarray,
    chan: ChannelRealization,
    tone_map: ToneMap,
    constellation: Constellation,
    posterior_symbol: np.ndarray,
    include_pilots: bool = True,
) -> PhaseObjective:
    """Objective for one OFDM symbol row, with the pilot anchors wired in."""
    data = tone_map.data_tones
    pilot_a = pilot_b = None
    if include_pilots:
        pa, pb = tone_map.pilot_tones_a, tone_map.pilot_tones_b
        pilot_a = (r_symbol[pa], chan.h_freq_a[pa], tone_map.pilot_values_a)
        pilot_b = (r_symbol[pb], chan.h_freq_b[pb], tone_map.pilot_values_b)
    return PhaseObjective(
        r_symbol[data],
        chan.h_freq_a[data],
        chan.h_freq_b[data],
        posterior_symbol,
        constellation,
        pilot_a=pilot_a,
        pilot_b=pilot_b,
    )


def phase_objective(
    theta_pair: tuple[float, float],
    r_symbol: np.ndarray,
    chan: ChannelRealization,
    tone_map: ToneMap,
    constellation: Constellation,
    posterior_symbol: np.ndarray,
    include_pilots: bool = True,
) -> float:
    """Evaluate one symbol's phase fit at a single phase pair."""
    obj = build_phase_objective(
        r_symbol, chan, tone_map, constellation, posterior_symbol, include_pilots
    )
    return float(obj.value(theta_pair[0], theta_pair[1]))


def particle_m_step(
    objective: PhaseObjective,
    prev_theta: np.ndarray,
    particle_cfg: ParticleConfig,
    sigma_w2: float,
    grid_fallback: bool = True,
    center: np.ndarray | None = None,
    span: float = 2.0 * np.pi,
) -> np.ndarray:
    """Maximize a symbol's phase objective with a shrinking particle grid.

    Start from the l x l lattice covering ``span`` per axis (by default the
    full [0, 2pi)^2 plane; pass ``center`` and a smaller span to refine
    around a known candidate); for each round, weight the particles by
    exp((value - max value)/sigma_w2) and pull every particle towards the
    weighted mean by the shrink factor; finally return the best particle of
    the last round.  With ``grid_fallback`` the initial lattice argmax
    competes against that particle, so the search never ends below coarse
    grid search.  Degenerate weights return ``prev_theta``.
    """
    l_grid = particle_cfg.l_grid
    base = span * np.arange(l_grid) / l_grid
    if center is not None:
        base = base - span * (l_grid - 1) / (2 * l_grid) + np.asarray(center)[:, None]
        ta, tb = np.meshgrid(base[0], base[1], indexing="ij")
    else:
        ta, tb = np.meshgrid(base, base, indexing="ij")
    particles = np.stack([ta.reshape(-1), tb.reshape(-1)], axis=1)  # (L^2, 2)
    grid0_vals = objective.value(particles[:, 0], particles[:, 1])
    grid0_best = particles[int(np.argmax(grid0_vals))].copy()

    vals = grid0_vals
    for _ in range(particle_cfg.rounds):
        shifted = vals - vals.max()
        weights = np.exp(shifted / sigma_w2)
        total = weights.sum()
        if not np.isfinite(total) or total <= 0.0:
            warnings.warn("degenerate particle weights; keeping previous phase")
            return np.asarray(prev_theta, dtype=float).copy()
        weights /= total
        mean = weights @ particles
        particles = (1.0 - particle_cfg.shrink) * particles + particle_cfg.shrink * mean
        vals = objective.value(particles[:, 0], particles[:, 1])

    best = particles[int(np.argmax(vals))]
    if grid_fallback and np.max(grid0_vals) > np.max(vals):
        best = grid0_best
    return _wrap(best)


@dataclass(eq=False)
class EmBpResult:
    """Everything one EM-BP run produces, including per-iteration history.

    Index k of the histories corresponds to a receiver that stopped after k
    EM iterations (k = 0 is the pilot-only baseline), so a single run at
    the largest wanted k serves every smaller k as well.
    """

    phase: PhaseEstimate
    posterior: PairPosterior
    xor_bits: np.ndarray
    theta_history: np.ndarray  # (em_iters+1, m_symbols, 2)
    xor_history: np.ndarray  # (em_iters+1, k_info)


def pnc_map(pair_bit_posteriors: np.ndarray) -> np.ndarray:
    """Per-bit XOR decision from (b_a, b_b) tables; ties decide 0."""
    t = np.asarray(pair_bit_posteriors)
    p_xor1 = t[:, 1] + t[:, 2]
    p_xor0 = t[:, 0] + t[:, 3]
    return (p_xor1 > p_xor0).astype(np.int64)


def em_bp_receive(
    freq_frame: FreqFrame,
    chan: ChannelRealization,
    frame_cfg: FrameConfig,
    tone_map: ToneMap,
    constellation: Constellation,
    ra_code: RaCode,
    rx_cfg: ReceiverConfig,
    decoder: JointPairDecoder | None = None,
) -> EmBpResult:
    """Run pilot initialization, the EM-BP loop, and the final XOR decision.

    With ``em_iters == 0`` this degenerates to the pilot-only baseline:
    LS phases followed by a single BP decode.
    """
    if decoder is None:
        decoder = JointPairDecoder(ra_code, constellation)
    n_data = len(tone_map.data_tones)
    m_symbols = frame_cfg.m_symbols
    k_total = rx_cfg.em_iters

    theta = ls_pilot_phase(
        freq_frame, tone_map, chan.h_freq_a, chan.h_freq_b, rx_cfg.ls_includes_channel
    ).theta
    theta_history = np.empty((k_total + 1, m_symbols, 2))
    xor_history = np.empty((k_total + 1, ra_code.k_info), dtype=np.int64)
    theta_history[0] = theta

    posterior = None
    for k in range(k_total + 1):
        estimate = PhaseEstimate(theta=theta, iteration=k)
        evidence = pair_evidence(
            freq_frame, chan, tone_map, constellation, estimate, rx_cfg.sigma_w2
        )
        posterior = decoder.decode(evidence, rx_cfg.bp_inner_iters)
        xor_history[k] = pnc_map(posterior.pair_bit)
        if k == k_total:
            break
        tables = posterior.pair_symbol.reshape(m_symbols, n_data, -1)
        new_theta = np.empty_like(theta)
        for m in range(m_symbols):
            obj = build_phase_objective(
                freq_frame.r[m], chan, tone_map, constellation, tables[m]
            )
            cand = particle_m_step(
                obj, theta[m], rx_cfg.particle, rx_cfg.sigma_w2, rx_cfg.particle_grid_fallback
            )
            if rx_cfg.em_monotone and obj.value(cand[0], cand[1]) < obj.value(
                theta[m, 0], theta[m, 1]
            ):
                cand = theta[m]
            span = 2.0 * np.pi
            for _ in range(rx_cfg.em_refine_passes):
                span *= 2.0 / rx_cfg.particle.l_grid
                fine = particle_m_step(
                    obj,
                    cand,
                    rx_cfg.particle,
                    rx_cfg.sigma_w2,
                    rx_cfg.particle_grid_fallback,
                    center=cand,
                    span=span,
                )
                if obj.value(fine[0], fine[1]) >= obj.value(cand[0], cand[1]):
                    cand = _wrap(fine)
            new_theta[m] = cand
        theta = new_theta
        theta_history[k + 1] = theta

    return EmBpResult(
        phase=PhaseEstimate(theta=theta, iteration=k_total),
        posterior=posterior,
        xor_bits=xor_history[k_total],
        theta_history=theta_history,
        xor_history=xor_history,
    )
