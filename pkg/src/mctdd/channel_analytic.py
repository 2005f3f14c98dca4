"""Closed-form single-receiver (SX) diffusion channel.

A point transmitter releases molecules into an unbounded 3D medium without
flow; a fully absorbing sphere of radius r_rx counts arrivals. The hitting-
time CDF is

    F(d, t) = r_rx / (d + r_rx) * erfc( d / sqrt(4 D t) )

with d the transmitter-to-sphere-SURFACE distance. Callers that track body
centers must pass d = center_distance - r_rx; this keeps F -> r/(d+r) as
t -> inf and F -> 1 as d -> 0.

Per-slot hitting probabilities telescope: the sum of per-sampling-interval
CIR windows inside slot i collapses to F(d, i*T) - F(d, (i-1)*T), so slot
probabilities are computed O(1) instead of summing L_sp terms.
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ChannelParams",
    "WindowProbability",
    "CountMoments",
    "sx_cdf",
    "cir_window",
    "window_prob_sx",
    "count_moments",
    "sample_received",
]


@dataclass(frozen=True, slots=True)
class ChannelParams:
    """Timing and physics shared by all channel evaluations.

    slot_duration must be an integer number of sampling intervals.
    """

    diffusion_coefficient: float  # um^2/s
    sampling_interval: float  # s
    slot_duration: float  # s

    def __post_init__(self):
        if self.diffusion_coefficient <= 0:
            raise ValueError("diffusion coefficient must be > 0")
        if self.sampling_interval <= 0:
            raise ValueError("sampling interval must be > 0")
        ratio = self.slot_duration / self.sampling_interval
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(
                f"slot duration {self.slot_duration} is not a positive integer "
                f"multiple of the sampling interval {self.sampling_interval}"
            )

    @property
    def samples_per_slot(self) -> int:
        return int(round(self.slot_duration / self.sampling_interval))


@dataclass(frozen=True, slots=True)
class WindowProbability:
    """Probability of absorption during one timeslot, with estimator error.

    standard_error is 0 for analytic values.
    """

    value: float
    slot_index: int
    standard_error: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"window probability {self.value} outside [0, 1]")
        if self.slot_index < 1:
            raise ValueError("slot index starts at 1")


@dataclass(frozen=True, slots=True)
class CountMoments:
    mean: float
    variance: float

    def __post_init__(self):
        if self.mean < 0 or self.variance < 0:
            raise ValueError("moments must be non-negative")


def sx_cdf(d: float, t: float, r_rx: float, diffusion_coefficient: float) -> float:
    """Probability that a molecule released at t=0 has been absorbed by time t.

    d is the source-to-surface distance (> 0); returns 0 at t = 0.
    """
    if d <= 0:
        raise ValueError(f"surface distance must be > 0, got {d}")
    if r_rx <= 0:
        raise ValueError(f"receiver radius must be > 0, got {r_rx}")
    if t < 0:
        raise ValueError(f"time must be >= 0, got {t}")
    if t == 0:
        return 0.0
    return r_rx / (d + r_rx) * math.erfc(d / math.sqrt(4.0 * diffusion_coefficient * t))


def cir_window(d: float, t: float, params: ChannelParams, r_rx: float) -> float:
    """Absorption probability within the sampling interval ending at time t."""
    dt = params.sampling_interval
    if t < dt - 1e-12:
        raise ValueError(f"t={t} lies before the end of the first sampling interval {dt}")
    D = params.diffusion_coefficient
    return max(0.0, sx_cdf(d, t, r_rx, D) - sx_cdf(d, max(0.0, t - dt), r_rx, D))


def window_prob_sx(d: float, slot_index: int, params: ChannelParams, r_rx: float) -> WindowProbability:
    """Hitting probability during slot `slot_index`, time measured from release."""
    if slot_index < 1:
        raise ValueError("slot index starts at 1")
    T = params.slot_duration
    D = params.diffusion_coefficient
    h = sx_cdf(d, slot_index * T, r_rx, D) - sx_cdf(d, (slot_index - 1) * T, r_rx, D)
    return WindowProbability(value=max(0.0, h), slot_index=slot_index, standard_error=0.0)


def count_moments(n_tx: int, h: float) -> CountMoments:
    """Binomial mean/variance of the per-slot received count."""
    if n_tx < 0:
        raise ValueError("released count must be >= 0")
    if not 0.0 <= h <= 1.0:
        raise ValueError(f"hitting probability {h} outside [0, 1]")
    return CountMoments(mean=n_tx * h, variance=n_tx * h * (1.0 - h))


def sample_received(n_tx: int, h: float, rng: np.random.Generator) -> int:
    """Draw a received-molecule count from the Normal approximation.

    The draw is rounded to the nearest integer and clamped to [0, n_tx];
    molecule counts are non-negative integers and the clamp bias is
    negligible whenever the mean sits many standard deviations inside the
    bounds. Exactly one variate is consumed per call.
    """
    m = count_moments(n_tx, h)
    value = rng.normal(m.mean, math.sqrt(m.variance))
    return int(min(max(round(value), 0), n_tx))
