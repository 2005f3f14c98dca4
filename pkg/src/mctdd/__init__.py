"""Discrete-timeslot simulator of a molecular-communication targeted-drug-delivery
nanonetwork with localization-enabled relaying.

Subpackages:
    scenario          deployment geometry and randomized nanomachine placement
    channel_analytic  closed-form single-receiver diffusion channel
    channel_particle  Brownian-walker estimator for competing absorbing receivers
    protocol          threshold clustering, relay forwarding, delivery accounting
    experiment        seeded Monte Carlo trials, baselines and threshold sweeps
    cli               batch command line front end
"""

__version__ = "0.1.0"

from .scenario import Vec3, Body, Box, Scenario, PlacementError, place_dgns, distance, validate
from .channel_analytic import (
    ChannelParams,
    WindowProbability,
    CountMoments,
    sx_cdf,
    cir_window,
    window_prob_sx,
    count_moments,
    sample_received,
)
from .channel_particle import (
    AbsorberSet,
    WalkerConfig,
    AbsorptionRecord,
    FirstEntryPaths,
    simulate_batch,
    estimate_window_probs,
    mx_window_probs,
)
from .protocol import (
    Thresholds,
    ClusterAssignment,
    LinkCount,
    DeliveryLedger,
    MissingChannelError,
    localize,
    delivery_slot_index,
    cumulative_release,
    count_links,
    run_delivery,
)
from .experiment import TrialConfig, TrialResult, SweepSummary, ConfigError, run_trial, run_baseline, sweep, gain_percent
