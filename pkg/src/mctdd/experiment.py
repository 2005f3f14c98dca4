"""Seeded Monte Carlo harness: single trials, the no-relay baseline, and
threshold sweeps with per-threshold aggregates.

Randomness is organized so results are bit-reproducible for a given
(config, master_seed) and so comparisons are paired: every named stream is
seeded from (master_seed, trial_index, stream_id) and restarted for every
evaluation that uses it. Placement and localization are therefore shared
by all thresholds of a trial and by its baseline, and two thresholds that
induce the same clustering produce identical deliveries (common random
numbers).

Channel estimation inside a trial leans on the first-entry representation:
one walker batch per transmitter records first-entry times into every
other DgN and the tissue, and the hitting-probability table for any
absorber set the sweep induces is derived from those shared paths. This
is distributionally identical to rerunning the batch per absorber set
under common random numbers, and it makes the per-threshold channel cost
independent of the threshold grid size.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .channel_analytic import ChannelParams, sample_received, window_prob_sx
from .channel_particle import (
    AbsorberSet,
    WalkerConfig,
    estimate_window_probs,
    first_entry_paths,
    kernel_seed_from,
    simulate_batch,
)
from .protocol import (
    TISSUE,
    ClusterAssignment,
    LinkCount,
    Thresholds,
    count_links,
    localize,
    run_delivery,
)
from .scenario import Body, Box, Scenario, Vec3, distance, place_dgns

__all__ = [
    "ConfigError",
    "TrialConfig",
    "TrialResult",
    "SweepSummary",
    "build_scenario",
    "run_trial",
    "run_baseline",
    "sweep",
    "gain_percent",
]

# stream ids for per-trial substreams
_S_PLACE, _S_LOC_KERNEL, _S_LOC_COUNTS, _S_TX_PATHS, _S_DELIVERY = range(5)


class ConfigError(ValueError):
    """Invalid or inconsistent trial configuration."""


@dataclass(frozen=True)
class TrialConfig:
    """Experiment parameters; defaults follow the reference deployment."""

    # geometry (um)
    region_min: tuple = (-5.0, 34.0, -5.0)
    region_max: tuple = (65.0, 104.0, 65.0)
    controller: tuple = (30.0, 106.0, 30.0)
    tissue: tuple = (30.0, 8.0, 30.0)
    tissue_radius: float = 8.0
    dgn_radius: float = 5.0
    n_dgns: int = 10
    min_dgn_spacing: float = 6.0
    min_fixed_clearance: float = 10.0
    placement_budget: int = 1_000_000
    # physics and timing
    diffusion_coefficient: float = 79.4  # um^2/s
    slot_duration: float = 5.0  # s
    sampling_interval: float = 0.01  # s
    n_slots: int = 3
    n_drug_molecules: int = 10_000
    n_loc_molecules: int = 10_000
    # sweep controls
    eta_grid: tuple = tuple(float(e) for e in range(0, 1001, 10))
    repetitions: int = 4000
    master_seed: int = 1
    # walker controls
    n_walkers: int = 100_000
    walker_dt: float = 0.01
    walker_adaptive: bool = True
    far_step_factor: float = 3.5
    same_cluster_absorb: bool = False

    def __post_init__(self):
        object.__setattr__(self, "region_min", tuple(float(v) for v in self.region_min))
        object.__setattr__(self, "region_max", tuple(float(v) for v in self.region_max))
        object.__setattr__(self, "controller", tuple(float(v) for v in self.controller))
        object.__setattr__(self, "tissue", tuple(float(v) for v in self.tissue))
        object.__setattr__(self, "eta_grid", tuple(float(e) for e in self.eta_grid))
        errors = self.problems()
        if errors:
            raise ConfigError("; ".join(errors))

    def problems(self) -> list:
        out = []
        if self.repetitions < 1:
            out.append("repetitions must be >= 1")
        if not self.eta_grid:
            out.append("eta grid must be non-empty")
        if self.n_dgns < 1:
            out.append("need at least one DgN")
        if self.n_slots < 2:
            out.append("need at least one drug slot (n_slots >= 2)")
        if self.diffusion_coefficient <= 0:
            out.append("diffusion coefficient must be > 0")
        if self.sampling_interval <= 0 or self.slot_duration <= 0:
            out.append("slot and sampling durations must be > 0")
        else:
            ratio = self.slot_duration / self.sampling_interval
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                out.append(
                    f"slot duration {self.slot_duration} is not an integer multiple "
                    f"of the sampling interval {self.sampling_interval}"
                )
            if self.walker_dt > self.sampling_interval + 1e-12:
                out.append("walker_dt must not exceed the sampling interval")
        if self.n_walkers < 1:
            out.append("n_walkers must be >= 1")
        if self.n_drug_molecules < 0 or self.n_loc_molecules < 0:
            out.append("molecule budgets must be >= 0")
        if any(lo >= hi for lo, hi in zip(self.region_min, self.region_max)):
            out.append("deployment region is degenerate")
        if self.tissue_radius <= 0 or self.dgn_radius <= 0:
            out.append("radii must be > 0")
        return out

    def channel_params(self) -> ChannelParams:
        return ChannelParams(
            diffusion_coefficient=self.diffusion_coefficient,
            sampling_interval=self.sampling_interval,
            slot_duration=self.slot_duration,
        )

    def walker_config(self, horizon: float) -> WalkerConfig:
        return WalkerConfig(
            n_walkers=self.n_walkers,
            dt_sim=self.walker_dt,
            horizon=horizon,
            diffusion_coefficient=self.diffusion_coefficient,
            adaptive=self.walker_adaptive,
            far_step_factor=self.far_step_factor,
        )


@dataclass(frozen=True)
class TrialResult:
    """Per-trial outcome: clustering, links, per-class mean slot-1 hitting
    probabilities, and the tissue intake during the measurement slot.

    H means are NaN when a link class is empty in this trial (for example
    cluster 0 -> cluster 1 pairs while cluster 1 has no members).
    """

    cluster_sizes: tuple
    links: LinkCount
    mean_h_k0_s: float  # non-final clusters -> tissue (multi-receiver)
    mean_h_k0_k1: float  # inter-cluster DgN -> DgN relay links
    mean_h_k1_s: float  # final cluster -> tissue (single-receiver)
    n_tot: int

    def __post_init__(self):
        if self.n_tot < 0:
            raise ValueError("delivered total must be >= 0")
        if self.links.direct != sum(self.cluster_sizes):
            raise ValueError("direct links must equal the DgN count")


@dataclass
class SweepSummary:
    """Per-threshold aggregates over repetitions, plus the paired baseline.

    Arrays are indexed like eta_grid. *_matrix fields hold the per-trial
    values (repetitions x len(eta_grid)) behind the means, for resampling.
    """

    eta_grid: np.ndarray
    repetitions: int
    master_seed: int
    mean_k0: np.ndarray
    se_k0: np.ndarray
    mean_k1: np.ndarray
    se_k1: np.ndarray
    mean_total_links: np.ndarray
    se_total_links: np.ndarray
    mean_relay_links: np.ndarray
    mean_h_k0_s: np.ndarray
    mean_h_k0_k1: np.ndarray
    mean_h_k1_s: np.ndarray
    mean_ntot: np.ndarray
    se_ntot: np.ndarray
    baseline_mean_ntot: float
    baseline_se_ntot: float
    best_eta: float
    gain_pct: float
    ntot_matrix: np.ndarray
    total_links_matrix: np.ndarray
    k1_matrix: np.ndarray
    h_k0_s_matrix: np.ndarray
    h_k0_k1_matrix: np.ndarray
    h_k1_s_matrix: np.ndarray
    baseline_ntot: np.ndarray


def _stream(cfg: TrialConfig, trial_index: int, *key) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((int(cfg.master_seed), int(trial_index), *key))
    )


def build_scenario(cfg: TrialConfig, rng: np.random.Generator) -> Scenario:
    """Place DgNs for one trial and assemble the Scenario."""
    region = Box(Vec3(*cfg.region_min), Vec3(*cfg.region_max))
    controller = Body(Vec3(*cfg.controller), 0.0, "controller")
    tissue = Body(Vec3(*cfg.tissue), cfg.tissue_radius, "tissue")
    centers = place_dgns(
        region,
        cfg.n_dgns,
        cfg.min_dgn_spacing,
        [controller, tissue],
        cfg.min_fixed_clearance,
        rng,
        attempt_budget=cfg.placement_budget,
    )
    dgns = tuple(Body(c, cfg.dgn_radius, "dgn") for c in centers)
    return Scenario(
        controller=controller,
        tissue=tissue,
        dgns=dgns,
        region=region,
        diffusion_coefficient=cfg.diffusion_coefficient,
        min_dgn_pair_distance=cfg.min_dgn_spacing,
        min_fixed_distance=cfg.min_fixed_clearance,
    )


class _TrialEngine:
    """One deployment evaluated against any number of threshold choices.

    Placement, the localization broadcast and the per-transmitter walker
    paths are computed once and shared across thresholds; each evaluation
    restarts the delivery stream, so a single-threshold run is bit-equal to
    the same threshold inside a sweep.
    """

    def __init__(self, cfg: TrialConfig, trial_index: int):
        self.cfg = cfg
        self.trial_index = trial_index
        self.scenario = build_scenario(cfg, _stream(cfg, trial_index, _S_PLACE))
        self.params = cfg.channel_params()
        self._loc_counts = None
        self._paths = {}
        self._tables = {}
        self._sx_cache = {}
        centers = self.scenario.dgn_centers()
        self._centers = centers
        t = np.asarray(cfg.tissue)
        self._d_tissue_surf = np.linalg.norm(centers - t, axis=1) - cfg.tissue_radius
        self._windows = cfg.n_slots - 1  # a slot-2 release can land in slots 2..L

    # -- localization ------------------------------------------------------

    def loc_counts(self) -> list:
        """Sampled per-DgN localization counts (broadcast run once)."""
        if self._loc_counts is None:
            cfg = self.cfg
            absorbers = AbsorberSet.build(
                [(g, self._centers[g], cfg.dgn_radius) for g in range(cfg.n_dgns)]
            )
            wcfg = cfg.walker_config(horizon=cfg.slot_duration)
            seed = kernel_seed_from(_stream(cfg, self.trial_index, _S_LOC_KERNEL))
            record = simulate_batch(cfg.controller, absorbers, wcfg, cfg.sampling_interval, seed)
            probs = estimate_window_probs(record, [cfg.slot_duration])
            rng = _stream(cfg, self.trial_index, _S_LOC_COUNTS)
            self._loc_counts = [
                sample_received(cfg.n_loc_molecules, probs[g][0].value, rng)
                for g in range(cfg.n_dgns)
            ]
        return self._loc_counts

    # -- delivery channels -------------------------------------------------

    def _tx_paths(self, g: int):
        if g not in self._paths:
            cfg = self.cfg
            items = [
                (o, self._centers[o], cfg.dgn_radius) for o in range(cfg.n_dgns) if o != g
            ]
            items.append((TISSUE, cfg.tissue, cfg.tissue_radius))
            absorbers = AbsorberSet.build(items)
            wcfg = cfg.walker_config(horizon=self._windows * cfg.slot_duration)
            seed = kernel_seed_from(_stream(cfg, self.trial_index, _S_TX_PATHS, g))
            self._paths[g] = first_entry_paths(
                self._centers[g], absorbers, wcfg, seed, stop_on=TISSUE
            )
        return self._paths[g]

    def _sx_tissue_table(self, g: int) -> list:
        if g not in self._sx_cache:
            self._sx_cache[g] = [
                window_prob_sx(
                    self._d_tissue_surf[g], w, self.params, self.cfg.tissue_radius
                ).value
                for w in range(1, self._windows + 1)
            ]
        return self._sx_cache[g]

    def _mx_tables(self, g: int, rx_dgns: tuple) -> dict:
        """Window tables for transmitter g against {rx_dgns} + tissue."""
        key = (g, rx_dgns)
        if key not in self._tables:
            subset = list(rx_dgns) + [TISSUE]
            ends = [w * self.cfg.slot_duration for w in range(1, self._windows + 1)]
            probs = self._tx_paths(g).window_probs(subset, ends)
            self._tables[key] = {rx: [p.value for p in probs[rx]] for rx in subset}
        return self._tables[key]

    def channels_for(self, assignment: ClusterAssignment) -> dict:
        """Channel tables for every (transmitter, receiver) pair the
        assignment induces: multi-receiver estimates for transmitters with
        downstream absorbers, single-receiver closed form otherwise."""
        cfg = self.cfg
        n_final = assignment.n_hops
        channels = {}
        for g in range(cfg.n_dgns):
            n = assignment.indices[g]
            lower = n if cfg.same_cluster_absorb else n + 1
            rx_dgns = tuple(
                o
                for o in range(cfg.n_dgns)
                if o != g and assignment.indices[o] >= lower
            )
            if n == n_final and not (cfg.same_cluster_absorb and rx_dgns):
                channels[(g, TISSUE)] = self._sx_tissue_table(g)
            elif not rx_dgns:
                # multi-receiver set degenerates to the tissue alone
                channels[(g, TISSUE)] = self._sx_tissue_table(g)
            else:
                tables = self._mx_tables(g, rx_dgns)
                for rx in rx_dgns:
                    channels[(g, rx)] = tables[rx]
                channels[(g, TISSUE)] = tables[TISSUE]
        return channels

    # -- evaluation --------------------------------------------------------

    def evaluate(self, thresholds: Thresholds):
        """Run localization (unless baseline) and delivery; returns
        (TrialResult, DeliveryLedger, ClusterAssignment)."""
        cfg = self.cfg
        if thresholds.n_hops == 0:
            assignment = ClusterAssignment(indices=(0,) * cfg.n_dgns, n_hops=0)
        else:
            assignment = localize(self.loc_counts(), thresholds)
        channels = self.channels_for(assignment)
        rng = _stream(cfg, self.trial_index, _S_DELIVERY)
        ledger = run_delivery(
            assignment,
            self.scenario,
            channels,
            cfg.n_drug_molecules,
            cfg.n_slots,
            rng,
            same_cluster_absorb=cfg.same_cluster_absorb,
        )
        result = self._summarize(assignment, channels, ledger)
        return result, ledger, assignment

    def _summarize(self, assignment, channels, ledger) -> TrialResult:
        cfg = self.cfg
        n_final = assignment.n_hops
        h_up, h_relay, h_final = [], [], []
        for g in range(cfg.n_dgns):
            n = assignment.indices[g]
            if n == n_final:
                h_final.append(channels[(g, TISSUE)][0])
            else:
                h_up.append(channels[(g, TISSUE)][0])
                for o in range(cfg.n_dgns):
                    if o != g and assignment.indices[o] > n:
                        h_relay.append(channels[(g, o)][0])
        sizes = assignment.cluster_sizes()
        return TrialResult(
            cluster_sizes=sizes,
            links=count_links(sizes),
            mean_h_k0_s=float(np.mean(h_up)) if h_up else math.nan,
            mean_h_k0_k1=float(np.mean(h_relay)) if h_relay else math.nan,
            mean_h_k1_s=float(np.mean(h_final)) if h_final else math.nan,
            n_tot=ledger.tissue_in_slot(cfg.n_slots),
        )


def run_trial(cfg: TrialConfig, thresholds: Thresholds, trial_index: int) -> TrialResult:
    """One localization + delivery trial, bit-reproducible from
    (master_seed, trial_index)."""
    engine = _TrialEngine(cfg, trial_index)
    result, _, _ = engine.evaluate(thresholds)
    return result


def run_baseline(cfg: TrialConfig, trial_index: int) -> TrialResult:
    """The same trial without relaying: single cluster, direct channels."""
    return run_trial(cfg, Thresholds(()), trial_index)


def _nanmean_se(matrix: np.ndarray):
    counts = np.sum(~np.isnan(matrix), axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns are legal
        mean = np.nanmean(matrix, axis=0)
        sd = np.nanstd(matrix, axis=0, ddof=1)
    se = np.where(counts > 1, sd / np.sqrt(np.maximum(counts, 1)), np.nan)
    return mean, se


def sweep(cfg: TrialConfig, progress=None) -> SweepSummary:
    """Run `repetitions` paired trials over the threshold grid.

    Each trial index shares its placement, localization and walker paths
    across every threshold and the baseline; trials run sequentially and
    aggregate in index order, so the summary is bit-identical for a given
    (config, master_seed) regardless of kernel thread count.
    """
    grid = np.asarray(cfg.eta_grid, dtype=np.float64)
    reps = cfg.repetitions
    n = grid.size
    k0 = np.empty((reps, n))
    k1 = np.empty((reps, n))
    links_total = np.empty((reps, n))
    links_relay = np.empty((reps, n))
    h0s = np.empty((reps, n))
    h01 = np.empty((reps, n))
    h1s = np.empty((reps, n))
    ntot = np.empty((reps, n))
    base = np.empty(reps)

    for idx in range(reps):
        engine = _TrialEngine(cfg, idx)
        base_res, _, _ = engine.evaluate(Thresholds(()))
        base[idx] = base_res.n_tot
        for gi, eta in enumerate(grid):
            res, _, _ = engine.evaluate(Thresholds((float(eta),)))
            sizes = res.cluster_sizes
            k0[idx, gi] = sizes[0]
            k1[idx, gi] = sizes[1]
            links_total[idx, gi] = res.links.total
            links_relay[idx, gi] = res.links.relay
            h0s[idx, gi] = res.mean_h_k0_s
            h01[idx, gi] = res.mean_h_k0_k1
            h1s[idx, gi] = res.mean_h_k1_s
            ntot[idx, gi] = res.n_tot
        if progress is not None:
            progress(idx + 1, reps)

    mean_k0, se_k0 = _nanmean_se(k0)
    mean_k1, se_k1 = _nanmean_se(k1)
    mean_lt, se_lt = _nanmean_se(links_total)
    mean_lr, _ = _nanmean_se(links_relay)
    mean_h0s, _ = _nanmean_se(h0s)
    mean_h01, _ = _nanmean_se(h01)
    mean_h1s, _ = _nanmean_se(h1s)
    mean_nt, se_nt = _nanmean_se(ntot)
    base_mean = float(np.mean(base))
    base_se = float(np.std(base, ddof=1) / math.sqrt(reps)) if reps > 1 else math.nan

    best_i = int(np.argmax(mean_nt))
    best_eta = float(grid[best_i])
    gain = (
        100.0 * (float(mean_nt[best_i]) - base_mean) / base_mean if base_mean > 0 else math.nan
    )

    return SweepSummary(
        eta_grid=grid,
        repetitions=reps,
        master_seed=cfg.master_seed,
        mean_k0=mean_k0,
        se_k0=se_k0,
        mean_k1=mean_k1,
        se_k1=se_k1,
        mean_total_links=mean_lt,
        se_total_links=se_lt,
        mean_relay_links=mean_lr,
        mean_h_k0_s=mean_h0s,
        mean_h_k0_k1=mean_h01,
        mean_h_k1_s=mean_h1s,
        mean_ntot=mean_nt,
        se_ntot=se_nt,
        baseline_mean_ntot=base_mean,
        baseline_se_ntot=base_se,
        best_eta=best_eta,
        gain_pct=gain,
        ntot_matrix=ntot,
        total_links_matrix=links_total,
        k1_matrix=k1,
        h_k0_s_matrix=h0s,
        h_k0_k1_matrix=h01,
        h_k1_s_matrix=h1s,
        baseline_ntot=base,
    )


def gain_percent(summary: SweepSummary) -> float:
    """Best-threshold delivery gain over the paired baseline, in percent."""
    if summary.baseline_mean_ntot == 0:
        raise ZeroDivisionError("baseline delivered nothing; gain is undefined")
    best = float(np.max(summary.mean_ntot))
    return 100.0 * (best - summary.baseline_mean_ntot) / summary.baseline_mean_ntot
