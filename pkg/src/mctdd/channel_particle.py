"""Brownian-walker estimator for diffusion channels with competing fully
absorbing spheres (the multiple-receiver, MX, case that has no closed form).

Walkers start at the point source and take independent Gaussian steps with
per-axis standard deviation sqrt(2 D dt). A walker is absorbed either when
a step endpoint lands inside a sphere or when the intra-step crossing test
fires: for endpoints outside a sphere at surface gaps g0 (before) and g1
(after), the path touched the surface within the step with probability
exp(-g0*g1/(D*dt)) (the one-dimensional bridge along the surface normal;
pure endpoint detection systematically undercounts absorptions by several
percent at practical step sizes). If an endpoint lies inside several
spheres at once (deployments may place spheres closer than the sum of
their radii), the sphere whose surface is nearest the endpoint wins, with
the lower index as the final tie-break.

Determinism contract: every walker draws trajectory noise from its own
counter-derived substream of the batch seed, and every crossing test draws
from a stateless stream keyed by (walker, step, sphere tag), where the tag
depends only on the sphere's geometry. Results are therefore bit-identical
for a given seed regardless of thread count, and a sphere receives
identical draws no matter which other spheres are present.

Two stepping modes:

* fixed (default): every step advances exactly dt_sim, so walker
  trajectories depend only on (seed, walker, step). Enlarging the absorber
  set replays identical paths and can only steal walkers from incumbent
  absorbers, never add them.
* adaptive: far from every not-yet-entered sphere the step grows so the
  nearest surface stays far_step_factor path standard deviations away
  (P(reach) < ~1e-5 per step at the default factor); near a surface the
  step falls back to dt_sim. Near-surface behaviour is identical to the
  fixed scheme while far-field cost drops by orders of magnitude.

The kernel records the FIRST ENTRY time of each walker into EVERY sphere;
spheres already entered become transparent and the walker keeps going.
Competitive absorption for any subset of the spheres is then the earliest
first-entry among the subset - exactly what a run against that subset
alone would produce under common random numbers. The experiment layer
leans on this to evaluate one walker batch against every absorber set a
threshold sweep induces.
"""

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .channel_analytic import ChannelParams, WindowProbability

__all__ = [
    "AbsorberSet",
    "WalkerConfig",
    "AbsorptionRecord",
    "FirstEntryPaths",
    "first_entry_paths",
    "simulate_batch",
    "estimate_window_probs",
    "mx_window_probs",
    "kernel_seed_from",
]

_U64 = np.uint64
_GAMMA = _U64(0x9E3779B97F4A7C15)
_GAMMA2 = _U64(0xD1B54A32D192ED03)
_BRIDGE_SALT = _U64(0x6A09E667F3BCC909)
_INV53 = 1.1102230246251565e-16  # 2**-53
_BRIDGE_CUT = 30.0  # skip the crossing test once exp(-x) < 1e-13


@nb.njit(nb.uint64(nb.uint64), cache=True, inline="always")
def _mix64(z):
    # splitmix64 finalizer
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def _mix64_py(z: int) -> int:
    """Pure-python reference of the kernel mixer (for known-answer tests)."""
    mask = (1 << 64) - 1
    z &= mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


@nb.njit(cache=True, parallel=True, fastmath=True)
def _first_entry_kernel(
    seed,
    n_walkers,
    sx,
    sy,
    sz,
    cx,
    cy,
    cz,
    rad,
    rad2,
    near2,
    near_gap,
    tags,
    diff,
    dt_min,
    horizon,
    adaptive,
    quad_factor,
    stop_at_first,
    stop_sphere,
    entry_time,
    entry_gap,
):
    n_s = rad.shape[0]
    n_fixed_steps = int(round(horizon / dt_min))
    r_max = 0.0
    for s in range(n_s):
        r_max = max(r_max, rad[s])

    for w in nb.prange(n_walkers):
        state = _mix64(seed + (_U64(w) + _U64(1)) * _GAMMA2)
        bridge_base = _mix64(state ^ _BRIDGE_SALT)
        have_spare = False
        spare = 0.0
        x = sx
        y = sy
        z = sz
        t = 0.0
        entered = _U64(0)
        n_left = n_s
        done = False
        k = 0

        # Surface gap per sphere at the current position. Spheres beyond the
        # near zone carry the conservative sentinel near_gap: the crossing
        # test can never fire from that far within one step, so their exact
        # gap (a sqrt each) is not needed.
        gap = np.empty(n_s, dtype=np.float64)
        gmin = 1e300
        for s in range(n_s):
            dxs = x - cx[s]
            dys = y - cy[s]
            dzs = z - cz[s]
            d2 = dxs * dxs + dys * dys + dzs * dzs
            if d2 < near2[s]:
                g = math.sqrt(d2) - rad[s]
            else:
                g = math.sqrt(d2) - r_max
                if g < near_gap:
                    g = near_gap
            gap[s] = g
            if g < gmin:
                gmin = g

        while not done:
            if adaptive:
                if t >= horizon - 1e-12:
                    break
                tau = gmin * gmin * quad_factor
                if tau < dt_min:
                    tau = dt_min
                if tau > horizon - t:
                    tau = horizon - t
                t += tau
            else:
                if k >= n_fixed_steps:
                    break
                tau = dt_min
                t = (k + 1) * dt_min
            k += 1

            sig = math.sqrt(2.0 * diff * tau)

            # three unit normals via Marsaglia polar, one spare cached
            if have_spare:
                g0n = spare
                have_spare = False
            else:
                while True:
                    state += _GAMMA
                    u = (_mix64(state) >> _U64(11)) * _INV53 * 2.0 - 1.0
                    state += _GAMMA
                    v = (_mix64(state) >> _U64(11)) * _INV53 * 2.0 - 1.0
                    q = u * u + v * v
                    if 0.0 < q < 1.0:
                        break
                f = math.sqrt(-2.0 * math.log(q) / q)
                g0n = u * f
                spare = v * f
                have_spare = True
            if have_spare:
                g1n = spare
                have_spare = False
            else:
                while True:
                    state += _GAMMA
                    u = (_mix64(state) >> _U64(11)) * _INV53 * 2.0 - 1.0
                    state += _GAMMA
                    v = (_mix64(state) >> _U64(11)) * _INV53 * 2.0 - 1.0
                    q = u * u + v * v
                    if 0.0 < q < 1.0:
                        break
                f = math.sqrt(-2.0 * math.log(q) / q)
                g1n = u * f
                spare = v * f
                have_spare = True
            if have_spare:
                g2n = spare
                have_spare = False
            else:
                while True:
                    state += _GAMMA
                    u = (_mix64(state) >> _U64(11)) * _INV53 * 2.0 - 1.0
                    state += _GAMMA
                    v = (_mix64(state) >> _U64(11)) * _INV53 * 2.0 - 1.0
                    q = u * u + v * v
                    if 0.0 < q < 1.0:
                        break
                f = math.sqrt(-2.0 * math.log(q) / q)
                g2n = u * f
                spare = v * f
                have_spare = True

            x += sig * g0n
            y += sig * g1n
            z += sig * g2n

            inv_dtau = 1.0 / (diff * tau)
            gmin = 1e300
            min_far_d2 = 1e300
            for s in range(n_s):
                bit = _U64(1) << _U64(s)
                if entered & bit:
                    continue
                dxs = x - cx[s]
                dys = y - cy[s]
                dzs = z - cz[s]
                d2 = dxs * dxs + dys * dys + dzs * dzs
                if d2 < rad2[s]:
                    # endpoint inside: tie-break key is the endpoint's
                    # distance to this sphere's surface
                    entry_time[w, s] = t
                    entry_gap[w, s] = rad[s] - math.sqrt(d2)
                    entered |= bit
                    n_left -= 1
                    if stop_at_first or n_left == 0 or s == stop_sphere:
                        done = True
                elif d2 < near2[s]:
                    g = math.sqrt(d2) - rad[s]
                    if g * gap[s] * inv_dtau < _BRIDGE_CUT:
                        u_raw = _mix64(bridge_base + _U64(k) * _GAMMA + tags[s])
                        u = (u_raw >> _U64(11)) * _INV53
                        if u < math.exp(-g * gap[s] * inv_dtau):
                            entry_time[w, s] = t
                            entry_gap[w, s] = g
                            entered |= bit
                            n_left -= 1
                            if stop_at_first or n_left == 0 or s == stop_sphere:
                                done = True
                            continue
                    gap[s] = g
                    if g < gmin:
                        gmin = g
                else:
                    gap[s] = near_gap
                    if d2 < min_far_d2:
                        min_far_d2 = d2
            if min_far_d2 < 1e299:
                gfar = math.sqrt(min_far_d2) - r_max
                if gfar < gmin:
                    gmin = gfar


@nb.njit(cache=True)
def _competitive_assign(entry_time, entry_gap, subset, out_idx, out_time):
    # earliest first-entry among the subset wins; ties at the same step go
    # to the sphere whose surface is nearest the endpoint, then lowest index
    n_w = entry_time.shape[0]
    for w in range(n_w):
        best_t = np.inf
        best_g = np.inf
        best_i = -1
        for j in range(subset.shape[0]):
            s = subset[j]
            tv = entry_time[w, s]
            if tv < best_t:
                best_t = tv
                best_g = entry_gap[w, s]
                best_i = s
            elif tv == best_t and tv < np.inf and entry_gap[w, s] < best_g:
                best_g = entry_gap[w, s]
                best_i = s
        out_idx[w] = best_i
        out_time[w] = best_t


def kernel_seed_from(rng: np.random.Generator) -> int:
    """Derive the 64-bit batch seed for the walker kernel from a Generator."""
    return int(rng.integers(0, 2**64, dtype=np.uint64))


def _sphere_tags(centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Stable per-sphere stream tags derived from geometry alone."""
    tags = np.empty(len(radii), dtype=np.uint64)
    for i in range(len(radii)):
        h = int(np.float64(radii[i]).view(np.uint64))
        for c in centers[i]:
            h = _mix64_py(h ^ int(np.float64(c).view(np.uint64)))
        tags[i] = _mix64_py(h)
    return tags


@dataclass(frozen=True)
class AbsorberSet:
    """Ordered collection of absorbing spheres.

    Deployments may legitimately place spheres closer than the sum of their
    radii (the minimum DgN spacing is smaller than a DgN diameter), so
    overlap is allowed; simultaneous containment is resolved by the
    nearest-surface tie-break in the kernel.
    """

    ids: tuple
    centers: np.ndarray  # (n, 3) float64
    radii: np.ndarray  # (n,) float64

    def __post_init__(self):
        centers = np.ascontiguousarray(np.atleast_2d(np.asarray(self.centers, dtype=np.float64)))
        radii = np.ascontiguousarray(np.asarray(self.radii, dtype=np.float64).ravel())
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "radii", radii)
        n = len(self.ids)
        if centers.shape != (n, 3) or radii.shape != (n,):
            raise ValueError("ids, centers and radii must describe the same number of spheres")
        if n > 63:
            raise ValueError("at most 63 absorbers per batch")
        if n and np.any(radii <= 0):
            raise ValueError("absorber radii must be > 0")
        if len(set(self.ids)) != n:
            raise ValueError("absorber ids must be unique")
        for i in range(n):
            for j in range(i + 1, n):
                if np.allclose(centers[i], centers[j]) and radii[i] == radii[j]:
                    raise ValueError(f"absorbers {self.ids[i]} and {self.ids[j]} coincide")

    @classmethod
    def build(cls, items) -> "AbsorberSet":
        """items: iterable of (id, center, radius); center is any 3-sequence."""
        items = list(items)
        ids = tuple(i for i, _, _ in items)
        centers = np.array([[c[0], c[1], c[2]] for _, c, _ in items], dtype=np.float64).reshape(
            len(items), 3
        )
        radii = np.array([r for _, _, r in items], dtype=np.float64)
        return cls(ids=ids, centers=centers, radii=radii)

    def tags(self) -> np.ndarray:
        return _sphere_tags(self.centers, self.radii)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True, slots=True)
class WalkerConfig:
    """Numerical controls for one walker batch.

    n_walkers = 0 is allowed and produces an empty record. dt_sim is the
    base step; in adaptive mode it remains the step whenever a not-entered
    sphere is within far_step_factor path standard deviations.
    """

    n_walkers: int
    dt_sim: float = 1e-3
    horizon: float = 5.0
    diffusion_coefficient: float = 79.4
    adaptive: bool = False
    far_step_factor: float = 4.5

    def __post_init__(self):
        if self.n_walkers < 0:
            raise ValueError("n_walkers must be >= 0")
        if self.dt_sim <= 0:
            raise ValueError("dt_sim must be > 0")
        if self.horizon <= 0:
            raise ValueError("horizon must be > 0")
        if self.diffusion_coefficient <= 0:
            raise ValueError("diffusion coefficient must be > 0")
        if self.far_step_factor < 2.0:
            raise ValueError("far_step_factor below 2 would bias far-field steps")


@dataclass(frozen=True)
class AbsorptionRecord:
    """Per-absorber counts of absorptions per sampling interval."""

    ids: tuple
    counts: np.ndarray  # (n_absorbers, n_bins) int64
    survivors: int
    sampling_interval: float
    n_walkers: int

    def __post_init__(self):
        total = int(self.counts.sum()) + self.survivors
        if total != self.n_walkers:
            raise ValueError(
                f"conservation violated: {int(self.counts.sum())} absorbed + "
                f"{self.survivors} survivors != {self.n_walkers} walkers"
            )
        if np.any(self.counts < 0):
            raise ValueError("negative absorption count")


@dataclass(frozen=True)
class FirstEntryPaths:
    """First-entry times of one walker batch into every sphere of a geometry.

    entry_time[w, s] is +inf when walker w never enters sphere s within the
    horizon. Any absorber subset can be evaluated against the same paths.
    """

    absorbers: AbsorberSet
    entry_time: np.ndarray  # (n_walkers, n_spheres) float64
    entry_gap: np.ndarray  # (n_walkers, n_spheres) float64
    horizon: float
    n_walkers: int
    terminal: object = None  # absorber id whose entry ended each walk, if any

    def competitive(self, subset_ids=None):
        """First-entry competition restricted to `subset_ids`.

        Returns (winner, time): winner[w] indexes the FULL absorber list
        (-1 for survivors), time[w] is the absorption time.
        """
        if self.terminal is not None and subset_ids is not None and self.terminal not in subset_ids:
            raise ValueError(
                f"paths were terminated on {self.terminal!r}; only subsets "
                "containing it are exact"
            )
        if subset_ids is None:
            subset = np.arange(len(self.absorbers), dtype=np.int64)
        else:
            pos = {a: i for i, a in enumerate(self.absorbers.ids)}
            subset = np.array(sorted(pos[a] for a in subset_ids), dtype=np.int64)
        out_idx = np.empty(self.n_walkers, dtype=np.int64)
        out_time = np.empty(self.n_walkers, dtype=np.float64)
        if self.n_walkers:
            _competitive_assign(self.entry_time, self.entry_gap, subset, out_idx, out_time)
        return out_idx, out_time

    def window_probs(self, subset_ids, slot_ends) -> dict:
        """Per-absorber slot hitting probabilities for one absorber subset.

        slot_ends are ascending window end times; window i covers
        (slot_ends[i-1], slot_ends[i]] with an implicit 0 start. Returns
        {absorber_id: [WindowProbability, ...]}.
        """
        winner, t_abs = self.competitive(subset_ids)
        ends = np.asarray(slot_ends, dtype=np.float64)
        if ends.size == 0 or np.any(np.diff(ends) <= 0) or ends[0] <= 0:
            raise ValueError("slot ends must be positive and ascending")
        out = {}
        n = self.n_walkers
        for a in subset_ids:
            s = self.absorbers.ids.index(a)
            mask = winner == s
            probs = []
            for i, end in enumerate(ends):
                start = 0.0 if i == 0 else ends[i - 1]
                c = int(np.count_nonzero(mask & (t_abs > start) & (t_abs <= end)))
                h = c / n if n else 0.0
                se = math.sqrt(h * (1.0 - h) / n) if n else 0.0
                probs.append(WindowProbability(value=h, slot_index=i + 1, standard_error=se))
            out[a] = probs
        return out


def _run_kernel(
    source,
    absorbers: AbsorberSet,
    cfg: WalkerConfig,
    seed: int,
    stop_at_first: bool,
    stop_sphere: int = -1,
):
    n_w = cfg.n_walkers
    n_s = len(absorbers)
    entry_time = np.full((n_w, n_s), np.inf, dtype=np.float64)
    entry_gap = np.full((n_w, n_s), np.inf, dtype=np.float64)
    if n_w == 0 or n_s == 0:
        return entry_time, entry_gap
    src = np.asarray(
        [source.x, source.y, source.z] if hasattr(source, "x") else source, dtype=np.float64
    )
    d_src = np.linalg.norm(absorbers.centers - src, axis=1)
    inside = d_src < absorbers.radii
    if np.any(inside):
        bad = absorbers.ids[int(np.argmax(inside))]
        raise ValueError(f"source lies inside absorber {bad!r}")
    c = absorbers.centers
    quad_factor = 1.0 / (cfg.far_step_factor**2 * 6.0 * cfg.diffusion_coefficient)
    # Beyond near_gap the crossing test cannot fire within one base step
    # (the exponent exceeds the cutoff by an order of magnitude even for a
    # several-sigma move), so per-sphere gaps out there are tracked as a
    # conservative bound instead of one sqrt per sphere per step.
    near_gap = 10.0 * math.sqrt(2.0 * cfg.diffusion_coefficient * cfg.dt_sim)
    near2 = (absorbers.radii + near_gap) ** 2
    _first_entry_kernel(
        _U64(seed),
        n_w,
        float(src[0]),
        float(src[1]),
        float(src[2]),
        np.ascontiguousarray(c[:, 0]),
        np.ascontiguousarray(c[:, 1]),
        np.ascontiguousarray(c[:, 2]),
        absorbers.radii,
        absorbers.radii**2,
        near2,
        near_gap,
        absorbers.tags(),
        cfg.diffusion_coefficient,
        cfg.dt_sim,
        cfg.horizon,
        cfg.adaptive,
        quad_factor,
        stop_at_first,
        stop_sphere,
        entry_time,
        entry_gap,
    )
    return entry_time, entry_gap


def first_entry_paths(
    source, absorbers: AbsorberSet, cfg: WalkerConfig, rng, stop_on=None
) -> FirstEntryPaths:
    """Simulate one batch recording first entry into every sphere.

    `rng` is either a numpy Generator (one uint64 is consumed) or an
    integer seed. When `stop_on` names an absorber, walkers terminate on
    entering it; the recorded entries then remain exact for every subset
    that contains that absorber (entries after it can never win the
    competitive minimum there), which is how delivery channels - whose
    absorber sets always include the tissue - avoid simulating walkers
    past the point where their fate is decided.
    """
    seed = rng if isinstance(rng, (int, np.integer)) else kernel_seed_from(rng)
    stop_sphere = -1 if stop_on is None else absorbers.ids.index(stop_on)
    entry_time, entry_gap = _run_kernel(
        source, absorbers, cfg, int(seed), stop_at_first=False, stop_sphere=stop_sphere
    )
    return FirstEntryPaths(
        absorbers=absorbers,
        entry_time=entry_time,
        entry_gap=entry_gap,
        horizon=cfg.horizon,
        n_walkers=cfg.n_walkers,
        terminal=stop_on,
    )


def simulate_batch(
    source,
    absorbers: AbsorberSet,
    cfg: WalkerConfig,
    sampling_interval: float,
    rng,
) -> AbsorptionRecord:
    """Competitive absorption of one walker batch, binned per sampling interval."""
    if cfg.dt_sim > sampling_interval + 1e-12:
        raise ValueError(
            f"dt_sim {cfg.dt_sim} must not exceed the sampling interval {sampling_interval}"
        )
    n_bins_f = cfg.horizon / sampling_interval
    n_bins = int(round(n_bins_f))
    if abs(n_bins_f - n_bins) > 1e-9 or n_bins < 1:
        raise ValueError(
            f"horizon {cfg.horizon} must be a positive multiple of the "
            f"sampling interval {sampling_interval}"
        )
    seed = rng if isinstance(rng, (int, np.integer)) else kernel_seed_from(rng)
    entry_time, entry_gap = _run_kernel(source, absorbers, cfg, int(seed), stop_at_first=True)

    counts = np.zeros((len(absorbers), n_bins), dtype=np.int64)
    survivors = cfg.n_walkers
    if cfg.n_walkers and len(absorbers):
        subset = np.arange(len(absorbers), dtype=np.int64)
        out_idx = np.empty(cfg.n_walkers, dtype=np.int64)
        out_time = np.empty(cfg.n_walkers, dtype=np.float64)
        _competitive_assign(entry_time, entry_gap, subset, out_idx, out_time)
        absorbed = out_idx >= 0
        survivors = int(np.count_nonzero(~absorbed))
        if np.any(absorbed):
            bins = np.ceil(out_time[absorbed] / sampling_interval - 1e-12).astype(np.int64) - 1
            np.clip(bins, 0, n_bins - 1, out=bins)
            np.add.at(counts, (out_idx[absorbed], bins), 1)
    return AbsorptionRecord(
        ids=absorbers.ids,
        counts=counts,
        survivors=survivors,
        sampling_interval=sampling_interval,
        n_walkers=cfg.n_walkers,
    )


def estimate_window_probs(record: AbsorptionRecord, slot_boundaries) -> dict:
    """Slot-level hitting probability estimates from an absorption record.

    slot_boundaries are ascending slot end times, each a whole number of
    sampling intervals. Returns {absorber_id: [WindowProbability, ...]}.
    """
    ends = np.asarray(slot_boundaries, dtype=np.float64)
    if ends.ndim != 1 or ends.size == 0:
        raise ValueError("need at least one slot boundary")
    idx = ends / record.sampling_interval
    if np.any(np.abs(idx - np.round(idx)) > 1e-9):
        raise ValueError("slot boundaries must align with sampling intervals")
    idx = np.round(idx).astype(np.int64)
    if np.any(np.diff(idx) <= 0) or idx[0] < 1 or idx[-1] > record.counts.shape[1]:
        raise ValueError("slot boundaries must be ascending and within the horizon")
    n = record.n_walkers
    out = {}
    for a_i, a in enumerate(record.ids):
        probs = []
        lo = 0
        for slot, hi in enumerate(idx, start=1):
            c = int(record.counts[a_i, lo:hi].sum())
            h = c / n if n else 0.0
            se = math.sqrt(h * (1.0 - h) / n) if n else 0.0
            probs.append(WindowProbability(value=h, slot_index=slot, standard_error=se))
            lo = hi
        out[a] = probs
    return out


def mx_window_probs(
    source,
    absorbers: AbsorberSet,
    params: ChannelParams,
    cfg: WalkerConfig,
    rng,
) -> dict:
    """Per-absorber, per-slot hitting probabilities for a multi-receiver channel.

    Slots run 1..ceil(horizon / slot_duration); a final partial slot is
    truncated at the horizon.
    """
    if len(absorbers) == 0:
        return {}
    record = simulate_batch(source, absorbers, cfg, params.sampling_interval, rng)
    n_slots = math.ceil(cfg.horizon / params.slot_duration - 1e-9)
    ends = [min((i + 1) * params.slot_duration, cfg.horizon) for i in range(n_slots)]
    return estimate_window_probs(record, ends)
