"""Per-layer inference energy: computation + data movement over a memory hierarchy.

Energy splits into a computation part (non-skipped MACs x MAC energy) and a
data-movement part. Movement is derived from an explicit tiling model: a
5-loop nest (batch, output channel, input channel, output row, output col)
tiled once per bounded memory level. Tile sizes are divisors of each loop
bound; an exhaustive search picks the tiling with the lowest movement energy.

Access accounting for a chosen tiling, per boundary between level l-1 and l:

* ifmap/weights: footprint(tile_l) x (product of all loop iterations outside
  tile_l). Loops irrelevant to a datatype refetch the same tile; relevant
  loops enumerate distinct tiles (halo overlap is refetched).
* ofmap partial sums: written back once per input-channel tile iteration and
  read back once per revisit after the first (read-modify-write accounting).
* the innermost level additionally serves every MAC directly: one ifmap read,
  one weight read, one partial-sum read + write per MAC.

Sparsity scales each datatype's movement by min(1, density * (1 + overhead))
(compressed transfer with bookkeeping overhead); bitwidth scales movement
linearly and computation quadratically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InfeasibleProfileError
from .nets import LayerShape

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


# ---------------------------------------------------------------------------
# hardware profile


@dataclass(frozen=True)
class MemoryLevel:
    name: str
    energy: float  # per 16-bit access, in MAC-energy units
    capacity: int | None  # 16-bit words; None = unbounded (outermost only)


@dataclass(frozen=True)
class HardwareProfile:
    """Memory hierarchy (outermost level first) plus MAC energy and bitwidths."""

    levels: tuple[MemoryLevel, ...]
    mac_energy: float = 1.0
    weight_bits: int = 16
    activation_bits: int = 16
    compression_overhead: float = 0.1

    def __post_init__(self) -> None:
        if len(self.levels) < 2:
            raise ConfigError("profile needs an unbounded outer level and >= 1 bounded level")
        if self.levels[0].capacity is not None:
            raise ConfigError("outermost level must be unbounded")
        for lv in self.levels[1:]:
            if lv.capacity is None:
                raise ConfigError(f"only the outermost level may be unbounded ({lv.name})")
            if lv.capacity < 1:
                raise ConfigError(f"level {lv.name}: capacity must be positive")
        for outer, inner in zip(self.levels, self.levels[1:]):
            if not inner.energy < outer.energy:
                raise ConfigError(
                    f"access energies must strictly decrease inward "
                    f"({outer.name}={outer.energy} -> {inner.name}={inner.energy})"
                )
        if self.mac_energy <= 0:
            raise ConfigError("mac_energy must be positive")
        for name in ("weight_bits", "activation_bits"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.compression_overhead < 0:
            raise ConfigError("compression_overhead must be >= 0")

    def with_bits(self, weight_bits: int, activation_bits: int) -> "HardwareProfile":
        return replace(self, weight_bits=weight_bits, activation_bits=activation_bits)


def default_profile() -> HardwareProfile:
    """Profile shipped with the package (profiles/default.toml)."""
    path = Path(__file__).parent / "profiles" / "default.toml"
    return load_profile(path)


def load_profile(path: str | Path) -> HardwareProfile:
    """Read a hardware profile from a TOML or JSON file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"profile {path}: no such file")
    blob = path.read_bytes()
    if path.suffix.lower() == ".json":
        raw = json.loads(blob)
    else:
        try:
            raw = tomllib.loads(blob.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"profile {path}: {exc}") from exc
    return profile_from_dict(raw, origin=str(path))


def profile_from_dict(raw: dict, origin: str = "<dict>") -> HardwareProfile:
    try:
        levels = tuple(
            MemoryLevel(
                name=str(lv["name"]),
                energy=float(lv["energy"]),
                capacity=int(lv["capacity"]) if "capacity" in lv else None,
            )
            for lv in raw["level"]
        )
        return HardwareProfile(
            levels=levels,
            mac_energy=float(raw.get("mac_energy", 1.0)),
            weight_bits=int(raw.get("weight_bits", 16)),
            activation_bits=int(raw.get("activation_bits", 16)),
            compression_overhead=float(raw.get("compression_overhead", 0.1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"profile {origin}: missing/invalid field ({exc})") from exc


# ---------------------------------------------------------------------------
# layer statistics


@dataclass(frozen=True)
class LayerStats:
    """Density figures for one layer, all in [0, 1] (1.0 = fully dense)."""

    weight_density: float = 1.0
    input_act_density: float = 1.0
    output_act_density: float = 1.0
    # measured override; defaults to the independence model weight*input
    nonskipped_mac_fraction: float | None = None

    def __post_init__(self) -> None:
        for name in ("weight_density", "input_act_density", "output_act_density"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {v}")
        if self.nonskipped_mac_fraction is not None:
            cap = min(self.weight_density, self.input_act_density)
            if not 0.0 <= self.nonskipped_mac_fraction <= cap + 1e-9:
                raise ConfigError(
                    "nonskipped_mac_fraction must not exceed either operand density"
                )

    @property
    def effective_nonskipped_fraction(self) -> float:
        if self.nonskipped_mac_fraction is not None:
            return self.nonskipped_mac_fraction
        return self.weight_density * self.input_act_density


DENSE_STATS = LayerStats()


# ---------------------------------------------------------------------------
# breakdown


@dataclass(frozen=True)
class EnergyBreakdown:
    """Per-layer energy in MAC units: computation + three movement categories."""

    comp: float = 0.0
    input_fmap: float = 0.0
    output_fmap: float = 0.0
    weights: float = 0.0

    def __post_init__(self) -> None:
        for name in ("comp", "input_fmap", "output_fmap", "weights"):
            if getattr(self, name) < 0:
                raise ConfigError(f"energy component {name} must be >= 0")

    @property
    def total(self) -> float:
        return self.comp + self.input_fmap + self.output_fmap + self.weights

    def __add__(self, other: "EnergyBreakdown") -> "EnergyBreakdown":
        return EnergyBreakdown(
            self.comp + other.comp,
            self.input_fmap + other.input_fmap,
            self.output_fmap + other.output_fmap,
            self.weights + other.weights,
        )


# ---------------------------------------------------------------------------
# MAC counts


def dense_macs(shape: LayerShape) -> int:
    """MACs of the dense layer: batch * out_h * out_w * filters * weights-per-filter."""
    return shape.batch * shape.out_h * shape.out_w * shape.n * shape.m


def nonskipped_macs(shape: LayerShape, stats: LayerStats) -> int:
    """MACs actually executed: a MAC is skipped when either operand is zero.

    Uses the independence model (weight and activation zeros uncorrelated)
    unless the stats carry a measured fraction.
    """
    return int(round(dense_macs(shape) * stats.effective_nonskipped_fraction))


# ---------------------------------------------------------------------------
# tiling search

# loop-dimension order used throughout: (batch, out_ch, in_ch, out_h, out_w)
_DIM_NAMES = ("batch", "out_ch", "in_ch", "out_h", "out_w")


@dataclass(frozen=True)
class TilingPoint:
    """Chosen tile sizes per bounded level (outermost bounded level first)."""

    level_names: tuple[str, ...]
    tiles: tuple[tuple[int, int, int, int, int], ...]

    def flat(self) -> tuple[int, ...]:
        return tuple(v for tile in self.tiles for v in tile)


@dataclass(frozen=True)
class AccessCounts:
    """Word-level access counts served by one memory level."""

    level: str
    ifmap: int
    weights: int
    ofmap: int


def _divisors(x: int) -> list[int]:
    return [d for d in range(1, x + 1) if x % d == 0]


def _loop_bounds(shape: LayerShape) -> tuple[int, int, int, int, int]:
    return (shape.batch, shape.n, shape.in_c, shape.out_h, shape.out_w)


def _footprints(shape: LayerShape, tiles: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ifmap/weight/psum words for tile rows (tb, tn, tc, th, tw)."""
    tb, tn, tc, th, tw = (tiles[:, i] for i in range(5))
    ih = (th - 1) * shape.stride + shape.filt_h
    iw = (tw - 1) * shape.stride + shape.filt_w
    f_if = tb * tc * ih * iw
    f_w = tn * tc * shape.filt_h * shape.filt_w
    f_o = tb * tn * th * tw
    return f_if, f_w, f_o


def _candidate_tiles(shape: LayerShape, capacity: int, level_name: str) -> np.ndarray:
    """All divisor tiles fitting the capacity, in lexicographic order.

    The all-ones tile is accounted as a streaming tile needing only one
    activation + one weight + one partial sum in flight (3 words); if even
    that does not fit, the level cannot schedule the layer at all.
    """
    bounds = _loop_bounds(shape)
    grids = np.meshgrid(*[np.array(_divisors(b), dtype=np.int64) for b in bounds], indexing="ij")
    tiles = np.stack([g.reshape(-1) for g in grids], axis=1)
    f_if, f_w, f_o = _footprints(shape, tiles)
    ws = f_if + f_w + f_o
    ws[(tiles == 1).all(axis=1)] = 3  # streaming tile
    tiles = tiles[ws <= capacity]
    if tiles.shape[0] == 0:
        raise InfeasibleProfileError(
            f"profile infeasible: level {level_name} (capacity {capacity} words) "
            f"cannot hold one weight + one activation + one partial sum"
        )
    # np.meshgrid with ascending divisor lists already yields lex order
    return tiles


def _boundary_energy(
    shape: LayerShape, e_outer: float, tiles: np.ndarray, m_cum: np.ndarray, rc_cum: np.ndarray
) -> np.ndarray:
    """Movement energy of one boundary, paid at the outer level's access cost."""
    f_if, f_w, f_o = _footprints(shape, tiles)
    psum = 2 * m_cum - m_cum // rc_cum
    return e_outer * ((f_if + f_w) * m_cum + f_o * psum)


@dataclass
class _States:
    """Parallel arrays of DP states, kept in prefix-lexicographic order."""

    tiles: np.ndarray  # S x 5
    energy: np.ndarray  # S float64
    mult: np.ndarray  # S int64, product of all loop iterations outside the tile
    rc: np.ndarray  # S int64, product of in-channel iterations outside the tile
    paths: list[tuple[tuple[int, ...], ...]]


def _pareto_keep(energy: np.ndarray, mult: np.ndarray, rc: np.ndarray) -> np.ndarray:
    """Keep states not strictly dominated within their rc group.

    For the same tile and rc, any completion's total is energy + mult * K
    with K > 0, so a state loses to one with energy <= and mult <= unless
    both match exactly. Exact (energy, mult) duplicates are all kept: they
    tie on every completion and the lexicographic tie-break needs them.
    """
    keep = np.zeros(energy.shape[0], dtype=bool)
    for rcv in np.unique(rc):
        sel = np.where(rc == rcv)[0]
        order = np.lexsort((sel, mult[sel], energy[sel]))
        e_s = energy[sel][order]
        m_s = mult[sel][order]
        runmin = np.concatenate(([np.inf], np.minimum.accumulate(m_s)[:-1]))
        strict = m_s < runmin
        # runs of identical (energy, mult) share their first element's fate
        new_run = np.ones(sel.size, dtype=bool)
        new_run[1:] = (e_s[1:] != e_s[:-1]) | (m_s[1:] != m_s[:-1])
        run_id = np.cumsum(new_run) - 1
        keep[sel[order]] = strict[new_run][run_id]
    return keep


_SEARCH_CACHE: dict = {}


def optimize_accesses(
    shape: LayerShape, hw: HardwareProfile
) -> tuple[TilingPoint, tuple[AccessCounts, ...]]:
    """Search all divisor tilings for the one with the lowest movement energy.

    Returns the winning TilingPoint (ties resolved toward the smallest tile
    vector) and the access counts each memory level serves under it.
    Results are memoised: the tiling depends only on the shape and levels.
    """
    key = (shape, hw.levels)
    hit = _SEARCH_CACHE.get(key)
    if hit is not None:
        return hit
    result = _optimize_accesses_impl(shape, hw)
    if len(_SEARCH_CACHE) > 512:
        _SEARCH_CACHE.clear()
    _SEARCH_CACHE[key] = result
    return result


def _optimize_accesses_impl(
    shape: LayerShape, hw: HardwareProfile
) -> tuple[TilingPoint, tuple[AccessCounts, ...]]:
    bounded = hw.levels[1:]
    names = tuple(lv.name for lv in bounded)
    if shape.num_filters == 0:
        point = TilingPoint(names, tuple((1, 0, 1, 1, 1) for _ in bounded))
        counts = tuple(AccessCounts(lv.name, 0, 0, 0) for lv in hw.levels)
        return point, counts

    candidates = [
        _candidate_tiles(shape, lv.capacity, lv.name) for lv in bounded
    ]
    bounds = np.array(_loop_bounds(shape), dtype=np.int64)

    # level 1: one state per candidate tile
    tiles1 = candidates[0]
    ratios = -(-bounds[None, :] // tiles1)
    mult = ratios.prod(axis=1)
    rc = ratios[:, 2]
    energy = _boundary_energy(shape, hw.levels[0].energy, tiles1, mult, rc)
    states = _States(
        tiles1, energy, mult, rc, [(tuple(int(v) for v in t),) for t in tiles1]
    )

    for depth in range(1, len(bounded)):
        e_outer = bounded[depth - 1].energy
        final = depth == len(bounded) - 1
        new_tiles: list[np.ndarray] = []
        new_e: list[np.ndarray] = []
        new_m: list[np.ndarray] = []
        new_rc: list[np.ndarray] = []
        new_paths: list[tuple] = []
        for tile in candidates[depth]:
            ok = (states.tiles >= tile[None, :]).all(axis=1)
            if not ok.any():
                continue
            idx = np.where(ok)[0]
            r = -(-states.tiles[idx] // tile[None, :])
            mn = states.mult[idx] * r.prod(axis=1)
            rcn = states.rc[idx] * r[:, 2]
            en = states.energy[idx] + _boundary_energy(
                shape, e_outer, tile[None, :].repeat(idx.size, axis=0), mn, rcn
            )
            if final:
                # only the accumulated energy matters now; keep all exact ties
                keep = en == en.min()
            else:
                keep = _pareto_keep(en, mn, rcn)
            kidx = idx[keep]
            tile_t = tuple(int(v) for v in tile)
            new_tiles.append(np.repeat(tile[None, :], kidx.size, axis=0))
            new_e.append(en[keep])
            new_m.append(mn[keep])
            new_rc.append(rcn[keep])
            new_paths.extend(states.paths[i] + (tile_t,) for i in kidx)
        if not new_tiles:
            # every deeper tile failed the nesting check; cannot happen since
            # the all-ones tile nests inside anything feasible
            raise InfeasibleProfileError("profile infeasible: no nested tiling exists")
        states = _States(
            np.concatenate(new_tiles),
            np.concatenate(new_e),
            np.concatenate(new_m),
            np.concatenate(new_rc),
            new_paths,
        )

    best = int(np.argmin(states.energy))
    ties = np.where(states.energy == states.energy[best])[0]
    if ties.size > 1:
        best = min(ties, key=lambda i: states.paths[i])
    point = TilingPoint(names, states.paths[best])
    return point, _counts_for(shape, hw, point)


def _counts_for(
    shape: LayerShape, hw: HardwareProfile, point: TilingPoint
) -> tuple[AccessCounts, ...]:
    bounds = np.array(_loop_bounds(shape), dtype=np.int64)
    macs = dense_macs(shape)
    counts: list[AccessCounts] = []
    prev = bounds
    mult = 1
    rc = 1
    for lv, tile in zip(hw.levels[:-1], point.tiles):
        t = np.array(tile, dtype=np.int64)
        r = -(-prev // t)
        mult *= int(r.prod())
        rc *= int(r[2])
        f_if, f_w, f_o = _footprints(shape, t[None, :])
        counts.append(
            AccessCounts(
                level=lv.name,
                ifmap=int(f_if[0]) * mult,
                weights=int(f_w[0]) * mult,
                ofmap=int(f_o[0]) * (2 * mult - mult // rc),
            )
        )
        prev = t
    counts.append(AccessCounts(hw.levels[-1].name, macs, macs, 2 * macs))
    return tuple(counts)


def movement_energy_raw(
    counts: tuple[AccessCounts, ...], hw: HardwareProfile
) -> tuple[float, float, float]:
    """Dense 16-bit movement energy per datatype (ifmap, weights, ofmap)."""
    e_if = e_w = e_of = 0.0
    energies = {lv.name: lv.energy for lv in hw.levels}
    for c in counts:
        e = energies[c.level]
        e_if += c.ifmap * e
        e_w += c.weights * e
        e_of += c.ofmap * e
    return e_if, e_w, e_of


def no_reuse_upper_bound(shape: LayerShape, hw: HardwareProfile) -> float:
    """Movement energy of the all-ones streaming tiling at every level."""
    ones = tuple((1, 1, 1, 1, 1) for _ in hw.levels[1:])
    point = TilingPoint(tuple(lv.name for lv in hw.levels[1:]), ones)
    return sum(movement_energy_raw(_counts_for(shape, hw, point), hw))


def fetch_once_lower_bound(shape: LayerShape, hw: HardwareProfile) -> float:
    """Every touched datum read from the outermost level exactly once.

    With stride > filter extent some input rows/cols are never touched, so
    the ifmap term counts only rows the filter windows actually cover.
    """
    touched_h = min((shape.out_h - 1) * shape.stride + shape.filt_h, shape.out_h * shape.filt_h)
    touched_w = min((shape.out_w - 1) * shape.stride + shape.filt_w, shape.out_w * shape.filt_w)
    f_if = shape.batch * shape.in_c * touched_h * touched_w
    f_w = shape.n * shape.m
    f_o = shape.batch * shape.n * shape.out_h * shape.out_w
    return float(f_if + f_w + f_o) * hw.levels[0].energy


# ---------------------------------------------------------------------------
# energy assembly


def _compression_factor(density: float, overhead: float) -> float:
    return min(1.0, density * (1.0 + overhead))


def layer_energy(shape: LayerShape, stats: LayerStats, hw: HardwareProfile) -> EnergyBreakdown:
    """Full energy of one layer under the given sparsity and bitwidths.

    comp scales quadratically with bitwidth (multiplier-dominated MAC),
    movement linearly; sparse operands move compressed.
    """
    comp = (
        nonskipped_macs(shape, stats)
        * hw.mac_energy
        * (hw.weight_bits * hw.activation_bits / 256.0)
    )
    _, counts = optimize_accesses(shape, hw)
    raw_if, raw_w, raw_of = movement_energy_raw(counts, hw)
    ovh = hw.compression_overhead
    act_scale = hw.activation_bits / 16.0
    w_scale = hw.weight_bits / 16.0
    return EnergyBreakdown(
        comp=comp,
        input_fmap=raw_if * _compression_factor(stats.input_act_density, ovh) * act_scale,
        output_fmap=raw_of * _compression_factor(stats.output_act_density, ovh) * act_scale,
        weights=raw_w * _compression_factor(stats.weight_density, ovh) * w_scale,
    )


def network_energy(
    layers: list[tuple[str, LayerShape, LayerStats]], hw: HardwareProfile
) -> tuple[list[EnergyBreakdown], EnergyBreakdown]:
    """Per-layer breakdowns (input order preserved) plus their exact sum."""
    per_layer: list[EnergyBreakdown] = []
    total = EnergyBreakdown()
    for name, shape, stats in layers:
        try:
            br = layer_energy(shape, stats, hw)
        except InfeasibleProfileError as exc:
            raise InfeasibleProfileError(f"layer {name}: {exc}") from exc
        per_layer.append(br)
        total = total + br
    return per_layer, total
