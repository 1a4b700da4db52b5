"""Domain types: site states, lattice domains, jump kernels, configurations.

A site holds either nothing, one sleeping particle, or n active particles.
The canonical storage encoding is a single signed integer per site:
0 = empty, -1 = sleeping, n >= 1 = that many active particles.  The state
order used throughout is 0 < sleeping < 1 < 2 < ..., so ordering is NOT raw
integer comparison; use `order_key` / `state_leq`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    DegenerateOperand,
    InvalidSpec,
    OutOfDomain,
    SnapshotFormatError,
)
from .rng import site_key, u64

EMPTY = 0
SLEEPING = -1


# ---------------------------------------------------------------------------
# Site states


class SiteState:
    """Occupancy of one site: Empty, Sleeping, or Active(n >= 1)."""

    __slots__ = ("code",)

    def __init__(self, code):
        code = int(code)
        if code < -1:
            raise ValueError(f"invalid site-state code {code}")
        self.code = code

    @classmethod
    def empty(cls):
        return cls(EMPTY)

    @classmethod
    def sleeping(cls):
        return cls(SLEEPING)

    @classmethod
    def active(cls, n):
        if n < 1:
            raise ValueError("active count must be >= 1")
        return cls(int(n))

    @property
    def tag(self):
        if self.code == EMPTY:
            return "Empty"
        if self.code == SLEEPING:
            return "Sleeping"
        return "Active"

    @property
    def particle_count(self):
        return count_of(self.code)

    @property
    def order_key(self):
        return order_key(self.code)

    def __eq__(self, other):
        return isinstance(other, SiteState) and self.code == other.code

    def __hash__(self):
        return hash(("SiteState", self.code))

    def __lt__(self, other):
        return self.order_key < other.order_key

    def __le__(self, other):
        return self.order_key <= other.order_key

    def __repr__(self):
        if self.code >= 1:
            return f"Active({self.code})"
        return self.tag


def count_of(code):
    """Particles held by a site-state code (a sleeping particle counts as 1)."""
    return 1 if code == SLEEPING else code


def order_key(code):
    """Position of a state code in the order 0 < sleeping < 1 < 2 < ..."""
    return 0.5 if code == SLEEPING else float(code)


def state_leq(code_a, code_b):
    return order_key(code_a) <= order_key(code_b)


def add_code(code):
    """One active particle arrives: 0 -> 1, sleeping -> 2 (wake-up), n -> n+1."""
    if code == EMPTY:
        return 1
    if code == SLEEPING:
        return 2
    return code + 1


def sleep_code(code):
    """Sleep attempt: 1 -> sleeping; sleeping stays; n >= 2 unchanged (overridden)."""
    if code == EMPTY:
        raise DegenerateOperand("sleep applied to an empty site")
    if code == 1:
        return SLEEPING
    return code


def remove_code(code):
    """One particle departs: sleeping -> 0, 1 -> 0, n -> n-1."""
    if code == EMPTY:
        raise DegenerateOperand("removal from an empty site")
    if code == SLEEPING or code == 1:
        return EMPTY
    return code - 1


def add_particle(s: SiteState) -> SiteState:
    return SiteState(add_code(s.code))


def try_sleep(s: SiteState) -> SiteState:
    return SiteState(sleep_code(s.code))


def remove_particle(s: SiteState) -> SiteState:
    return SiteState(remove_code(s.code))


# ---------------------------------------------------------------------------
# Lattice domains

# Boundary behavior codes shared with the jitted kernels.
B_TORUS = 0
B_KILL = 1
B_CLOSED = 2
B_WINDOW = 3


class Boundary(Enum):
    KILL = "Kill"
    CLOSED = "Closed"


class LatticeDomain:
    """Geometry shared by the concrete shapes Box, Torus, and Window.

    Sites live on integer coordinates and are stored in a dense flat array
    in C order; `coord_origin` gives the lattice coordinate of array index 0
    along each axis.
    """

    # subclasses provide: dim, array_shape, coord_origin, boundary_code

    @property
    def n_sites(self):
        return int(np.prod(self.array_shape))

    @property
    def strides(self):
        shape = self.array_shape
        s = [1] * len(shape)
        for a in range(len(shape) - 2, -1, -1):
            s[a] = s[a + 1] * shape[a + 1]
        return tuple(s)

    def flat_index(self, coords):
        coords = tuple(int(c) for c in coords)
        if len(coords) != self.dim:
            raise OutOfDomain(f"coordinate arity {len(coords)} != dim {self.dim}")
        f = 0
        for a, c in enumerate(coords):
            idx = c - self.coord_origin[a]
            if not 0 <= idx < self.array_shape[a]:
                raise OutOfDomain(f"site {coords} outside domain {self!r}")
            f += idx * self.strides[a]
        return f

    def coords_of(self, flat):
        flat = int(flat)
        if not 0 <= flat < self.n_sites:
            raise OutOfDomain(f"flat index {flat} out of range")
        out = []
        for a in range(self.dim):
            out.append(flat // self.strides[a] + self.coord_origin[a])
            flat %= self.strides[a]
        return tuple(out)

    def contains(self, coords):
        if len(coords) != self.dim:
            return False
        return all(
            0 <= int(c) - self.coord_origin[a] < self.array_shape[a]
            for a, c in enumerate(coords)
        )

    def all_coords(self):
        """All site coordinates as an (n_sites, dim) int64 array in flat order."""
        axes = [
            np.arange(self.coord_origin[a], self.coord_origin[a] + self.array_shape[a], dtype=np.int64)
            for a in range(self.dim)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def site_keys(self):
        """Per-site 64-bit hash keys derived from absolute coordinates.

        Keyed on coordinates, not flat indices, so the same seed presents the
        same instruction stacks to any window or box that covers a site.
        """
        coords = self.all_coords()
        out = np.empty(coords.shape[0], dtype=np.uint64)
        for i in range(coords.shape[0]):
            out[i] = site_key(coords[i])
        return out

    @property
    def origin_flat(self):
        return self.flat_index((0,) * self.dim)

    def shape_token(self):
        raise NotImplementedError


@dataclass(frozen=True)
class Box(LatticeDomain):
    """Centered box [-r_a, r_a] per axis with a Kill or Closed boundary.

    Kill destroys particles that jump outside; Closed suppresses the outward
    jump in place (the instruction is still consumed).
    """

    radii: tuple
    boundary: Boundary = Boundary.CLOSED

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(int(r) for r in self.radii))
        if not self.radii or any(r < 0 for r in self.radii):
            raise InvalidSpec(f"bad box radii {self.radii}")

    @property
    def dim(self):
        return len(self.radii)

    @property
    def array_shape(self):
        return tuple(2 * r + 1 for r in self.radii)

    @property
    def coord_origin(self):
        return tuple(-r for r in self.radii)

    @property
    def boundary_code(self):
        return B_KILL if self.boundary is Boundary.KILL else B_CLOSED

    def shape_token(self):
        return "box:%s:%s" % (",".join(map(str, self.radii)), self.boundary.value.lower())


@dataclass(frozen=True)
class Torus(LatticeDomain):
    """Periodic lattice with `side` sites per axis; canonical coordinates 0..side-1."""

    side: int
    dim: int = 1

    def __post_init__(self):
        if self.side < 2 or self.dim < 1:
            raise InvalidSpec(f"bad torus (side={self.side}, dim={self.dim})")

    @property
    def array_shape(self):
        return (self.side,) * self.dim

    @property
    def coord_origin(self):
        return (0,) * self.dim

    @property
    def boundary_code(self):
        return B_TORUS

    def shape_token(self):
        return f"torus:{self.side}"


@dataclass(frozen=True)
class Window(LatticeDomain):
    """Finite proxy for the infinite lattice: a centered box that only parks.

    Stabilization targets a volume V strictly inside; particles that leave V
    land on surrounding window sites and are never toppled.  Reaching the
    window's edge is an error (the window was too small), so choose it with
    at least one spare ring around V.
    """

    radii: tuple

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(int(r) for r in self.radii))
        if not self.radii or any(r < 1 for r in self.radii):
            raise InvalidSpec(f"bad window radii {self.radii}")

    @property
    def dim(self):
        return len(self.radii)

    @property
    def array_shape(self):
        return tuple(2 * r + 1 for r in self.radii)

    @property
    def coord_origin(self):
        return tuple(-r for r in self.radii)

    @property
    def boundary_code(self):
        return B_WINDOW

    def shape_token(self):
        return "window:%s" % ",".join(map(str, self.radii))


def domain_from_token(d, token):
    parts = token.split(":")
    kind = parts[0]
    try:
        if kind == "box":
            radii = tuple(int(x) for x in parts[1].split(","))
            boundary = Boundary.KILL if parts[2] == "kill" else Boundary.CLOSED
            dom = Box(radii, boundary)
        elif kind == "torus":
            dom = Torus(int(parts[1]), d)
        elif kind == "window":
            dom = Window(tuple(int(x) for x in parts[1].split(",")))
        else:
            raise SnapshotFormatError(f"unknown shape token {token!r}")
    except (IndexError, ValueError) as exc:
        raise SnapshotFormatError(f"bad shape token {token!r}") from exc
    if dom.dim != d:
        raise SnapshotFormatError(f"shape token {token!r} disagrees with d={d}")
    return dom


# ---------------------------------------------------------------------------
# Jump kernels


def canonical_offsets(dim):
    """Nearest-neighbor offsets in canonical order +e0, -e0, +e1, -e1, ..."""
    out = np.zeros((2 * dim, dim), dtype=np.int64)
    for a in range(dim):
        out[2 * a, a] = 1
        out[2 * a + 1, a] = -1
    return out


@dataclass(frozen=True)
class JumpDistribution:
    """Nearest-neighbor jump law: one weight per canonical offset.

    Weights align with canonical_offsets(dim); they must be nonnegative, sum
    to 1 within 1e-12, and give every axis positive mass so the support
    generates the whole lattice.
    """

    dim: int
    weights: tuple

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if self.dim < 1 or len(w) != 2 * self.dim:
            raise InvalidSpec(f"need {2 * self.dim} weights, got {len(w)}")
        if any(x < 0 for x in w):
            raise InvalidSpec("negative jump weight")
        if abs(sum(w) - 1.0) > 1e-12:
            raise InvalidSpec(f"jump weights sum to {sum(w)!r}, not 1")
        for a in range(self.dim):
            if w[2 * a] + w[2 * a + 1] == 0.0:
                raise InvalidSpec(f"axis {a} has no jump mass; support must span all axes")

    @classmethod
    def symmetric(cls, dim):
        return cls(dim, (1.0 / (2 * dim),) * (2 * dim))

    @classmethod
    def directed_1d(cls):
        return cls(1, (1.0, 0.0))

    @classmethod
    def biased(cls, v):
        """Exponentially tilted kernel with drift of positive projection on v."""
        v = tuple(float(x) for x in v)
        if not v or all(x == 0.0 for x in v):
            raise InvalidSpec("bias vector must be nonzero")
        dim = len(v)
        raw = []
        for a in range(dim):
            raw.append(math.exp(v[a]))
            raw.append(math.exp(-v[a]))
        z = sum(raw)
        return cls(dim, tuple(x / z for x in raw))

    @classmethod
    def from_weights(cls, dim, weights):
        w = list(float(x) for x in weights)
        z = sum(w)
        if z <= 0:
            raise InvalidSpec("weights must have positive total")
        return cls(dim, tuple(x / z for x in w))

    def offsets(self):
        return canonical_offsets(self.dim)

    def cum_weights(self):
        c = np.cumsum(np.asarray(self.weights, dtype=np.float64))
        c[-1] = 1.0
        return c

    def drift(self):
        offs = self.offsets()
        return np.asarray(self.weights, dtype=np.float64) @ offs

    @property
    def is_directed_1d(self):
        return self.dim == 1 and self.weights[0] == 1.0

    @property
    def left_mass(self):
        """Total weight on negative-direction offsets (axis-wise minus sides)."""
        return sum(self.weights[2 * a + 1] for a in range(self.dim))


# ---------------------------------------------------------------------------
# Sleep-rate parameters


@dataclass(frozen=True)
class ModelParams:
    """Sleep rate: finite lam > 0, or math.inf for the jump-only limit model."""

    lam: float

    def __post_init__(self):
        lam = float(self.lam)
        object.__setattr__(self, "lam", lam)
        if not lam > 0:
            raise InvalidSpec(f"sleep rate must be > 0, got {lam}")

    @classmethod
    def finite(cls, lam):
        lam = float(lam)
        if math.isinf(lam):
            raise InvalidSpec("use infinite_sleep() for the infinite rate")
        return cls(lam)

    @classmethod
    def infinite_sleep(cls):
        return cls(math.inf)

    @property
    def is_infinite(self):
        return math.isinf(self.lam)

    @property
    def sleep_prob(self):
        """Canonical q = lam/(1+lam); q = 1.0 is the reserved infinite marker."""
        if self.is_infinite:
            return 1.0
        return self.lam / (1.0 + self.lam)


# ---------------------------------------------------------------------------
# Initial states


@dataclass(frozen=True)
class InitialStateSpec:
    """How to draw the starting configuration; all drawn particles are active.

    kinds: "poisson" (iid Poisson(density)), "bernoulli" (iid, density <= 1),
    "floor-bernoulli" (iid floor(density) + Bernoulli(fractional part), mean
    density for any density >= 0), "deterministic" (constant integer per
    site), "explicit" (site -> count).
    """

    kind: str
    density: float = 0.0
    sites: tuple = ()

    def __post_init__(self):
        if self.kind not in ("poisson", "bernoulli", "floor-bernoulli", "deterministic", "explicit"):
            raise InvalidSpec(f"unknown initial-state kind {self.kind!r}")
        d = float(self.density)
        object.__setattr__(self, "density", d)
        if self.kind != "explicit" and d < 0:
            raise InvalidSpec("density must be >= 0")
        if self.kind == "bernoulli" and d > 1:
            raise InvalidSpec("Bernoulli density must be <= 1")
        if self.kind == "deterministic" and d != int(d):
            raise InvalidSpec("deterministic initial value must be an integer, not rounded")
        if self.kind == "explicit":
            norm = tuple((tuple(int(c) for c in coords), int(cnt)) for coords, cnt in self.sites)
            if any(cnt < 1 for _, cnt in norm):
                raise InvalidSpec("explicit site counts must be >= 1")
            object.__setattr__(self, "sites", norm)

    @classmethod
    def iid_poisson(cls, zeta):
        return cls("poisson", float(zeta))

    @classmethod
    def iid_bernoulli(cls, zeta):
        return cls("bernoulli", float(zeta))

    @classmethod
    def floor_plus_bernoulli(cls, zeta):
        return cls("floor-bernoulli", float(zeta))

    @classmethod
    def deterministic(cls, value):
        return cls("deterministic", float(value))

    @classmethod
    def explicit(cls, sites):
        return cls("explicit", 0.0, tuple(sites))


# ---------------------------------------------------------------------------
# Configurations


class Configuration:
    """Dense per-site state codes over a domain, plus an O(1) particle total."""

    __slots__ = ("domain", "grid", "total")

    def __init__(self, domain, grid=None):
        self.domain = domain
        if grid is None:
            grid = np.zeros(domain.n_sites, dtype=np.int64)
        else:
            grid = np.asarray(grid, dtype=np.int64)
            if grid.shape != (domain.n_sites,):
                raise InvalidSpec("grid length does not match domain")
            if grid.min(initial=0) < -1:
                raise InvalidSpec("grid holds an invalid state code")
        self.grid = grid
        self.total = int(np.where(grid == SLEEPING, 1, grid).sum())

    @classmethod
    def empty(cls, domain):
        return cls(domain)

    def copy(self):
        out = Configuration.__new__(Configuration)
        out.domain = self.domain
        out.grid = self.grid.copy()
        out.total = self.total
        return out

    def get(self, coords):
        return SiteState(int(self.grid[self.domain.flat_index(coords)]))

    def set(self, coords, state):
        f = self.domain.flat_index(coords)
        old = int(self.grid[f])
        code = state.code if isinstance(state, SiteState) else int(state)
        self.grid[f] = code
        self.total += count_of(code) - count_of(old)

    def add_at(self, coords):
        f = self.domain.flat_index(coords)
        self.grid[f] = add_code(int(self.grid[f]))
        self.total += 1

    def recount(self):
        """Recompute the particle total from the grid (consistency checks)."""
        return int(np.where(self.grid == SLEEPING, 1, self.grid).sum())

    @property
    def active_total(self):
        g = self.grid
        return int(g[g >= 1].sum())

    def is_stable(self):
        return self.active_total == 0

    def occupied(self):
        """List of (coords, code) for occupied sites in canonical flat order."""
        out = []
        for f in np.flatnonzero(self.grid != EMPTY):
            out.append((self.domain.coords_of(int(f)), int(self.grid[f])))
        return out

    def __eq__(self, other):
        return (
            isinstance(other, Configuration)
            and self.domain == other.domain
            and np.array_equal(self.grid, other.grid)
        )

    def __repr__(self):
        return f"Configuration({self.domain!r}, particles={self.total})"

    # -- snapshot format ----------------------------------------------------

    def snapshot_text(self):
        lines = [snapshot_header(self.domain)]
        for coords, code in self.occupied():
            lines.append(" ".join(map(str, coords)) + f" {code}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_snapshot(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise SnapshotFormatError("empty snapshot")
        domain = parse_snapshot_header(lines[0])
        cfg = cls(domain)
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != domain.dim + 1:
                raise SnapshotFormatError(f"bad snapshot line {ln!r}")
            try:
                coords = tuple(int(x) for x in parts[: domain.dim])
                code = int(parts[-1])
            except ValueError as exc:
                raise SnapshotFormatError(f"bad snapshot line {ln!r}") from exc
            if code == EMPTY or code < -1:
                raise SnapshotFormatError(f"bad state code in line {ln!r}")
            cfg.set(coords, SiteState(code))
        return cfg


def snapshot_header(domain):
    return f"arw-snapshot d={domain.dim} shape={domain.shape_token()}"


def parse_snapshot_header(line):
    parts = line.split()
    if len(parts) != 3 or parts[0] != "arw-snapshot":
        raise SnapshotFormatError(f"bad header {line!r}")
    try:
        d = int(parts[1].removeprefix("d="))
    except ValueError as exc:
        raise SnapshotFormatError(f"bad header {line!r}") from exc
    if not parts[2].startswith("shape="):
        raise SnapshotFormatError(f"bad header {line!r}")
    return domain_from_token(d, parts[2].removeprefix("shape="))


def sample_initial(spec, domain, seed):
    """Draw a starting configuration; pure function of (spec, domain, seed)."""
    if not isinstance(spec, InitialStateSpec):
        raise InvalidSpec("spec must be an InitialStateSpec")
    n = domain.n_sites
    if spec.kind == "explicit":
        cfg = Configuration(domain)
        for coords, cnt in spec.sites:
            if not domain.contains(coords):
                raise InvalidSpec(f"explicit site {coords} outside domain")
            cfg.set(coords, SiteState.active(cnt))
        return cfg
    if spec.kind == "deterministic":
        grid = np.full(n, int(spec.density), dtype=np.int64)
        return Configuration(domain, grid)
    gen = np.random.Generator(np.random.PCG64(int(u64(seed))))
    if spec.kind == "poisson":
        grid = gen.poisson(spec.density, size=n).astype(np.int64)
    elif spec.kind == "floor-bernoulli":
        base = int(math.floor(spec.density))
        frac = spec.density - base
        grid = base + (gen.random(n) < frac).astype(np.int64)
    else:
        grid = (gen.random(n) < spec.density).astype(np.int64)
    return Configuration(domain, grid)
