"""Shared domain types for interacting-agent systems, plus dataset validation.

Conventions used throughout the package:

* agent types are 0-based integers in ``0..K-1``,
* observation arrays are snapshot-major with shape ``(M, L, N, d)``
  (trajectory index ``m`` outer, snapshot index ``l`` next), which fixes the
  canonical reduction order for deterministic parallel assembly,
* for first-order systems the ``velocities`` array holds the observed state
  derivatives; for second-order systems it holds the velocity state and
  ``accelerations`` holds the derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

ORDER_FIRST = "first"
ORDER_SECOND = "second"

DERIV_OBSERVED = "observed"
DERIV_FINITE_DIFFERENCE = "finite_difference"


def rng_from(*keys: int) -> np.random.Generator:
    """Deterministic generator derived from a tuple of integer keys.

    Streams for distinct key tuples are independent, so concurrent workers
    seeded with (seed, worker_index) never share state.
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _freeze(a: np.ndarray | None) -> np.ndarray | None:
    if a is None:
        return None
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TypePartition:
    """Fixed assignment of N agents to K types; labels are time-invariant."""

    labels: np.ndarray
    K: int

    def __post_init__(self):
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=int))
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def N(self) -> int:
        return self.labels.shape[0]

    @property
    def counts(self) -> np.ndarray:
        """Number of agents per type, length K."""
        return np.bincount(self.labels, minlength=self.K)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def violations(self) -> list[str]:
        out = []
        if self.K < 1:
            out.append("partition must have K >= 1 types")
            return out
        if self.labels.ndim != 1:
            out.append("partition labels must be a 1-d vector")
            return out
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.K:
            out.append("partition labels outside 0..K-1")
        counts = self.counts
        for k in range(self.K):
            if counts[k] == 0:
                out.append(f"partition type {k} has no members")
        return out


def homogeneous_partition(N: int) -> TypePartition:
    """Single-type partition (K = 1)."""
    return TypePartition(labels=np.zeros(N, dtype=int), K=1)


@dataclass(frozen=True)
class ParametricForce:
    """Per-agent environment force, linear in its parameters.

    ``kind="none"`` is the zero force.  ``kind="friction_propulsion"`` is
    F(x, v; a) = a1*v + a2*(1 - |v|^2)*v, the friction and self-propulsion
    family; richer forces are out of scope.
    """

    kind: str = "none"
    params: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("none", "friction_propulsion"):
            raise ConfigError(f"unknown force kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def __call__(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Evaluate on per-agent states x, v of shape (N, d)."""
        if self.kind == "none":
            return np.zeros_like(v)
        return self.with_params(self.params)(x, v)

    def with_params(self, params):
        a1, a2 = params

        def f(x, v):
            speed2 = np.sum(v * v, axis=-1, keepdims=True)
            return a1 * v + a2 * (1.0 - speed2) * v

        return f

    @property
    def trainable_size(self) -> int:
        return 0 if self.kind == "none" else 2


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """Static description of an interacting-agent system."""

    order: str
    N: int
    d: int
    partition: TypePartition
    masses: np.ndarray | None = None
    force: ParametricForce = field(default_factory=ParametricForce)
    kernel_set: str = ""

    def __post_init__(self):
        if self.order not in (ORDER_FIRST, ORDER_SECOND):
            raise ConfigError(f"order must be 'first' or 'second', got {self.order!r}")
        masses = self.masses
        if self.order == ORDER_SECOND and masses is None:
            masses = np.ones(self.N)
        object.__setattr__(self, "masses", _freeze(masses))

    @property
    def K(self) -> int:
        return self.partition.K

    def violations(self) -> list[str]:
        out = []
        if self.N < 2:
            out.append("N must be >= 2")
        if self.d < 1:
            out.append("d must be >= 1")
        if self.partition.N != self.N:
            out.append("partition labels length != N")
        out.extend(self.partition.violations())
        if self.order == ORDER_SECOND:
            if self.masses is None or self.masses.shape != (self.N,):
                out.append("masses must be a vector of length N")
            elif np.any(self.masses <= 0):
                out.append("masses must be strictly positive")
        return out


@dataclass(frozen=True)
class InitialDistribution:
    """Per-agent i.i.d. initial distribution on R^d.

    Families and parameters:
      * ``uniform_box``: low, high (scalars or length-d vectors)
      * ``gaussian``: mean, var (scalar or length-d diagonal variance)
      * ``uniform_annulus``: r_min, r_max (uniform over the annulus volume)
    """

    family: str
    params: dict

    def __post_init__(self):
        if self.family not in ("uniform_box", "gaussian", "uniform_annulus"):
            raise ConfigError(f"unknown initial distribution family {self.family!r}")

    def sample(self, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
        if self.family == "uniform_box":
            low = np.broadcast_to(np.asarray(self.params["low"], dtype=float), (d,))
            high = np.broadcast_to(np.asarray(self.params["high"], dtype=float), (d,))
            if np.any(high < low):
                raise ConfigError("uniform_box requires high >= low")
            return low + (high - low) * rng.random((n, d))
        if self.family == "gaussian":
            mean = np.broadcast_to(np.asarray(self.params["mean"], dtype=float), (d,))
            var = np.broadcast_to(np.asarray(self.params["var"], dtype=float), (d,))
            if np.any(var < 0):
                raise ConfigError("gaussian requires nonnegative variances")
            return mean + np.sqrt(var) * rng.standard_normal((n, d))
        r_min = float(self.params["r_min"])
        r_max = float(self.params["r_max"])
        if not (0 <= r_min <= r_max) or r_max == 0:
            raise ConfigError("uniform_annulus requires 0 <= r_min <= r_max, r_max > 0")
        direction = rng.standard_normal((n, d))
        norms = np.linalg.norm(direction, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        direction /= norms
        # radius density proportional to r^(d-1) makes the draw uniform in volume
        u = rng.random((n, 1))
        radius = (r_min**d + u * (r_max**d - r_min**d)) ** (1.0 / d)
        return direction * radius


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """Observed trajectories: M initial conditions x L snapshots x N agents x d dims."""

    times: np.ndarray
    positions: np.ndarray
    spec: SystemSpec
    velocities: np.ndarray | None = None
    accelerations: np.ndarray | None = None
    derivative_source: str = DERIV_OBSERVED
    seed: int = 0
    noise_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "times", _freeze(self.times))
        object.__setattr__(self, "positions", _freeze(self.positions))
        object.__setattr__(self, "velocities", _freeze(self.velocities))
        object.__setattr__(self, "accelerations", _freeze(self.accelerations))

    @property
    def M(self) -> int:
        return self.positions.shape[0]

    @property
    def L(self) -> int:
        return self.positions.shape[1]

    @property
    def N(self) -> int:
        return self.positions.shape[2]

    @property
    def d(self) -> int:
        return self.positions.shape[3]

    def replace(self, **changes) -> "TrajectoryDataset":
        from dataclasses import replace as _replace

        return _replace(self, **changes)

    def derivatives(self) -> np.ndarray:
        """The array playing the role of observed state derivatives."""
        if self.spec.order == ORDER_FIRST:
            if self.velocities is None:
                raise ValueError("dataset has no derivatives")
            return self.velocities
        if self.accelerations is None:
            raise ValueError("dataset has no derivatives")
        return self.accelerations


def validate_dataset(ds: TrajectoryDataset) -> list[str]:
    """Return every violated dataset invariant; empty list means valid.

    Validation is pure and never raises: problems are reported as strings.
    """
    report: list[str] = []
    pos = ds.positions
    if pos.ndim != 4:
        report.append("positions must have shape (M, L, N, d)")
        return report
    M, L, N, d = pos.shape

    times = ds.times
    if times.ndim != 1 or times.shape[0] != L:
        report.append(f"times length {times.shape} does not match L={L}")
    else:
        if L > 0 and times[0] != 0.0:
            report.append("times must start at 0")
        if np.any(np.diff(times) <= 0):
            report.append("times not strictly increasing")

    for name, arr in (("velocities", ds.velocities), ("accelerations", ds.accelerations)):
        if arr is not None and arr.shape != (M, L, N, d):
            report.append(f"{name} shape {arr.shape} inconsistent with (M, L, N, d)")

    spec = ds.spec
    report.extend(spec.violations())
    if spec.N != N:
        report.append(f"spec N={spec.N} does not match positions N={N}")
    if spec.d != d:
        report.append(f"spec d={spec.d} does not match positions d={d}")

    if spec.order == ORDER_FIRST and ds.velocities is None:
        report.append("missing derivatives for learning (first order needs velocities)")
    if spec.order == ORDER_SECOND and (ds.velocities is None or ds.accelerations is None):
        report.append(
            "missing derivatives for learning (second order needs velocities and accelerations)"
        )

    for name, arr in (
        ("positions", pos),
        ("velocities", ds.velocities),
        ("accelerations", ds.accelerations),
    ):
        if arr is not None and arr.size and not np.all(np.isfinite(arr)):
            report.append(f"non-finite values in {name}")

    if ds.derivative_source not in (DERIV_OBSERVED, DERIV_FINITE_DIFFERENCE):
        report.append(f"unknown derivative_source {ds.derivative_source!r}")
    if ds.noise_sigma < 0:
        report.append("noise_sigma must be nonnegative")
    return report
