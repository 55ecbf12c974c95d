"""KV beam-envelope simulator for a quadrupole beamline.

State and units
---------------
The transverse envelope state is (X, Y, X', Y'):

  X, Y    [m]    horizontal / vertical envelope radii (strictly positive)
  X', Y'  [rad]  envelope slopes dX/dz, dY/dz

and evolves along the beamline coordinate z in [0, z_max] under

  X'' = -kappa(z) X + eps_x^2 / X^3 + K / (X + Y)
  Y'' = +kappa(z) Y + eps_y^2 / Y^3 + K / (X + Y)

with kappa(z) = G(z; u) / rigidity. G is the piecewise-constant focusing
profile built from the magnet strengths u (T/m) and the signed indicator
of each magnet gap; drifts have G = 0.

Integration is classic fixed-step RK4 on a uniform grid of `grid_points`
intervals (grid_points + 1 nodes). kappa is held constant over each step
at the step's midpoint value, which effectively snaps magnet boundaries
to grid nodes and keeps the integrator fourth-order inside every step.

Envelope collapse (X or Y at or below ``ENVELOPE_FLOOR``) and non-finite
states are not faults: `integrate` reports them through the trajectory's
``feasible`` flag with the partial data discarded, so callers can apply
a failure penalty.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

# Collapse floor [m]: declares failure before eps^2/X^3 blows up in float64.
ENVELOPE_FLOOR = 1e-6


class LatticeError(ValueError):
    """Invalid lattice geometry or constants."""


class InfeasibleTrajectoryError(ValueError):
    """Operation requires a feasible trajectory."""


class EnvelopeCollapseError(ValueError):
    """Envelope at or below the collapse floor inside the RK4 right-hand side."""


@dataclass(frozen=True)
class MagnetSpec:
    """One quadrupole: longitudinal interval, polarity and nominal strength."""

    index: int                 # 1-based beamline position
    z_start: float             # [m]
    length: float              # [m]
    polarity: int              # +1 focuses X, -1 focuses Y
    nominal_strength: float    # [T/m]

    @property
    def z_end(self) -> float:
        return self.z_start + self.length


@dataclass(frozen=True)
class Lattice:
    """Magnet geometry plus the physics constants of the beamline.

    grid_points counts RK4 intervals; the grid has grid_points + 1 nodes.
    Observations use the first grid_points nodes (see `observe`).
    """

    magnets: tuple[MagnetSpec, ...]
    z_max: float = 11.70
    grid_points: int = 4000
    emittance_x: float = 8.0e-6      # [m rad]
    emittance_y: float = 8.0e-6      # [m rad]
    perveance: float = 2.0e-5        # dimensionless
    rigidity: float = 0.125          # [T m]
    pipe_radius: float = 0.0254      # [m]

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.z_max <= 0.0:
            raise LatticeError("z_max must be positive")
        if self.grid_points < 1:
            raise LatticeError("grid_points must be at least 1")
        if self.emittance_x <= 0.0 or self.emittance_y <= 0.0:
            raise LatticeError("emittances must be positive")
        if self.rigidity <= 0.0:
            raise LatticeError("rigidity must be positive")
        if self.perveance < 0.0:
            raise LatticeError("perveance must be nonnegative")
        prev: MagnetSpec | None = None
        for m in self.magnets:
            if m.length <= 0.0:
                raise LatticeError(f"magnet {m.index}: length must be positive")
            if m.polarity not in (+1, -1):
                raise LatticeError(f"magnet {m.index}: polarity must be +1 or -1")
            if m.z_start < 0.0 or m.z_end > self.z_max:
                raise LatticeError(
                    f"magnet {m.index}: interval [{m.z_start}, {m.z_end}] "
                    f"outside [0, {self.z_max}]"
                )
            if prev is not None:
                if m.index <= prev.index:
                    raise LatticeError(
                        f"magnet indices not increasing at {prev.index} -> {m.index}"
                    )
                if m.z_start <= prev.z_end:
                    raise LatticeError(
                        f"magnets {prev.index} and {m.index} overlap: "
                        f"{prev.z_end:.6f} >= {m.z_start:.6f}"
                    )
            prev = m

    @property
    def n_magnets(self) -> int:
        return len(self.magnets)

    @property
    def dz(self) -> float:
        return self.z_max / self.grid_points

    def nominal_strengths(self) -> np.ndarray:
        return np.array([m.nominal_strength for m in self.magnets])

    def polarities(self) -> np.ndarray:
        return np.array([float(m.polarity) for m in self.magnets])

    def with_magnet_shift(self, index: int, delta_z: float) -> "Lattice":
        """New lattice with magnet `index` (1-based) moved by delta_z [m]."""
        mags = tuple(
            dataclasses.replace(m, z_start=m.z_start + delta_z) if m.index == index else m
            for m in self.magnets
        )
        return dataclasses.replace(self, magnets=mags)

    def with_grid_points(self, grid_points: int) -> "Lattice":
        return dataclasses.replace(self, grid_points=grid_points)


@dataclass(frozen=True)
class BeamInit:
    """Incoming beam at z = 0."""

    X0: float          # [m]
    Y0: float          # [m]
    Xp0: float = 0.0   # [rad]
    Yp0: float = 0.0   # [rad]

    def __post_init__(self) -> None:
        if not (self.X0 > 0.0 and self.Y0 > 0.0):
            raise ValueError("initial envelopes must be positive")


@dataclass
class EnvelopeTrajectory:
    """Envelope solution on the z grid; arrays have grid_points + 1 samples.

    When ``feasible`` is False the state arrays are all-NaN (partial data
    discarded) and only ``z`` remains meaningful.
    """

    z: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Xp: np.ndarray
    Yp: np.ndarray
    feasible: bool

    @property
    def n_obs(self) -> int:
        """Samples per observation channel (grid nodes minus the endpoint)."""
        return len(self.z) - 1


def focusing_profile(lattice: Lattice, u: np.ndarray, z: float) -> float:
    """Signed focusing gradient G(z; u) [T/m]; zero inside drifts.

    u is one strength per magnet, in lattice order. The magnet gap is the
    closed interval [z_start, z_end].
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (lattice.n_magnets,):
        raise ValueError(f"u must have shape ({lattice.n_magnets},), got {u.shape}")
    for i, m in enumerate(lattice.magnets):
        if m.z_start <= z <= m.z_end:
            return float(u[i]) * float(m.polarity)
    return 0.0


def focusing_profile_samples(lattice: Lattice, u: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Vectorized `focusing_profile` over an ascending array of z samples."""
    u = np.asarray(u, dtype=float)
    if u.shape != (lattice.n_magnets,):
        raise ValueError(f"u must have shape ({lattice.n_magnets},), got {u.shape}")
    if lattice.n_magnets == 0:
        return np.zeros_like(np.asarray(z, dtype=float))
    starts = np.array([m.z_start for m in lattice.magnets])
    ends = np.array([m.z_end for m in lattice.magnets])
    signed = u * lattice.polarities()
    idx = np.searchsorted(starts, z, side="right") - 1
    inside = idx >= 0
    safe = np.where(inside, idx, 0)
    inside &= z <= ends[safe]
    return np.where(inside, signed[safe], 0.0)


def kv_rhs(
    state: tuple[float, float, float, float], kappa: float, lattice: Lattice
) -> tuple[float, float, float, float]:
    """Right-hand side (X', Y', X'', Y'') of the envelope ODE at one point."""
    x, y, xp, yp = state
    if x <= ENVELOPE_FLOOR or y <= ENVELOPE_FLOOR:
        raise EnvelopeCollapseError(f"envelope at or below floor: X={x}, Y={y}")
    sc = lattice.perveance / (x + y)
    xpp = -kappa * x + lattice.emittance_x**2 / (x * x * x) + sc
    ypp = kappa * y + lattice.emittance_y**2 / (y * y * y) + sc
    return (xp, yp, xpp, ypp)


def integrate(lattice: Lattice, u: np.ndarray, init: BeamInit) -> EnvelopeTrajectory:
    """RK4 envelope integration from z = 0 to z_max at fixed step dz.

    Infeasibility (collapse below the floor, or non-finite state) is a
    value, not a fault: the returned trajectory has feasible=False and
    NaN state arrays.
    """
    n = lattice.grid_points
    dz = lattice.z_max / n
    z = np.linspace(0.0, lattice.z_max, n + 1)

    mid = (np.arange(n) + 0.5) * dz
    kap = focusing_profile_samples(lattice, u, mid) / lattice.rigidity

    ex2 = lattice.emittance_x**2
    ey2 = lattice.emittance_y**2
    K = lattice.perveance
    floor = ENVELOPE_FLOOR

    X = np.empty(n + 1)
    Y = np.empty(n + 1)
    Xp = np.empty(n + 1)
    Yp = np.empty(n + 1)

    x, y, xp, yp = init.X0, init.Y0, init.Xp0, init.Yp0
    X[0], Y[0], Xp[0], Yp[0] = x, y, xp, yp

    h = dz
    h2 = 0.5 * dz
    h6 = dz / 6.0
    klist = kap.tolist()

    feasible = True
    for k in range(n):
        c = klist[k]

        if x <= floor or y <= floor:
            feasible = False
            break
        s = K / (x + y)
        ax1 = -c * x + ex2 / (x * x * x) + s
        ay1 = c * y + ey2 / (y * y * y) + s

        x2 = x + h2 * xp
        y2 = y + h2 * yp
        xp2 = xp + h2 * ax1
        yp2 = yp + h2 * ay1
        if x2 <= floor or y2 <= floor:
            feasible = False
            break
        s = K / (x2 + y2)
        ax2 = -c * x2 + ex2 / (x2 * x2 * x2) + s
        ay2 = c * y2 + ey2 / (y2 * y2 * y2) + s

        x3 = x + h2 * xp2
        y3 = y + h2 * yp2
        xp3 = xp + h2 * ax2
        yp3 = yp + h2 * ay2
        if x3 <= floor or y3 <= floor:
            feasible = False
            break
        s = K / (x3 + y3)
        ax3 = -c * x3 + ex2 / (x3 * x3 * x3) + s
        ay3 = c * y3 + ey2 / (y3 * y3 * y3) + s

        x4 = x + h * xp3
        y4 = y + h * yp3
        xp4 = xp + h * ax3
        yp4 = yp + h * ay3
        if x4 <= floor or y4 <= floor:
            feasible = False
            break
        s = K / (x4 + y4)
        ax4 = -c * x4 + ex2 / (x4 * x4 * x4) + s
        ay4 = c * y4 + ey2 / (y4 * y4 * y4) + s

        x = x + h6 * (xp + 2.0 * (xp2 + xp3) + xp4)
        y = y + h6 * (yp + 2.0 * (yp2 + yp3) + yp4)
        xp = xp + h6 * (ax1 + 2.0 * (ax2 + ax3) + ax4)
        yp = yp + h6 * (ay1 + 2.0 * (ay2 + ay3) + ay4)

        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(xp) and math.isfinite(yp)):
            feasible = False
            break
        if x <= floor or y <= floor:
            feasible = False
            break
        X[k + 1], Y[k + 1], Xp[k + 1], Yp[k + 1] = x, y, xp, yp

    if not feasible:
        nan = np.full(n + 1, np.nan)
        return EnvelopeTrajectory(z=z, X=nan, Y=nan.copy(), Xp=nan.copy(), Yp=nan.copy(), feasible=False)
    return EnvelopeTrajectory(z=z, X=X, Y=Y, Xp=Xp, Yp=Yp, feasible=True)


def observe(traj: EnvelopeTrajectory) -> np.ndarray:
    """Flatten [X, Y, X', Y'] on the first n grid nodes into one vector.

    Ordering contract: channel-major, length 4n. De-interleave with
    ``obs.reshape(4, n)``.
    """
    if not traj.feasible:
        raise InfeasibleTrajectoryError("cannot observe an infeasible trajectory")
    n = traj.n_obs
    return np.concatenate([traj.X[:n], traj.Y[:n], traj.Xp[:n], traj.Yp[:n]])


def save_trajectory_csv(traj: EnvelopeTrajectory, path) -> None:
    """Write `z,X,Y,Xp,Yp` rows, float64 at 17 significant digits."""
    with open(path, "w") as fh:
        fh.write("z,X,Y,Xp,Yp\n")
        for i in range(len(traj.z)):
            fh.write(
                f"{traj.z[i]:.17g},{traj.X[i]:.17g},{traj.Y[i]:.17g},"
                f"{traj.Xp[i]:.17g},{traj.Yp[i]:.17g}\n"
            )
