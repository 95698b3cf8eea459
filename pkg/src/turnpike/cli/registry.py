"""Built-in systems and their standard problems."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..errors import UnknownSystem
from ..manifolds import AffineStructure
from ..model import OCP1, OCP2, ControlAffineSystem, OcpProblem, linear_system


def byrnes_system() -> ControlAffineSystem:
    """``dx1/dt = -x1 + x1^2 x2``, ``dx2/dt = u`` (Byrnes-Isidori normal form)."""

    def f(x):
        return np.array([-x[0] + x[0] ** 2 * x[1], 0.0])

    def df(x):
        return np.array([[-1.0 + 2 * x[0] * x[1], x[0] ** 2], [0.0, 0.0]])

    def d2f(x):
        out = np.zeros((2, 2, 2))
        out[0] = [[2 * x[1], 2 * x[0]], [2 * x[0], 0.0]]
        return out

    B = np.array([[0.0], [1.0]])
    dB = np.zeros((1, 2, 2))
    d2B = np.zeros((1, 2, 2, 2))
    return ControlAffineSystem(
        n=2, m=1, f=f, g=lambda x: B, df=df,
        dg=lambda x: dB,
        name="byrnes", d2f=d2f, d2g=lambda x: d2B, constant_g=True,
    )


def scalar_cubic_system() -> ControlAffineSystem:
    """``dx/dt = -x + x^2 + u``; three Hamiltonian equilibria when C = 0."""
    G = np.ones((1, 1))
    dG = np.zeros((1, 1, 1))
    d2G = np.zeros((1, 1, 1, 1))
    d2F = np.full((1, 1, 1), 2.0)
    return ControlAffineSystem(
        n=1, m=1,
        f=lambda x: np.array([-x[0] + x[0] ** 2]),
        g=lambda x: G,
        df=lambda x: np.array([[-1.0 + 2 * x[0]]]),
        dg=lambda x: dG,
        name="scalar_cubic",
        d2f=lambda x: d2F,
        d2g=lambda x: d2G,
        constant_g=True,
    )


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    description: str
    make_system: Callable[..., ControlAffineSystem]
    defaults: dict = field(default_factory=dict)
    affine_structure: Optional[AffineStructure] = None

    def system(self, **params):
        return self.make_system(**params)

    def problem(self, kind=None, **overrides) -> OcpProblem:
        """Default problem of the given kind with field overrides."""
        kind = kind or self.defaults.get("kind", OCP1)
        base = dict(self.defaults.get(kind, {}))
        sys_params = {k: overrides.pop(k) for k in ("A", "B") if k in overrides}
        base.update({k: v for k, v in overrides.items() if v is not None})
        return OcpProblem(system=self.system(**sys_params), kind=kind, **base)


def _lqr(A=None, B=None):
    A = np.array([[0.0, 1.0], [0.0, 0.0]]) if A is None else A
    B = np.array([[0.0], [1.0]]) if B is None else B
    return linear_system(A, B, name="lqr")


_ENTRIES = {
    "byrnes": RegistryEntry(
        name="byrnes",
        description="dx1 = -x1 + x1^2 x2, dx2 = u; OCP1 with C = I or OCP2 with cost u^2 + |x|^2",
        make_system=byrnes_system,
        defaults={
            "kind": OCP1,
            OCP1: {"C": np.eye(2), "z": [1.0, -2.0], "x0": [1.0, 0.2], "horizons": (5, 10, 15, 20)},
            OCP2: {"C": np.eye(2), "x0": [12.0, 12.0], "xf": [0.0, 5.0], "horizons": (10,)},
        },
        affine_structure=AffineStructure(x1_idx=(0,), x2_idx=(1,)),
    ),
    "scalar_cubic": RegistryEntry(
        name="scalar_cubic",
        description="dx = -x + x^2 + u with cost u^2/2 (C = 0); equilibria (0,0), (1,0), (1/2,-1/4)",
        make_system=scalar_cubic_system,
        defaults={
            "kind": OCP2,
            OCP2: {"C": np.zeros((1, 1)), "x0": [1.5], "xf": [-1.0], "horizons": (20,)},
            OCP1: {"C": np.zeros((1, 1)), "z": [0.0], "x0": [0.5], "horizons": (10,)},
        },
    ),
    "lqr": RegistryEntry(
        name="lqr",
        description="linear plant dx = Ax + Bu (default double integrator), C = I",
        make_system=_lqr,
        defaults={
            "kind": OCP1,
            OCP1: {"C": np.eye(2), "z": [1.0, 0.0], "x0": [1.0, 1.0], "horizons": (10, 15, 20)},
            OCP2: {"C": np.eye(2), "x0": [1.0, 1.0], "xf": [0.0, 0.0], "horizons": (10, 15, 20)},
        },
    ),
}


def registry():
    return list(_ENTRIES.values())


def lookup(name) -> RegistryEntry:
    try:
        return _ENTRIES[name]
    except KeyError:
        raise UnknownSystem(
            f"unknown system {name!r}; available: {', '.join(sorted(_ENTRIES))}") from None
