"""Catalog of model problems (homogeneous Dirichlet data on polygonal domains)."""
from __future__ import annotations

from dataclasses import dataclass
from importlib.resources import files
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import Polynomial

from .assembly import RhsField
from .mesh import MeshForest, load_mesh

MESH_DIR = files("crafem") / "meshes"


@dataclass
class ProblemSpec:
    name: str
    kind: str  # "poisson" | "stokes"
    mesh: str
    f: RhsField
    exact_solution: Optional[Callable] = None  # (x, y) -> (..., c)
    exact_gradient: Optional[Callable] = None  # (x, y) -> (..., c, 2)
    exact_pressure: Optional[Callable] = None
    exact_energy: Optional[float] = None  # energy of the exact solution, data term omitted
    error_quad_degree: int = 10
    kref: int = 2

    @property
    def ncomp(self) -> int:
        return 1 if self.kind == "poisson" else 2

    def forest(self) -> MeshForest:
        """A fresh forest over the initial mesh (forests are append-only)."""
        return load_mesh(MESH_DIR / self.mesh)


# -- smooth Poisson: u = sin(pi x) sin(pi y) ---------------------------------
def _sin_u(x, y):
    return (np.sin(np.pi * x) * np.sin(np.pi * y))[..., None]


def _sin_grad(x, y):
    gx = np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)
    gy = np.pi * np.sin(np.pi * x) * np.cos(np.pi * y)
    return np.stack([gx, gy], axis=-1)[..., None, :]


def _sin_f(x, y):
    return 2.0 * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y)


# -- manufactured Stokes: stream function g(x) g(y), g(s) = s^2 (1 - s)^2 ----
_G = Polynomial([0.0, 0.0, 1.0, -2.0, 1.0])
_G1, _G2, _G3 = _G.deriv(1), _G.deriv(2), _G.deriv(3)


def _stokes_u(x, y):
    return np.stack([_G(x) * _G1(y), -_G1(x) * _G(y)], axis=-1)


def _stokes_grad(x, y):
    row1 = np.stack([_G1(x) * _G1(y), _G(x) * _G2(y)], axis=-1)
    row2 = np.stack([-_G2(x) * _G(y), -_G1(x) * _G1(y)], axis=-1)
    return np.stack([row1, row2], axis=-2)


def _stokes_p(x, y):
    return x**3 + y**3 - 0.5


def _stokes_f(x, y):
    # f = -Laplace(u) - grad(p) for the sign convention (grad u, grad v) + (p, div v) = (f, v)
    lap1 = _G2(x) * _G1(y) + _G(x) * _G3(y)
    lap2 = -(_G3(x) * _G(y) + _G1(x) * _G2(y))
    return np.stack([-lap1 - 3.0 * x**2, -lap2 - 3.0 * y**2], axis=-1)


def _integral01(p: Polynomial) -> float:
    q = p.integ()
    return float(q(1.0) - q(0.0))


def _stokes_dirichlet() -> float:
    """int |grad u|^2 over the unit square, exact by separation of variables."""
    a = _integral01(_G1**2)
    return 2.0 * a * a + 2.0 * _integral01(_G**2) * _integral01(_G2**2)


def catalog() -> list[ProblemSpec]:
    return [
        ProblemSpec("square-poisson-f1", "poisson", "square.msh", RhsField.constant(1.0)),
        ProblemSpec(
            "square-poisson-smooth",
            "poisson",
            "square.msh",
            RhsField(_sin_f, 1, None),
            exact_solution=_sin_u,
            exact_gradient=_sin_grad,
            # -(1/2 int |grad u|^2 - int f u) with int |grad u|^2 = int f u = pi^2 / 2
            exact_energy=np.pi**2 / 4.0,
        ),
        ProblemSpec("lshape-poisson-f1", "poisson", "lshape.msh", RhsField.constant(1.0)),
        ProblemSpec("square-stokes-f10", "stokes", "square.msh", RhsField.constant([1.0, 0.0])),
        ProblemSpec(
            "square-stokes-manufactured",
            "stokes",
            "square.msh",
            RhsField(_stokes_f, 2, 5),
            exact_solution=_stokes_u,
            exact_gradient=_stokes_grad,
            exact_pressure=_stokes_p,
            # int f.u = int |grad u|^2 because div u = 0
            exact_energy=0.5 * _stokes_dirichlet(),
            error_quad_degree=14,
        ),
        ProblemSpec("lshape-stokes-f10", "stokes", "lshape.msh", RhsField.constant([1.0, 0.0])),
    ]


def get_problem(name: str) -> ProblemSpec:
    for p in catalog():
        if p.name == name:
            return p
    # accept the short alias without the data suffix, e.g. "lshape-poisson"
    matches = [p for p in catalog() if p.name.startswith(name + "-")]
    if len(matches) == 1:
        return matches[0]
    raise KeyError(f"unknown problem {name!r}; known: {', '.join(p.name for p in catalog())}")
