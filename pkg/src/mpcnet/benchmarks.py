"""Built-in benchmark problems: the double integrator and a 4-state system."""

import numpy as np

from .mpc import LinearSystem, MpcSpec
from .polytope import Polytope


def double_integrator_2d() -> MpcSpec:
    sys = LinearSystem(np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([[0.0], [1.0]]))
    return MpcSpec(
        sys=sys,
        q_mat=np.eye(2),
        qn_mat=np.eye(2),
        r_mat=np.array([[10.0]]),
        horizon=3,
        x_set=Polytope.from_box([-5.0, -5.0], [5.0, 5.0]),
        u_set=Polytope.from_box([-2.0], [2.0]),
        name="double-integrator-2d",
    )


def system_4d() -> MpcSpec:
    a = np.array(
        [
            [0.7, -0.1, 0.0, 0.0],
            [0.2, -0.5, 0.1, 0.0],
            [0.0, 0.1, 0.1, 0.0],
            [0.5, 0.0, 0.5, 0.5],
        ]
    )
    b = np.array([[0.0, 0.1], [0.1, 1.0], [0.1, 0.0], [0.0, 0.0]])
    return MpcSpec(
        sys=LinearSystem(a, b),
        q_mat=np.eye(4),
        qn_mat=np.eye(4),
        r_mat=np.eye(2),
        horizon=10,
        x_set=Polytope.from_box([-6.0, -6.0, -1.0, -0.5], [6.0, 6.0, 1.0, 0.5]),
        u_set=Polytope.from_box([-5.0, -5.0], [5.0, 5.0]),
        name="system-4d",
    )


BUILTIN_SPECS = {
    "double-integrator-2d": double_integrator_2d,
    "system-4d": system_4d,
}


def builtin_spec(name: str) -> MpcSpec:
    try:
        return BUILTIN_SPECS[name]()
    except KeyError:
        raise KeyError(f"unknown built-in spec {name!r}; choose from {sorted(BUILTIN_SPECS)}") from None
