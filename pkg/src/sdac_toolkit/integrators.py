from typing import Callable

import numpy as np

Derivative = Callable[[float, np.ndarray], np.ndarray]


def rk4_step(fn: Derivative, t: float, x: np.ndarray, h: float) -> np.ndarray:
    """
    One classic 4th order Runge-Kutta step of size `h`.

    Args:
        fn: Right hand side f(t, x)
        t: Time at the start of the step
        x: State at `t`
        h: Step size, negative for backward integration

    Returns:
        The state at `t + h`
    """
    k1 = fn(t, x)
    k2 = fn(t + h / 2, x + h * k1 / 2)
    k3 = fn(t + h / 2, x + h * k2 / 2)
    k4 = fn(t + h, x + h * k3)
    return np.asarray(x + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6)
