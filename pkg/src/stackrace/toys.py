"""Small games with hand-solvable equilibria."""

import sympy as sy

from .problems import symbolic_game

x1, x2 = sy.symbols("x1 x2")


def nash_toy():
    # stationarity: x1 = x2, x2 = x1/2 + 1  ->  (2, 2)
    return symbolic_game([x1, x2], [1, 1], [(x1 - x2) ** 2, (x2 - x1 / 2 - 1) ** 2])


def decoupled_toy():
    return symbolic_game([x1, x2], [1, 1], [x1**2, x2**2])


def stackelberg_toy():
    # leader min (x1-1)^2 + x2^2 with x2 = x1  ->  x1 = 1/2, cost 1/2
    return symbolic_game([x1, x2], [1, 1], [(x1 - 1) ** 2 + x2**2, (x2 - x1) ** 2])


def bounded_follower_toy():
    # follower min x2^2 s.t. x2 >= 1  ->  x2 = 1, multiplier 2
    return symbolic_game([x1, x2], [1, 1], [(x1 - x2) ** 2, x2**2], ineqs=((), (x2 - 1,)))
