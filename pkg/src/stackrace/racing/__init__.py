"""Two-craft racing game on a repeating track."""

from .game import RaceGame, build_game, check_start
from .model import (
    Control,
    CraftState,
    RaceParams,
    collision_constraint,
    draft_limit,
    responsibility,
    stage_cost,
    step_dynamics,
)
from .track import Arc, TrackLayout, default_track, fit_arc, load_track, on_track

__all__ = [
    "Arc", "Control", "CraftState", "RaceGame", "RaceParams", "TrackLayout",
    "build_game", "check_start", "collision_constraint", "default_track", "draft_limit",
    "fit_arc", "load_track", "on_track", "responsibility", "stage_cost", "step_dynamics",
]
