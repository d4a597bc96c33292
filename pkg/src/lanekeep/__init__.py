"""Lane keeping from bird's-eye binary frames, a closed-loop simulator and a
parallel-parking planner."""

__version__ = "0.1.0"
