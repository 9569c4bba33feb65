"""Offline goal-conditioned imitation with generative subgoal proposal and
value-based goal selection, plus behavioral-cloning and batch-RL baselines on
a 2D grid-graph navigation task."""

__version__ = "0.1.0"
