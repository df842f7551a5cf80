"""Two-level reinforcement learning: shared agent policy plus a tax planner."""
