"""Simulator-based RL for in-session recommendation.

Train a multi-head feedback model on synthetic logged sessions, use it as a
simulated environment, and train a warm-started Double-DQN policy with
truncated-softmax exploration, prioritized replay, and n-step returns.
"""

__version__ = "0.1.0"
