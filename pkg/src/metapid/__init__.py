"""Meta-learned PID initialization with PPO-based online gain adaptation,
simulated on decoupled robot joint models."""

__version__ = "0.1.0"
