"""Desk-scale continuous-world navigation testbed.

Components: a 2D semantic-grid world with panoramic ray sensing and
quantized motion actions, an obstacle-aware waypoint predictor, a
dual-level navigation agent (waypoint selection jointly trained with
low-level action-token generation), trajectory metrics, and a CLI
experiment driver.
"""

__version__ = "0.1.0"
