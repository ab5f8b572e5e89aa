"""Cooperative two-instrument laparoscopy sandbox.

Deformable-body task simulation, independent PPO training for the two
instrument policies, skill-metric evaluation and a live session gateway
for human/policy hybrid teams.
"""

__version__ = "0.1.0"
