"""Multi-view line-drawing benchmark toolkit for spatial reasoning.

Synthesizes CSG solids, renders orthographic line drawings, builds
matching-task question banks, and trains/evaluates convolutional networks
on them, including contrastive pre-training over drawing pairs.
"""

__version__ = "0.1.0"
