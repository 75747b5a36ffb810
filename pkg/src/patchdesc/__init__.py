"""Self-supervised local feature descriptor toolkit.

Trains a small convolutional descriptor network from video frames with
automatically generated positive pairs, matches key-points between frames
by nearest-neighbor search in the learned embedding, evaluates robustness
to viewpoint, scale, and blur, and stitches frames into panoramas via
RANSAC homography estimation.
"""

__version__ = "0.1.0"
