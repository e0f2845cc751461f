"""
Three frames, all showing a 100x100 target at the origin.

frame 0: exact prediction
    IoU 1, center error 0, normalized error 0
frame 1: prediction shifted right by 15.5 px
    IoU 8450 / 11550 = 0.7316, center error 15.5, normalized error 0.155
frame 2: prediction shifted right by 50.5 px
    IoU 4950 / 15050 = 0.3289, center error 50.5, normalized error 0.505

success thresholds 0, 0.02, ..., 1 (IoU > t):
    frame 0 passes 50 of 51, frame 1 passes 37 (t <= 0.72), frame 2 passes 17 (t <= 0.32)
    AUC = (50 + 37 + 17) / 153
precision at 20 px: frames 0 and 1
normalized precision thresholds 0, 0.01, ..., 0.5 (error < t):
    frame 0 passes 50 (t > 0), frame 1 passes 35 (t >= 0.16), frame 2 passes none
    NP = (50 + 35 + 0) / 153
"""
import pytest

AUC = 104 / 153
PRECISION = 2 / 3
NORMALIZED_PRECISION = 85 / 153

PARAM = pytest.param("ope", (AUC, PRECISION, NORMALIZED_PRECISION), id="ope-three-frames")
