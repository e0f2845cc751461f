"""
Six frames: the target is visible in frames 0-3 and gone in frames 4-5.

frames 0-2: exact predictions reported present, confidences 0.9, 0.8, 0.7
frame 3:    exact prediction reported absent (a miss), confidence 0.2
frame 4:    prediction reported present while the target is gone (a false positive), 0.6
frame 5:    reported absent while the target is gone, 0.1

thresholds t <= 0.6:      reported {0, 1, 2, 4}, hits 3
    precision 3/4, recall 3/4, F 3/4; TPR 3/4, TNR 1/2
thresholds 0.6 < t <= 0.7: reported {0, 1, 2}, hits 3
    precision 1, recall 3/4, F 6/7; TPR 3/4, TNR 1, GM sqrt(3/4)
thresholds above 0.7 lose hits and never improve either score.
"""
import math

import pytest

VOTLT = (1.0, 0.75, 6 / 7)
OXUVA = (0.75, 1.0, math.sqrt(0.75))

VOTLT_PARAM = pytest.param("presence", "votlt", VOTLT, id="votlt-six-frames")
OXUVA_PARAM = pytest.param("presence", "oxuva", OXUVA, id="oxuva-six-frames")
