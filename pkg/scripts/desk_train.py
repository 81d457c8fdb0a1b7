"""Train the desk-scale model and report its calibration trace.

    python scripts/desk_train.py [key=value ...]

Writes runs/desk/{checkpoint.stgn,history.csv}.
"""

from pathlib import Path

import numpy as np

from common import DESK, desk_corpus, run_training, with_overrides

if __name__ == "__main__":
    config = with_overrides(DESK)
    _, history = run_training(config, desk_corpus(), Path("runs/desk"), "desk")
    ssim = history.column("cal_ssim")
    print(f"best calibration SSIM {ssim.max():.4f}; mean of last 10 points {np.mean(ssim[-10:]):.4f}")
