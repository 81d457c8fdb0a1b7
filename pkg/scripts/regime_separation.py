"""Adam (desk settings) against plain SGD at lr 0.1 on the same corpus and budget."""

import dataclasses
from pathlib import Path

import numpy as np

from common import DESK, desk_corpus, run_training, with_overrides
from stimgen.trainer import NonFiniteLossError

if __name__ == "__main__":
    base = with_overrides(DESK)
    corpus = desk_corpus()
    plateaus = {}
    for label, config in (("adam", base),
                          ("sgd-0.1", dataclasses.replace(base, optimizer="sgd",
                                                          learning_rate=0.1))):
        try:
            _, history = run_training(config, corpus, Path("runs/regime") / label, label)
        except NonFiniteLossError as exc:
            print(f"{label}: diverged ({exc})")
            continue
        plateaus[label] = float(np.mean(history.column("cal_ssim")[-10:]))
    for label, value in plateaus.items():
        print(f"{label:>8} plateau (last 10 calibration points) {value:.4f}")
