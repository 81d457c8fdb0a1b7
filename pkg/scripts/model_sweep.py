"""Train D x beta variants identically and rank them by reconstruction SSIM and DTW."""

import dataclasses
import itertools
from pathlib import Path

from common import DESK, desk_corpus, run_training, with_overrides
from stimgen.trainer import evaluate_models, write_report

DIMS = (4, 8)
BETAS = (1.0, 250.0)

if __name__ == "__main__":
    base = with_overrides(DESK)
    corpus = desk_corpus()
    models = []
    for d, beta in itertools.product(DIMS, BETAS):
        name = f"D{d}_beta{beta:g}"
        config = dataclasses.replace(base, latent_dims=d, beta=beta)
        model, _ = run_training(config, corpus, Path("runs/sweep") / name, name)
        models.append((name, model))
    rows = evaluate_models(models, corpus.test)
    write_report(rows, Path("runs/sweep/report.csv"))
    for rank, r in enumerate(rows, 1):
        print(f"{rank}. {r.name:<14} ssim {r.ssim:.4f}  dtw {r.dtw:.3f}  disl {r.disl:.4g}")
