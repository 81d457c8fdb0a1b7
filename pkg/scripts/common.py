"""Desk-scale settings shared by the experiment scripts."""

import dataclasses
import sys
import time
from pathlib import Path

from stimgen.signal_io import synth_corpus
from stimgen.trainer import TrainConfig, build_model, train

CORPUS = dict(n=2048, n_test=256, length=64, rng_seed=0, noise=0.0)
MODEL = dict(widths=(32, 64, 128, 256), feature_layer=3, init_scheme="he")
DESK = TrainConfig(latent_dims=8, batch_size=32, learning_rate=2e-4, beta1=0.5, beta=0.001,
                   gamma=100.0, max_iterations=5000, calibration_interval=250, rng_seed=0)


def desk_corpus():
    return synth_corpus(CORPUS["n"], CORPUS["length"], CORPUS["rng_seed"],
                        n_test=CORPUS["n_test"], noise=CORPUS["noise"])


def run_training(config: TrainConfig, corpus, out: Path, label: str = ""):
    """Train one model, printing each calibration point; saves checkpoint and history."""
    from stimgen.vaegan import save_checkpoint

    out.mkdir(parents=True, exist_ok=True)
    model = build_model(config, CORPUS["length"], 2, **MODEL)
    start = time.perf_counter()

    def show(p):
        print(f"{label:>12} it {p.iteration:5d}  ssim {p.cal_ssim:.4f}  dtw {p.cal_dtw:7.3f}  "
              f"{time.perf_counter() - start:6.0f}s", flush=True)

    history = train(model, corpus, config, on_point=show)
    save_checkpoint(model, out / "checkpoint.stgn")
    history.to_csv(out / "history.csv")
    return model, history


def with_overrides(config: TrainConfig, argv=None) -> TrainConfig:
    """Apply ``key=value`` command-line overrides to a TrainConfig."""
    kw = {}
    for item in argv if argv is not None else sys.argv[1:]:
        key, value = item.split("=", 1)
        kw[key] = type(getattr(config, key))(value)
    return dataclasses.replace(config, **kw)
