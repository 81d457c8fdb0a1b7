"""Metric-guided interpolation from the crafted stop template to a recorded stop sequence.

    python scripts/interpolate.py runs/desk/checkpoint.stgn [out_dir]

Runs SSIM-guided MLERP with the linear (s=15) and sigmoid (s=30) schedules,
plus SSIM / roughness / composite runs at s=100, and exports each result.
The recording is the first test stop sequence whose reconstruction is rougher
than the decoded template, so roughness rises toward 1 along the path.
"""

import sys
import warnings
from pathlib import Path

from common import CORPUS, desk_corpus
from stimgen.latent_nav import export_interpolation, lerp_result, mlerp
from stimgen.metrics import make_metric, roughness, ssim
from stimgen.signal_io import stop_template
from stimgen.vaegan import load_checkpoint

RUNS = [("ssim", "linear", 15, None), ("ssim", "sigmoid", 30, None),
        ("ssim", "linear", 100, None), ("roughness", "linear", 100, "increasing"),
        ("composite", "linear", 100, None)]

if __name__ == "__main__":
    model = load_checkpoint(sys.argv[1])
    out = Path(sys.argv[2] if len(sys.argv) > 2 else "runs/interp")
    corpus = desk_corpus()
    z0 = model.encode_mean(stop_template(CORPUS["length"])[None])[0]
    x0 = model.generate(z0)
    for i in corpus.indices_with_label("stop", "test"):
        z1 = model.encode_mean(corpus.sequences[i][None])[0]
        x_ref = model.generate(z1)
        if roughness(x_ref, x0) < 1.0:
            break
    print(f"recording {corpus.names[i]}, roughness at the template end {roughness(x_ref, x0):.3f}")
    for metric, shape, s, direction in RUNS:
        f = make_metric(metric, kappa=0.5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = mlerp(z0, z1, 8, model, f, s=s, schedule=shape, direction=direction)
        base = lerp_result(z0, z1, 8, model, f, schedule=shape, direction=direction)
        export_interpolation(res, out / f"{metric}_{shape}_s{s:g}")
        curve = " ".join(f"{ssim(x_ref, x):.3f}" for x in res.samples)
        print(f"{metric:>9} {shape:>7} s={s:<4g} mlerp {res.smoothness:.4f}  "
              f"lerp {base.smoothness:.4f}  ssim along path: {curve}")
