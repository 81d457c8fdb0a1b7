"""Smoothness of MLERP against lerp on power-law toy decoders as the sampling ratio grows."""

import numpy as np

from stimgen.latent_nav import lerp_result, mlerp


class Power:
    def __init__(self, p):
        self.p = p

    def generate(self, z):
        return np.array([[float(np.asarray(z).reshape(-1)[0]) ** self.p]])


def value(model, z, x_ref):
    return float(model.generate(z)[0, 0])


if __name__ == "__main__":
    print("power  lerp    " + "  ".join(f"s={s:<5}" for s in (15, 30, 60, 120)))
    for p in (0.5, 2.0, 3.0):
        base = lerp_result([0.0], [1.0], 5, Power(p), value).smoothness
        scores = [mlerp([0.0], [1.0], 5, Power(p), value, s=s).smoothness
                  for s in (15, 30, 60, 120)]
        print(f"{p:5.1f}  {base:.4f}  " + "  ".join(f"{v:.5f}" for v in scores))
