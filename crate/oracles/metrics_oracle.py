"""Reference PSNR/SSIM for the frozen metric fixtures.

SSIM follows the crate's conventions: a uniform window centered on every
pixel and clipped at the borders, population (1/n) moments, C1=(k1*peak)^2,
C2=(k2*peak)^2, mean over all pixels. Moments come from scipy box filters
divided by the clipped window sizes, so no code is shared with the crate.

    python3 oracles/metrics_oracle.py crates/core/tests/data/ssim_noisy.json
"""

import json
import sys

import numpy as np
from scipy.ndimage import uniform_filter


def box_mean(x, counts, window):
    # uniform_filter with zero padding gives sum/window^2 over the clipped box
    return uniform_filter(x, size=window, mode="constant", cval=0.0) * window * window / counts


def ssim(a, b, window=7, k1=0.01, k2=0.03, peak=1.0):
    counts = box_mean(np.ones_like(a), np.ones_like(a), window)
    ma, mb = box_mean(a, counts, window), box_mean(b, counts, window)
    vaa = box_mean(a * a, counts, window) - ma * ma
    vbb = box_mean(b * b, counts, window) - mb * mb
    vab = box_mean(a * b, counts, window) - ma * mb
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    s = ((2 * ma * mb + c1) * (2 * vab + c2)) / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2))
    return float(s.mean())


def psnr(a, b, peak):
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else 10 * np.log10(peak * peak / mse)


def main():
    rng = np.random.default_rng(2024)
    a = rng.uniform(size=(16, 16))
    b = a + 0.01 * rng.standard_normal(size=(16, 16))
    out = {
        "a": a.tolist(),
        "b": b.tolist(),
        "peak": 1.0,
        "window": 7,
        "ssim": ssim(a, b),
        "psnr": psnr(a, b, 1.0),
        "mse": float(np.mean((a - b) ** 2)),
    }
    with open(sys.argv[1], "w") as fh:
        json.dump(out, fh, indent=1)
    print(out["ssim"], out["psnr"])


if __name__ == "__main__":
    main()
