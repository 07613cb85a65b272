"""Write smooth synthetic 1x16x16 float32 fields as a little-endian raw grid.

    python python/make_raw_grid.py data/raw-grid/fields.f32 256
"""

import sys
from pathlib import Path

import numpy as np


def main():
    out, count = Path(sys.argv[1]), int(sys.argv[2])
    rng = np.random.default_rng(7)
    y, x = np.mgrid[0:16, 0:16] / 16.0
    fields = np.empty((count, 1, 16, 16), dtype="<f4")
    for i in range(count):
        # Dipping layers with a random slope plus a little noise.
        k = rng.uniform(2, 6)
        slope = rng.uniform(-0.5, 0.5)
        fields[i, 0] = np.sin(2 * np.pi * k * (y + slope * x)) + 0.1 * rng.standard_normal((16, 16))
    out.parent.mkdir(parents=True, exist_ok=True)
    fields.tofile(out)


if __name__ == "__main__":
    main()
