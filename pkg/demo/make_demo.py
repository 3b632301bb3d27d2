"""Regenerate the demo weight files listed in manifest.txt.

Run from the repository root:

    python3 demo/make_demo.py

The weights are random but structured: each layer gets a lognormal
per-column scale profile plus a few dominant columns, so the salient
selection and the column split both have something to find.
"""

from pathlib import Path

import numpy as np

from arbq.containers import write_tensor

HERE = Path(__file__).parent


def main():
    gen = np.random.default_rng(99)
    shapes = {"attn_proj": (32, 48), "mlp_up": (24, 64)}
    (HERE / "weights").mkdir(exist_ok=True)
    for name, (n, m) in shapes.items():
        col_scale = np.exp(0.4 * gen.standard_normal(m))
        col_scale[gen.integers(0, m, size=3)] *= 6.0
        w = gen.standard_normal((n, m)) * col_scale[None, :]
        write_tensor(HERE / "weights" / f"{name}.arbt", w.astype(np.float32))
    print("demo weights written to", HERE / "weights")


if __name__ == "__main__":
    main()
