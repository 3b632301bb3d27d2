"""Regenerate the golden container files.

Run from the repository root:

    python3 tests/golden/make_golden.py

The .arbq files freeze the byte layout produced by the current encoder.
Regenerate only on a deliberate format change, never to paper over a
failing layout test.
"""

import struct
from pathlib import Path

import numpy as np

from arbq import QuantConfig, quantize_layer
from arbq.containers import encode_quant, encode_tensor

HERE = Path(__file__).parent


def tensor_goldens():
    head = struct.pack("<4sHBB", b"ARBT", 1, 0, 2) + struct.pack("<2Q", 2, 2)
    (HERE / "identity2x2.arbt").write_bytes(head + np.eye(2, dtype="<f4").tobytes())
    batches = np.arange(24.0).reshape(2, 3, 4)
    (HERE / "batches.arbt").write_bytes(encode_tensor(batches))


def layer_goldens():
    specs = {
        "layer_rc": dict(method="arb-rc", order=2, cgb=True),
        "layer_arb": dict(method="arb", order=2, cgb=False),
    }
    for stem, kw in specs.items():
        gen = np.random.default_rng(21)
        w = gen.standard_normal((12, 24)) * (1.0 + gen.random(24))
        batches = [gen.standard_normal((8, 24)) for _ in range(6)]
        config = QuantConfig(
            iterations=6,
            block_k=16,
            salient_fractions=(0.125, 0.25),
            percentile_grid=(0.25, 0.5, 0.75),
            calib_batches=6,
            calib_rows=8,
            **kw,
        )
        layer, _ = quantize_layer(w, batches, config)
        (HERE / f"{stem}.arbq").write_bytes(encode_quant(layer))
        (HERE / f"{stem}_recon.arbt").write_bytes(
            encode_tensor(layer.reconstruct().astype(np.float32))
        )


if __name__ == "__main__":
    tensor_goldens()
    layer_goldens()
    print("golden files written to", HERE)
