"""Smoke test for the spectra_py extension.

Build and install first, e.g. `maturin develop` from crates/py, then run
`python python/smoke_test.py`.
"""

import json
import math
import os
import tempfile

import spectra_py


def main():
    costs = json.loads(spectra_py.count())
    assert costs["total_params"] == 17005, costs["total_params"]
    assert costs["total_macs"] == costs["nn_macs"] + costs["stft_macs"]

    window = [[math.sin(0.3 * t * (c + 1)) for c in range(6)] for t in range(100)]
    shape, mags = spectra_py.stft(window, 16, 8)
    assert shape == [11, 9, 6] and len(mags) == 11 * 9 * 6

    model = spectra_py.Model("classes=5\nseed=3\n")
    probs = model.predict(window)
    assert len(probs) == 5 and abs(sum(probs) - 1.0) < 1e-10

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.spct")
        model.save(path)
        again = spectra_py.Model.load(path)
        assert not again.quantized
        assert again.config == model.config
        assert max(abs(a - b) for a, b in zip(again.predict(window), probs)) < 1e-5

    try:
        spectra_py.Model("colour=red")
    except spectra_py.SpectraError as e:
        assert "colour" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    print("smoke test passed:", repr(model))


if __name__ == "__main__":
    main()
