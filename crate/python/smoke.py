"""Smoke test for the `neto` extension module.

Build first:
    cargo build --release -p neto-py --features extension-module
then run:
    python3 python/smoke.py
The script copies the built library next to itself as neto.so if needed.
"""

import json
import math
import os
import shutil
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)


def locate():
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libneto.so")
        if os.path.exists(lib):
            return lib
    sys.exit("libneto.so not found; build the neto-py crate first")


def main():
    target = os.path.join(HERE, "neto.so")
    shutil.copyfile(locate(), target)
    sys.path.insert(0, HERE)
    import neto

    sphere = neto.Shape("sphere")
    assert abs(sphere.values([[0.0, 0.0, 0.0]])[0] + 0.4) < 1e-12

    t = neto.refract([0.0, 0.0, -1.0], [0.0, 0.0, 1.0], 1.0003 / 1.4723)
    assert t is not None and abs(t[2] + 1.0) < 1e-12
    s = math.sin(math.radians(60))
    assert neto.refract([s, 0.0, -math.cos(math.radians(60))], [0.0, 0.0, 1.0], 1.4723 / 1.0003) is None

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        ds = neto.Dataset.generate(sphere, data, views=2, res=16, seed=1)
        counts = ds.counts()
        assert len(ds) == 2 * 16 * 16 and counts["MultiBounce"] == 0, counts

        out = os.path.join(tmp, "run")
        ckpt = neto.train_field(data, out, {
            "iterations": "3", "batch_size": "8", "net_width": "16", "net_depth": "2",
            "prefit_steps": "50", "n_coarse": "16", "n_importance_rounds": "1",
        })
        field = neto.Field.load(str(ckpt))
        verts, tris = field.mesh(32)
        assert len(tris) > 0

        metrics = json.loads(neto.evaluate(os.path.join(data, "gt.obj"), os.path.join(data, "gt.obj"), samples=2000))
        assert metrics["f_score"] == 1.0
    print("python smoke: ok")


if __name__ == "__main__":
    main()
