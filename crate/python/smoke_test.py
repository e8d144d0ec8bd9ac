"""Smoke test for the Python extension.

Builds the extension with cargo unless GMSCENET_PY_LIB points at an existing
shared library, then imports it and exercises each binding once.

    python3 python/smoke_test.py
"""

import importlib.util
import math
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build_library() -> Path:
    env_path = os.environ.get("GMSCENET_PY_LIB")
    if env_path:
        return Path(env_path)
    subprocess.run(
        ["cargo", "build", "--release", "-p", "gmscenet-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target")) / "release"
    for name in ("libgmscenet_py.so", "libgmscenet_py.dylib", "gmscenet_py.dll"):
        if (target / name).exists():
            return target / name
    sys.exit(f"extension library not found in {target}")


def load(lib: Path, workdir: Path):
    suffix = ".pyd" if lib.suffix == ".dll" else ".so"
    dest = workdir / f"gmscenet_py{suffix}"
    shutil.copy(lib, dest)
    module_spec = importlib.util.spec_from_file_location("gmscenet_py", dest)
    module = importlib.util.module_from_spec(module_spec)
    module_spec.loader.exec_module(module)
    return module


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        g = load(build_library(), Path(tmp))

        image, kps = g.synthetic_sample(7, 64, 64)
        assert len(image) == 64 and len(image[0]) == 64
        assert all(0.0 <= v <= 1.0 for row in image for v in row)
        assert len(kps) == 4 and all(4.0 <= x <= 59.0 and 4.0 <= y <= 59.0 for x, y, _ in kps)
        assert g.synthetic_sample(7, 64, 64) == (image, kps), "sampling is not deterministic"

        plane = [[1.0, 5.0, 2.0], [4.0, 0.0, 3.0]]
        assert g.directionmax(plane, "right") == [[1.0, 5.0, 5.0], [4.0, 4.0, 4.0]]
        assert g.directionmax(plane, "top") == [[4.0, 5.0, 3.0], [4.0, 0.0, 3.0]]
        try:
            g.directionmax(plane, "up")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown direction accepted")

        gt = [(x, y, v) for x, y, v in kps]
        exact = [(x, y) for x, y, _ in kps]
        assert g.oks(exact, gt, 64, 64) == 1.0
        shifted = [(x + 3.0, y + 4.0) for x, y in exact]
        assert 0.0 < g.oks(shifted, gt, 64, 64) < 1.0
        assert g.pck([exact], [gt], 64, 64) == 1.0

        model = g.Model(seed=1)
        assert model.input_size == (64, 64)
        assert model.parts == ["snout", "left_ear", "right_ear", "tail_base"]
        pred = model.predict(image)
        assert len(pred) == 4 and all(math.isfinite(x) and math.isfinite(y) for x, y in pred)
        assert model.predict(image) == pred, "inference is not deterministic"
        assert len(model.predict(image, aggregate=False)) == 4

        worst = g.gradcheck(0)
        assert worst < 1e-4, worst

    print("python smoke test passed")


if __name__ == "__main__":
    main()
