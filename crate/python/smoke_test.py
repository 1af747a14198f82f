"""Builds the extension module and runs a tiny phantom through it.

    python3 python/smoke_test.py
"""

import importlib.util
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "sdaug-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = pathlib.Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target"))
    lib = target / "release" / ("sdaug_py.dll" if sys.platform == "win32" else
                                "libsdaug_py.dylib" if sys.platform == "darwin" else "libsdaug_py.so")
    return lib


def load(lib, tmp):
    dest = pathlib.Path(tmp) / ("sdaug_py.pyd" if sys.platform == "win32" else "sdaug_py.so")
    shutil.copy(lib, dest)
    spec = importlib.util.spec_from_file_location("sdaug_py", dest)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    lib = build()
    with tempfile.TemporaryDirectory() as tmp:
        sd = load(lib, tmp)
        data = pathlib.Path(tmp) / "phantom"
        n_train, n_eval = sd.generate_phantom(str(data), seed=1, subjects_per_vendor=1)
        assert n_train == 12 and n_eval > 0, (n_train, n_eval)

        rows = sd.histogram(str(data / "manifest.json"), bins=5)
        assert sum(r[3] for r in rows) == n_train

        run = pathlib.Path(tmp) / "run"
        val = sd.train_preset(str(data / "manifest.json"), str(run), "fs-sdnet-ra", seed=0, epochs=1)
        assert len(val) == 1 and 0.0 <= val[0] <= 1.0
        ckpt = str(run / "model.safetensors")

        dice = sd.evaluate_checkpoint(ckpt, str(data / "eval" / "manifest.json"))
        assert set(dice) == {"A", "B", "C", "D"}

        bank = str(pathlib.Path(tmp) / "bank.sdfb")
        n_anatomy, n_modality = sd.extract_bank(ckpt, str(data / "manifest.json"), bank)
        assert n_anatomy == n_modality == n_train
        labeled = sd.generate_fa(bank, ckpt, str(pathlib.Path(tmp) / "fa"), 8, seed=2)
        assert 0 <= labeled <= 8

        assert sd.run_cli(["bogus"]) == 1
    print("smoke test ok")


if __name__ == "__main__":
    main()
