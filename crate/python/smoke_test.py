"""Smoke test for the Python bindings.

Build the extension first:

    cargo build --release -p semvo-py --features extension-module

then run `python3 python/smoke_test.py`. The script copies the built library
next to a temporary `semvo.so` so no install step is needed.
"""
import importlib.util
import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module(tmp):
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libsemvo.so"
        if lib.exists():
            break
    else:
        sys.exit("libsemvo.so not found; build crates/py with --features extension-module")
    dst = tmp / "semvo.so"
    shutil.copy(lib, dst)
    spec = importlib.util.spec_from_file_location("semvo", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]


def main():
    tmp = pathlib.Path(tempfile.mkdtemp())
    semvo = load_module(tmp)

    # Alignment recovers a known rigid transform.
    r, t = rot_z(0.3), [5.0, -2.0, 1.0]
    world = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 7.0, 0.0], [3.0, 4.0, 2.0]]
    geo = [[sum(r[i][k] * p[k] for k in range(3)) + t[i] for i in range(3)] for p in world]
    rot, trans, rms = semvo.align(world, geo)
    assert rms < 1e-9, rms
    assert all(abs(a - b) < 1e-9 for a, b in zip(trans, t)), trans
    try:
        semvo.align(world, geo[:2])
    except ValueError:
        pass
    else:
        raise AssertionError("mismatched lengths accepted")

    # A short end-to-end run.
    cfg = tmp / "run.toml"
    cfg.write_text("seed = 3\n[world]\nroute_length_m = 300.0\n[drive]\nduration_s = 4.0\n")
    h = semvo.simulate(str(tmp / "ds"), config=str(cfg))
    assert h == semvo.config_hash(config=str(cfg)) and len(h) == 64
    n = semvo.build_library(str(tmp / "ds"), str(tmp / "lib.jsonl"), config=str(cfg))
    assert n > 0
    frames, elements, _ = semvo.localize(str(tmp / "ds"), str(tmp / "lib.jsonl"), str(tmp / "run"), config=str(cfg))
    assert frames == 120 and elements > 0, (frames, elements)
    table = semvo.evaluate(str(tmp / "ds"), str(tmp / "run"), str(tmp / "eval"), config=str(cfg), before_after=True)
    assert "After optimization" in table
    assert semvo.report(str(tmp / "eval")) == table

    try:
        semvo.simulate(str(tmp / "x"), config=str(tmp / "missing.toml"))
    except ValueError as e:
        assert "missing.toml" in str(e)
    else:
        raise AssertionError("missing config accepted")
    try:
        semvo.report(str(tmp / "nothing"))
    except OSError:
        pass
    else:
        raise AssertionError("missing run accepted")

    shutil.rmtree(tmp)
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
