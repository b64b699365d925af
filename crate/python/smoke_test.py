"""Smoke test for the `dealias` extension module.

Build first with `cargo build -p dealias-python --release`; the module is
loaded from target/release unless DEALIAS_LIB points at the shared library.
"""

import importlib.machinery
import importlib.util
import math
import os
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module():
    try:
        import dealias  # installed wheel

        return dealias
    except ImportError:
        pass
    candidates = [os.environ.get("DEALIAS_LIB")] if os.environ.get("DEALIAS_LIB") else []
    for name in ("libdealias.so", "libdealias.dylib", "dealias.dll"):
        candidates.append(str(ROOT / "target" / "release" / name))
    for path in candidates:
        if os.path.exists(path):
            loader = importlib.machinery.ExtensionFileLoader("dealias", path)
            spec = importlib.util.spec_from_loader("dealias", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            sys.modules["dealias"] = module
            return module
    raise SystemExit("dealias extension not found; run cargo build -p dealias-python --release")


def check(cond, what):
    if not cond:
        raise AssertionError(what)
    print(f"ok  {what}")


def main():
    dl = load_module()

    m = dl.generate_mask("uniform1d", 64, 64, 3.0, acs=7, seed=0)
    check(abs(m.fraction - 1 / 3) <= 0.05, f"uniform mask fraction {m.fraction:.4f}")
    check(m.acs_intact and m.pattern == "uniform1d", "mask metadata")
    bits = m.bits()
    check(len(bits) == 64 and len(bits[0]) == 64, "mask bits shape")

    n = 8
    delta = [[complex(1.0 if (y, x) == (n // 2, n // 2) else 0.0) for x in range(n)] for y in range(n)]
    k = dl.fft2c(delta)
    check(all(abs(v - 1 / n) < 1e-12 for row in k for v in row), "FFT of centered delta is flat")
    back = dl.ifft2c(k)
    check(max(abs(a - b) for ra, rb in zip(back, delta) for a, b in zip(ra, rb)) < 1e-12, "FFT roundtrip")
    energy = sum(abs(v) ** 2 for row in k for v in row)
    check(abs(energy - 1.0) < 1e-12, "FFT is unitary")

    ref = [[math.sin(0.3 * x) * math.cos(0.2 * y) + 2 for x in range(16)] for y in range(16)]
    nmse, psnr, ssim = dl.image_metrics(ref, ref)
    check(nmse == 0.0 and ssim == 1.0, "metrics of identical images")

    with tempfile.TemporaryDirectory() as tmp:
        mask_path = os.path.join(tmp, "m.msk")
        data_path = os.path.join(tmp, "d.pmrd")
        m.save(mask_path)
        check(dl.Mask.load(mask_path).bits() == bits, "mask file roundtrip")
        check(dl.simulate([mask_path], data_path, 3, coils=4, seed=2) == 3, "simulate three records")
        truth = dl.rss_images(data_path, [mask_path], truth=True)
        zf = dl.rss_images(data_path, [mask_path])
        check(len(truth) == 3 and len(zf[0]) == 64, "RSS images")
        _, zf_psnr, _ = dl.image_metrics(zf[0], truth[0])
        check(10 < zf_psnr < 40, f"zero-filled PSNR {zf_psnr:.2f} dB")

    passed, report = dl.gradcheck()
    check(passed, "gradient check passes")
    broken, _ = dl.gradcheck(perturb_backward=True)
    check(not broken, "broken adjoint is detected")

    try:
        dl.generate_mask("spiral", 8, 8, 2.0)
    except ValueError:
        check(True, "unknown pattern raises ValueError")
    else:
        raise AssertionError("unknown pattern accepted")
    try:
        dl.Mask.load("/nonexistent/mask")
    except OSError:
        check(True, "missing file raises OSError")
    print("smoke test passed")


if __name__ == "__main__":
    main()
