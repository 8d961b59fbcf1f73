import numpy as np
import pytest

from maskspec.audio import CLIP_SAMPLES, SAMPLE_RATE


def central_difference(f, arrays, h=1e-5, entries=None):
    """Numerical gradient of scalar ``f()`` w.r.t. each array in ``arrays`` (perturbed in place).

    ``entries`` optionally maps array position -> list of flat indices to probe;
    unprobed entries are left as NaN.
    """
    grads = []
    for k, arr in enumerate(arrays):
        g = np.full(arr.shape, np.nan)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        idx = range(flat.size) if entries is None else entries[k]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor), initial=0.0))


def synthetic_spectrograms(count=8, frames=48, bins=128, seed=0):
    """Log-mel-like matrices: a sloped floor, a few harmonic ridges and onsets, fixed per seed."""
    rng = np.random.default_rng(seed)
    t = np.arange(frames)[:, None]
    f = np.arange(bins)[None, :]
    out = []
    for _ in range(count):
        base = -6.0 + 3.0 * np.exp(-f / 40.0)
        f0 = rng.uniform(6, 20)
        ridges = sum(np.exp(-0.5 * ((f - k * f0) / 1.5) ** 2) * (3.0 / k) for k in range(1, 6))
        envelope = 0.5 + 0.5 * np.sin(2 * np.pi * t / rng.uniform(12, 30) + rng.uniform(0, 2 * np.pi))
        out.append(base + ridges * envelope + 0.1 * rng.standard_normal((frames, bins)))
    return np.stack(out).astype(np.float32)


def tone(freq_hz, seconds=10.0, amp=0.5, sr=SAMPLE_RATE):
    t = np.arange(int(seconds * sr)) / sr
    return amp * np.sin(2 * np.pi * freq_hz * t)


def noise(seed, seconds=10.0, amp=0.3, sr=SAMPLE_RATE):
    return amp * np.random.default_rng(seed).uniform(-1, 1, int(seconds * sr))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tones_vs_noise():
    """16 train / 8 eval standardized clips: class 0 pure tones, class 1 white noise."""
    from maskspec.finetune import LabeledClip

    gen = np.random.default_rng(7)

    def make(count, offset):
        clips = []
        for i in range(count):
            if i % 2 == 0:
                x = tone(gen.uniform(300, 3000), amp=gen.uniform(0.2, 0.6))
                label = 0
            else:
                x = noise(offset + i, amp=gen.uniform(0.1, 0.4))
                label = 1
            clips.append(LabeledClip(x[:CLIP_SAMPLES], (label,)))
        return clips

    return make(16, 100), make(8, 500)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        r = results[num]
        status = "PASS" if r["passed"] else "FAIL"
        detail = ", ".join(f"{k}={v}" for k, v in r["detail"].items())
        terminalreporter.write_line(f"[{status}] {num:>2}. {r['title']} ({r['seconds']:.1f}s) {detail}")
