import gzip
import struct

import numpy as np
import pytest

from nettrim.data import Dataset
from nettrim.experiments import mnist_dir


def write_idx(path, array, magic, compress=False):
    array = np.asarray(array, dtype=np.uint8)
    blob = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    if compress:
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)
    return path


def synthetic_digits(n, seed=0):
    """28x28 uint8 images: class c lights a 6x6 block at a class-specific spot, plus noise."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = rng.integers(0, 60, size=(n, 28, 28)).astype(np.uint8)
    for i, c in enumerate(labels):
        r, q = divmod(int(c), 5)
        images[i, 3 + 12 * r:9 + 12 * r, 1 + 5 * q:7 + 5 * q] = 255
    return images, labels.astype(np.uint8)


@pytest.fixture(scope="session")
def tiny_mnist_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("mnist")
    tr_x, tr_y = synthetic_digits(600, seed=1)
    te_x, te_y = synthetic_digits(200, seed=2)
    write_idx(root / "train-images-idx3-ubyte", tr_x, 0x803)
    write_idx(root / "train-labels-idx1-ubyte", tr_y, 0x801)
    write_idx(root / "t10k-images-idx3-ubyte.gz", te_x, 0x803, compress=True)
    write_idx(root / "t10k-labels-idx1-ubyte.gz", te_y, 0x801, compress=True)
    return root


@pytest.fixture(scope="session")
def tiny_data():
    tr_x, tr_y = synthetic_digits(600, seed=1)
    te_x, te_y = synthetic_digits(200, seed=2)
    as_ds = lambda x, y: Dataset((x.astype(np.float32) / 255)[:, None], y.astype(np.int64))
    return as_ds(tr_x, tr_y), as_ds(te_x, te_y)


@pytest.fixture(scope="session")
def mnist():
    """Full MNIST ``(train, test)``; skips when the IDX files are not available."""
    from nettrim.data import load_mnist
    from nettrim.errors import DataError
    try:
        return load_mnist(mnist_dir())
    except DataError as exc:
        pytest.skip(f"MNIST not available: {exc}")


_VERDICTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; call as ``verdict("C1 baseline", ok, detail)``."""
    def record(label, ok, detail=""):
        _VERDICTS.append((label, bool(ok), detail))
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in _VERDICTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {label}: {detail}")
