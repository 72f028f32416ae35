"""Write and read the IDX and CIFAR-10 binary formats, then normalize."""
import tempfile
from pathlib import Path

import numpy as np

from advrobust.data import (
    load_idx, normalize, parse_cifar_records, write_cifar_records, write_idx_images, write_idx_labels,
)

tmp = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)

digits = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
write_idx_images(tmp / "images-idx3-ubyte", digits)
write_idx_labels(tmp / "labels-idx1-ubyte", [7, 2, 1, 0, 4])
ds = load_idx(tmp / "images-idx3-ubyte", tmp / "labels-idx1-ubyte")
print("IDX header:", (tmp / "images-idx3-ubyte").read_bytes()[:16].hex(" ", 4))
print("loaded", ds.images.shape, "labels", ds.labels.tolist())
print("div255 range:", normalize(ds, "div255").images.min(), normalize(ds, "div255").images.max())

rgb = rng.integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
write_cifar_records(tmp / "batch.bin", rgb, [3, 5, 9])
images, labels = parse_cifar_records((tmp / "batch.bin").read_bytes())
print("CIFAR records:", (tmp / "batch.bin").stat().st_size, "bytes ->", images.shape, labels.tolist())
