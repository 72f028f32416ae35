"""Attack a trained model with FGSM, sweep epsilon and dump a clean/adversarial image pair."""
import tempfile
from pathlib import Path

import numpy as np

from advrobust import AttackConfig, TrainConfig, build_model, default_config, fit, synth_dataset
from advrobust.attack import epsilon_sweep, fgsm_batch
from advrobust.report import dump_image_pair

data = synth_dataset(1500, 1, 16, 16, 4, 2.0, seed=0)
train, test = data.take(slice(0, 1000)), data.take(slice(1000, 1500))
model, _ = fit(build_model(default_config((1, 16, 16), 4)), train, TrainConfig(epochs=8, batch_size=32))

# synthetic pixels are unbounded, so no clipping
for eps, acc in epsilon_sweep(model, test, [0.0, 0.05, 0.1, 0.2], clip=None):
    print(f"eps {eps:<5} accuracy {acc:.3f}")

batch = fgsm_batch(model, test, AttackConfig(0.1, clip=None))
print(f"{batch.flipped.sum()} of {len(batch)} predictions flipped at eps=0.1")
print("max |x_adv - x| =", float(np.abs(batch.x_adv - test.images).max()))

i = int(np.flatnonzero(batch.flipped)[0])
out = Path(tempfile.mkdtemp())
paths = dump_image_pair(test.images[i], batch.x_adv[i], int(batch.clean_pred[i]), int(batch.adv_pred[i]),
                        None, out / "sample", test.normalization, int(test.labels[i]))
print("wrote", *[p.name for p in paths], "to", out)
print(paths[2].read_text())
