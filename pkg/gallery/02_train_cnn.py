"""Train the default small-head CNN on synthetic bump images."""
import numpy as np

from advrobust import TrainConfig, build_model, default_config, fit, synth_dataset
from advrobust.report import accuracy

data = synth_dataset(1500, channels=1, height=16, width=16, num_classes=4, separation=2.0, seed=0)
train, test = data.take(slice(0, 1000)), data.take(slice(1000, 1500))
print(f"{len(train)} training and {len(test)} test images of shape {train.sample_shape}")

config = default_config(train.sample_shape, train.num_classes, seed=0)
model = build_model(config)
for where, shape in model.trace:
    print(f"  {where:<22} -> {shape}")

model, history = fit(model, train, TrainConfig(epochs=8, batch_size=32, patience=3),
                     on_epoch=lambda r: print(f"epoch {r.epoch}: loss {r.train_loss:.3f} "
                                              f"val_acc {r.val_acc:.3f}"))
print(f"best epoch {history.best_epoch}; test accuracy {accuracy(model, test):.3f}")
