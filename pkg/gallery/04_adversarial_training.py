"""Adversarial training: each minibatch is doubled with FGSM copies made at the current weights."""
from advrobust import AdvTrainConfig, TrainConfig, adversarial_fit, build_model, default_config, fit, synth_dataset
from advrobust.attack import AttackConfig, adversarial_accuracy
from advrobust.report import accuracy

data = synth_dataset(2000, 1, 16, 16, 4, 2.0, seed=0)
train, test = data.take(slice(0, 1500)), data.take(slice(1500, 2000))
base = TrainConfig(epochs=10, batch_size=32)
attack = AttackConfig(0.1, clip=None)

plain, _ = fit(build_model(default_config((1, 16, 16), 4)), train, base)

sizes = []
robust, history = adversarial_fit(plain.copy(), train, AdvTrainConfig(base, epsilon=0.1, clip=None),
                                  on_batch=lambda b: sizes.append(len(b.x_mix)))
print(f"{len(sizes)} minibatches of {sizes[0]} rows (B clean + B adversarial)")
for r in history.records:
    print(f"epoch {r.epoch}: clean loss {r.clean_loss:.3f}, adversarial loss {r.adv_loss:.3f}")

for name, model in (("plain", plain), ("adversarially trained", robust)):
    print(f"{name:>22}: clean {accuracy(model, test):.3f}, "
          f"under FGSM {adversarial_accuracy(model, test, attack):.3f}")
