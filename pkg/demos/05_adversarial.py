"""White-box attacks against a quickly trained model: perturbation budgets,
the fgsm/pgd relationship, and a robustness curve over epsilon.

Run:  python demos/05_adversarial.py
"""

import numpy as np

from lnl.attacks import AttackSpec, fgsm, pgd, robust_accuracy
from lnl.data import synth_shapes
from lnl.model import CONFIGS, build_model
from lnl.train import TrainConfig, train

data = {
    "train": synth_shapes(800, classes=4, size=32, seed=0),
    "val": synth_shapes(200, classes=4, size=32, seed=1),
}
model = build_model(CONFIGS["micro"](), seed=0)
train(model, data, TrainConfig(epochs=5, batch_size=32, learning_rate=0.2, seed=0))

val = data["val"]
x, y = val.images_float()[:64], val.labels[:64]

# Every adversarial image stays inside the epsilon ball and [0, 1].
eps = 4 / 255
adv = fgsm(model, x, y, AttackSpec("fgsm", eps))
print(f"fgsm: max |dx| = {np.abs(adv.data - x).max():.6f} (eps = {eps:.6f}), "
      f"range [{adv.data.min():.3f}, {adv.data.max():.3f}]")

# One projected step with alpha >= eps IS fgsm, bit for bit.
one_step = pgd(model, x, y, AttackSpec("pgd", eps, alpha=eps, steps=1))
print("pgd(1 step, alpha=eps) == fgsm:", (one_step.data == adv.data).all())

# Multi-step pgd drives the loss at least as hard.
five = pgd(model, x, y, AttackSpec("pgd", eps, alpha=eps / 2, steps=5))
print("pgd(5 steps) changed pixels    :", (five.data != x).mean().round(3))

# Robustness falls as the budget grows; clean accuracy is the eps=0 row.
print(f"\n{'eps':>8s} {'clean':>7s} {'fgsm':>7s} {'pgd-5':>7s}")
for e in (0.0, 1 / 255, 2 / 255, 4 / 255, 8 / 255):
    if e == 0.0:
        rep = robust_accuracy(model, x, y, AttackSpec("fgsm", 0.0))
        print(f"{e:8.4f} {rep.clean_accuracy:7.3f} {'-':>7s} {'-':>7s}")
        continue
    rf = robust_accuracy(model, x, y, AttackSpec("fgsm", e))
    rp = robust_accuracy(model, x, y, AttackSpec("pgd", e, alpha=e / 2, steps=5))
    print(f"{e:8.4f} {rf.clean_accuracy:7.3f} {rf.robust_accuracy:7.3f} "
          f"{rp.robust_accuracy:7.3f}")
