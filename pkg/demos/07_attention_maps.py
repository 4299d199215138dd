"""Export class-token attention heatmaps for clean and attacked images.

Run:  python demos/07_attention_maps.py
Writes attention_clean.{csv,pgm} and attention_adversarial.{csv,pgm}.
"""

import numpy as np

from lnl.attacks import AttackSpec, fgsm
from lnl.data import synth_shapes
from lnl.model import CONFIGS, build_model
from lnl.train import (
    TrainConfig,
    export_attention,
    train,
    write_heatmap_csv,
    write_heatmap_pgm,
)

data = {
    "train": synth_shapes(800, classes=4, size=32, seed=0),
    "val": synth_shapes(200, classes=4, size=32, seed=1),
}
model = build_model(CONFIGS["micro"](), seed=0)
train(model, data, TrainConfig(epochs=5, batch_size=32, learning_rate=0.2, seed=0))

val = data["val"]
index = 0
image = val.images_float()[index]
last = model.cfg.depth - 1

heatmap, label, conf = export_attention(model, image, layer=last)
print(f"clean: true {val.labels[index]}, predicted {label} ({conf:.1%})")
print(np.round(heatmap, 2))
write_heatmap_csv("attention_clean.csv", heatmap)
write_heatmap_pgm("attention_clean.pgm", heatmap)

adv = fgsm(model, image[None], val.labels[index:index + 1],
           AttackSpec("fgsm", 4 / 255))
heatmap_adv, label_adv, conf_adv = export_attention(model, adv.data[0], layer=last)
print(f"adversarial: predicted {label_adv} ({conf_adv:.1%})")
print(np.round(heatmap_adv, 2))
write_heatmap_csv("attention_adversarial.csv", heatmap_adv)
write_heatmap_pgm("attention_adversarial.pgm", heatmap_adv)
print("wrote attention_clean.{csv,pgm} and attention_adversarial.{csv,pgm}")
