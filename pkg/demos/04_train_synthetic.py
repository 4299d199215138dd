"""Train the micro model on the synthetic glyph dataset, end to end, and
leave a metrics log plus checkpoints behind.

Run:  python demos/04_train_synthetic.py          (about 2 minutes)
      python demos/04_train_synthetic.py --quick  (seconds, fewer epochs)
"""

import sys
import time

from lnl.data import synth_shapes
from lnl.model import CONFIGS, build_model
from lnl.train import TrainConfig, evaluate, train

quick = "--quick" in sys.argv
epochs = 3 if quick else 12
n_train = 600 if quick else 2000

data = {
    "train": synth_shapes(n_train, classes=4, size=32, seed=0),
    "val": synth_shapes(max(n_train // 4, 4), classes=4, size=32, seed=1),
}
cfg = TrainConfig(dataset="synth", epochs=epochs, batch_size=32,
                  learning_rate=0.2, seed=0)
model = build_model(CONFIGS["micro"](), seed=cfg.seed)
print(f"{model.param_count():,} parameters, {len(data['train'])} training glyphs")

t0 = time.perf_counter()
records = train(model, data, cfg, out_dir="runs/synth-demo", log=print)
print(f"trained in {time.perf_counter() - t0:.0f}s; "
      f"artifacts in runs/synth-demo (metrics.csv, best.ckpt)")

top1, top5 = evaluate(model, data["val"])
print(f"final val: top1 {top1:.3f}  top5 {top5:.3f}")
