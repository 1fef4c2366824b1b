"""
A wake-word detector from scratch on the tone-melody toy task
==============================================================

Synthesise a small corpus, cut the negatives into positive-length chunks,
train the TDNN-F model with LF-MMI for a few epochs, and sweep the
positive-path cost to trace a DET curve.  About five minutes on one core.

    python demos/train_toy_wakeword.py [work_dir]

The trained model lands in ``work_dir/run/best.ckpt`` (default
``demo_work``); ``streaming_decode.py`` picks it up from there.
"""

import sys
import time
from pathlib import Path

import numpy as np

from wakeword.am import TdnnfModel
from wakeword.corpus import subsegment_negatives
from wakeword.evaluation import det_sweep, score_manifest, summary, write_det_csv
from wakeword.features import FeatureCache
from wakeword.graphs import PhoneInventory, build_topology
from wakeword.toy import synth_toy
from wakeword.trainer import TrainConfig, read_train_log, train

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_work")

# %%
# Positives are one fixed three-tone melody; negatives are random tone
# sequences (some sharing two of the three tones) or plain noise.
t0 = time.perf_counter()
tr = synth_toy(work / "train", 150, 450, seed=1)
dv = synth_toy(work / "dev", 16, 40, seed=2, prefix="dev")
ev = synth_toy(work / "eval", 40, 120, seed=3, prefix="eval")
print(f"{len(tr.positives)} positives, {tr.negative_hours() * 60:.1f} min of negatives")

# %%
# Negatives are long; chunks with positive-like durations (0.3 s overlap)
# stop the model from telling the classes apart by length alone.
tr = subsegment_negatives(tr, rng_seed=1)
dv = subsegment_negatives(dv, rng_seed=2)
lens = np.array([e.duration_s for e in tr.negatives])
print(f"{len(tr.negatives)} negative chunks, {lens.mean():.2f} +- {lens.std():.2f} s "
      f"(positives {np.mean([e.duration_s for e in tr.positives]):.2f} s)")

# %%
cache = FeatureCache()
best = train(TrainConfig(epochs=10), tr, dv, work / "run", cache=cache)
for epoch, tr_loss, dv_loss in read_train_log(work / "run" / "train.log"):
    print(f"epoch {epoch}: train {tr_loss:.5f}  dev {dv_loss:.5f}")

# %%
# Each positive-path cost is one operating point; lower cost fires more.
model = TdnnfModel.load(best)[0]
topo = build_topology(PhoneInventory())
points = det_sweep(score_manifest(model, ev, cache), topo, ev, np.arange(-2.0, 6.01, 1.0))
write_det_csv(points, work / "det.csv")
for p in points:
    print(f"cost {p.positive_cost:5.1f}: FRR {p.frr_percent:5.1f}%  FAH {p.fah_per_hour:7.2f}/h")
print(summary(points), end="")
print(f"done in {time.perf_counter() - t0:.0f} s")
