"""
Streaming detection, chunk by chunk
====================================

Feed audio in 100 ms blocks through incremental MFCCs, the streaming
scorer and the online decoder, printing where the immortal token (the
point before which every surviving hypothesis agrees) has got to.

    python demos/streaming_decode.py [work_dir]

Needs a model from ``train_toy_wakeword.py``.
"""

import sys
from pathlib import Path

import numpy as np

from wakeword.am import StreamingScorer, TdnnfModel
from wakeword.audio import SAMPLE_RATE
from wakeword.decoder import FRAME_SECONDS, OnlineDecoder
from wakeword.features import MfccStream
from wakeword.graphs import PhoneInventory, build_decoding_graph, build_topology
from wakeword.toy import ToyConfig, synth_negative, synth_positive

work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_work")
model = TdnnfModel.load(work / "run" / "best.ckpt")[0]
topo = build_topology(PhoneInventory())
graph = build_decoding_graph(topo, positive_cost=1.0)

# %%
# A stream: two seconds of negative material, the melody, more negative.
rng = np.random.default_rng(11)
cfg = ToyConfig()
audio = np.concatenate([synth_negative(cfg, rng)[: 2 * SAMPLE_RATE], synth_positive(cfg, rng),
                        synth_negative(cfg, rng)[: 2 * SAMPLE_RATE]])
print(f"stream of {len(audio) / SAMPLE_RATE:.2f} s")

# %%
mfcc = MfccStream()
scorer = StreamingScorer(model)
dec = OnlineDecoder(graph, [topo.inventory.wake_phone(0)], chunk_frames=10, continuous=True)
block = SAMPLE_RATE // 10
pending = np.zeros((0, model.cfg.num_pdfs))
for start in range(0, len(audio) + block, block):
    chunk = audio[start:start + block]
    rows = scorer.accept(mfcc.accept(chunk)) if len(chunk) else scorer.flush()
    pending = np.concatenate([pending, rows])
    while len(pending) >= 10 or (not len(chunk) and len(pending)):
        det = dec.process_chunk(pending[:10])
        pending = pending[10:]
        settled = dec.state.immortal.frame * FRAME_SECONDS
        print(f"  audio {min(start + block, len(audio)) / SAMPLE_RATE:5.2f} s  "
              f"settled up to {settled:5.2f} s  active tokens {len(dec.state.active):3d}"
              + (f"  DETECTED at {det.time_s:.2f} s" if det else ""))
dec.finish()
print("detections:", [(topo.inventory.name(d.word), round(d.time_s, 2)) for d in dec.detections])
