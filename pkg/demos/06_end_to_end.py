#!/usr/bin/env python3
"""The whole pipeline on a small corpus: synthesize, split, train a fusion
model, score the held-out ethnicities, and report.

Takes roughly a minute on a desktop CPU.

    python3 demos/06_end_to_end.py
"""

import tempfile
import time
from pathlib import Path

import numpy as np

from padkit.datasyn import SynthConfig, synth_dataset
from padkit.metrics import ScoredSet, evaluate_scored_set, report_lines
from padkit.netgraph import BackboneSpec, FusionVariant, build_psmm
from padkit.protocols import build_split
from padkit.trainer import ClipSampler, TrainConfig, evaluate_entries, train

t0 = time.time()
with tempfile.TemporaryDirectory() as td:
    root = Path(td)
    print("synthesizing a 20-subject-per-ethnicity corpus ...")
    _, entries = synth_dataset(SynthConfig(subjects_per_ethnicity=20, clip_len=12,
                                           frame_size=16, seed=7), root)
    split = build_split(entries, "1_1", include_3d=False)
    print(f"cross-ethnicity split 1_1: {len(split.train) // 3} train recordings, "
          f"{len(split.test) // 3} test recordings (unseen ethnicities)")

    spec = BackboneSpec(input_size=16, stem_channels=4, level_channels=(4, 8, 12, 16))
    model = build_psmm(spec, FusionVariant.PSMM, seed=0)
    cfg = TrainConfig(epochs=20, lr=3e-3, decay_epochs=(16,), batch_size=8,
                      seed=0, samples_per_video=3)
    sampler = ClipSampler(split.train, root, model.modalities, 16, cfg)

    print("training the three-modality fusion model ...")
    result = train(model, sampler, cfg)
    losses = [r["loss"] for r in result.log if "loss" in r]
    print(f"loss: {losses[0]:.3f} -> {losses[-1]:.3f} over {len(losses)} steps")

    rows = evaluate_entries(model, split.test, root, 16, cfg, "1_1")
    scored = ScoredSet(np.array([r[1] for r in rows]),
                       np.array([r[2] for r in rows]),
                       [r[3] for r in rows], "1_1", [r[0] for r in rows])
    for line in report_lines([evaluate_scored_set(scored)]):
        print(line)

print(f"\ntotal {time.time() - t0:.0f}s")
