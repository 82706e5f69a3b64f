"""Train a small model on synthetic scenes, then decode poses for held-out scenes.

Prints the loss curve, AP on the held-out set, and for a few scenes the
ground-truth heads next to the top-scoring predicted poses.  Takes about two
minutes on one CPU core.

    python demos/train_and_predict.py [iterations]
"""
import sys

import numpy as np

from mixpose.train import TrainConfig, eval_scenes, evaluate, predictions, train

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
config = TrainConfig(iterations=iterations, num_scenes=1000, eval_scenes=100)
res = train(config)
losses = np.array([row[1] for row in res.log])
for start in range(0, len(losses), max(len(losses) // 6, 1)):
    print(f"iter {start:5d}  mean loss {losses[start:start + 100].mean():8.2f}")
print(f"trained in {res.seconds:.0f}s")

held_out = eval_scenes(config)
ev = evaluate(res.model, held_out)
print(f"held-out AP {ev.ap:.3f}  AP50 {ev.ap50:.3f}  AP75 {ev.ap75:.3f}")

preds = predictions(res.model, held_out[:3])
for scene, kept in zip(held_out[:3], preds):
    print(f"\nscene {scene.seed}: {len(scene.persons)} person(s), {len(kept)} kept prediction(s)")
    for p in scene.persons:
        print("  gt   head", np.round(p.keypoints.coords[0], 1))
    for p in kept[:len(scene.persons) + 1]:
        print(f"  pred head {np.round(p.keypoints.coords[0], 1)}  score {p.score:.3f}")
