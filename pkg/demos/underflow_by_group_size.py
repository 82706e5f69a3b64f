"""Why grouping keypoints keeps the mixture likelihood representable.

A short training run sharpens the predicted scales quickly, and joint densities
over many keypoints then fall below the smallest representable float.  For a
few parameter snapshots the script prints the fraction of (person, component,
group) joints that round to zero in single precision, per group size, next to
the log-space group NLL, which stays finite throughout.

    python demos/underflow_by_group_size.py
"""
import numpy as np

from mixpose.rkg import append_auxiliary_center, group_nll_loss, sample_partition
from mixpose.train import TrainConfig, eval_scenes, images_of, train, underflow_by_kg

config = TrainConfig(iterations=300, num_scenes=200, eval_scenes=20)
scenes = eval_scenes(config)
gts = [[append_auxiliary_center(p) for p in s.persons] for s in scenes]
res = train(config, snapshots=(0, 50, 300))

kgs = (1, 2, 3, 6)
print("iter  " + "  ".join(f"K_g={kg} ratio / NLL" for kg in kgs))
for it, params in sorted(res.snapshots.items()):
    for k, v in params.items():
        res.model.params[k].value[...] = v
    fields = res.model.fields(images_of(scenes))
    rows = underflow_by_kg(res.model, scenes, kgs, precision="single", fields=fields)
    cells = []
    for kg, _, _, ratio in rows:
        part = sample_partition(config.K_total, kg, np.random.default_rng(0))
        nll = np.mean([group_nll_loss(f, g, part).loss for f, g in zip(fields, gts)])
        cells.append(f"{ratio:6.3f} / {nll:7.1f}")
    print(f"{it:4d}  " + "  ".join(cells))
